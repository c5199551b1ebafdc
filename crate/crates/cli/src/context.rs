//! Plain-text dialogue contexts for `ntrd generate`.
//!
//! Contexts are separated by blank lines. Each line is one turn, optionally
//! prefixed with `seeker:`/`s:` or `recommender:`/`r:`; unprefixed lines
//! alternate roles starting from the seeker.

use ntrd_core::corpus::Role;

pub fn parse_contexts(text: &str) -> Vec<Vec<(Role, String)>> {
    let mut out = Vec::new();
    let mut current: Vec<(Role, String)> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            continue;
        }
        let next = match current.last() {
            Some((Role::Seeker, _)) => Role::Recommender,
            _ => Role::Seeker,
        };
        let (role, body) = split_role(line).unwrap_or((next, line));
        let body = body.trim();
        if !body.is_empty() {
            current.push((role, body.to_string()));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

fn split_role(line: &str) -> Option<(Role, &str)> {
    let (head, rest) = line.split_once(':')?;
    match head.trim().to_ascii_lowercase().as_str() {
        "seeker" | "s" => Some((Role::Seeker, rest)),
        "recommender" | "r" => Some((Role::Recommender, rest)),
        _ => None,
    }
}
