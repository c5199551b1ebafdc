/// Lowercases and splits on whitespace and punctuation, keeping each
/// punctuation character as its own token. `@` followed by digits stays a
/// single token so item mentions survive.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_alphanumeric() || c == '_' {
            cur.extend(c.to_lowercase());
        } else {
            flush(&mut cur, &mut out);
            if c == '@' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()) {
                let start = i;
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                out.push(chars[start..i].iter().collect());
                continue;
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        i += 1;
    }
    flush(&mut cur, &mut out);
    out
}

fn flush(cur: &mut String, out: &mut Vec<String>) {
    if !cur.is_empty() {
        out.push(std::mem::take(cur));
    }
}

/// Parses an `@<digits>` token into its numeric id.
pub fn mention_id(token: &str) -> Option<u64> {
    let digits = token.strip_prefix('@')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Joins tokens with single spaces.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_and_keeps_mentions() {
        assert_eq!(
            tokenize("You should watch @111776!"),
            ["you", "should", "watch", "@111776", "!"]
        );
        assert_eq!(tokenize("Hi, it's me"), ["hi", ",", "it", "'", "s", "me"]);
        assert_eq!(tokenize("email@ x"), ["email", "@", "x"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn mention_ids() {
        assert_eq!(mention_id("@42"), Some(42));
        assert_eq!(mention_id("@"), None);
        assert_eq!(mention_id("@4a"), None);
        assert_eq!(mention_id("42"), None);
    }
}
