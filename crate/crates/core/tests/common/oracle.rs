//! Naive reference metrics: plain loops, nothing shared with the library.

use ntrd_core::corpus::ItemId;
use ntrd_core::metrics::GeneratedRecord;

pub fn ppl(records: &[GeneratedRecord]) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0;
    for r in records {
        for v in &r.nlls {
            total += v;
            n += 1.0;
        }
    }
    (total / n).exp()
}

pub fn dist(records: &[GeneratedRecord], n: usize) -> f64 {
    let mut acc = 0.0;
    for r in records {
        let w = &r.response;
        if w.len() < n {
            continue;
        }
        let mut distinct = 0;
        for i in 0..=w.len() - n {
            let mut seen = false;
            for j in 0..i {
                if (0..n).all(|o| w[i + o] == w[j + o]) {
                    seen = true;
                    break;
                }
            }
            if !seen {
                distinct += 1;
            }
        }
        acc += distinct as f64 / w.len() as f64;
    }
    if records.is_empty() {
        0.0
    } else {
        acc / records.len() as f64
    }
}

pub fn rer(records: &[GeneratedRecord], k: usize) -> f64 {
    let mut den = 0;
    let mut num = 0;
    for r in records {
        if r.ground_truth.is_empty() {
            continue;
        }
        den += 1;
        let mut hit = false;
        for s in &r.slots {
            if k == 1 {
                for g in &r.ground_truth {
                    if *g == s.item {
                        hit = true;
                    }
                }
            } else {
                for c in 0..k {
                    for g in &r.ground_truth {
                        if s.candidates[c] == *g {
                            hit = true;
                        }
                    }
                }
            }
        }
        if hit {
            num += 1;
        }
    }
    if den == 0 {
        0.0
    } else {
        num as f64 * 100.0 / den as f64
    }
}

pub fn item_ratio(records: &[GeneratedRecord]) -> f64 {
    let mut with = 0;
    for r in records {
        if !r.slots.is_empty() {
            with += 1;
        }
    }
    if records.is_empty() {
        0.0
    } else {
        with as f64 * 100.0 / records.len() as f64
    }
}

fn emitted(records: &[GeneratedRecord]) -> Vec<ItemId> {
    let mut out: Vec<ItemId> = Vec::new();
    for r in records {
        for s in &r.slots {
            if !out.contains(&s.item) {
                out.push(s.item);
            }
        }
    }
    out
}

pub fn item_diversity(records: &[GeneratedRecord], catalog_size: usize) -> f64 {
    emitted(records).len() as f64 * 100.0 / catalog_size as f64
}

pub fn novel(records: &[GeneratedRecord], novel: &[ItemId]) -> f64 {
    let e = emitted(records);
    let mut n = 0;
    for id in novel {
        if e.contains(id) {
            n += 1;
        }
    }
    n as f64 * 100.0 / novel.len() as f64
}
