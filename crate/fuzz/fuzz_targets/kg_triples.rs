#![no_main]

use libfuzzer_sys::fuzz_target;
use ntrd_core::recommender::parse_triples;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(triples) = parse_triples(text) {
        for (h, r, t) in &triples {
            assert!(!h.is_empty() && !r.is_empty() && !t.is_empty());
            assert!(!h.contains('\t') && !r.contains('\t') && !t.contains('\t'));
        }
    }
});
