#![no_main]

use libfuzzer_sys::fuzz_target;
use ntrd_cli::context::parse_contexts;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for ctx in parse_contexts(text) {
        assert!(!ctx.is_empty());
        assert!(ctx
            .iter()
            .all(|(_, body)| !body.trim().is_empty() && !body.contains('\n')));
    }
});
