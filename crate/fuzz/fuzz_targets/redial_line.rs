#![no_main]

use libfuzzer_sys::fuzz_target;
use ntrd_core::corpus::parse_redial_line;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok((conv, _unknown)) = parse_redial_line(line, "fuzz") {
        for turn in &conv.turns {
            for item in turn.items() {
                assert!(conv.mentioned_items.contains_key(&item));
            }
        }
    }
});
