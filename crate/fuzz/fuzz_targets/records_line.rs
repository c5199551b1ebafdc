#![no_main]

use libfuzzer_sys::fuzz_target;
use ntrd_core::metrics::parse_record_line;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok(Some(record)) = parse_record_line(line) {
        let json = serde_json::to_string(&record).unwrap();
        assert_eq!(parse_record_line(&json).unwrap(), Some(record));
    }
});
