#![no_main]

use libfuzzer_sys::fuzz_target;
use ntrd_core::training::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::from_json(text) {
        let _ = cfg.validate();
        let again = TrainConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(again.hash(), cfg.hash());
    }
});
