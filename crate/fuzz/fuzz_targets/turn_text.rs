#![no_main]

use std::collections::BTreeMap;

use libfuzzer_sys::fuzz_target;
use ntrd_core::corpus::{ItemId, Role, Turn};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let known: BTreeMap<ItemId, String> = [
        (ItemId(1000), "Crimson River".to_string()),
        (ItemId(7), "Up".to_string()),
    ]
    .into_iter()
    .collect();
    let (turn, _unknown) = Turn::parse(Role::Seeker, text, &known);
    for item in turn.items() {
        assert!(known.contains_key(&item));
    }
});
