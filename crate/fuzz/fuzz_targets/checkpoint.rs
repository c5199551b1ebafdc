#![no_main]

use libfuzzer_sys::fuzz_target;
use ntrd_core::training::{model_from_checkpoint, Checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        let bytes = ckpt.to_bytes().expect("decoded checkpoint re-encodes");
        assert_eq!(
            Checkpoint::from_bytes(&bytes).expect("re-encoded checkpoint decodes"),
            ckpt
        );
        let _ = model_from_checkpoint(&ckpt);
    }
});
