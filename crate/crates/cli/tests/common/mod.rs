#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ntrd_core::corpus::{synth_corpus, SynthSpec};
use ntrd_core::training::{Corpus, TrainConfig, Trainer};

pub const SPEC: SynthSpec = SynthSpec {
    n_conversations: 64,
    n_items: 8,
    n_genres: 4,
    vocab_size: 200,
    seed: 13,
};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/synth")
}

pub fn desk_config(steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed: 13,
        epochs: 10_000,
        patience: 10_000,
        max_steps: Some(steps),
        ..TrainConfig::default()
    };
    cfg.model.generator.d_model = 64;
    cfg.model.generator.ffn = 128;
    cfg.model.generator.max_context = 96;
    cfg.model.recommender.entity_dim = 32;
    cfg.pretrain.learning_rate = 1e-2;
    cfg
}

pub fn write_config(dir: &Path, cfg: &TrainConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path
}

/// Checkpoint of a model fitted to the synthetic corpus, trained once per
/// test binary.
pub fn trained_checkpoint() -> &'static Path {
    static CKPT: OnceLock<PathBuf> = OnceLock::new();
    CKPT.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("ntrd-cli-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let corpus = Corpus::from_synth(&synth_corpus(SPEC).unwrap(), 13).unwrap();
        let mut trainer = Trainer::new(desk_config(300), &corpus).unwrap();
        trainer.run(None).unwrap();
        let path = dir.join("model.ckpt");
        trainer.checkpoint().unwrap().save(&path).unwrap();
        path
    })
}
