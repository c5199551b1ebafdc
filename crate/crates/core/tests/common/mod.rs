#![allow(dead_code, clippy::needless_range_loop)]

pub mod oracle;

use ntrd_core::numerics::{ParamStore, Tape, Var};

/// Largest relative error between tape gradients and central finite
/// differences over every trainable parameter element. Returns the error and
/// a label for the worst element.
pub fn max_grad_error<F>(store: &ParamStore, loss: F, h: f64) -> (f64, String)
where
    F: for<'a> Fn(&mut Tape<'a>) -> Var,
{
    let grads = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape);
        tape.backward(l).expect("scalar loss")
    };
    let eval = |s: &ParamStore| {
        let mut tape = Tape::new(s);
        let l = loss(&mut tape);
        tape.scalar_value(l)
    };
    let mut work = store.clone();
    let mut worst = (0.0, String::new());
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let analytic = grads.get(id).expect("trainable param has gradient").to_vec();
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&work);
            work.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&work);
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(analytic[i], numeric);
            if err > worst.0 {
                worst = (
                    err,
                    format!(
                        "{}[{i}] analytic={:e} numeric={:e}",
                        store.name(id),
                        analytic[i],
                        numeric
                    ),
                );
            }
        }
    }
    worst
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

use std::path::PathBuf;

use ntrd_core::corpus::{synth_corpus, SynthCorpus, SynthSpec};
use ntrd_core::training::{Corpus, TrainConfig};

pub const FIXTURE_SPEC: SynthSpec = SynthSpec {
    n_conversations: 64,
    n_items: 8,
    n_genres: 4,
    vocab_size: 200,
    seed: 13,
};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synth")
}

pub fn fixture_synth() -> SynthCorpus {
    synth_corpus(FIXTURE_SPEC).expect("fixture spec is valid")
}

/// The checked-in fixture, split with seed 13.
pub fn fixture_corpus() -> Corpus {
    let dir = fixture_dir();
    Corpus::load(&dir.join("dialogues.jsonl"), Some(&dir.join("kg.tsv")), 13).expect("fixture loads")
}

/// Small model and the default joint-training schedule.
pub fn desk_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        epochs: 10_000,
        patience: 10_000,
        ..TrainConfig::default()
    };
    cfg.model.generator.d_model = 64;
    cfg.model.generator.ffn = 128;
    cfg.model.generator.max_context = 96;
    cfg.model.recommender.entity_dim = 32;
    cfg.pretrain.learning_rate = 1e-2;
    cfg
}

use ntrd_core::corpus::{Catalog, ItemId, MaskedExample, Vocabulary};
use ntrd_core::model::{Model, ModelConfig, Prepared, Variant};
use ntrd_core::recommender::KnowledgeGraph;

pub const MICRO_WORDS: [&str; 4] = ["i", "like", "comedy", "try"];

/// Eleven-token vocabulary: the reserved tokens plus [`MICRO_WORDS`].
pub fn micro_vocab() -> Vocabulary {
    let mut tokens: Vec<String> = ntrd_core::corpus::vocab::RESERVED
        .iter()
        .map(|s| s.to_string())
        .collect();
    tokens.extend(MICRO_WORDS.iter().map(|s| s.to_string()));
    Vocabulary::from(tokens)
}

pub fn micro_catalog() -> Catalog {
    Catalog::new(
        [(1000, "Alpha"), (1001, "Beta"), (1002, "Gamma")]
            .into_iter()
            .map(|(i, t)| (ItemId(i), t.to_string()))
            .collect(),
    )
}

pub fn micro_kg(catalog: &Catalog) -> KnowledgeGraph {
    let t = |h: &str, r: &str, t: &str| (h.to_string(), r.to_string(), t.to_string());
    KnowledgeGraph::build(
        catalog,
        &[
            t("1000", "has_genre", "genre:comedy"),
            t("1001", "has_genre", "genre:comedy"),
            t("1002", "has_genre", "genre:horror"),
        ],
    )
}

/// d^e = 8, d^h = 4, vocab 11, 3 items, one layer, one head.
pub fn micro_config(variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig {
        variant,
        ..ModelConfig::default()
    };
    cfg.generator.d_model = 4;
    cfg.generator.heads = 1;
    cfg.generator.layers = 1;
    cfg.generator.ffn = 8;
    cfg.generator.max_context = 16;
    cfg.generator.max_response = 8;
    cfg.recommender.entity_dim = 8;
    cfg.recommender.layers = 1;
    cfg.selector.heads = 1;
    cfg.selector.ffn = 8;
    cfg
}

pub fn micro_model(variant: Variant, seed: u64) -> Model {
    let catalog = micro_catalog();
    let kg = micro_kg(&catalog);
    Model::new(micro_config(variant), micro_vocab(), catalog, kg, seed).unwrap()
}

/// Two examples: one with two slots and one with a single slot.
pub fn micro_batch(model: &Model) -> Vec<Prepared> {
    let v = |w: &str| model.vocab.id(w);
    use ntrd_core::corpus::vocab::{BOS, EOS, ITEM, SEEKER};
    let first = MaskedExample {
        conversation_id: "m1".into(),
        turn_index: 1,
        context_ids: vec![SEEKER, v("i"), v("like"), v("comedy")],
        target_ids: vec![BOS, v("try"), ITEM, v("like"), ITEM, EOS],
        slot_items: vec![ItemId(1000), ItemId(1001)],
        context_entities: vec!["genre:comedy".into()],
    };
    let second = MaskedExample {
        conversation_id: "m2".into(),
        turn_index: 1,
        context_ids: vec![SEEKER, v("i"), v("like"), ITEM],
        target_ids: vec![BOS, v("i"), v("try"), ITEM, EOS],
        slot_items: vec![ItemId(1002)],
        context_entities: vec!["1002".into()],
    };
    vec![model.prepare(first), model.prepare(second)]
}

use ntrd_core::metrics::{GeneratedRecord, SlotRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random records over a 60-item catalog (ids 0..60) and a 12-word
/// vocabulary; every slot has 50 ranked candidates.
pub fn random_records(seed: u64) -> Vec<GeneratedRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..25);
    (0..n)
        .map(|r| {
            let len = rng.random_range(0..10);
            let mut response: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..12))).collect();
            let mut slots = Vec::new();
            for pos in 0..len {
                if rng.random_bool(0.2) {
                    let mut candidates: Vec<ItemId> = (0..60).map(ItemId).collect();
                    for i in (1..candidates.len()).rev() {
                        let j = rng.random_range(0..=i);
                        candidates.swap(i, j);
                    }
                    candidates.truncate(50);
                    let raw: Vec<f64> = (0..50).map(|_| rng.random_range(0.01..1.0)).collect();
                    let z: f64 = raw.iter().sum();
                    let item = candidates[rng.random_range(0..50)];
                    response[pos] = format!("@{item}");
                    slots.push(SlotRecord {
                        position: pos,
                        distribution: raw.iter().map(|v| v / z).collect(),
                        candidates,
                        item,
                    });
                }
            }
            let ground_truth = (0..rng.random_range(0..3))
                .map(|_| ItemId(rng.random_range(0..60)))
                .collect();
            let nlls = (0..rng.random_range(1..8))
                .map(|_| rng.random_range(0.0..4.0))
                .collect();
            GeneratedRecord {
                conversation_id: format!("c{seed}"),
                turn_index: r,
                response,
                slots,
                ground_truth,
                nlls,
            }
        })
        .collect()
}

/// Four turns: two whose responses contain their ground truth, two that
/// miss, plus a slotless chit-chat turn with no ground truth.
pub fn hand_records() -> Vec<GeneratedRecord> {
    let rec = |turn: usize, words: &[&str], fills: &[(usize, u64)], gt: &[u64]| GeneratedRecord {
        conversation_id: "hand".into(),
        turn_index: turn,
        response: words.iter().map(|s| s.to_string()).collect(),
        slots: fills
            .iter()
            .map(|&(position, item)| SlotRecord {
                position,
                distribution: vec![0.7, 0.2, 0.1],
                candidates: vec![ItemId(item), ItemId(item + 1), ItemId(item + 2)],
                item: ItemId(item),
            })
            .collect(),
        ground_truth: gt.iter().map(|&g| ItemId(g)).collect(),
        nlls: vec![0.5, 1.0],
    };
    vec![
        rec(1, &["try", "@1"], &[(1, 1)], &[1]),
        rec(3, &["try", "@3", "or", "@4"], &[(1, 3), (3, 4)], &[9, 4]),
        rec(5, &["try", "@1"], &[(1, 1)], &[2]),
        rec(7, &["no", "idea"], &[], &[5]),
        rec(9, &["bye"], &[], &[]),
    ]
}
