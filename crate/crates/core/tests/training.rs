mod common;

use common::{desk_config, fixture_corpus, micro_batch, micro_model};
use ntrd_core::corpus::vocab::ITEM;
use ntrd_core::model::Variant;
use ntrd_core::numerics::Tape;
use ntrd_core::training::{
    model_from_checkpoint, total_loss, Checkpoint, LogRecord, TrainConfig, TrainLog, Trainer, FORMAT_VERSION,
};
use ntrd_core::Error;

fn quick_config(seed: u64) -> TrainConfig {
    let mut cfg = desk_config(seed);
    cfg.pretrain.max_epochs = 20;
    cfg
}

#[test]
fn total_loss_arithmetic() {
    assert_eq!(total_loss(2.0, 1.0, 5.0), 11.0);
    assert_eq!(total_loss(3.7, 0.4, 0.0), 0.4);
    assert_eq!(total_loss(0.0, 0.0, 1.0), 0.0);
}

#[test]
fn batch_loss_is_exactly_the_weighted_sum() {
    let model = micro_model(Variant::Ntrd, 3);
    let batch = micro_batch(&model);
    let refs: Vec<_> = batch.iter().collect();
    for lambda in [0.0, 1.0, 5.0, 0.37] {
        let mut tape = Tape::new(&model.params);
        let parts = model.batch_loss(&mut tape, &refs, lambda, false).unwrap();
        let gen = tape.scalar_value(parts.gen);
        let slot = tape.scalar_value(parts.slot.unwrap());
        assert_eq!(tape.scalar_value(parts.total), total_loss(gen, slot, lambda));
        assert!(gen.is_finite() && slot.is_finite());
    }
}

#[test]
fn uniform_output_gives_log_vocab_generation_loss() {
    let mut model = micro_model(Variant::Ntrd, 3);
    let out = model.generator.output_layer().clone();
    for id in out.params() {
        let n = model.params.get(id).numel();
        model.params.set_values(id, &vec![0.0; n]).unwrap();
    }
    let batch = micro_batch(&model);
    let refs: Vec<_> = batch.iter().collect();
    let mut tape = Tape::new(&model.params);
    let parts = model.batch_loss(&mut tape, &refs, 5.0, false).unwrap();
    let expected = (model.vocab.len() as f64).ln();
    assert!((tape.scalar_value(parts.gen) - expected).abs() < 1e-12);
}

#[test]
fn generation_loss_matches_direct_token_nll_mean() {
    let model = micro_model(Variant::Ntrd, 4);
    let batch = micro_batch(&model);
    let refs: Vec<_> = batch.iter().collect();
    let mut sum = 0.0;
    let mut count = 0;
    for p in &batch {
        let mut tape = Tape::new(&model.params);
        let enc = model.generator.encode(&mut tape, &p.example.context_ids).unwrap();
        let tf = model
            .generator
            .teacher_forced(&mut tape, &enc, &p.example.target_ids)
            .unwrap();
        let v = model.vocab.len();
        let logits = tape.value(tf.logits).to_vec();
        for (t, &target) in tf.targets.iter().enumerate() {
            let row = &logits[t * v..(t + 1) * v];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            sum += z.ln() - row[target];
            count += 1;
        }
    }
    let mut tape = Tape::new(&model.params);
    let parts = model.batch_loss(&mut tape, &refs, 1.0, false).unwrap();
    assert_eq!(parts.tokens, count);
    assert!((tape.scalar_value(parts.gen) - sum / count as f64).abs() < 1e-9);
}

#[test]
fn slot_loss_matches_selector_distribution_nll() {
    let model = micro_model(Variant::Ntrd, 6);
    let batch = micro_batch(&model);
    let table = model.inference_table().unwrap();
    let selector = model.selector.as_ref().unwrap();
    let mut nll = 0.0;
    let mut slots = 0;
    for p in &batch {
        let mut tape = Tape::new(&model.params);
        let enc = model.generator.encode(&mut tape, &p.example.context_ids).unwrap();
        let tf = model
            .generator
            .teacher_forced(&mut tape, &enc, &p.example.target_ids)
            .unwrap();
        let (slot_rows, word_rows) = tf.slot_and_word_rows();
        let hidden = tape.to_tensor(tf.hidden);
        let pick = |rows: &[usize]| {
            ntrd_core::numerics::Tensor::new(
                vec![rows.len(), hidden.cols()],
                rows.iter().flat_map(|&r| hidden.row(r).to_vec()).collect(),
            )
            .unwrap()
        };
        let cands = model.candidate_set(&table, &p.mentions).unwrap();
        let dists = selector
            .distributions(
                &model.params,
                &pick(&slot_rows),
                &pick(&word_rows),
                &tape.to_tensor(enc.ctx),
                &enc.key_mask,
                &cands.embeddings,
                &cands.log_scores(),
            )
            .unwrap();
        for (d, gt) in dists.iter().zip(&p.slot_targets) {
            let pos = cands.items.iter().position(|i| Some(*i) == *gt).unwrap();
            nll -= d[pos].ln();
            slots += 1;
        }
    }
    let refs: Vec<_> = batch.iter().collect();
    let mut tape = Tape::new(&model.params);
    let parts = model.batch_loss(&mut tape, &refs, 5.0, false).unwrap();
    assert_eq!(parts.slots, 3);
    assert!((tape.scalar_value(parts.slot.unwrap()) - nll / slots as f64).abs() < 1e-9);
}

#[test]
fn slotless_batch_has_no_slot_term() {
    let model = micro_model(Variant::Ntrd, 3);
    let mut p = micro_batch(&model).remove(1);
    let w = model.vocab.id("like");
    for t in &mut p.example.target_ids {
        if *t == ITEM {
            *t = w;
        }
    }
    p.example.slot_items.clear();
    p.slot_targets.clear();
    let mut tape = Tape::new(&model.params);
    let parts = model.batch_loss(&mut tape, &[&p], 5.0, false).unwrap();
    assert!(parts.slot.is_none());
    assert_eq!(parts.slots, 0);
    assert_eq!(tape.scalar_value(parts.total), 5.0 * tape.scalar_value(parts.gen));
    assert!(model.batch_loss(&mut tape, &[], 5.0, false).is_err());
}

#[test]
fn every_module_receives_gradient() {
    let model = micro_model(Variant::Ntrd, 7);
    let batch = micro_batch(&model);
    let refs: Vec<_> = batch.iter().collect();
    let mut tape = Tape::new(&model.params);
    let parts = model.batch_loss(&mut tape, &refs, 5.0, true).unwrap();
    let grads = tape.backward(parts.total).unwrap();
    for prefix in ["generator.", "selector.", "recommender."] {
        let moved = model
            .params
            .ids()
            .filter(|&id| model.params.name(id).starts_with(prefix))
            .any(|id| grads.get(id).is_some_and(|g| g.iter().any(|v| *v != 0.0)));
        assert!(moved, "no gradient reaches {prefix}");
    }
}

#[test]
fn config_parsing_and_validation() {
    let cfg = TrainConfig::from_json(r#"{"lambda": 2.5, "seed": 9}"#).unwrap();
    assert_eq!(cfg.lambda, 2.5);
    assert_eq!(cfg.batch_size, 32);
    let err = TrainConfig::from_json(r#"{"lamda": 2.5}"#).unwrap_err().to_string();
    assert!(err.contains("lamda"), "{err}");
    let err = TrainConfig::from_json(r#"{"model": {"generator": {"d_modle": 8}}}"#)
        .unwrap_err()
        .to_string();
    assert!(err.contains("d_modle"), "{err}");
    let partial = TrainConfig::from_json(r#"{"model": {"recommender": {"entity_dim": 16}}}"#).unwrap();
    assert_eq!(partial.model.recommender.entity_dim, 16);
    assert_eq!(partial.model.recommender.layers, 1);
    assert!(TrainConfig::from_json(r#"{"lambda": -1}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"batch_size": 0}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"precision": "f32"}"#).is_err());
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(TrainConfig::from_json(&json).unwrap(), cfg);
    let mut other = cfg.clone();
    assert_eq!(other.hash(), cfg.hash());
    other.seed += 1;
    assert_ne!(other.hash(), cfg.hash());
}

#[test]
fn training_is_deterministic_and_clipped() {
    let corpus = fixture_corpus();
    let run = || {
        let mut t = Trainer::new(quick_config(21), &corpus).unwrap();
        (0..10).map(|_| t.step().unwrap().0).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    let la: Vec<f64> = a.iter().map(|r| r.loss).collect();
    let lb: Vec<f64> = b.iter().map(|r| r.loss).collect();
    assert_eq!(la, lb);
    for (i, r) in a.iter().enumerate() {
        assert_eq!(r.step, i as u64 + 1);
        assert!(r.grad_norm * r.clip_factor <= 0.1 + 1e-9);
        assert_eq!(r.loss, total_loss(r.l_gen, r.l_slot, 5.0));
    }
}

#[test]
fn fixture_loss_halves_within_two_hundred_steps() {
    let corpus = fixture_corpus();
    let mut cfg = quick_config(13);
    cfg.max_steps = Some(200);
    let mut t = Trainer::new(cfg, &corpus).unwrap();
    let losses = t.run(None).unwrap().losses();
    assert_eq!(losses.len(), 200);
    let first = losses[0];
    let last = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(last <= 0.5 * first, "{first} -> {last}");
}

#[test]
fn run_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture_corpus();
    let mut cfg = quick_config(5);
    cfg.epochs = 2;
    let mut t = Trainer::new(cfg, &corpus).unwrap();
    let log = t.run(Some(dir.path())).unwrap();
    let read = TrainLog::read(dir.path().join("trainlog.jsonl")).unwrap();
    assert_eq!(read, log);
    assert!(matches!(read.records[0], LogRecord::Pretrain { .. }));
    let steps: Vec<u64> = read.steps().map(|s| s.step).collect();
    assert!(steps.windows(2).all(|w| w[1] == w[0] + 1));
    let epochs = read.records.iter().filter(|r| matches!(r, LogRecord::Epoch(_))).count();
    assert_eq!(epochs, 2);
    assert!(dir.path().join("last.ckpt").exists());
    assert!(dir.path().join("best.ckpt").exists());
    let ckpt = Checkpoint::load(dir.path().join("last.ckpt")).unwrap();
    assert_eq!(ckpt.state.epoch, 2);
    assert!(ckpt.state.finished);
}

#[test]
fn checkpoint_round_trip_and_restore() {
    let corpus = fixture_corpus();
    let mut t = Trainer::new(quick_config(8), &corpus).unwrap();
    for _ in 0..3 {
        t.step().unwrap();
    }
    let ckpt = t.checkpoint().unwrap();
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    ckpt.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);

    let restored = model_from_checkpoint(&back).unwrap();
    let ctx = &t.train_examples()[0].example.context_ids;
    let a = t.model.template(ctx).unwrap();
    let b = restored.template(ctx).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.e_slot, b.e_slot);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let corpus = fixture_corpus();
    let t = Trainer::new(quick_config(8), &corpus).unwrap();
    let bytes = t.checkpoint().unwrap().to_bytes().unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Corrupt(_))));

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let err = Checkpoint::from_bytes(&bad).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains(&(FORMAT_VERSION + 1).to_string()) && msg.contains(&FORMAT_VERSION.to_string()),
        "{msg}"
    );

    for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(Checkpoint::from_bytes(&longer).is_err());

    // The final eight bytes are the last optimizer moment.
    let mut nan = bytes.clone();
    let n = nan.len();
    nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&nan), Err(Error::Corrupt(_))));

    // A failed load leaves an existing file untouched.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    std::fs::write(&path, &bytes[..100]).unwrap();
    assert!(Checkpoint::load(&path).is_err());
    assert_eq!(std::fs::read(&path).unwrap(), &bytes[..100]);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let corpus = fixture_corpus();
    let cfg = quick_config(17);
    let mut full = Trainer::new(cfg.clone(), &corpus).unwrap();
    let mut saved = None;
    let mut losses = Vec::new();
    for i in 0..7 {
        if i == 6 {
            saved = Some(full.checkpoint().unwrap().to_bytes().unwrap());
        }
        losses.push(full.step().unwrap().0.loss);
    }
    // Step 7 starts the second epoch of five batches; step 8 is mid-epoch.
    let next_full = full.step().unwrap().0.loss;
    let ckpt = Checkpoint::from_bytes(&saved.unwrap()).unwrap();
    let mut resumed = Trainer::resume(cfg.clone(), &corpus, &ckpt).unwrap();
    assert_eq!(resumed.step().unwrap().0.loss, losses[6]);
    assert!((resumed.step().unwrap().0.loss - next_full).abs() < 1e-12);

    let mut other = cfg;
    other.lambda = 1.0;
    assert!(matches!(
        Trainer::resume(other, &corpus, &ckpt),
        Err(Error::ConfigMismatch { .. })
    ));
}

#[test]
fn non_finite_loss_aborts_with_batch_id() {
    let corpus = fixture_corpus();
    let mut t = Trainer::new(quick_config(2), &corpus).unwrap();
    let bias = t.model.generator.output_layer().bias;
    let n = t.model.params.get(bias).numel();
    t.model.params.set_values(bias, &vec![f64::NAN; n]).unwrap();
    match t.step() {
        Err(Error::NonFinite { step, batch_id }) => assert_eq!((step, batch_id), (0, 0)),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}
