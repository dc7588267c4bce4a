use hmamba::autodiff::Fault;
use hmamba::data::{build_sequences, synth_hierarchical_dataset, BuildOptions};
use hmamba::metrics::{evaluate, EvalOptions};
use hmamba::model::{checkpoint, ModelConfig, ModelState, TrainingBatch, Variant};
use hmamba::train::{gradcheck, train_epoch, Optimizer, OptimizerKind, TrainConfig, FD_STEP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        d: 4,
        d_state: 4,
        expand: 2,
        conv_width: 2,
        n_layers: 1,
        k: 1.0,
        dropout: 0.0,
        max_seq_len: 6,
        vocab_size: 21,
        ..ModelConfig::default()
    }
}

fn tiny_batch(seed: u64) -> TrainingBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<Vec<usize>> = [7usize, 7, 4]
        .iter()
        .map(|&n| (0..n).map(|_| rng.random_range(1..=20)).collect())
        .collect();
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    TrainingBatch::from_sequences(&refs, 6, 20, &mut rng)
}

#[test]
fn gradcheck_passes_for_every_variant() {
    for variant in Variant::ALL {
        for k in [1.0, 2.5] {
            let cfg = ModelConfig { k, ..tiny(variant) };
            let model = ModelState::init(cfg, 3).unwrap();
            let report = gradcheck(&model, &tiny_batch(4), FD_STEP, None).unwrap();
            for g in &report.groups {
                assert!(g.passed, "{variant} k={k} group {} rel {:e} abs {:e}", g.group, g.max_rel_error, g.max_abs_error);
            }
            let names: Vec<&str> = report.groups.iter().map(|g| g.group.as_str()).collect();
            let mut unique = names.clone();
            unique.sort();
            unique.dedup();
            assert_eq!(unique.len(), names.len());
            assert_eq!(names.len(), 13);
        }
    }
}

#[test]
fn gradcheck_reports_an_injected_fault() {
    let model = ModelState::init(tiny(Variant::Full), 3).unwrap();
    let report = gradcheck(&model, &tiny_batch(4), FD_STEP, Some(Fault::SiluGradScale(1.5))).unwrap();
    assert!(!report.passed());
    assert!(report.worst()[0].max_rel_error > 1e-2);
}

fn synth(seed: u64, depth: usize, users: usize, len: usize, max_seq_len: usize) -> hmamba::data::SequenceDataset {
    let (log, _) = synth_hierarchical_dataset(seed, depth, 3, users, len).unwrap();
    build_sequences(&log, BuildOptions { max_seq_len, ..Default::default() }).unwrap()
}

fn small(variant: Variant, vocab: usize) -> ModelConfig {
    ModelConfig {
        variant,
        d: 8,
        d_state: 4,
        max_seq_len: 10,
        vocab_size: vocab,
        ..ModelConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = synth(1, 2, 20, 10, 10);
    let mut model = ModelState::init(small(Variant::Full, data.vocab_size()), 5).unwrap();
    let before = model.clone();
    let cfg = TrainConfig { lr: 0.0, optimizer: OptimizerKind::Sgd, batch_size: 8, seed: 2, ..Default::default() };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr).unwrap();
    let seqs = data.train_sequences();
    let (a, _) = train_epoch(&mut model, &seqs, &mut opt, &cfg, 1).unwrap();
    assert_eq!(model, before);
    let cfg = TrainConfig { seed: 2, ..cfg };
    let (b, _) = train_epoch(&mut model, &seqs, &mut opt, &TrainConfig { ..cfg.clone() }, 1).unwrap();
    assert_eq!(a.mean_loss, b.mean_loss);
}

#[test]
fn training_is_bit_reproducible() {
    let data = synth(2, 2, 30, 12, 10);
    let run = || {
        let mut model = ModelState::init(small(Variant::Full, data.vocab_size()), 9).unwrap();
        let cfg = TrainConfig { batch_size: 8, lr: 5e-3, seed: 11, ..Default::default() };
        let mut opt = Optimizer::new(cfg.optimizer, cfg.lr).unwrap();
        let mut reports = Vec::new();
        for e in 1..=3 {
            let (mut r, _) = train_epoch(&mut model, &data.train_sequences(), &mut opt, &cfg, e).unwrap();
            r.wall_seconds = 0.0;
            reports.push(r);
        }
        (checkpoint::to_bytes(&model).unwrap(), reports)
    };
    assert_eq!(run(), run());
}

/// Fifty strided cycles over twenty items: each next item is a function of
/// the two previous ones.
fn strided_sequences() -> Vec<Vec<usize>> {
    (0..50)
        .map(|u| (0..10).map(|t| 1 + (u * 7 + t * (1 + u % 3)) % 20).collect())
        .collect()
}

#[test]
fn toy_overfit_drives_loss_down() {
    let seqs = strided_sequences();
    for variant in Variant::ALL {
        let cfg = ModelConfig { variant, d: 16, d_state: 8, max_seq_len: 10, vocab_size: 21, dropout: 0.0, ..ModelConfig::default() };
        let mut model = ModelState::init(cfg, 1).unwrap();
        let cfg = TrainConfig { batch_size: 50, lr: 1e-2, seed: 4, ..Default::default() };
        let mut opt = Optimizer::new(cfg.optimizer, cfg.lr).unwrap();
        let mut curve = Vec::new();
        for e in 1..=200 {
            let (r, stats) = train_epoch(&mut model, &seqs, &mut opt, &cfg, e).unwrap();
            curve.push(r.mean_loss);
            if variant.is_hyperbolic() {
                assert!(stats.max_residual <= 1e-6, "residual {}", stats.max_residual);
            }
        }
        assert!(model.is_finite());
        assert!(curve[199] < 0.25 * curve[0], "{variant}: {} -> {}", curve[0], curve[199]);
        assert!(model.embedding().row(0).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn untrained_model_is_near_the_random_baseline() {
    let data = synth(7, 3, 400, 12, 10);
    let model = ModelState::init(small(Variant::Full, data.vocab_size()), 21).unwrap();
    let report = evaluate(&model, &data, &EvalOptions::default()).unwrap();
    let m = report.at(10).unwrap();
    let p = 10.0 / data.n_items() as f64;
    let sigma = (p * (1.0 - p) / m.n_users as f64).sqrt();
    assert!((m.hr - p).abs() <= 3.0 * sigma, "hr {} baseline {p}", m.hr);
    assert_eq!(report, evaluate(&model, &data, &EvalOptions::default()).unwrap());
}
