use super::*;
use crate::lorentz::log_map_origin;

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        d: 4,
        d_state: 3,
        expand: 2,
        conv_width: 2,
        n_layers: 2,
        k: 1.0,
        dropout: 0.0,
        max_seq_len: 6,
        vocab_size: 9,
        ..ModelConfig::default()
    }
}

#[test]
fn embed_sequence_padding_and_bounds() {
    let table = Tensor::matrix(8, 2, (0..16).map(|i| i as f64).collect()).unwrap();
    let e = embed_sequence(&[0, 0, 7], &table).unwrap();
    assert_eq!(e.shape(), &[3, 2]);
    assert_eq!(e.row(0), &[0.0, 0.0]);
    assert_eq!(e.row(1), &[0.0, 0.0]);
    assert_eq!(e.row(2), table.row(7));
    let single = embed_sequence(&[0, 0, 0, 3], &table).unwrap();
    assert_eq!(single.data().iter().filter(|&&v| v != 0.0).count(), 2);
    assert!(matches!(embed_sequence(&[8], &table), Err(Error::Vocabulary { id: 8, .. })));
}

#[test]
fn to_hyperbolic_examples() {
    let k = Curvature::new(1.0).unwrap();
    let tol = Tolerance::default();
    let e = Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.3, -1.2, 2.0]]);
    let h = to_hyperbolic(&e, k, &tol).unwrap();
    assert_eq!(h[0].coords(), k.origin(3).coords());
    assert!((h[1].coords()[0] - 1f64.cosh()).abs() < 1e-15);
    assert!((h[1].coords()[1] - 1f64.sinh()).abs() < 1e-15);
    for (i, p) in h.iter().enumerate() {
        let back = log_map_origin(p, &tol).unwrap();
        for (a, b) in back.coords()[1..].iter().zip(e.row(i)) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}

fn random_points(n: usize, d: usize, k: Curvature, seed: u64) -> Vec<LorentzPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    to_hyperbolic(&e, k, &Tolerance::default()).unwrap()
}

#[test]
fn encoder_layer_identity_when_gate_is_zero() {
    let mut model = ModelState::init(tiny(Variant::Full), 3).unwrap();
    let inner = model.config().inner();
    let w = model.get_mut("layers.0.in_proj").unwrap();
    let cols = w.cols();
    for i in 0..w.rows() {
        w.row_mut(i)[inner..cols].iter_mut().for_each(|v| *v = 0.0);
    }
    let h = random_points(5, 4, model.config().curvature(), 1);
    let out = encoder_layer_forward(&h, &model, 0).unwrap();
    for (a, b) in out.iter().zip(&h) {
        for (x, y) in a.coords().iter().zip(b.coords()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_layer_preserves_manifold_and_is_causal() {
    for variant in [Variant::Full, Variant::Half] {
        for k in [0.5, 1.0, 2.0] {
            let cfg = ModelConfig { k, ..tiny(variant) };
            let model = ModelState::init(cfg, 11).unwrap();
            let c = model.config().curvature();
            let h = random_points(6, 4, c, 2);
            let out = encoder_layer_forward(&h, &model, 1).unwrap();
            assert_eq!(out.len(), 6);
            for p in &out {
                assert!(p.manifold_residual() <= 1e-6 * k);
            }
            let mut h2 = h.clone();
            h2[3] = random_points(1, 4, c, 99).remove(0);
            let out2 = encoder_layer_forward(&h2, &model, 1).unwrap();
            for s in 0..3 {
                assert_eq!(out[s].coords(), out2[s].coords());
            }
            assert_ne!(out[3].coords(), out2[3].coords());
        }
    }
}

#[test]
fn encoder_layer_rejects_foreign_points() {
    let model = ModelState::init(tiny(Variant::Full), 1).unwrap();
    let other = Curvature::new(2.0).unwrap();
    let h = random_points(3, 4, other, 1);
    assert!(matches!(encoder_layer_forward(&h, &model, 0), Err(Error::Domain(_))));
}

#[test]
fn score_half_examples() {
    let table = Tensor::from_rows(&[
        vec![0.0, 0.0],
        vec![1.0, 2.0],
        vec![-1.0, 0.5],
        vec![3.0, -1.0],
        vec![0.5, 0.5],
        vec![2.0, 2.0],
    ]);
    let s = score_half(table.row(3), &table).unwrap();
    assert_eq!(s.scores[2], 10.0);
    assert!(score_half(&[0.0, 0.0], &table).unwrap().scores.iter().all(|&v| v == 0.0));
    let q = [0.3, 0.9];
    let s = score_half(&q, &table).unwrap();
    let mut best = (0, f64::NEG_INFINITY);
    for i in 1..table.rows() {
        let v = q[0] * table.get2(i, 0) + q[1] * table.get2(i, 1);
        if v > best.1 {
            best = (i, v);
        }
    }
    assert_eq!(s.ranking()[0], best.0);
    assert_eq!(s.kind, ScoreKind::Dot);
}

#[test]
fn score_full_examples() {
    let k = Curvature::new(1.0).unwrap();
    let tol = Tolerance::default();
    let table = random_points(6, 3, k, 5);
    let s = score_full(&table[2], &table, &tol).unwrap();
    // Coincident points sit at the arcosh clamp floor, sqrt(2 eps) away from zero.
    assert!(s.scores[1] <= 0.0 && s.scores[1] >= -(2.0 * tol.eps_arcosh).sqrt() * 1.001);
    assert!(s.scores.iter().all(|&v| v <= 0.0));
    assert_eq!(s.ranking()[0], 2);
    let q = random_points(1, 3, k, 8).remove(0);
    let s = score_full(&q, &table, &tol).unwrap();
    let mut by_distance: Vec<(f64, usize)> = (1..6)
        .map(|i| {
            let ip = -q.coords()[0] * table[i].coords()[0]
                + (1..4).map(|j| q.coords()[j] * table[i].coords()[j]).sum::<f64>();
            ((-ip).acosh(), i)
        })
        .collect();
    by_distance.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let expected: Vec<usize> = by_distance.iter().map(|p| p.1).collect();
    assert_eq!(s.ranking(), expected);
}

#[test]
fn loss_half_examples() {
    assert!((loss_half(&[0.0], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    let sat = loss_half(&[30.0], &[1.0]).unwrap();
    assert!((sat - 9.357622968840175e-14).abs() < 1e-20);
    assert_eq!(loss_half(&[1e9], &[1.0]).unwrap(), sat);
    let scores = [0.4, -1.3, 2.2, 0.0, -0.7, 5.0];
    let labels = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
    let mut naive = 0.0;
    for (s, y) in scores.iter().zip(labels) {
        let p = 1.0 / (1.0 + (-s as f64).exp());
        naive -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    assert!((loss_half(&scores, &labels).unwrap() - naive).abs() < 1e-12);
}

#[test]
fn loss_full_examples() {
    assert!((loss_full(&[-2.0; 5], 3).unwrap() - 5f64.ln()).abs() < 1e-15);
    for dist in [1.0, 5.0, 40.0] {
        let s = [0.0, -dist, -dist, -dist, -dist];
        let expected = (1.0 + 4.0 * (-dist as f64).exp()).ln();
        assert!((loss_full(&s, 1).unwrap() - expected).abs() < 1e-15);
    }
    assert!(loss_full(&[0.0, -800.0, -800.0, -800.0, -800.0], 1).unwrap() < 1e-300);
    assert!(loss_full(&[0.0, 1.0], PAD).is_err());
    let s: [f64; 6] = [0.7, -1.2, 2.4, 0.1, -0.3, 1.9];
    let denom: f64 = s.iter().map(|v| v.exp()).sum();
    let naive = -(s[4].exp() / denom).ln();
    assert!((loss_full(&s, 5).unwrap() - naive).abs() < 1e-14);
    assert_eq!(loss_full(&[3.0], 1).unwrap(), 0.0);
}

#[test]
fn rank_items_breaks_ties_by_id() {
    assert_eq!(rank_items(&[0.5, 0.9, 0.5, 0.9]), vec![2, 4, 1, 3]);
}

#[test]
fn predict_next_is_deterministic_and_tie_aware() {
    let mut model = ModelState::init(tiny(Variant::Full), 4).unwrap();
    let r1 = predict_next(&model, &[1, 2, 3]).unwrap();
    let r2 = predict_next(&model, &[1, 2, 3]).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(r1.len(), 8);
    assert!(predict_next(&model, &[]).is_err());
    let e = model.get_mut(EMBEDDING).unwrap();
    let row = e.row(5).to_vec();
    e.row_mut(7).copy_from_slice(&row);
    let r = predict_next(&model, &[1, 2, 3]).unwrap();
    let p5 = r.iter().position(|&i| i == 5).unwrap();
    let p7 = r.iter().position(|&i| i == 7).unwrap();
    assert_eq!(p7, p5 + 1);
}

#[test]
fn planted_toy_model_ranks_nearest_item_first() {
    let cfg = ModelConfig {
        d: 2,
        n_layers: 1,
        vocab_size: 6,
        ..tiny(Variant::Full)
    };
    let mut model = ModelState::init(cfg, 0).unwrap();
    let planted = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [0.9, 0.2]];
    let e = model.get_mut(EMBEDDING).unwrap();
    for (i, r) in planted.iter().enumerate() {
        e.row_mut(i).copy_from_slice(r);
    }
    let w = model.get_mut("layers.0.out_proj").unwrap();
    w.data_mut().iter_mut().for_each(|v| *v = 0.0);
    // With the update switched off the final state is the last item itself.
    let r = predict_next(&model, &[2, 5]).unwrap();
    assert_eq!(r[0], 5);
    assert_eq!(r[1], 1);
}

#[test]
fn padding_and_truncation_are_inert() {
    let model = ModelState::init(tiny(Variant::Full), 9).unwrap();
    let longer = ModelState::from_parts(
        ModelConfig {
            max_seq_len: 10,
            ..model.config().clone()
        },
        model.params().to_vec(),
    )
    .unwrap();
    let seq = [3, 1, 4];
    assert_eq!(
        score_sequences(&model, &[&seq]).unwrap(),
        score_sequences(&longer, &[&seq]).unwrap()
    );
    let full = [5, 2, 6, 1, 8, 3];
    let extended = [7, 7, 4, 5, 2, 6, 1, 8, 3];
    assert_eq!(
        score_sequences(&model, &[&full]).unwrap(),
        score_sequences(&model, &[&extended]).unwrap()
    );
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ranks = |v: &[f64]| {
        let r = rank_items(v);
        let mut out = vec![0.0; v.len()];
        for (pos, id) in r.iter().enumerate() {
            out[id - 1] = pos as f64;
        }
        out
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y) * (x - y)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn variants_agree_in_the_flat_limit() {
    let cfg = ModelConfig {
        k: 1e8,
        d: 8,
        vocab_size: 41,
        n_layers: 1,
        ..tiny(Variant::Full)
    };
    let mut full = ModelState::init(cfg.clone(), 21).unwrap();
    let e = full.get_mut(EMBEDDING).unwrap();
    for i in 1..e.rows() {
        let n = e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        e.row_mut(i).iter_mut().for_each(|v| *v *= 0.5 / n);
    }
    let half = ModelState::from_parts(
        ModelConfig {
            variant: Variant::Half,
            ..cfg
        },
        full.params().to_vec(),
    )
    .unwrap();
    for seq in [&[1usize, 5, 9][..], &[40, 2, 33, 17, 8, 12], &[6]] {
        let a = score_sequences(&full, &[seq]).unwrap().remove(0);
        let b = score_sequences(&half, &[seq]).unwrap().remove(0);
        assert!(spearman(&a, &b) >= 0.95, "{}", spearman(&a, &b));
    }
}

#[test]
fn losses_are_nonnegative_and_grads_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for variant in Variant::ALL {
        let model = ModelState::init(tiny(variant), 2).unwrap();
        let seqs: [&[usize]; 2] = [&[1, 2, 3, 4], &[5, 6, 7, 8, 1, 2, 3]];
        let batch = TrainingBatch::from_sequences(&seqs, 6, 8, &mut rng);
        let out = loss_and_grads(&model, &batch, None, None).unwrap();
        assert!(out.loss >= 0.0 && out.loss.is_finite());
        assert!(out.grads.iter().all(Tensor::is_finite));
        assert!(out.grads[0].row(0).iter().all(|&v| v == 0.0));
        assert!((loss_value(&model, &batch).unwrap() - out.loss).abs() < 1e-12);
        if variant.is_hyperbolic() {
            assert!(out.max_residual < 1e-9);
        }
    }
}

#[test]
fn training_batch_shifts_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seqs: [&[usize]; 1] = [&[4, 5, 6]];
    let b = TrainingBatch::from_sequences(&seqs, 4, 6, &mut rng);
    assert_eq!(b.inputs.ids, vec![0, 0, 4, 5]);
    assert_eq!(b.targets, vec![0, 0, 5, 6]);
    for (t, n) in b.targets.iter().zip(&b.negatives) {
        if *t == PAD {
            assert_eq!(*n, PAD);
        } else {
            assert!(*n != *t && (1..=6).contains(n));
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = ModelState::init(tiny(Variant::Half), 12).unwrap();
    let bytes = checkpoint::to_bytes(&model).unwrap();
    let back = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, model);
    assert_eq!(checkpoint::to_bytes(&back).unwrap(), bytes);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(checkpoint::load(&path).unwrap(), model);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn from_parts_rejects_shape_mismatch() {
    let model = ModelState::init(tiny(Variant::Full), 1).unwrap();
    let cfg = ModelConfig {
        d: 5,
        ..model.config().clone()
    };
    assert!(matches!(
        ModelState::from_parts(cfg, model.params().to_vec()),
        Err(Error::Compatibility(_))
    ));
}

#[test]
fn config_validation() {
    assert!(ModelConfig {
        dropout: 1.0,
        ..ModelConfig::default()
    }
    .validate()
    .is_err());
    assert!(ModelConfig {
        k: 0.0,
        ..ModelConfig::default()
    }
    .validate()
    .is_err());
    assert!("bogus".parse::<Variant>().is_err());
    assert_eq!("FULL".parse::<Variant>().unwrap(), Variant::Full);
}
