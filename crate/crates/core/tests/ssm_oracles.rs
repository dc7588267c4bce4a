use hmamba::ssm::{ssm_conv, ssm_scan, zoh_discretize, DiscretizedStep, SsmParams};
use hmamba::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Integrates `h' = a h + b x` from `h = 0` over one step of length `delta`
/// with constant input `x = 1` by classical RK4.
fn rk4_one_step(a: f64, b: f64, delta: f64, substeps: usize) -> f64 {
    let f = |h: f64| a * h + b;
    let dt = delta / substeps as f64;
    let mut h = 0.0;
    for _ in 0..substeps {
        let k1 = f(h);
        let k2 = f(h + 0.5 * dt * k1);
        let k3 = f(h + 0.5 * dt * k2);
        let k4 = f(h + dt * k3);
        h += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    h
}

#[test]
fn zoh_matches_rk4_integration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let delta: f64 = rng.random_range(0.01..2.0);
        let a = -rng.random_range(1e-3..1.0) / delta;
        let b: f64 = rng.random_range(-3.0..3.0);
        let (a_bar, b_bar) = zoh_discretize(a, b, delta).unwrap();
        let h = rk4_one_step(a, b, delta, 1000);
        worst = worst.max((h - b_bar).abs());
        assert!((a_bar - (delta * a).exp()).abs() < 1e-15);
    }
    assert!(worst <= 1e-8, "worst {worst}");
}

#[test]
fn printed_input_gain_fails_the_integration_oracle() {
    let (a, b, delta) = (-1.0f64, 1.0f64, 0.1f64);
    let printed = delta / a * (delta * a).exp() * delta * b;
    let h = rk4_one_step(a, b, delta, 1000);
    assert!((printed - h).abs() > 1e-2);
}

fn random_lti(rng: &mut ChaCha8Rng, len: usize, d_state: usize, d_in: usize, d_out: usize) -> (Vec<DiscretizedStep>, Vec<Tensor>, Tensor) {
    let a: Vec<f64> = (0..d_state).map(|_| -rng.random_range(0.05..3.0)).collect();
    let b = Tensor::matrix(d_state, d_in, (0..d_state * d_in).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let c = Tensor::matrix(d_out, d_state, (0..d_out * d_state).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let params = SsmParams::new(a, b, c.clone(), rng.random_range(-3.0..1.0)).unwrap();
    let step = params.discretize();
    let x = Tensor::matrix(len, d_in, (0..len * d_in).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    (vec![step; len], vec![c; len], x)
}

#[test]
fn scan_equals_convolution_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.random_range(1..=64);
        let d_state = rng.random_range(1..=16);
        let d_in = rng.random_range(1..=4);
        let d_out = rng.random_range(1..=4);
        let (steps, c, x) = random_lti(&mut rng, len, d_state, d_in, d_out);
        let s = ssm_scan(&steps, &c, &x).unwrap();
        let v = ssm_conv(&steps, &c, &x).unwrap();
        worst = worst.max(s.max_abs_diff(&v));
    }
    assert!(worst <= 1e-10, "worst {worst}");
}

#[test]
fn named_equivalence_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (len, d_state) in [(16, 4), (32, 8)] {
        let (steps, c, x) = random_lti(&mut rng, len, d_state, 3, 2);
        let s = ssm_scan(&steps, &c, &x).unwrap();
        let v = ssm_conv(&steps, &c, &x).unwrap();
        assert!(s.max_abs_diff(&v) <= 1e-10);
    }
}

#[test]
fn hidden_state_obeys_stability_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let len = 200;
        let d_state = rng.random_range(1..=8);
        let (steps, _, x) = random_lti(&mut rng, len, d_state, 1, 1);
        let step = &steps[0];
        assert!(step.a_bar.iter().all(|&a| a > 0.0 && a < 1.0));
        let a_max = step.a_bar.iter().cloned().fold(0.0, f64::max);
        let mut bx_max = 0.0f64;
        for t in 0..len {
            for i in 0..d_state {
                bx_max = bx_max.max((step.b_bar.row(i)[0] * x.row(t)[0]).abs());
            }
        }
        let bound = bx_max / (1.0 - a_max);
        // Read each state coordinate with a unit read-out vector.
        for i in 0..d_state {
            let mut e = Tensor::zeros(&[1, d_state]);
            e.row_mut(0)[i] = 1.0;
            let h = ssm_scan(&steps, &vec![e; len], &x).unwrap();
            assert!(h.data().iter().all(|v| v.abs() <= bound * (1.0 + 1e-12)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scan_is_causal(seed in any::<u64>(), len in 2usize..24, at in 0usize..24, bump in -5.0f64..5.0) {
        let at = at % len;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut steps, mut c, x) = random_lti(&mut rng, len, 4, 2, 2);
        for t in 0..len {
            steps[t].a_bar.iter_mut().for_each(|a| *a *= rng.random_range(0.5..1.0));
            c[t].data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        let base = ssm_scan(&steps, &c, &x).unwrap();
        let mut y = x.clone();
        y.row_mut(at)[0] += bump;
        let moved = ssm_scan(&steps, &c, &y).unwrap();
        for t in 0..at {
            prop_assert_eq!(base.row(t), moved.row(t));
        }
    }

    #[test]
    fn zoh_gain_is_positive_and_bounded(a in -5.0f64..-1e-6, delta in 1e-4f64..3.0) {
        let (a_bar, b_bar) = zoh_discretize(a, 1.0, delta).unwrap();
        prop_assert!(a_bar > 0.0 && a_bar < 1.0);
        prop_assert!(b_bar > 0.0 && b_bar <= delta);
    }
}
