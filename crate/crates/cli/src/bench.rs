//! Forward-pass timing across sequence lengths.

use std::time::Instant;

use hmamba::autodiff::Graph;
use hmamba::model::{encode, ForwardOptions, ModelConfig, ModelState, ParamVars, SequenceBatch, Variant};
use hmamba::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::CliError;

/// Name of the quadratic reference in the variant list.
pub const ATTENTION: &str = "attention";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: String,
    pub len: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub reps: usize,
}

pub const CSV_HEADER: &str = "variant,L,mean_ms,std_ms,reps";

impl BenchRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{}",
            self.variant, self.len, self.mean_ms, self.std_ms, self.reps
        )
    }
}

/// Mean and sample standard deviation in milliseconds of `reps` timed calls
/// after `warmup` untimed ones.
pub fn time_ms<F: FnMut()>(mut f: F, warmup: usize, reps: usize) -> (f64, f64) {
    for _ in 0..warmup {
        f();
    }
    let samples: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Single-head causal softmax self-attention, `O(L² d)`.
pub struct AttentionReference {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
}

impl AttentionReference {
    pub fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut w = || {
            Tensor::matrix(d, d, (0..d * d).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
        };
        Self {
            wq: w(),
            wk: w(),
            wv: w(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (len, d) = (x.rows(), x.cols());
        let q = x.matmul(&self.wq);
        let k = x.matmul(&self.wk);
        let v = x.matmul(&self.wv);
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = vec![0.0; len * d];
        let mut w = vec![0.0; len];
        for i in 0..len {
            let qi = q.row(i);
            let mut m = f64::NEG_INFINITY;
            for j in 0..=i {
                let s = qi.iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale;
                w[j] = s;
                m = m.max(s);
            }
            let mut z = 0.0;
            for wj in w.iter_mut().take(i + 1) {
                *wj = (*wj - m).exp();
                z += *wj;
            }
            let o = &mut out[i * d..(i + 1) * d];
            for (j, wj) in w.iter().enumerate().take(i + 1) {
                let a = wj / z;
                for (ov, vv) in o.iter_mut().zip(v.row(j)) {
                    *ov += a * vv;
                }
            }
        }
        Tensor::matrix(len, d, out).expect("shape")
    }
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub lengths: Vec<usize>,
    pub variants: Vec<String>,
    pub warmup: usize,
    pub reps: usize,
    pub d: usize,
    pub d_state: usize,
    pub seed: u64,
}

/// Times one encoder forward (or the attention reference) per variant and
/// length.
pub fn run(spec: &BenchSpec, mut progress: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>, CliError> {
    let n_items = 1000;
    let mut rows = Vec::new();
    for name in &spec.variants {
        for &len in &spec.lengths {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let ids: Vec<usize> = (0..len).map(|_| rng.random_range(1..=n_items)).collect();
            let (mean_ms, std_ms) = if name == ATTENTION {
                let x = Tensor::matrix(
                    len,
                    spec.d,
                    (0..len * spec.d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .expect("shape");
                let att = AttentionReference::new(spec.d, &mut rng);
                time_ms(
                    || {
                        std::hint::black_box(att.forward(&x));
                    },
                    spec.warmup,
                    spec.reps,
                )
            } else {
                let variant: Variant = name
                    .parse()
                    .map_err(|e: hmamba::Error| CliError::Usage(e.to_string()))?;
                let cfg = ModelConfig {
                    variant,
                    d: spec.d,
                    d_state: spec.d_state,
                    max_seq_len: len,
                    vocab_size: n_items + 1,
                    ..ModelConfig::default()
                };
                let model = ModelState::init(cfg, spec.seed)?;
                let batch = SequenceBatch::new(&[&ids], len);
                let mut failure = None;
                let timing = time_ms(
                    || {
                        let mut g = Graph::new();
                        let vars = ParamVars::bind(&mut g, &model, false);
                        match encode(&mut g, &model, &vars, &batch, &mut ForwardOptions::eval()) {
                            Ok(enc) => {
                                std::hint::black_box(g.value(enc.states));
                            }
                            Err(e) => failure = Some(e),
                        }
                    },
                    spec.warmup,
                    spec.reps,
                );
                if let Some(e) = failure {
                    return Err(e.into());
                }
                timing
            };
            let row = BenchRow {
                variant: name.clone(),
                len,
                mean_ms,
                std_ms,
                reps: spec.reps,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}
