//! Ranking metrics and full-catalog leave-one-out evaluation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::SequenceDataset;
use crate::error::{Error, Result};
use crate::model::{score_sequences, ModelState};

/// Means over users of hit ratio, NDCG and reciprocal rank at cutoff `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub mrr: f64,
    pub n_users: usize,
}

/// Metrics from 1-based target ranks.
pub fn metrics_from_ranks(ranks: &[usize], k: usize) -> Result<Metrics> {
    if k == 0 {
        return Err(Error::InvalidArgument("cutoff must be at least 1".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::InvalidArgument("ranks are 1-based".into()));
    }
    let (mut hr, mut ndcg, mut mrr) = (0.0, 0.0, 0.0);
    for &r in ranks {
        if r <= k {
            hr += 1.0;
            ndcg += 1.0 / ((r + 1) as f64).log2();
            mrr += 1.0 / r as f64;
        }
    }
    let n = ranks.len().max(1) as f64;
    Ok(Metrics {
        k,
        hr: hr / n,
        ndcg: ndcg / n,
        mrr: mrr / n,
        n_users: ranks.len(),
    })
}

/// Metrics from per-user ranked item lists and held-out targets.
pub fn compute_metrics(rankings: &[Vec<usize>], targets: &[usize], k: usize) -> Result<Metrics> {
    if rankings.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: rankings.len(),
            got: targets.len(),
        });
    }
    let ranks = rankings
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(u, (ranking, &t))| {
            ranking
                .iter()
                .position(|&i| i == t)
                .map(|p| p + 1)
                .ok_or_else(|| Error::Protocol(format!("target {t} of user {u} is not among the candidates")))
        })
        .collect::<Result<Vec<_>>>()?;
    metrics_from_ranks(&ranks, k)
}

/// 1-based rank of `target` among the candidate items (every item id in
/// `1..=scores.len()` not in `excluded`, the target always kept), with ties
/// broken by ascending id.
pub fn target_rank(scores: &[f64], target: usize, excluded: &[usize]) -> Result<usize> {
    if target == 0 || target > scores.len() {
        return Err(Error::Protocol(format!("target {target} is outside the catalog")));
    }
    let st = scores[target - 1];
    let mut rank = 1;
    for (j, &s) in scores.iter().enumerate() {
        let id = j + 1;
        if id == target || excluded.contains(&id) {
            continue;
        }
        if s > st || (s == st && id < target) {
            rank += 1;
        }
    }
    Ok(rank)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub split: Split,
    pub ks: Vec<usize>,
    /// Remove the user's input items from the candidates.
    pub exclude_history: bool,
    /// Upper bounds (exclusive) of training-length buckets; empty disables
    /// the breakdown.
    pub buckets: Vec<usize>,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            ks: vec![1, 5, 10, 20],
            exclude_history: false,
            buckets: Vec::new(),
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub label: String,
    pub metrics: Vec<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub metrics: Vec<Metrics>,
    pub buckets: Vec<BucketReport>,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&Metrics> {
        self.metrics.iter().find(|m| m.k == k)
    }

    /// One `metric=… k=… value=… n_users=…` line per metric and cutoff.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let mut emit = |scope: &str, ms: &[Metrics]| {
            for m in ms {
                for (name, v) in [("hr", m.hr), ("ndcg", m.ndcg), ("mrr", m.mrr)] {
                    let _ = writeln!(
                        out,
                        "split={} bucket={} metric={} k={} value={:.6} n_users={}",
                        self.split.name(),
                        scope,
                        name,
                        m.k,
                        v,
                        m.n_users
                    );
                }
            }
        };
        emit("all", &self.metrics);
        for b in &self.buckets {
            emit(&b.label, &b.metrics);
        }
        out
    }

    /// Aligned human-readable table.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:>4} {:>8} {:>8} {:>8} {:>7}\n", "bucket", "K", "HR", "NDCG", "MRR", "users");
        let rows = std::iter::once(("all", &self.metrics)).chain(self.buckets.iter().map(|b| (b.label.as_str(), &b.metrics)));
        for (label, ms) in rows {
            for m in ms.iter() {
                let _ = writeln!(
                    out,
                    "{:<10} {:>4} {:>8.4} {:>8.4} {:>8.4} {:>7}",
                    label, m.k, m.hr, m.ndcg, m.mrr, m.n_users
                );
            }
        }
        out
    }
}

fn bucket_label(bounds: &[usize], i: usize) -> String {
    if i < bounds.len() {
        format!("<{}", bounds[i])
    } else {
        format!(">={}", bounds.last().copied().unwrap_or(0))
    }
}

/// Per-user target ranks for a split, in dataset user order.
pub fn rank_targets(model: &ModelState, data: &SequenceDataset, opts: &EvalOptions) -> Result<Vec<usize>> {
    if data.vocab_size() > model.config().vocab_size {
        return Err(Error::Compatibility(format!(
            "dataset has {} items but the model scores {}",
            data.n_items(),
            model.config().n_items()
        )));
    }
    let mut ranks = Vec::with_capacity(data.users.len());
    for chunk in data.users.chunks(opts.batch_size.max(1)) {
        let inputs: Vec<Vec<usize>> = chunk
            .iter()
            .map(|u| match opts.split {
                Split::Valid => u.valid_input(),
                Split::Test => u.test_input(),
            })
            .collect();
        let refs: Vec<&[usize]> = inputs.iter().map(|v| v.as_slice()).collect();
        let scores = score_sequences(model, &refs)?;
        for ((u, input), s) in chunk.iter().zip(&inputs).zip(&scores) {
            let target = match opts.split {
                Split::Valid => u.valid,
                Split::Test => u.test,
            };
            let excluded: &[usize] = if opts.exclude_history { input } else { &[] };
            ranks.push(target_rank(s, target, excluded)?);
        }
    }
    Ok(ranks)
}

/// Full-catalog leave-one-out evaluation at every cutoff in `opts.ks`.
pub fn evaluate(model: &ModelState, data: &SequenceDataset, opts: &EvalOptions) -> Result<EvalReport> {
    let ranks = rank_targets(model, data, opts)?;
    let metrics = opts
        .ks
        .iter()
        .map(|&k| metrics_from_ranks(&ranks, k))
        .collect::<Result<Vec<_>>>()?;
    let mut buckets = Vec::new();
    if !opts.buckets.is_empty() {
        let mut bounds = opts.buckets.clone();
        bounds.sort_unstable();
        bounds.dedup();
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); bounds.len() + 1];
        for (u, &r) in data.users.iter().zip(&ranks) {
            let i = bounds.iter().position(|&b| u.train.len() < b).unwrap_or(bounds.len());
            groups[i].push(r);
        }
        for (i, g) in groups.iter().enumerate() {
            if g.is_empty() {
                continue;
            }
            buckets.push(BucketReport {
                label: bucket_label(&bounds, i),
                metrics: opts
                    .ks
                    .iter()
                    .map(|&k| metrics_from_ranks(g, k))
                    .collect::<Result<Vec<_>>>()?,
            });
        }
    }
    Ok(EvalReport {
        split: opts.split,
        metrics,
        buckets,
    })
}
