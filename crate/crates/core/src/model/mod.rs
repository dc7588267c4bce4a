//! Sequential recommendation models: embedding, hyperbolic lifting, the
//! selective state-space encoder, scoring heads and losses.

pub mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::geometry::{
    distance_matrix, exp_origin, log_origin, max_manifold_residual, mobius_residual,
};
use crate::autodiff::{Fault, Graph, Unary, Var};
use crate::error::{Error, Result};
use crate::lorentz::{
    exp_map_origin, hyperbolic_distance, lift, Curvature, LorentzPoint, Tolerance,
};
use crate::ssm::{curvature_scale, softplus_inverse};
use crate::tensor::Tensor;

/// Reserved padding item id.
pub const PAD: usize = 0;

/// Initial step size of the selective scan.
pub const INITIAL_DELTA: f64 = 0.01;

const LAYER_NORM_EPS: f64 = 1e-5;
const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Hyperbolic encoder, negative-distance scores, softmax cross-entropy.
    Full,
    /// Hyperbolic encoder, log-mapped dot-product scores, sampled BCE.
    Half,
    /// Euclidean selective-SSM reference.
    Euclidean,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::Half, Variant::Euclidean];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Half => "half",
            Variant::Euclidean => "euclidean",
        }
    }

    pub fn is_hyperbolic(self) -> bool {
        !matches!(self, Variant::Euclidean)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Variant::Full),
            "half" => Ok(Variant::Half),
            "euclidean" => Ok(Variant::Euclidean),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant {other:?} (expected full, half or euclidean)"
            ))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Embedding width.
    pub d: usize,
    /// State size per channel.
    pub d_state: usize,
    /// Inner width multiplier of the encoder.
    pub expand: usize,
    pub conv_width: usize,
    pub n_layers: usize,
    /// Hyperboloid parameter; sectional curvature is `-1/k`.
    pub k: f64,
    pub dropout: f64,
    pub max_seq_len: usize,
    /// Catalog size including the padding id.
    pub vocab_size: usize,
    pub eps_arcosh: f64,
    pub eps_norm: f64,
    /// Tangent vectors entering `exp_o` are shortened to at most
    /// `tangent_clip · √k`; `0` disables the bound.
    #[serde(default = "default_tangent_clip")]
    pub tangent_clip: f64,
}

fn default_tangent_clip() -> f64 {
    DEFAULT_TANGENT_CLIP
}

/// Default radius, in units of `√k`, of the tangent-norm bound.
pub const DEFAULT_TANGENT_CLIP: f64 = 8.0;

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            d: 32,
            d_state: 32,
            expand: 2,
            conv_width: 2,
            n_layers: 1,
            k: 1.0,
            dropout: 0.1,
            max_seq_len: 50,
            vocab_size: 2,
            eps_arcosh: 1e-12,
            eps_norm: 1e-12,
            tangent_clip: DEFAULT_TANGENT_CLIP,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.d == 0 || self.d_state == 0 || self.n_layers == 0 || self.expand == 0 {
            return bad("d, d_state, expand and n_layers must be at least 1");
        }
        if self.conv_width == 0 {
            return bad("conv_width must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be at least 1");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must include the padding id and at least one item");
        }
        if !(self.tangent_clip >= 0.0) || !self.tangent_clip.is_finite() {
            return bad("tangent_clip must be finite and nonnegative");
        }
        Curvature::new(self.k)?;
        Tolerance::new(self.eps_arcosh, self.eps_norm)?;
        Ok(())
    }

    pub fn curvature(&self) -> Curvature {
        Curvature::new(self.k).expect("validated curvature")
    }

    pub fn tolerance(&self) -> Tolerance {
        Tolerance::new(self.eps_arcosh, self.eps_norm).expect("validated tolerance")
    }

    /// Inner channel count `expand · d`.
    pub fn inner(&self) -> usize {
        self.expand * self.d
    }

    /// Number of scorable items (padding excluded).
    pub fn n_items(&self) -> usize {
        self.vocab_size - 1
    }
}

/// Per-layer parameter names in storage order.
pub const LAYER_PARAMS: [&str; 12] = [
    "ln_gamma",
    "ln_beta",
    "in_proj",
    "conv_weight",
    "conv_bias",
    "delta_weight",
    "delta_bias",
    "b_proj",
    "c_proj",
    "a_log",
    "d_skip",
    "out_proj",
];

#[derive(Clone, Copy)]
enum L {
    LnGamma,
    LnBeta,
    InProj,
    ConvWeight,
    ConvBias,
    DeltaWeight,
    DeltaBias,
    BProj,
    CProj,
    ALog,
    DSkip,
    OutProj,
}

pub const EMBEDDING: &str = "item_embedding";

/// All learnable tensors, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    params: Vec<(String, Tensor)>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

impl ModelState {
    /// Seeded initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, inner, s, w) = (config.d, config.inner(), config.d_state, config.conv_width);
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let mut emb: Vec<f64> = (0..config.vocab_size * d).map(|_| normal.sample(&mut rng)).collect();
        emb[..d].iter_mut().for_each(|v| *v = 0.0);
        let mut params = vec![(
            EMBEDDING.to_string(),
            Tensor::matrix(config.vocab_size, d, emb)?,
        )];
        for l in 0..config.n_layers {
            let a_log = (0..s).map(|i| ((i + 1) as f64).ln()).collect();
            let tensors = [
                Tensor::full(&[1, d], 1.0),
                Tensor::zeros(&[1, d]),
                uniform(&mut rng, d, 2 * inner, 1.0 / (d as f64).sqrt()),
                uniform(&mut rng, w, inner, 1.0 / (w as f64).sqrt()),
                Tensor::zeros(&[1, inner]),
                uniform(&mut rng, inner, 1, 1.0 / (inner as f64).sqrt()),
                Tensor::scalar(softplus_inverse(INITIAL_DELTA)),
                uniform(&mut rng, inner, s, 1.0 / (inner as f64).sqrt()),
                uniform(&mut rng, inner, s, 1.0 / (inner as f64).sqrt()),
                Tensor::matrix(1, s, a_log)?,
                Tensor::full(&[1, inner], 1.0),
                uniform(&mut rng, inner, d, 1.0 / (inner as f64).sqrt()),
            ];
            for (name, t) in LAYER_PARAMS.iter().zip(tensors) {
                params.push((format!("layers.{l}.{name}"), t));
            }
        }
        Ok(Self { config, params })
    }

    /// Rebuild from named tensors, checking names and shapes against the
    /// configuration.
    pub fn from_parts(config: ModelConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Compatibility(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for ((rn, rt), (n, t)) in reference.params.iter().zip(&params) {
            if rn != n || rt.shape() != t.shape() {
                return Err(Error::Compatibility(format!(
                    "parameter {n} {:?} does not match expected {rn} {:?}",
                    t.shape(),
                    rt.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Compatibility(format!("parameter {n} has non-finite entries")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn embedding(&self) -> &Tensor {
        &self.params[0].1
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|(_, t)| t.is_finite())
    }

    /// Parameter group of a tensor name: `item_embedding` or the layer-local
    /// name such as `in_proj`.
    pub fn group_of(name: &str) -> &str {
        name.rsplit('.').next().unwrap_or(name)
    }

    fn layer_index(&self, layer: usize, which: L) -> usize {
        1 + layer * LAYER_PARAMS.len() + which as usize
    }
}

/// Left-padded batch of item-id sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl SequenceBatch {
    /// Keeps the most recent `len` ids of each sequence and left-pads with
    /// [`PAD`].
    pub fn new(seqs: &[&[usize]], len: usize) -> Self {
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            let tail = &s[s.len().saturating_sub(len)..];
            ids.extend(std::iter::repeat_n(PAD, len - tail.len()));
            ids.extend_from_slice(tail);
        }
        Self {
            ids,
            batch: seqs.len(),
            len,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }

    /// `rows × 1` indicator of non-padding positions.
    pub fn mask(&self) -> Tensor {
        let m = self.ids.iter().map(|&i| if i == PAD { 0.0 } else { 1.0 }).collect();
        Tensor::matrix(self.rows(), 1, m).expect("shape")
    }

    /// Row index of each sequence's last position.
    pub fn last_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| (b + 1) * self.len - 1).collect()
    }
}

/// Next-item supervision for one batch: `targets[r]` is the item following
/// row `r` (or [`PAD`] when the row carries no target) and `negatives[r]`
/// a sampled non-target item.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub inputs: SequenceBatch,
    pub targets: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl TrainingBatch {
    /// Shift-by-one pairs from full sequences, truncated to the last `len`
    /// transitions. Negatives are drawn uniformly from the catalog excluding
    /// the target.
    pub fn from_sequences(seqs: &[&[usize]], len: usize, n_items: usize, rng: &mut ChaCha8Rng) -> Self {
        let inputs: Vec<&[usize]> = seqs.iter().map(|s| &s[..s.len().saturating_sub(1)]).collect();
        let outputs: Vec<&[usize]> = seqs.iter().map(|s| if s.is_empty() { *s } else { &s[1..] }).collect();
        let inputs = SequenceBatch::new(&inputs, len);
        let targets = SequenceBatch::new(&outputs, len).ids;
        let negatives = targets
            .iter()
            .map(|&t| {
                if t == PAD || n_items < 2 {
                    PAD
                } else {
                    let mut n = rng.random_range(1..n_items);
                    if n >= t {
                        n += 1;
                    }
                    n
                }
            })
            .collect();
        Self {
            inputs,
            targets,
            negatives,
        }
    }

    pub fn n_targets(&self) -> usize {
        self.targets.iter().filter(|&&t| t != PAD).count()
    }
}

/// Graph handles of every parameter, aligned with [`ModelState::params`].
#[derive(Debug, Clone)]
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    pub fn bind(g: &mut Graph, model: &ModelState, trainable: bool) -> Self {
        Self(
            model
                .params
                .iter()
                .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
                .collect(),
        )
    }
}

/// Outputs of an encoder pass.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `rows × (d+1)` points for hyperbolic variants, `rows × d` otherwise.
    pub states: Var,
    /// Every hyperbolic intermediate, for constraint monitoring.
    pub hyperbolic: Vec<Var>,
}

/// Options for one forward pass.
pub struct ForwardOptions<'a> {
    /// Dropout randomness; `None` disables dropout.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        Self { dropout_rng: None }
    }
}

fn layer_norm(g: &mut Graph, u: Var, gamma: Var, beta: Var) -> Var {
    let d = g.shape(u).1 as f64;
    let s = g.row_sum(u);
    let mean = g.scale(s, 1.0 / d);
    let c = g.sub(u, mean);
    let c2 = g.square(c);
    let vs = g.row_sum(c2);
    let var = g.scale(vs, 1.0 / d);
    let ve = g.offset(var, LAYER_NORM_EPS);
    let sd = g.sqrt(ve);
    let inv = g.recip(sd);
    let n = g.mul(c, inv);
    let scaled = g.mul(n, gamma);
    g.add(scaled, beta)
}

/// `exp_o` after shortening rows longer than `tangent_clip · √k`. Rows
/// inside the bound pass through unchanged.
fn bounded_exp(g: &mut Graph, v: Var, cfg: &ModelConfig) -> Var {
    if cfg.tangent_clip == 0.0 {
        return exp_origin(g, v, cfg.k);
    }
    let radius = cfg.tangent_clip * cfg.k.sqrt();
    let n = g.row_norm(v, 0.0);
    let floor = g.clamp(n, radius, f64::INFINITY);
    let inv = g.recip(floor);
    let factor = g.scale(inv, radius);
    let shortened = g.mul(v, factor);
    exp_origin(g, shortened, cfg.k)
}

/// One encoder layer on the tape.
///
/// For hyperbolic variants `input` holds points; the layer maps them to the
/// origin tangent space, normalizes, projects, convolves, runs the selective
/// scan with the carry transported between consecutive token basepoints,
/// gates, maps the update back with `exp_o` and Möbius-combines it with the
/// input. The Euclidean variant uses the same block with a plain residual.
#[allow(clippy::too_many_arguments)]
fn layer_forward(
    g: &mut Graph,
    model: &ModelState,
    vars: &ParamVars,
    layer: usize,
    input: Var,
    batch: &SequenceBatch,
    mask: Var,
    opts: &mut ForwardOptions<'_>,
    hyperbolic: &mut Vec<Var>,
) -> Var {
    let cfg = &model.config;
    let p = |w: L| vars.0[model.layer_index(layer, w)];
    let k = cfg.k;
    let inner = cfg.inner();
    let u = if cfg.variant.is_hyperbolic() {
        log_origin(g, input, k)
    } else {
        input
    };
    let mut y = layer_norm(g, u, p(L::LnGamma), p(L::LnBeta));
    if let Some(rng) = opts.dropout_rng.as_deref_mut() {
        if cfg.dropout > 0.0 {
            let (r, c) = g.shape(y);
            let keep = 1.0 / (1.0 - cfg.dropout);
            let m = (0..r * c)
                .map(|_| if rng.random::<f64>() < cfg.dropout { 0.0 } else { keep })
                .collect();
            let mv = g.constant(Tensor::matrix(r, c, m).expect("shape"));
            y = g.mul(y, mv);
        }
    }
    let xz = g.matmul(y, p(L::InProj));
    let x_raw = g.slice_cols(xz, 0, inner);
    let x_in = g.mul(x_raw, mask);
    let z = g.slice_cols(xz, inner, 2 * inner);
    let conv = g.causal_conv(x_in, p(L::ConvWeight), batch.batch, batch.len);
    let conv = g.add(conv, p(L::ConvBias));
    let xa = g.silu(conv);

    let dw = g.matmul(xa, p(L::DeltaWeight));
    let dpre = g.add(dw, p(L::DeltaBias));
    let delta = g.softplus(dpre);
    let bt = g.matmul(xa, p(L::BProj));
    let ct = g.matmul(xa, p(L::CProj));
    let ea = g.exp(p(L::ALog));
    let mut a = g.neg(ea);
    if cfg.variant == Variant::Full {
        let scale = curvature_scale(cfg.d_state, cfg.curvature());
        let kv = g.constant(Tensor::matrix(1, cfg.d_state, scale).expect("shape"));
        a = g.mul(a, kv);
    }
    let da = g.mul(delta, a);
    let a_bar = g.exp(da);
    let gain = g.unary(Unary::Phi1, da);
    let gain = g.mul(gain, delta);
    let b_bar = g.mul(gain, bt);
    let b_bar = g.mul(b_bar, mask);

    let basepoints = if cfg.variant.is_hyperbolic() {
        let pts = bounded_exp(g, xa, cfg);
        hyperbolic.push(pts);
        Some(pts)
    } else {
        None
    };
    let scanned = g.selective_scan(a_bar, b_bar, ct, xa, basepoints, k, batch.batch, batch.len);
    let skip = g.mul(xa, p(L::DSkip));
    let ys = g.add(scanned, skip);
    let gate = g.silu(z);
    let gated = g.mul(ys, gate);
    let br = g.matmul(gated, p(L::OutProj));
    let br = g.mul(br, mask);
    if cfg.variant.is_hyperbolic() {
        let m = bounded_exp(g, br, cfg);
        hyperbolic.push(m);
        let out = mobius_residual(g, input, m, k);
        hyperbolic.push(out);
        out
    } else {
        g.add(input, br)
    }
}

/// Embeds a batch and runs every encoder layer.
pub fn encode(
    g: &mut Graph,
    model: &ModelState,
    vars: &ParamVars,
    batch: &SequenceBatch,
    opts: &mut ForwardOptions<'_>,
) -> Result<Encoded> {
    let cfg = &model.config;
    if let Some(&bad) = batch.ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Vocabulary {
            id: bad,
            vocab: cfg.vocab_size,
        });
    }
    let mask = g.constant(batch.mask());
    let x = g.gather_rows(vars.0[0], &batch.ids);
    let mut hyperbolic = Vec::new();
    let mut h = if cfg.variant.is_hyperbolic() {
        let h = bounded_exp(g, x, cfg);
        hyperbolic.push(h);
        h
    } else {
        x
    };
    for layer in 0..cfg.n_layers {
        h = layer_forward(g, model, vars, layer, h, batch, mask, opts, &mut hyperbolic);
    }
    Ok(Encoded {
        states: h,
        hyperbolic,
    })
}

/// Item representations used for scoring, rows `1..vocab_size`.
pub fn item_table(g: &mut Graph, model: &ModelState, vars: &ParamVars) -> Var {
    let ids: Vec<usize> = (1..model.config.vocab_size).collect();
    let e = g.gather_rows(vars.0[0], &ids);
    if model.config.variant == Variant::Full {
        bounded_exp(g, e, &model.config)
    } else {
        e
    }
}

/// Manifold points of every non-padding item as used for scoring by the
/// Full variant.
pub fn item_points(model: &ModelState) -> Result<Vec<LorentzPoint>> {
    let cfg = &model.config;
    let mut g = Graph::new();
    let vars = ParamVars::bind(&mut g, model, false);
    let ids: Vec<usize> = (1..cfg.vocab_size).collect();
    let e = g.gather_rows(vars.0[0], &ids);
    let pts = bounded_exp(&mut g, e, cfg);
    let t = g.value(pts);
    (0..t.rows())
        .map(|i| LorentzPoint::new(t.row(i).to_vec(), cfg.curvature()))
        .collect()
}

/// Score matrix `rows × n_items` for the given encoder rows; column `j`
/// scores item `j + 1`.
pub fn score_rows(
    g: &mut Graph,
    model: &ModelState,
    vars: &ParamVars,
    enc: &Encoded,
    rows: &[usize],
) -> Result<Var> {
    let cfg = &model.config;
    let reps = g.gather_rows(enc.states, rows);
    let items = item_table(g, model, vars);
    match cfg.variant {
        Variant::Full => {
            let d = distance_matrix(g, reps, items, cfg.k, cfg.eps_arcosh)?;
            Ok(g.neg(d))
        }
        Variant::Half => {
            let e_hat = log_origin(g, reps, cfg.k);
            let it = g.transpose(items);
            Ok(g.matmul(e_hat, it))
        }
        Variant::Euclidean => {
            let it = g.transpose(items);
            Ok(g.matmul(reps, it))
        }
    }
}

/// Scalar training loss of one batch, averaged over supervised positions.
pub fn training_loss(
    g: &mut Graph,
    model: &ModelState,
    vars: &ParamVars,
    batch: &TrainingBatch,
    opts: &mut ForwardOptions<'_>,
) -> Result<(Var, Encoded)> {
    let cfg = &model.config;
    let enc = encode(g, model, vars, &batch.inputs, opts)?;
    let rows: Vec<usize> = (0..batch.targets.len()).filter(|&r| batch.targets[r] != PAD).collect();
    if rows.is_empty() {
        return Err(Error::InvalidArgument("batch has no supervised positions".into()));
    }
    let n = rows.len() as f64;
    let loss = match cfg.variant {
        Variant::Full | Variant::Euclidean => {
            let scores = score_rows(g, model, vars, &enc, &rows)?;
            let cols: Vec<usize> = rows.iter().map(|&r| batch.targets[r] - 1).collect();
            let lse = g.log_sum_exp_rows(scores);
            let picked = g.pick(scores, &cols);
            let per = g.sub(lse, picked);
            let total = g.sum_all(per);
            g.scale(total, 1.0 / n)
        }
        Variant::Half => {
            let reps = g.gather_rows(enc.states, &rows);
            let e_hat = log_origin(g, reps, cfg.k);
            let pos_ids: Vec<usize> = rows.iter().map(|&r| batch.targets[r]).collect();
            let neg_ids: Vec<usize> = rows.iter().map(|&r| batch.negatives[r]).collect();
            let pos = g.gather_rows(vars.0[0], &pos_ids);
            let neg = g.gather_rows(vars.0[0], &neg_ids);
            let sp = g.mul(e_hat, pos);
            let sp = g.row_sum(sp);
            let sn = g.mul(e_hat, neg);
            let sn = g.row_sum(sn);
            let sp = g.clamp(sp, -LOGIT_CLAMP, LOGIT_CLAMP);
            let sn = g.clamp(sn, -LOGIT_CLAMP, LOGIT_CLAMP);
            let nsp = g.neg(sp);
            let lp = g.softplus(nsp);
            let ln = g.softplus(sn);
            let both = g.add(lp, ln);
            let total = g.sum_all(both);
            g.scale(total, 1.0 / n)
        }
    };
    Ok((loss, enc))
}

/// Largest relative constraint violation over the hyperbolic intermediates.
pub fn max_residual(g: &Graph, enc: &Encoded, k: f64) -> f64 {
    enc.hyperbolic
        .iter()
        .map(|&v| max_manifold_residual(g.value(v), k))
        .fold(0.0, f64::max)
}

/// Scores of every catalog item for the last position of each sequence.
pub fn score_sequences(model: &ModelState, seqs: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
    if seqs.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidArgument("cannot score an empty sequence".into()));
    }
    let mut g = Graph::new();
    let vars = ParamVars::bind(&mut g, model, false);
    let batch = SequenceBatch::new(seqs, model.config.max_seq_len);
    let enc = encode(&mut g, model, &vars, &batch, &mut ForwardOptions::eval())?;
    let s = score_rows(&mut g, model, &vars, &enc, &batch.last_rows())?;
    let t = g.value(s);
    Ok((0..t.rows()).map(|i| t.row(i).to_vec()).collect())
}

/// How scores were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreKind {
    Dot,
    NegDistance,
}

/// Scores over non-padding items; `scores[j]` belongs to item `j + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub kind: ScoreKind,
}

impl ScoreVector {
    /// Item ids by descending score, ties broken by ascending id.
    pub fn ranking(&self) -> Vec<usize> {
        rank_items(&self.scores)
    }
}

/// Item ids (1-based) sorted by descending score, ties by ascending id.
pub fn rank_items(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (1..=scores.len()).collect();
    ids.sort_by(|&a, &b| {
        scores[b - 1]
            .partial_cmp(&scores[a - 1])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids
}

/// Rows of `table` for the given ids; padding rows come out zero.
pub fn embed_sequence(items: &[usize], table: &Tensor) -> Result<Tensor> {
    let (v, d) = (table.rows(), table.cols());
    let mut out = Vec::with_capacity(items.len() * d);
    for &i in items {
        if i >= v {
            return Err(Error::Vocabulary { id: i, vocab: v });
        }
        if i == PAD {
            out.extend(std::iter::repeat_n(0.0, d));
        } else {
            out.extend_from_slice(table.row(i));
        }
    }
    Tensor::matrix(items.len(), d, out)
}

/// `exp_o(lift(row))` for every row.
pub fn to_hyperbolic(e: &Tensor, k: Curvature, tol: &Tolerance) -> Result<Vec<LorentzPoint>> {
    (0..e.rows())
        .map(|i| exp_map_origin(&lift(e.row(i), k), tol))
        .collect()
}

fn points_tensor(points: &[LorentzPoint]) -> Result<Tensor> {
    let cols = points.first().map_or(0, |p| p.coords().len());
    let mut data = Vec::with_capacity(points.len() * cols);
    for p in points {
        if p.coords().len() != cols {
            return Err(Error::DimensionMismatch {
                expected: cols,
                got: p.coords().len(),
            });
        }
        data.extend_from_slice(p.coords());
    }
    Tensor::matrix(points.len(), cols, data)
}

/// Applies encoder layer `layer` of a hyperbolic model to one sequence of
/// points (all positions treated as real items).
pub fn encoder_layer_forward(
    h: &[LorentzPoint],
    model: &ModelState,
    layer: usize,
) -> Result<Vec<LorentzPoint>> {
    let cfg = &model.config;
    if !cfg.variant.is_hyperbolic() {
        return Err(Error::UnsupportedMode("encoder_layer_forward needs a hyperbolic variant".into()));
    }
    if layer >= cfg.n_layers {
        return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
    }
    if h.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    let k = cfg.curvature();
    for p in h {
        if p.curvature() != k || p.dim() != cfg.d {
            return Err(Error::Domain("input point does not match the model's manifold".into()));
        }
        if p.manifold_residual() > crate::lorentz::MANIFOLD_CHECK_TOL * k.k() {
            return Err(Error::Domain("input point is off the manifold".into()));
        }
    }
    let mut g = Graph::new();
    let vars = ParamVars::bind(&mut g, model, false);
    let input = g.constant(points_tensor(h)?);
    let batch = SequenceBatch {
        ids: vec![1; h.len()],
        batch: 1,
        len: h.len(),
    };
    let mask = g.constant(batch.mask());
    let mut trace = Vec::new();
    let out = layer_forward(
        &mut g,
        model,
        &vars,
        layer,
        input,
        &batch,
        mask,
        &mut ForwardOptions::eval(),
        &mut trace,
    );
    let t = g.value(out);
    (0..t.rows())
        .map(|i| LorentzPoint::new(t.row(i).to_vec(), k))
        .collect()
}

/// Dot-product scores `e_hat · E_i` for every non-padding row of `table`.
pub fn score_half(e_hat: &[f64], table: &Tensor) -> Result<ScoreVector> {
    if e_hat.len() != table.cols() {
        return Err(Error::DimensionMismatch {
            expected: table.cols(),
            got: e_hat.len(),
        });
    }
    let scores = (1..table.rows())
        .map(|i| table.row(i).iter().zip(e_hat).map(|(a, b)| a * b).sum())
        .collect();
    Ok(ScoreVector {
        scores,
        kind: ScoreKind::Dot,
    })
}

/// Negative hyperbolic distances to every non-padding entry of
/// `hyper_table` (index 0 is the padding item and is skipped).
pub fn score_full(h_hat: &LorentzPoint, hyper_table: &[LorentzPoint], tol: &Tolerance) -> Result<ScoreVector> {
    let scores = hyper_table
        .iter()
        .skip(1)
        .map(|p| hyperbolic_distance(h_hat, p, tol).map(|d| -d))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreVector {
        scores,
        kind: ScoreKind::NegDistance,
    })
}

/// Binary cross-entropy summed over all terms, logits clamped to `[-30, 30]`.
pub fn loss_half(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let sp = |x: f64| crate::ssm::softplus(x);
    Ok(scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let s = s.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
            y * sp(-s) + (1.0 - y) * sp(s)
        })
        .sum())
}

/// Softmax cross-entropy of the target item over a full score vector.
pub fn loss_full(scores: &[f64], target: usize) -> Result<f64> {
    if target == PAD {
        return Err(Error::InvalidArgument("target is the padding item".into()));
    }
    if target > scores.len() {
        return Err(Error::Vocabulary {
            id: target,
            vocab: scores.len() + 1,
        });
    }
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    Ok(lse - scores[target - 1])
}

/// The literal hyperbolic objective `-2k - 2 d_L`, kept as a diagnostic.
pub fn literal_hyperbolic_objective(distance: f64, k: f64) -> f64 {
    -2.0 * k - 2.0 * distance
}

/// Full ranking of the catalog for the next item after `sequence`.
pub fn predict_next(model: &ModelState, sequence: &[usize]) -> Result<Vec<usize>> {
    let scores = score_sequences(model, &[sequence])?;
    Ok(rank_items(&scores[0]))
}

/// Forward and backward on one batch; returns the loss, the gradients
/// aligned with the parameters and the largest constraint residual.
pub fn loss_and_grads(
    model: &ModelState,
    batch: &TrainingBatch,
    dropout_rng: Option<&mut ChaCha8Rng>,
    fault: Option<Fault>,
) -> Result<LossAndGrads> {
    let mut g = Graph::with_fault(fault);
    let vars = ParamVars::bind(&mut g, model, true);
    let mut opts = ForwardOptions { dropout_rng };
    let (loss, enc) = training_loss(&mut g, model, &vars, batch, &mut opts)?;
    let value = g.value(loss).data()[0];
    let residual = max_residual(&g, &enc, model.config.k);
    let mut grads = g.backward(loss)?;
    let mut out = Vec::with_capacity(vars.0.len());
    for (v, (_, t)) in vars.0.iter().zip(&model.params) {
        out.push(grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())));
    }
    let d = model.config.d;
    out[0].data_mut()[..d].iter_mut().for_each(|v| *v = 0.0);
    Ok(LossAndGrads {
        loss: value,
        grads: out,
        max_residual: residual,
    })
}

#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub max_residual: f64,
}

/// Loss only, for finite-difference checks.
pub fn loss_value(model: &ModelState, batch: &TrainingBatch) -> Result<f64> {
    let mut g = Graph::new();
    let vars = ParamVars::bind(&mut g, model, false);
    let (loss, _) = training_loss(&mut g, model, &vars, batch, &mut ForwardOptions::eval())?;
    Ok(g.value(loss).data()[0])
}

#[cfg(test)]
mod tests;
