//! Linear state-space kernels.
//!
//! Continuous dynamics `h' = A h + B x`, `y = C h` with diagonal `A < 0` are
//! discretized with zero-order hold and executed either as a left-to-right
//! scan or, for time-invariant parameters, as a causal convolution with the
//! kernel `(C B̄, C Ā B̄, C Ā² B̄, ...)`. Both routes must agree.
//!
//! [`selective_channel_scan`] is the per-channel layout used by the encoder:
//! every channel carries its own `d_state` hidden vector, the step size and
//! read-in/read-out vectors vary per token, and the recurrent carry can be
//! parallel-transported between the hyperbolic basepoints of consecutive
//! tokens.

use crate::error::{Error, Result};
use crate::lorentz::{transport_into, transport_vjp, Curvature};
use crate::tensor::Tensor;

/// Below this `|Δa|` the ZOH input gain uses its series expansion.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-8;

/// `(e^z - 1) / z`, continuous through `z = 0`.
#[inline]
pub fn phi1(z: f64) -> f64 {
    if z.abs() < ZOH_SERIES_THRESHOLD {
        1.0 + 0.5 * z
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`phi1`].
#[inline]
pub fn phi1_grad(z: f64) -> f64 {
    if z.abs() < 1e-5 {
        0.5 + z / 3.0 + z * z / 8.0
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Zero-order-hold discretization of the scalar system `h' = a h + b x`.
///
/// Returns `(exp(Δa), (exp(Δa) - 1) / a · b)`; the input gain falls back to
/// `Δ b (1 + Δa/2)` when `|Δa|` is tiny.
pub fn zoh_discretize(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive, got {delta}"
        )));
    }
    let z = delta * a;
    Ok((z.exp(), delta * phi1(z) * b))
}

/// Diagonal `K(k) = diag(sqrt(k), 1, ..., 1)` of the curvature-normalized
/// discretization.
pub fn curvature_scale(d_state: usize, k: Curvature) -> Vec<f64> {
    let mut scale = vec![1.0; d_state];
    if let Some(first) = scale.first_mut() {
        *first = k.sqrt_k();
    }
    scale
}

/// `exp(Δ · a ⊙ K(k))`.
pub fn curvature_discretize(a: &[f64], delta: f64, k: Curvature) -> Result<Vec<f64>> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive, got {delta}"
        )));
    }
    Ok(a.iter()
        .zip(curvature_scale(a.len(), k))
        .map(|(ai, s)| (delta * ai * s).exp())
        .collect())
}

/// Continuous time-invariant parameters of a diagonal SSM.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    /// Diagonal of `A`, all entries strictly negative.
    pub a: Vec<f64>,
    /// `d_state × d_in`.
    pub b: Tensor,
    /// `d_out × d_state`.
    pub c: Tensor,
    /// Pre-activation of the step size; `Δ = softplus(log_delta_bias)`.
    pub log_delta_bias: f64,
}

impl SsmParams {
    pub fn new(a: Vec<f64>, b: Tensor, c: Tensor, log_delta_bias: f64) -> Result<Self> {
        if a.iter().any(|&v| !(v < 0.0)) {
            return Err(Error::InvalidArgument(
                "state matrix diagonal must be strictly negative".into(),
            ));
        }
        if b.shape().len() != 2 || b.rows() != a.len() {
            return Err(Error::DimensionMismatch {
                expected: a.len(),
                got: b.shape()[0],
            });
        }
        if c.shape().len() != 2 || c.cols() != a.len() {
            return Err(Error::DimensionMismatch {
                expected: a.len(),
                got: c.shape().get(1).copied().unwrap_or(0),
            });
        }
        Ok(Self {
            a,
            b,
            c,
            log_delta_bias,
        })
    }

    /// Default diagonal `a_i = -(i + 1)`.
    pub fn default_a(d_state: usize) -> Vec<f64> {
        (0..d_state).map(|i| -((i + 1) as f64)).collect()
    }

    pub fn d_state(&self) -> usize {
        self.a.len()
    }

    pub fn delta(&self) -> f64 {
        softplus(self.log_delta_bias)
    }

    /// ZOH discretization at the parameters' own step size.
    pub fn discretize(&self) -> DiscretizedStep {
        let delta = self.delta();
        let d_in = self.b.cols();
        let mut a_bar = Vec::with_capacity(self.a.len());
        let mut b_bar = Vec::with_capacity(self.a.len() * d_in);
        for (i, &ai) in self.a.iter().enumerate() {
            a_bar.push((delta * ai).exp());
            let gain = delta * phi1(delta * ai);
            b_bar.extend(self.b.row(i).iter().map(|bv| gain * bv));
        }
        DiscretizedStep {
            a_bar,
            b_bar: Tensor::matrix(self.a.len(), d_in, b_bar).expect("shape"),
            delta,
        }
    }
}

/// One token's discretized transition.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedStep {
    /// Diagonal of `Ā`, length `d_state`.
    pub a_bar: Vec<f64>,
    /// `B̄`, `d_state × d_in`.
    pub b_bar: Tensor,
    pub delta: f64,
}

/// Learned projections that make `Δ`, `B` and `C` depend on the input token.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveProjection {
    pub w_delta: Vec<f64>,
    pub delta_bias: f64,
    /// `d_state × d_in`.
    pub w_b: Tensor,
    /// `d_state × d_in`.
    pub w_c: Tensor,
}

/// Per-token selective parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveStep {
    pub delta: f64,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// `Δ = softplus(w_Δ · x + bias)`, `B_t = W_B x`, `C_t = W_C x`.
pub fn selective_params(x_t: &[f64], proj: &SelectiveProjection) -> Result<SelectiveStep> {
    let d_in = x_t.len();
    if proj.w_delta.len() != d_in || proj.w_b.cols() != d_in || proj.w_c.cols() != d_in {
        return Err(Error::DimensionMismatch {
            expected: d_in,
            got: proj.w_delta.len(),
        });
    }
    let pre: f64 = proj.w_delta.iter().zip(x_t).map(|(w, x)| w * x).sum::<f64>() + proj.delta_bias;
    let project = |w: &Tensor| -> Vec<f64> {
        (0..w.rows())
            .map(|i| w.row(i).iter().zip(x_t).map(|(a, b)| a * b).sum())
            .collect()
    };
    Ok(SelectiveStep {
        delta: softplus(pre),
        b: project(&proj.w_b),
        c: project(&proj.w_c),
    })
}

fn check_sequence(steps: &[DiscretizedStep], c: &[Tensor], x: &Tensor) -> Result<(usize, usize, usize)> {
    let len = x.rows();
    if len == 0 {
        return Err(Error::InvalidArgument("empty input sequence".into()));
    }
    if steps.len() != len || c.len() != len {
        return Err(Error::DimensionMismatch {
            expected: len,
            got: if steps.len() != len { steps.len() } else { c.len() },
        });
    }
    let d_state = steps[0].a_bar.len();
    let d_in = x.cols();
    for s in steps {
        if s.a_bar.len() != d_state || s.b_bar.rows() != d_state || s.b_bar.cols() != d_in {
            return Err(Error::DimensionMismatch {
                expected: d_state,
                got: s.a_bar.len(),
            });
        }
    }
    let d_out = c[0].rows();
    for ct in c {
        if ct.cols() != d_state || ct.rows() != d_out {
            return Err(Error::DimensionMismatch {
                expected: d_state,
                got: ct.cols(),
            });
        }
    }
    Ok((len, d_state, d_out))
}

/// Sequential scan `h_t = Ā_t ⊙ h_{t-1} + B̄_t x_t`, `y_t = C_t h_t`, `h_0 = 0`.
pub fn ssm_scan(steps: &[DiscretizedStep], c: &[Tensor], x: &Tensor) -> Result<Tensor> {
    let (len, d_state, d_out) = check_sequence(steps, c, x)?;
    let mut h = vec![0.0; d_state];
    let mut y = Vec::with_capacity(len * d_out);
    for t in 0..len {
        let xt = x.row(t);
        let step = &steps[t];
        for i in 0..d_state {
            let bx: f64 = step.b_bar.row(i).iter().zip(xt).map(|(b, v)| b * v).sum();
            h[i] = step.a_bar[i] * h[i] + bx;
        }
        for o in 0..d_out {
            y.push(c[t].row(o).iter().zip(&h).map(|(cv, hv)| cv * hv).sum());
        }
    }
    Tensor::matrix(len, d_out, y)
}

/// Convolution kernel `K̄_j = C Ā^j B̄` for `j < len`, each `d_out × d_in`.
pub fn ssm_kernel(step: &DiscretizedStep, c: &Tensor, len: usize) -> Vec<Tensor> {
    let d_state = step.a_bar.len();
    let d_in = step.b_bar.cols();
    let mut powers = vec![1.0; d_state];
    let mut taps = Vec::with_capacity(len);
    for _ in 0..len {
        let mut scaled = step.b_bar.clone();
        for i in 0..d_state {
            for v in scaled.row_mut(i) {
                *v *= powers[i];
            }
        }
        taps.push(c.matmul(&scaled));
        for (p, a) in powers.iter_mut().zip(&step.a_bar) {
            *p *= a;
        }
    }
    debug_assert!(taps.iter().all(|t| t.cols() == d_in));
    taps
}

/// Global-convolution evaluation `y = x * K̄`; only valid for time-invariant
/// parameters.
pub fn ssm_conv(steps: &[DiscretizedStep], c: &[Tensor], x: &Tensor) -> Result<Tensor> {
    let (len, _, d_out) = check_sequence(steps, c, x)?;
    let first = &steps[0];
    let invariant = steps.iter().all(|s| s.a_bar == first.a_bar && s.b_bar == first.b_bar)
        && c.iter().all(|ct| ct == &c[0]);
    if !invariant {
        return Err(Error::UnsupportedMode(
            "convolution mode requires time-invariant parameters".into(),
        ));
    }
    let taps = ssm_kernel(first, &c[0], len);
    let mut y = vec![0.0; len * d_out];
    for t in 0..len {
        let out = &mut y[t * d_out..(t + 1) * d_out];
        for (j, tap) in taps.iter().enumerate().take(t + 1) {
            let xs = x.row(t - j);
            for (o, ov) in out.iter_mut().enumerate() {
                *ov += tap.row(o).iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    Tensor::matrix(len, d_out, y)
}

/// Depthwise causal convolution with left zero-padding of `w - 1`.
///
/// `y[t, c] = sum_j kernel[j, c] · x[t - (w - 1) + j, c]`.
pub fn causal_conv1d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (len, d) = (x.rows(), x.cols());
    if kernel.cols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: kernel.cols(),
        });
    }
    if kernel.rows() == 0 {
        return Err(Error::InvalidArgument("convolution width must be ≥ 1".into()));
    }
    let mut y = vec![0.0; len * d];
    conv1d_forward(x.data(), kernel.data(), 1, len, d, kernel.rows(), &mut y);
    Tensor::matrix(len, d, y)
}

/// Batched depthwise causal convolution over `batch` sequences of `len` rows.
pub(crate) fn conv1d_forward(
    x: &[f64],
    kernel: &[f64],
    batch: usize,
    len: usize,
    d: usize,
    width: usize,
    y: &mut [f64],
) {
    for b in 0..batch {
        for t in 0..len {
            let out = &mut y[(b * len + t) * d..(b * len + t + 1) * d];
            for j in 0..width {
                let Some(s) = (t + j).checked_sub(width - 1) else {
                    continue;
                };
                let xs = &x[(b * len + s) * d..(b * len + s + 1) * d];
                let kj = &kernel[j * d..(j + 1) * d];
                for c in 0..d {
                    out[c] += kj[c] * xs[c];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward(
    x: &[f64],
    kernel: &[f64],
    gy: &[f64],
    batch: usize,
    len: usize,
    d: usize,
    width: usize,
    gx: Option<&mut [f64]>,
    gk: Option<&mut [f64]>,
) {
    let mut gx = gx;
    let mut gk = gk;
    for b in 0..batch {
        for t in 0..len {
            let g = &gy[(b * len + t) * d..(b * len + t + 1) * d];
            for j in 0..width {
                let Some(s) = (t + j).checked_sub(width - 1) else {
                    continue;
                };
                let row = (b * len + s) * d;
                if let Some(gx) = gx.as_deref_mut() {
                    let kj = &kernel[j * d..(j + 1) * d];
                    for c in 0..d {
                        gx[row + c] += kj[c] * g[c];
                    }
                }
                if let Some(gk) = gk.as_deref_mut() {
                    for c in 0..d {
                        gk[j * d + c] += x[row + c] * g[c];
                    }
                }
            }
        }
    }
}

/// Dimensions of one sequence processed by [`selective_channel_scan`].
#[derive(Debug, Clone, Copy)]
pub struct ChannelScanDims {
    pub len: usize,
    pub d_state: usize,
    pub channels: usize,
}

/// Hyperbolic basepoints for transporting the carry, `len × (channels + 1)`.
#[derive(Debug, Clone, Copy)]
pub struct Transport<'a> {
    pub basepoints: &'a [f64],
    pub k: f64,
}

/// Inputs of one sequence in time-major layout.
#[derive(Debug, Clone, Copy)]
pub struct ChannelScanInput<'a> {
    /// `len × d_state`
    pub a_bar: &'a [f64],
    /// `len × d_state`
    pub b_bar: &'a [f64],
    /// `len × d_state`
    pub c: &'a [f64],
    /// `len × channels`
    pub x: &'a [f64],
    pub transport: Option<Transport<'a>>,
}

/// Gradient buffers for [`selective_channel_scan_vjp`]; contributions are
/// accumulated.
pub struct ChannelScanGrads<'a> {
    pub a_bar: &'a mut [f64],
    pub b_bar: &'a mut [f64],
    pub c: &'a mut [f64],
    pub x: &'a mut [f64],
    pub basepoints: Option<&'a mut [f64]>,
}

struct Holonomy {
    origin: Vec<f64>,
    v0: Vec<f64>,
    v1: Vec<f64>,
    v2: Vec<f64>,
    v3: Vec<f64>,
    g2: Vec<f64>,
    g1: Vec<f64>,
    g0: Vec<f64>,
}

impl Holonomy {
    fn new(channels: usize, k: f64) -> Self {
        let mut origin = vec![0.0; channels + 1];
        origin[0] = k.sqrt();
        let z = || vec![0.0; channels + 1];
        Self {
            origin,
            v0: z(),
            v1: z(),
            v2: z(),
            v3: z(),
            g2: z(),
            g1: z(),
            g0: z(),
        }
    }

    /// Carries an origin-tangent vector `r` around `o → p_prev → p_cur → o`.
    fn rotate(&mut self, p_prev: &[f64], p_cur: &[f64], r: &[f64], k: f64, out: &mut [f64]) {
        self.v0[0] = 0.0;
        self.v0[1..].copy_from_slice(r);
        transport_into(&self.origin, p_prev, &self.v0, k, &mut self.v1);
        transport_into(p_prev, p_cur, &self.v1, k, &mut self.v2);
        transport_into(p_cur, &self.origin, &self.v2, k, &mut self.v3);
        out.copy_from_slice(&self.v3[1..]);
    }

    /// Backward of [`Holonomy::rotate`]; must follow a `rotate` call with the
    /// same arguments so the intermediate vectors are current.
    fn rotate_vjp(
        &mut self,
        p_prev: &[f64],
        p_cur: &[f64],
        k: f64,
        gq: &[f64],
        gr: &mut [f64],
        gp_prev: Option<&mut [f64]>,
        gp_cur: Option<&mut [f64]>,
    ) {
        let mut g3 = std::mem::take(&mut self.v3);
        g3[0] = 0.0;
        g3[1..].copy_from_slice(gq);
        self.g2.iter_mut().for_each(|v| *v = 0.0);
        self.g1.iter_mut().for_each(|v| *v = 0.0);
        self.g0.iter_mut().for_each(|v| *v = 0.0);
        match (gp_prev, gp_cur) {
            (Some(gpa), Some(gpb)) => {
                transport_vjp(p_cur, &self.origin, &self.v2, k, &g3, &mut self.g2, Some(&mut *gpb), None);
                transport_vjp(p_prev, p_cur, &self.v1, k, &self.g2, &mut self.g1, Some(&mut *gpa), Some(gpb));
                transport_vjp(&self.origin, p_prev, &self.v0, k, &self.g1, &mut self.g0, None, Some(gpa));
            }
            _ => {
                transport_vjp(p_cur, &self.origin, &self.v2, k, &g3, &mut self.g2, None, None);
                transport_vjp(p_prev, p_cur, &self.v1, k, &self.g2, &mut self.g1, None, None);
                transport_vjp(&self.origin, p_prev, &self.v0, k, &self.g1, &mut self.g0, None, None);
            }
        }
        for (a, b) in gr.iter_mut().zip(&self.g0[1..]) {
            *a += b;
        }
        self.v3 = g3;
    }
}

/// Per-channel selective scan of one sequence.
///
/// For every state index `i` the carry `r_i ∈ R^channels` evolves as
/// `r_{t,i} = ā_{t,i} · R_t(r_{t-1,i}) + b̄_{t,i} · x_t` and
/// `y_t = sum_i c_{t,i} r_{t,i}`. Without transport `R_t` is the identity;
/// with transport it carries the origin-tangent state to `p_{t-1}`, along the
/// geodesic to `p_t`, and back to the origin.
///
/// `states`, when given, receives every `r_t` (`len × d_state × channels`).
pub fn selective_channel_scan(
    input: &ChannelScanInput<'_>,
    dims: ChannelScanDims,
    y: &mut [f64],
    mut states: Option<&mut [f64]>,
) {
    let ChannelScanDims {
        len,
        d_state,
        channels,
    } = dims;
    let stride = d_state * channels;
    let mut r = vec![0.0; stride];
    let mut rotated = vec![0.0; channels];
    let mut holo = input.transport.map(|tr| Holonomy::new(channels, tr.k));
    let pdim = channels + 1;
    for t in 0..len {
        if let (Some(tr), Some(h), true) = (input.transport, holo.as_mut(), t > 0) {
            let p_prev = &tr.basepoints[(t - 1) * pdim..t * pdim];
            let p_cur = &tr.basepoints[t * pdim..(t + 1) * pdim];
            for i in 0..d_state {
                let ri = &mut r[i * channels..(i + 1) * channels];
                h.rotate(p_prev, p_cur, ri, tr.k, &mut rotated);
                ri.copy_from_slice(&rotated);
            }
        }
        let xt = &input.x[t * channels..(t + 1) * channels];
        let yt = &mut y[t * channels..(t + 1) * channels];
        yt.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d_state {
            let a = input.a_bar[t * d_state + i];
            let b = input.b_bar[t * d_state + i];
            let c = input.c[t * d_state + i];
            let ri = &mut r[i * channels..(i + 1) * channels];
            for ch in 0..channels {
                ri[ch] = a * ri[ch] + b * xt[ch];
                yt[ch] += c * ri[ch];
            }
        }
        if let Some(s) = states.as_deref_mut() {
            s[t * stride..(t + 1) * stride].copy_from_slice(&r);
        }
    }
}

/// Vector-Jacobian product of [`selective_channel_scan`] given the saved
/// states and the output cotangent `gy`.
pub fn selective_channel_scan_vjp(
    input: &ChannelScanInput<'_>,
    dims: ChannelScanDims,
    states: &[f64],
    gy: &[f64],
    grads: &mut ChannelScanGrads<'_>,
) {
    let ChannelScanDims {
        len,
        d_state,
        channels,
    } = dims;
    let stride = d_state * channels;
    let pdim = channels + 1;
    let mut gr = vec![0.0; stride];
    let mut q = vec![0.0; channels];
    let mut gq = vec![0.0; channels];
    let mut gprev = vec![0.0; channels];
    let zeros = vec![0.0; stride];
    let mut holo = input.transport.map(|tr| Holonomy::new(channels, tr.k));
    for t in (0..len).rev() {
        let gyt = &gy[t * channels..(t + 1) * channels];
        let xt = &input.x[t * channels..(t + 1) * channels];
        let r_t = &states[t * stride..(t + 1) * stride];
        let r_prev = if t > 0 {
            &states[(t - 1) * stride..t * stride]
        } else {
            &zeros[..]
        };
        let rotate = t > 0 && input.transport.is_some();
        for i in 0..d_state {
            let si = t * d_state + i;
            let rti = &r_t[i * channels..(i + 1) * channels];
            let gri = &mut gr[i * channels..(i + 1) * channels];
            let c = input.c[si];
            let mut dc = 0.0;
            for ch in 0..channels {
                dc += gyt[ch] * rti[ch];
                gri[ch] += c * gyt[ch];
            }
            grads.c[si] += dc;

            let rpi = &r_prev[i * channels..(i + 1) * channels];
            if rotate {
                let tr = input.transport.unwrap();
                let p_prev = &tr.basepoints[(t - 1) * pdim..t * pdim];
                let p_cur = &tr.basepoints[t * pdim..(t + 1) * pdim];
                holo.as_mut().unwrap().rotate(p_prev, p_cur, rpi, tr.k, &mut q);
            } else {
                q.copy_from_slice(rpi);
            }
            let a = input.a_bar[si];
            let b = input.b_bar[si];
            let (mut da, mut db) = (0.0, 0.0);
            for ch in 0..channels {
                da += gri[ch] * q[ch];
                db += gri[ch] * xt[ch];
                grads.x[t * channels + ch] += b * gri[ch];
                gq[ch] = a * gri[ch];
            }
            grads.a_bar[si] += da;
            grads.b_bar[si] += db;

            gprev.iter_mut().for_each(|v| *v = 0.0);
            if rotate {
                let tr = input.transport.unwrap();
                let p_prev = &tr.basepoints[(t - 1) * pdim..t * pdim];
                let p_cur = &tr.basepoints[t * pdim..(t + 1) * pdim];
                let h = holo.as_mut().unwrap();
                match grads.basepoints.as_deref_mut() {
                    Some(gp) => {
                        let (head, tail) = gp.split_at_mut(t * pdim);
                        let gpa = &mut head[(t - 1) * pdim..];
                        let gpb = &mut tail[..pdim];
                        h.rotate_vjp(p_prev, p_cur, tr.k, &gq, &mut gprev, Some(gpa), Some(gpb));
                    }
                    None => h.rotate_vjp(p_prev, p_cur, tr.k, &gq, &mut gprev, None, None),
                }
            } else {
                gprev.copy_from_slice(&gq);
            }
            gri.copy_from_slice(&gprev);
        }
    }
}
