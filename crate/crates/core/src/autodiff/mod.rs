//! Reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the
//! node is created and [`Graph::backward`] walks the tape in reverse,
//! accumulating adjoints. Binary elementwise operations broadcast rows or
//! columns of extent 1. Shape errors are programming errors and panic.

pub mod geometry;

use crate::error::{Error, Result};
use crate::lorentz::ARCOSH_DOMAIN_SLACK;
use crate::ssm::{
    conv1d_backward, conv1d_forward, phi1, phi1_grad, selective_channel_scan,
    selective_channel_scan_vjp, softplus, ChannelScanDims, ChannelScanGrads, ChannelScanInput,
    Transport,
};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise functions with a closed-form derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Cosh,
    Sinh,
    Softplus,
    Sigmoid,
    Silu,
    Square,
    Recip,
    /// `(e^z - 1) / z`
    Phi1,
    /// `sinh(z) / z`
    Sinhc,
    /// `asinh(z) / z`
    Asinhc,
}

/// Deliberate corruption of a derivative rule, used to prove that the
/// gradient checker notices broken backward passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    /// Multiply the SiLU derivative by the given factor.
    SiluGradScale(f64),
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const SERIES_CUTOFF: f64 = 1e-2;

fn sinhc(z: f64) -> f64 {
    if z.abs() < SERIES_CUTOFF {
        let z2 = z * z;
        1.0 + z2 / 6.0 * (1.0 + z2 / 20.0 * (1.0 + z2 / 42.0))
    } else {
        z.sinh() / z
    }
}

fn sinhc_grad(z: f64) -> f64 {
    if z.abs() < SERIES_CUTOFF {
        let z2 = z * z;
        z / 3.0 + z * z2 / 30.0 + z * z2 * z2 / 840.0
    } else {
        (z * z.cosh() - z.sinh()) / (z * z)
    }
}

fn asinhc(z: f64) -> f64 {
    if z.abs() < SERIES_CUTOFF {
        let z2 = z * z;
        1.0 - z2 / 6.0 + 3.0 * z2 * z2 / 40.0 - 5.0 * z2 * z2 * z2 / 112.0
    } else {
        z.asinh() / z
    }
}

fn asinhc_grad(z: f64) -> f64 {
    if z.abs() < SERIES_CUTOFF {
        let z2 = z * z;
        -z / 3.0 + 0.3 * z * z2 - 15.0 * z * z2 * z2 / 56.0
    } else {
        (z / (1.0 + z * z).sqrt() - z.asinh()) / (z * z)
    }
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Cosh => x.cosh(),
            Unary::Sinh => x.sinh(),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Square => x * x,
            Unary::Recip => 1.0 / x,
            Unary::Phi1 => phi1(x),
            Unary::Sinhc => sinhc(x),
            Unary::Asinhc => asinhc(x),
        }
    }

    /// Derivative at input `x` with output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Cosh => x.sinh(),
            Unary::Sinh => x.cosh(),
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Square => 2.0 * x,
            Unary::Recip => -y * y,
            Unary::Phi1 => phi1_grad(x),
            Unary::Sinhc => sinhc_grad(x),
            Unary::Asinhc => asinhc_grad(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
struct ScanNode {
    a_bar: Var,
    b_bar: Var,
    c: Var,
    x: Var,
    basepoints: Option<Var>,
    k: f64,
    batch: usize,
    len: usize,
    states: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    Offset(Var),
    Clamp(Var, f64, f64),
    /// Stores which entries were clamped up to `1 + eps`.
    Arcosh(Var, Vec<bool>),
    MatMul(Var, Var),
    Transpose(Var),
    RowSum(Var),
    ColSum(Var),
    SumAll(Var),
    LogSumExpRows(Var),
    RowNorm(Var, f64),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    CausalConv {
        x: Var,
        kernel: Var,
        batch: usize,
        len: usize,
    },
    Scan(Box<ScanNode>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Adjoints of every differentiable node after [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss or is a constant.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.adjoints.get_mut(v.0).and_then(Option::take)
    }
}

/// Tape of eagerly evaluated operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

fn broadcast(a: &[usize], b: &[usize]) -> (usize, usize) {
    assert!(a.len() == 2 && b.len() == 2, "binary ops need 2-D operands");
    let dim = |x: usize, y: usize| -> usize {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast {a:?} with {b:?}")
        }
    };
    (dim(a[0], b[0]), dim(a[1], b[1]))
}

#[inline]
fn bidx(shape: &[usize], i: usize, j: usize) -> usize {
    let r = if shape[0] == 1 { 0 } else { i };
    let c = if shape[1] == 1 { 0 } else { j };
    r * shape[1] + c
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        assert_eq!(value.shape().len(), 2, "graph tensors are 2-D");
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        assert_eq!(value.shape().len(), 2, "graph tensors are 2-D");
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.shape();
        (s[0], s[1])
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (r, c) = broadcast(sa, sb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let x = da[bidx(sa, i, j)];
                let y = db[bidx(sb, i, j)];
                out.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                });
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::matrix(r, c, out).expect("shape"),
            Op::Binary(kind, a, b),
            needs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Div, a, b)
    }

    pub fn unary(&mut self, f: Unary, a: Var) -> Var {
        let value = self.value(a).map(|x| f.apply(x));
        let needs = self.needs(a);
        self.push(value, Op::Unary(f, a), needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    pub fn cosh(&mut self, a: Var) -> Var {
        self.unary(Unary::Cosh, a)
    }

    pub fn sinh(&mut self, a: Var) -> Var {
        self.unary(Unary::Sinh, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(Unary::Silu, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(Unary::Recip, a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, s), needs)
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let needs = self.needs(a);
        self.push(value, Op::Offset(a), needs)
    }

    /// Clamp into `[lo, hi]`; the gradient passes through inside the window
    /// and is zero outside it.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let needs = self.needs(a);
        self.push(value, Op::Clamp(a, lo, hi), needs)
    }

    /// Stabilized `arcosh`. Arguments in `[1 - 1e-6, 1 + eps)` are clamped to
    /// `1 + eps` with zero gradient; anything smaller is a domain error.
    pub fn arcosh(&mut self, a: Var, eps: f64) -> Result<Var> {
        let input = self.value(a);
        let mut clamped = Vec::with_capacity(input.len());
        let mut out = Vec::with_capacity(input.len());
        for &z in input.data() {
            if z < 1.0 - ARCOSH_DOMAIN_SLACK || z.is_nan() {
                return Err(Error::Domain(format!("arcosh argument {z} is below 1")));
            }
            let (t, c) = if z < 1.0 + eps { (eps, true) } else { (z - 1.0, false) };
            clamped.push(c);
            out.push((t + (t * (t + 2.0)).sqrt()).ln_1p());
        }
        let value = Tensor::new(input.shape().to_vec(), out)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Arcosh(a, clamped), needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let needs = self.needs(a);
        self.push(value, Op::Transpose(a), needs)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let out = (0..r).map(|i| t.row(i).iter().sum()).collect();
        let _ = c;
        let needs = self.needs(a);
        self.push(Tensor::matrix(r, 1, out).expect("shape"), Op::RowSum(a), needs)
    }

    pub fn col_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::matrix(1, c, out).expect("shape"), Op::ColSum(a), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Numerically stable `log Σ_j exp(a_ij)` per row.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = (0..t.rows())
            .map(|i| {
                let row = t.row(i);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let needs = self.needs(a);
        self.push(
            Tensor::matrix(t.rows(), 1, out).expect("shape"),
            Op::LogSumExpRows(a),
            needs,
        )
    }

    /// Euclidean norm of each row. Rows with norm at most `eps` get a zero
    /// gradient.
    pub fn row_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let out = (0..t.rows())
            .map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let needs = self.needs(a);
        self.push(
            Tensor::matrix(t.rows(), 1, out).expect("shape"),
            Op::RowNorm(a, eps),
            needs,
        )
    }

    /// `out[i] = table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let c = t.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < t.rows(), "row index {i} out of range");
            out.extend_from_slice(t.row(i));
        }
        let needs = self.needs(table);
        self.push(
            Tensor::matrix(idx.len(), c, out).expect("shape"),
            Op::GatherRows(table, idx.to_vec()),
            needs,
        )
    }

    /// `out[i] = a[i, cols[i]]`, one column per row.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), cols.len(), "one column per row");
        let out = cols.iter().enumerate().map(|(i, &j)| t.get2(i, j)).collect();
        let needs = self.needs(a);
        self.push(
            Tensor::matrix(cols.len(), 1, out).expect("shape"),
            Op::Pick(a, cols.to_vec()),
            needs,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat row mismatch");
                out.extend_from_slice(t.row(i));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::matrix(rows, total, out).expect("shape"),
            Op::ConcatCols(parts.to_vec()),
            needs,
        )
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        assert!(start < end && end <= t.cols(), "bad column slice");
        let mut out = Vec::with_capacity(t.rows() * (end - start));
        for i in 0..t.rows() {
            out.extend_from_slice(&t.row(i)[start..end]);
        }
        let needs = self.needs(a);
        self.push(
            Tensor::matrix(t.rows(), end - start, out).expect("shape"),
            Op::SliceCols(a, start, end),
            needs,
        )
    }

    /// Depthwise causal convolution over `batch` stacked sequences of `len`
    /// rows; `kernel` is `width × channels`.
    pub fn causal_conv(&mut self, x: Var, kernel: Var, batch: usize, len: usize) -> Var {
        let (xt, kt) = (self.value(x), self.value(kernel));
        let d = xt.cols();
        assert_eq!(xt.rows(), batch * len, "conv input rows");
        assert_eq!(kt.cols(), d, "conv kernel channels");
        let mut y = vec![0.0; batch * len * d];
        conv1d_forward(xt.data(), kt.data(), batch, len, d, kt.rows(), &mut y);
        let needs = self.needs(x) || self.needs(kernel);
        self.push(
            Tensor::matrix(batch * len, d, y).expect("shape"),
            Op::CausalConv {
                x,
                kernel,
                batch,
                len,
            },
            needs,
        )
    }

    /// Per-channel selective scan over `batch` stacked sequences.
    ///
    /// `a_bar`, `b_bar`, `c` are `(batch·len) × d_state`, `x` is
    /// `(batch·len) × channels` and `basepoints`, when present, is
    /// `(batch·len) × (channels + 1)` on the hyperboloid of parameter `k`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        a_bar: Var,
        b_bar: Var,
        c: Var,
        x: Var,
        basepoints: Option<Var>,
        k: f64,
        batch: usize,
        len: usize,
    ) -> Var {
        let rows = batch * len;
        let (d_state, channels) = (self.value(a_bar).cols(), self.value(x).cols());
        for v in [a_bar, b_bar, c] {
            assert_eq!(self.shape(v), (rows, d_state), "scan parameter shape");
        }
        assert_eq!(self.value(x).rows(), rows, "scan input rows");
        if let Some(p) = basepoints {
            assert_eq!(self.shape(p), (rows, channels + 1), "basepoint shape");
        }
        let dims = ChannelScanDims {
            len,
            d_state,
            channels,
        };
        let mut y = vec![0.0; rows * channels];
        let mut states = vec![0.0; rows * d_state * channels];
        for b in 0..batch {
            let input = self.scan_input(a_bar, b_bar, c, x, basepoints, k, b, len);
            selective_channel_scan(
                &input,
                dims,
                &mut y[b * len * channels..(b + 1) * len * channels],
                Some(&mut states[b * len * d_state * channels..(b + 1) * len * d_state * channels]),
            );
        }
        let needs = [a_bar, b_bar, c, x]
            .iter()
            .chain(basepoints.iter())
            .any(|&v| self.needs(v));
        self.push(
            Tensor::matrix(rows, channels, y).expect("shape"),
            Op::Scan(Box::new(ScanNode {
                a_bar,
                b_bar,
                c,
                x,
                basepoints,
                k,
                batch,
                len,
                states,
            })),
            needs,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn scan_input(
        &self,
        a_bar: Var,
        b_bar: Var,
        c: Var,
        x: Var,
        basepoints: Option<Var>,
        k: f64,
        b: usize,
        len: usize,
    ) -> ChannelScanInput<'_> {
        let slice = |v: Var| {
            let t = self.value(v);
            let w = t.cols();
            &t.data()[b * len * w..(b + 1) * len * w]
        };
        ChannelScanInput {
            a_bar: slice(a_bar),
            b_bar: slice(b_bar),
            c: slice(c),
            x: slice(x),
            transport: basepoints.map(|p| Transport {
                basepoints: slice(p),
                k,
            }),
        }
    }

    /// Reverse sweep from a `1 × 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != [1, 1] {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::NonFiniteLoss { batch: 0 });
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
                let (r, c) = (g.rows(), g.cols());
                if self.needs(*a) {
                    let ga = self.acc(adj, *a);
                    for ii in 0..r {
                        for j in 0..c {
                            let gv = gd[ii * c + j];
                            let d = match kind {
                                Binary::Add | Binary::Sub => gv,
                                Binary::Mul => gv * vb.data()[bidx(&sb, ii, j)],
                                Binary::Div => gv / vb.data()[bidx(&sb, ii, j)],
                            };
                            ga[bidx(&sa, ii, j)] += d;
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = self.acc(adj, *b);
                    for ii in 0..r {
                        for j in 0..c {
                            let gv = gd[ii * c + j];
                            let y = vb.data()[bidx(&sb, ii, j)];
                            let d = match kind {
                                Binary::Add => gv,
                                Binary::Sub => -gv,
                                Binary::Mul => gv * va.data()[bidx(&sa, ii, j)],
                                Binary::Div => -gv * va.data()[bidx(&sa, ii, j)] / (y * y),
                            };
                            gb[bidx(&sb, ii, j)] += d;
                        }
                    }
                }
            }
            Op::Unary(f, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let scale = match (f, self.fault) {
                    (Unary::Silu, Some(Fault::SiluGradScale(s))) => s,
                    _ => 1.0,
                };
                let ga = self.acc(adj, *a);
                for j in 0..gd.len() {
                    ga[j] += gd[j] * f.derivative(x[j], y[j]) * scale;
                }
            }
            Op::Scale(a, s) => {
                let ga = self.acc(adj, *a);
                for (o, v) in ga.iter_mut().zip(gd) {
                    *o += v * s;
                }
            }
            Op::Offset(a) => {
                let ga = self.acc(adj, *a);
                for (o, v) in ga.iter_mut().zip(gd) {
                    *o += v;
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let ga = self.acc(adj, *a);
                for j in 0..gd.len() {
                    if x[j] >= *lo && x[j] <= *hi {
                        ga[j] += gd[j];
                    }
                }
            }
            Op::Arcosh(a, clamped) => {
                let x = self.value(*a).data();
                let ga = self.acc(adj, *a);
                for j in 0..gd.len() {
                    if !clamped[j] {
                        let t = x[j] - 1.0;
                        ga[j] += gd[j] / (t * (t + 2.0)).sqrt();
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, kk, n) = (va.rows(), va.cols(), vb.cols());
                if self.needs(*a) {
                    let ga = self.acc(adj, *a);
                    for ii in 0..m {
                        let grow = &gd[ii * n..(ii + 1) * n];
                        for p in 0..kk {
                            let brow = vb.row(p);
                            ga[ii * kk + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = self.acc(adj, *b);
                    for ii in 0..m {
                        let grow = &gd[ii * n..(ii + 1) * n];
                        let arow = va.row(ii);
                        for p in 0..kk {
                            let av = arow[p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (g.rows(), g.cols());
                let ga = self.acc(adj, *a);
                for ii in 0..r {
                    for j in 0..c {
                        ga[j * r + ii] += gd[ii * c + j];
                    }
                }
            }
            Op::RowSum(a) => {
                let c = self.value(*a).cols();
                let ga = self.acc(adj, *a);
                for (ii, gv) in gd.iter().enumerate() {
                    for o in &mut ga[ii * c..(ii + 1) * c] {
                        *o += gv;
                    }
                }
            }
            Op::ColSum(a) => {
                let c = self.value(*a).cols();
                let ga = self.acc(adj, *a);
                for (j, o) in ga.iter_mut().enumerate() {
                    *o += gd[j % c];
                }
            }
            Op::SumAll(a) => {
                let ga = self.acc(adj, *a);
                for o in ga.iter_mut() {
                    *o += gd[0];
                }
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let lse = node.value.data();
                let ga = self.acc(adj, *a);
                for ii in 0..x.rows() {
                    for (j, v) in x.row(ii).iter().enumerate() {
                        ga[ii * c + j] += gd[ii] * (v - lse[ii]).exp();
                    }
                }
            }
            Op::RowNorm(a, eps) => {
                let x = self.value(*a);
                let c = x.cols();
                let n = node.value.data();
                let ga = self.acc(adj, *a);
                for ii in 0..x.rows() {
                    if n[ii] > *eps {
                        for (j, v) in x.row(ii).iter().enumerate() {
                            ga[ii * c + j] += gd[ii] * v / n[ii];
                        }
                    }
                }
            }
            Op::GatherRows(t, idx) => {
                let c = node.value.cols();
                let gt = self.acc(adj, *t);
                for (ii, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        gt[src * c + j] += gd[ii * c + j];
                    }
                }
            }
            Op::Pick(a, cols) => {
                let c = self.value(*a).cols();
                let ga = self.acc(adj, *a);
                for (ii, &j) in cols.iter().enumerate() {
                    ga[ii * c + j] += gd[ii];
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let gp = self.acc(adj, p);
                        for ii in 0..g.rows() {
                            for j in 0..w {
                                gp[ii * w + j] += gd[ii * total + start + j];
                            }
                        }
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let c = self.value(*a).cols();
                let w = end - start;
                let ga = self.acc(adj, *a);
                for ii in 0..g.rows() {
                    for j in 0..w {
                        ga[ii * c + start + j] += gd[ii * w + j];
                    }
                }
            }
            Op::CausalConv {
                x,
                kernel,
                batch,
                len,
            } => {
                let (xt, kt) = (self.value(*x), self.value(*kernel));
                let (d, w) = (xt.cols(), kt.rows());
                let mut gx = self.needs(*x).then(|| vec![0.0; xt.len()]);
                let mut gk = self.needs(*kernel).then(|| vec![0.0; kt.len()]);
                conv1d_backward(
                    xt.data(),
                    kt.data(),
                    gd,
                    *batch,
                    *len,
                    d,
                    w,
                    gx.as_deref_mut(),
                    gk.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    add_into(self.acc(adj, *x), &gx);
                }
                if let Some(gk) = gk {
                    add_into(self.acc(adj, *kernel), &gk);
                }
            }
            Op::Scan(s) => self.scan_backward(s, gd, adj),
        }
    }

    fn scan_backward(&self, s: &ScanNode, gy: &[f64], adj: &mut [Option<Tensor>]) {
        let (d_state, channels) = (self.value(s.a_bar).cols(), self.value(s.x).cols());
        let rows = s.batch * s.len;
        let dims = ChannelScanDims {
            len: s.len,
            d_state,
            channels,
        };
        let mut ga = vec![0.0; rows * d_state];
        let mut gb = vec![0.0; rows * d_state];
        let mut gc = vec![0.0; rows * d_state];
        let mut gx = vec![0.0; rows * channels];
        let want_p = s.basepoints.is_some_and(|p| self.needs(p));
        let mut gp = vec![0.0; if want_p { rows * (channels + 1) } else { 0 }];
        let per_state = s.len * d_state;
        let per_chan = s.len * channels;
        let per_point = s.len * (channels + 1);
        for b in 0..s.batch {
            let input = self.scan_input(s.a_bar, s.b_bar, s.c, s.x, s.basepoints, s.k, b, s.len);
            let mut grads = ChannelScanGrads {
                a_bar: &mut ga[b * per_state..(b + 1) * per_state],
                b_bar: &mut gb[b * per_state..(b + 1) * per_state],
                c: &mut gc[b * per_state..(b + 1) * per_state],
                x: &mut gx[b * per_chan..(b + 1) * per_chan],
                basepoints: if want_p {
                    Some(&mut gp[b * per_point..(b + 1) * per_point])
                } else {
                    None
                },
            };
            let st = per_state * channels;
            selective_channel_scan_vjp(
                &input,
                dims,
                &s.states[b * st..(b + 1) * st],
                &gy[b * per_chan..(b + 1) * per_chan],
                &mut grads,
            );
        }
        for (v, g) in [(s.a_bar, ga), (s.b_bar, gb), (s.c, gc), (s.x, gx)] {
            if self.needs(v) {
                add_into(self.acc(adj, v), &g);
            }
        }
        if let (Some(p), true) = (s.basepoints, want_p) {
            add_into(self.acc(adj, p), &gp);
        }
    }

    fn acc<'a>(&self, adj: &'a mut [Option<Tensor>], v: Var) -> &'a mut [f64] {
        adj[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.value(v).shape()))
            .data_mut()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
