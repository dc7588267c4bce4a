//! Lorentz-model operations expressed on the tape.
//!
//! Points are rows of a `rows × (d + 1)` tensor with the time coordinate in
//! column 0; origin-tangent vectors are passed by their spatial part only.

use super::{Graph, Unary, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Row-wise `exp_o` of spatial tangent vectors `rows × d`.
///
/// Written as `(√k cosh z, v · sinh(z)/z)` with `z = ‖v‖/√k`, which is exact
/// at `v = 0` and has the correct limiting derivative there.
pub fn exp_origin(g: &mut Graph, v: Var, k: f64) -> Var {
    let sk = k.sqrt();
    let n = g.row_norm(v, 0.0);
    let z = g.scale(n, 1.0 / sk);
    let ch = g.cosh(z);
    let time = g.scale(ch, sk);
    let sc = g.unary(Unary::Sinhc, z);
    let spatial = g.mul(v, sc);
    g.concat_cols(&[time, spatial])
}

/// `exp_o` of full ambient tangent vectors `rows × (d + 1)`; the time column
/// is ignored, so its gradient is identically zero.
pub fn exp_origin_lifted(g: &mut Graph, v: Var, k: f64) -> Var {
    let cols = g.shape(v).1;
    let spatial = g.slice_cols(v, 1, cols);
    exp_origin(g, spatial, k)
}

/// Row-wise `log_o`, returning the spatial part `rows × d`.
///
/// Uses `√k asinh(‖x_s‖/√k) x_s/‖x_s‖`, which equals the arcosh form on the
/// hyperboloid and stays well conditioned near the origin.
pub fn log_origin(g: &mut Graph, h: Var, k: f64) -> Var {
    let cols = g.shape(h).1;
    let s = g.slice_cols(h, 1, cols);
    let n = g.row_norm(s, 0.0);
    let z = g.scale(n, 1.0 / k.sqrt());
    let a = g.unary(Unary::Asinhc, z);
    g.mul(s, a)
}

/// Matrix of Lorentz inner products `⟨a_i, b_j⟩_L`.
pub fn lorentz_inner_matrix(g: &mut Graph, a: Var, b: Var) -> Var {
    let cols = g.shape(a).1;
    let mut signs = vec![1.0; cols];
    signs[0] = -1.0;
    let s = g.constant(Tensor::matrix(1, cols, signs).expect("shape"));
    let flipped = g.mul(a, s);
    let bt = g.transpose(b);
    g.matmul(flipped, bt)
}

/// Pairwise distances `√k arcosh(-⟨a_i, b_j⟩_L / k)`.
pub fn distance_matrix(g: &mut Graph, a: Var, b: Var, k: f64, eps_arcosh: f64) -> Result<Var> {
    let ip = lorentz_inner_matrix(g, a, b);
    let arg = g.scale(ip, -1.0 / k);
    let ac = g.arcosh(arg, eps_arcosh)?;
    Ok(g.scale(ac, k.sqrt()))
}

/// Stereographic projection into the ball of radius `√k`.
pub fn to_ball(g: &mut Graph, h: Var, k: f64) -> Var {
    let cols = g.shape(h).1;
    let t = g.slice_cols(h, 0, 1);
    let s = g.slice_cols(h, 1, cols);
    let den = g.offset(t, k.sqrt());
    let q = g.div(s, den);
    g.scale(q, k.sqrt())
}

/// Inverse of [`to_ball`]. The time coordinate is recomputed from the
/// spatial part, so the result satisfies the hyperboloid constraint by
/// construction.
pub fn from_ball(g: &mut Graph, p: Var, k: f64) -> Var {
    let sq = g.square(p);
    let p2 = g.row_sum(sq);
    let neg = g.neg(p2);
    let den = g.offset(neg, k);
    let inv = g.recip(den);
    let fac = g.scale(inv, 2.0 * k);
    let xs = g.mul(p, fac);
    let xs_sq = g.square(xs);
    let n2 = g.row_sum(xs_sq);
    let t2 = g.offset(n2, k);
    let x0 = g.sqrt(t2);
    g.concat_cols(&[x0, xs])
}

/// Gyrovector sum of ball points with curvature parameter `1/k`:
/// `[(1 + 2⟨p,q⟩/k + ‖q‖²/k) p + (1 - ‖p‖²/k) q] / (1 + 2⟨p,q⟩/k + ‖p‖²‖q‖²/k²)`.
pub fn mobius_ball(g: &mut Graph, p: Var, q: Var, k: f64) -> Var {
    let c = 1.0 / k;
    let pq = g.mul(p, q);
    let xy = g.row_sum(pq);
    let psq = g.square(p);
    let x2 = g.row_sum(psq);
    let qsq = g.square(q);
    let y2 = g.row_sum(qsq);
    let xy2 = g.scale(xy, 2.0 * c);
    let y2c = g.scale(y2, c);
    let cp0 = g.add(xy2, y2c);
    let coef_p = g.offset(cp0, 1.0);
    let x2c = g.scale(x2, -c);
    let coef_q = g.offset(x2c, 1.0);
    let a = g.mul(p, coef_p);
    let b = g.mul(q, coef_q);
    let num = g.add(a, b);
    let prod = g.mul(x2, y2);
    let prod_c = g.scale(prod, c * c);
    let d0 = g.add(xy2, prod_c);
    let den = g.offset(d0, 1.0);
    g.div(num, den)
}

/// Residual junction: Möbius-combine `h` with the update `m` in ball
/// coordinates and map back onto the hyperboloid.
pub fn mobius_residual(g: &mut Graph, h: Var, m: Var, k: f64) -> Var {
    let p = to_ball(g, h, k);
    let q = to_ball(g, m, k);
    let r = mobius_ball(g, p, q, k);
    from_ball(g, r, k)
}

/// Largest `|⟨x,x⟩_L + k| / k` over the rows of a point tensor.
pub fn max_manifold_residual(points: &Tensor, k: f64) -> f64 {
    (0..points.rows())
        .map(|i| {
            let r = points.row(i);
            let ip = -r[0] * r[0] + r[1..].iter().map(|v| v * v).sum::<f64>();
            (ip + k).abs() / k
        })
        .fold(0.0, f64::max)
}
