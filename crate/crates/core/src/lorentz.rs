//! Lorentz (hyperboloid) model of hyperbolic space.
//!
//! Points live on the upper sheet `{x : <x,x>_L = -k, x_0 > 0}` of the
//! hyperboloid in `R^{d+1}`, with the time-like coordinate stored first.
//! `k > 0` is the curvature handle; the sectional curvature is `-1/k`.
//!
//! Every map here is anchored at the origin `o = (sqrt(k), 0, ..., 0)`,
//! which is all the recommender needs. The free functions are pure and the
//! value types are immutable, so everything is `Send + Sync`.

use crate::error::{Error, Result};

/// Arguments of `arcosh` below `1 - ARCOSH_DOMAIN_SLACK` are rejected.
pub const ARCOSH_DOMAIN_SLACK: f64 = 1e-6;

/// Relative tolerance accepted by [`LorentzPoint::new`].
pub const MANIFOLD_CHECK_TOL: f64 = 1e-6;

/// Hyperboloid parameter `k > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(k: f64) -> Result<Self> {
        if k.is_finite() && k > 0.0 {
            Ok(Self(k))
        } else {
            Err(Error::InvalidArgument(format!(
                "curvature parameter k must be positive and finite, got {k}"
            )))
        }
    }

    #[inline]
    pub fn k(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn sqrt_k(self) -> f64 {
        self.0.sqrt()
    }

    /// The origin `(sqrt(k), 0, ..., 0)` of `H^d`.
    pub fn origin(self, d: usize) -> LorentzPoint {
        let mut coords = vec![0.0; d + 1];
        coords[0] = self.sqrt_k();
        LorentzPoint {
            coords,
            curvature: self,
        }
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Self(1.0)
    }
}

/// Numerical floors used by the stabilized operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    /// Floor for `arcosh` arguments that drifted just below 1.
    pub eps_arcosh: f64,
    /// Floor for norms used as denominators.
    pub eps_norm: f64,
}

impl Tolerance {
    pub fn new(eps_arcosh: f64, eps_norm: f64) -> Result<Self> {
        for (name, v) in [("eps_arcosh", eps_arcosh), ("eps_norm", eps_norm)] {
            if !(v > 0.0 && v <= 1e-6) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in (0, 1e-6], got {v}"
                )));
            }
        }
        Ok(Self {
            eps_arcosh,
            eps_norm,
        })
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            eps_arcosh: 1e-12,
            eps_norm: 1e-12,
        }
    }
}

/// A point on the hyperboloid, time-like coordinate first.
#[derive(Debug, Clone, PartialEq)]
pub struct LorentzPoint {
    coords: Vec<f64>,
    curvature: Curvature,
}

impl LorentzPoint {
    /// Wraps ambient coordinates, rejecting anything that is off the manifold
    /// by more than [`MANIFOLD_CHECK_TOL`] (relative to `k`).
    pub fn new(coords: Vec<f64>, curvature: Curvature) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: coords.len(),
            });
        }
        if !(coords[0] > 0.0) || coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain(
                "point must be finite with positive time coordinate".into(),
            ));
        }
        let p = Self { coords, curvature };
        let residual = p.manifold_residual();
        if residual > MANIFOLD_CHECK_TOL {
            return Err(Error::Domain(format!(
                "point is off the hyperboloid: |<x,x>_L + k| / k = {residual:e}"
            )));
        }
        Ok(p)
    }

    /// Lifts spatial coordinates onto the hyperboloid by solving for `x_0`.
    pub fn from_spatial(spatial: &[f64], curvature: Curvature) -> Self {
        let sq: f64 = spatial.iter().map(|v| v * v).sum();
        let mut coords = Vec::with_capacity(spatial.len() + 1);
        coords.push((curvature.k() + sq).sqrt());
        coords.extend_from_slice(spatial);
        Self { coords, curvature }
    }

    #[cfg(test)]
    pub(crate) fn from_raw(coords: Vec<f64>, curvature: Curvature) -> Self {
        Self { coords, curvature }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn spatial(&self) -> &[f64] {
        &self.coords[1..]
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    /// Spatial dimension `d` (the ambient dimension is `d + 1`).
    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }

    /// `|<x,x>_L + k| / k`.
    pub fn manifold_residual(&self) -> f64 {
        let k = self.curvature.k();
        (inner_unchecked(&self.coords, &self.coords) + k).abs() / k
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }
}

/// A tangent vector together with its basepoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    coords: Vec<f64>,
    basepoint: LorentzPoint,
}

impl TangentVector {
    /// Checks `<basepoint, v>_L = 0` to within `1e-9` (scaled by the operand sizes).
    pub fn new(coords: Vec<f64>, basepoint: LorentzPoint) -> Result<Self> {
        if coords.len() != basepoint.coords.len() {
            return Err(Error::DimensionMismatch {
                expected: basepoint.coords.len(),
                got: coords.len(),
            });
        }
        let ip = inner_unchecked(&basepoint.coords, &coords);
        let scale = norm2(&basepoint.coords) * norm2(&coords);
        if ip.abs() > 1e-9 * scale.max(1.0) {
            return Err(Error::Domain(format!(
                "vector is not tangent at its basepoint: <x,v>_L = {ip:e}"
            )));
        }
        Ok(Self { coords, basepoint })
    }

    /// A tangent vector at the origin from its spatial part.
    pub fn at_origin(spatial: &[f64], curvature: Curvature) -> Self {
        let mut coords = Vec::with_capacity(spatial.len() + 1);
        coords.push(0.0);
        coords.extend_from_slice(spatial);
        Self {
            coords,
            basepoint: curvature.origin(spatial.len()),
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn basepoint(&self) -> &LorentzPoint {
        &self.basepoint
    }

    /// `sqrt(|<v,v>_L|)`.
    pub fn lorentz_norm(&self) -> f64 {
        inner_unchecked(&self.coords, &self.coords).abs().sqrt()
    }

    fn is_at_origin(&self) -> bool {
        let b = &self.basepoint.coords;
        b[1..].iter().all(|&c| c == 0.0) && b[0] == self.basepoint.curvature.sqrt_k()
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }
}

#[inline]
fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[inline]
pub(crate) fn inner_unchecked(u: &[f64], v: &[f64]) -> f64 {
    let spatial: f64 = u[1..].iter().zip(&v[1..]).map(|(a, b)| a * b).sum();
    spatial - u[0] * v[0]
}

/// Lorentz inner product `-u_0 v_0 + sum_j u_j v_j`.
pub fn lorentz_inner(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    if u.len() < 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: u.len(),
        });
    }
    Ok(inner_unchecked(u, v))
}

/// `arcosh(z)` evaluated as `ln1p(t + sqrt(t (t + 2)))` with `t = z - 1`.
///
/// Arguments in `[1 - 1e-6, 1 + eps_arcosh)` are floored at `1 + eps_arcosh`;
/// anything smaller is a domain error.
pub fn stable_arcosh(z: f64, tol: &Tolerance) -> Result<f64> {
    if !(z >= 1.0 - ARCOSH_DOMAIN_SLACK) {
        return Err(Error::Domain(format!(
            "arcosh argument {z} is below 1 (point off the manifold?)"
        )));
    }
    let t = (z - 1.0).max(tol.eps_arcosh);
    Ok((t + (t * (t + 2.0)).sqrt()).ln_1p())
}

fn same_curvature(a: Curvature, b: Curvature) -> Result<()> {
    if a.k() == b.k() {
        Ok(())
    } else {
        Err(Error::CurvatureMismatch(a.k(), b.k()))
    }
}

/// Geodesic distance `sqrt(k) arcosh(-<x,y>_L / k)`.
pub fn hyperbolic_distance(x: &LorentzPoint, y: &LorentzPoint, tol: &Tolerance) -> Result<f64> {
    same_curvature(x.curvature, y.curvature)?;
    let k = x.curvature.k();
    let ip = lorentz_inner(&x.coords, &y.coords)?;
    Ok(x.curvature.sqrt_k() * stable_arcosh(-ip / k, tol)?)
}

/// Zero-pads a Euclidean vector into the tangent space at the origin.
pub fn lift(e: &[f64], curvature: Curvature) -> TangentVector {
    TangentVector::at_origin(e, curvature)
}

/// Exponential map at the origin.
///
/// Uses the spatial norm for `||v||_L`, which is exact for origin-tangent
/// vectors and avoids cancellation. Returns the origin itself when the norm
/// is below `eps_norm`.
pub fn exp_map_origin(v: &TangentVector, tol: &Tolerance) -> Result<LorentzPoint> {
    if !v.is_at_origin() {
        return Err(Error::InvalidArgument(
            "exp_map_origin expects a vector tangent at the origin".into(),
        ));
    }
    let curvature = v.basepoint.curvature;
    let d = v.coords.len() - 1;
    let spatial = &v.coords[1..];
    let n = norm2(spatial);
    if n < tol.eps_norm {
        return Ok(curvature.origin(d));
    }
    let sk = curvature.sqrt_k();
    let t = n / sk;
    let mut coords = Vec::with_capacity(d + 1);
    coords.push(sk * t.cosh());
    let scale = sk * t.sinh() / n;
    coords.extend(spatial.iter().map(|s| scale * s));
    Ok(LorentzPoint { coords, curvature })
}

/// Logarithmic map at the origin (inverse of [`exp_map_origin`]).
pub fn log_map_origin(x: &LorentzPoint, tol: &Tolerance) -> Result<TangentVector> {
    let curvature = x.curvature;
    let k = curvature.k();
    let d = x.dim();
    let o = curvature.origin(d);
    let ip = inner_unchecked(&o.coords, &x.coords);
    // x + (1/k) <o,x>_L o; its time component vanishes on the manifold.
    let mut w: Vec<f64> = x
        .coords
        .iter()
        .zip(&o.coords)
        .map(|(xi, oi)| xi + ip / k * oi)
        .collect();
    w[0] = 0.0;
    let wn = norm2(&w);
    let is_origin = x.coords[1..].iter().all(|&c| c.abs() < tol.eps_norm);
    if is_origin {
        return Ok(TangentVector {
            coords: vec![0.0; d + 1],
            basepoint: o,
        });
    }
    if wn < tol.eps_norm {
        return Err(Error::Domain(
            "log map denominator vanished for a non-origin point".into(),
        ));
    }
    let dist = curvature.sqrt_k() * stable_arcosh(-ip / k, tol)?;
    let coords = w.iter().map(|wi| dist * wi / wn).collect();
    Ok(TangentVector { coords, basepoint: o })
}

/// Parallel transport of `v` (tangent at `x`) along the geodesic to `y`:
/// `v - 2 <y - x, v>_L / <x + y, x + y>_L (x + y)`.
pub fn parallel_transport(
    x: &LorentzPoint,
    y: &LorentzPoint,
    v: &TangentVector,
    tol: &Tolerance,
) -> Result<TangentVector> {
    same_curvature(x.curvature, y.curvature)?;
    same_curvature(x.curvature, v.basepoint.curvature)?;
    if x.coords.len() != y.coords.len() || x.coords.len() != v.coords.len() {
        return Err(Error::DimensionMismatch {
            expected: x.coords.len(),
            got: y.coords.len().max(v.coords.len()),
        });
    }
    let sum: Vec<f64> = x.coords.iter().zip(&y.coords).map(|(a, b)| a + b).collect();
    let diff: Vec<f64> = y.coords.iter().zip(&x.coords).map(|(a, b)| a - b).collect();
    let denom = inner_unchecked(&sum, &sum);
    if denom.abs() < tol.eps_norm {
        return Err(Error::Degenerate(
            "transport endpoints are antipodal (<x+y,x+y>_L = 0)".into(),
        ));
    }
    let coef = 2.0 * inner_unchecked(&diff, &v.coords) / denom;
    let coords = v
        .coords
        .iter()
        .zip(&sum)
        .map(|(vi, si)| vi - coef * si)
        .collect();
    Ok(TangentVector {
        coords,
        basepoint: y.clone(),
    })
}

/// The gyrovector product evaluated literally over ambient coordinates:
///
/// ```text
/// [(1 + 2/k <x,y> + 1/k ||y||^2) x + (1 - 1/k ||x||^2) y]
///   / [1 + 2/k <x,y> + 1/k^2 ||x||^2 ||y||^2]
/// ```
///
/// with `||v||^2 = |<v,v>_L|`. Inputs are formal ambient vectors; the result
/// is not constrained to the hyperboloid.
pub fn mobius_product(x: &[f64], y: &[f64], curvature: Curvature, tol: &Tolerance) -> Result<Vec<f64>> {
    let xy = lorentz_inner(x, y)?;
    let k = curvature.k();
    let xx = inner_unchecked(x, x).abs();
    let yy = inner_unchecked(y, y).abs();
    let denom = 1.0 + 2.0 / k * xy + xx * yy / (k * k);
    if denom.abs() < tol.eps_norm {
        return Err(Error::Degenerate(format!(
            "Mobius product denominator {denom:e} vanished"
        )));
    }
    let cx = 1.0 + 2.0 / k * xy + yy / k;
    let cy = 1.0 - xx / k;
    Ok(x.iter()
        .zip(y)
        .map(|(a, b)| (cx * a + cy * b) / denom)
        .collect())
}

/// Stereographic projection onto the open ball of radius `sqrt(k)`.
pub fn project_to_poincare(x: &LorentzPoint) -> Vec<f64> {
    let sk = x.curvature.sqrt_k();
    let scale = sk / (x.coords[0] + sk);
    x.coords[1..].iter().map(|c| c * scale).collect()
}

/// Inverse of [`project_to_poincare`] for a ball point with `||p|| < sqrt(k)`.
pub fn poincare_to_lorentz(p: &[f64], curvature: Curvature) -> Result<LorentzPoint> {
    let k = curvature.k();
    let sq: f64 = p.iter().map(|v| v * v).sum();
    if !(sq < k) {
        return Err(Error::Domain(format!(
            "ball point with squared norm {sq} lies outside radius sqrt({k})"
        )));
    }
    let spatial: Vec<f64> = p.iter().map(|v| 2.0 * k * v / (k - sq)).collect();
    Ok(LorentzPoint::from_spatial(&spatial, curvature))
}

/// Slice-level transport kernel shared with the fused scan.
///
/// For `v` tangent at on-manifold `x`, returns
/// `v + <y,v>_L / (k - <x,y>_L) (x + y)`, which equals [`parallel_transport`].
pub(crate) fn transport_into(x: &[f64], y: &[f64], v: &[f64], k: f64, out: &mut [f64]) {
    let alpha = k - inner_unchecked(x, y);
    let c = inner_unchecked(y, v) / alpha;
    for j in 0..v.len() {
        out[j] = v[j] + c * (x[j] + y[j]);
    }
}

/// Vector-Jacobian product of [`transport_into`].
///
/// Accumulates `dL/dv` into `gv`, `dL/dx` into `gx` and `dL/dy` into `gy`
/// given the output cotangent `g`.
pub(crate) fn transport_vjp(
    x: &[f64],
    y: &[f64],
    v: &[f64],
    k: f64,
    g: &[f64],
    gv: &mut [f64],
    gx: Option<&mut [f64]>,
    gy: Option<&mut [f64]>,
) {
    let alpha = k - inner_unchecked(x, y);
    let beta = inner_unchecked(y, v);
    let c = beta / alpha;
    let gc: f64 = g.iter().zip(x.iter().zip(y)).map(|(gi, (a, b))| gi * (a + b)).sum();
    let dbeta = gc / alpha;
    // d alpha contributes -beta/alpha^2 * gc; alpha = k - <x,y>.
    let dalpha = -beta / (alpha * alpha) * gc;
    let sign = |j: usize| if j == 0 { -1.0 } else { 1.0 };
    for j in 0..v.len() {
        gv[j] += g[j] + dbeta * sign(j) * y[j];
    }
    if let Some(gx) = gx {
        for j in 0..v.len() {
            gx[j] += c * g[j] - dalpha * sign(j) * y[j];
        }
    }
    if let Some(gy) = gy {
        for j in 0..v.len() {
            gy[j] += c * g[j] + dbeta * sign(j) * v[j] - dalpha * sign(j) * x[j];
        }
    }
}
