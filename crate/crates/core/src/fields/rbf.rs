use serde::{Deserialize, Serialize};

use super::VelocityField;
use crate::{Error, Result};

/// Parameter layout of one time knot: `[W (m×d), A (d×d), b (d)]`, all
/// row-major, where `W[c, i]` is the output-`i` weight of center `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RbfLayout {
    pub m: usize,
    pub d: usize,
}

impl RbfLayout {
    pub fn per_knot(&self) -> usize {
        self.m * self.d + self.d * self.d + self.d
    }
    pub fn w(&self, c: usize, i: usize) -> usize {
        c * self.d + i
    }
    pub fn a(&self, i: usize, j: usize) -> usize {
        self.m * self.d + i * self.d + j
    }
    pub fn b(&self, i: usize) -> usize {
        self.m * self.d + self.d * self.d + i
    }
}

/// Gaussian-RBF plus affine field, piecewise linear in time between knots:
/// `v(x, t) = Σ_c φ_c(x) W_c(t) + A(t) x + b(t)`, `φ_c = exp(-|x - c|² / 2h²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RbfJson", into = "RbfJson")]
pub struct RbfField {
    layout: RbfLayout,
    centers: Vec<f64>,
    bandwidth: f64,
    knot_times: Vec<f64>,
    theta: Vec<f64>,
}

impl RbfField {
    /// All-zero parameters.
    pub fn zeros(dim: usize, centers: Vec<f64>, bandwidth: f64, knot_times: Vec<f64>) -> Result<Self> {
        let m = if dim == 0 { 0 } else { centers.len() / dim };
        let p = RbfLayout { m, d: dim }.per_knot() * knot_times.len();
        Self::new(dim, centers, bandwidth, knot_times, vec![0.0; p])
    }

    pub fn new(dim: usize, centers: Vec<f64>, bandwidth: f64, knot_times: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("RBF field dimension must be >= 1"));
        }
        if centers.len() % dim != 0 {
            return Err(Error::invalid("RBF centers do not split into rows of the field dimension"));
        }
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::invalid(format!("RBF bandwidth must be finite and > 0, got {bandwidth}")));
        }
        if knot_times.len() < 2 || knot_times[0] != 0.0 || knot_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("RBF knot times must start at 0, be strictly increasing and number >= 2"));
        }
        let layout = RbfLayout { m: centers.len() / dim, d: dim };
        let expected = layout.per_knot() * knot_times.len();
        if theta.len() != expected {
            return Err(Error::Dimension { expected, got: theta.len() });
        }
        if theta.iter().chain(&centers).chain(&knot_times).any(|v| !v.is_finite()) {
            return Err(Error::invalid("RBF field has non-finite entries"));
        }
        Ok(Self { layout, centers, bandwidth, knot_times, theta })
    }

    pub fn layout(&self) -> RbfLayout {
        self.layout
    }
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }
    pub fn knot_times(&self) -> &[f64] {
        &self.knot_times
    }
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new(self.layout.d, self.centers.clone(), self.bandwidth, self.knot_times.clone(), theta)
    }

    /// Knot index `j` and weights `(1 - λ, λ)` on knots `j`, `j + 1`.
    pub fn knot_weights(&self, t: f64) -> (usize, f64, f64) {
        let k = &self.knot_times;
        let last = k.len() - 2;
        let j = match k.partition_point(|&s| s <= t) {
            0 => 0,
            p => (p - 1).min(last),
        };
        let lam = ((t - k[j]) / (k[j + 1] - k[j])).clamp(0.0, 1.0);
        (j, 1.0 - lam, lam)
    }

    /// Kernel values `φ_c(x)`.
    pub fn kernels(&self, x: &[f64], phi: &mut [f64]) {
        let d = self.layout.d;
        let inv = 0.5 / (self.bandwidth * self.bandwidth);
        for (c, p) in phi.iter_mut().enumerate() {
            let r2: f64 = self.centers[c * d..(c + 1) * d].iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            *p = (-r2 * inv).exp();
        }
    }

    /// Interpolated knot parameters at `t`.
    fn theta_at(&self, t: f64, buf: &mut Vec<f64>) {
        let p = self.layout.per_knot();
        let (j, wl, wr) = self.knot_weights(t);
        buf.clear();
        buf.extend(
            self.theta[j * p..(j + 1) * p].iter().zip(&self.theta[(j + 1) * p..(j + 2) * p]).map(|(a, b)| wl * a + wr * b),
        );
    }

    /// Adds `coef_v · ∂v/∂θ + coef_div · ∂(∇·v)/∂θ` at `(x, t)` into `grad`.
    pub fn accumulate_param_grad(&self, x: &[f64], t: f64, coef_v: &[f64], coef_div: f64, grad: &mut [f64]) {
        let RbfLayout { m, d } = self.layout;
        let p = self.layout.per_knot();
        let (j, wl, wr) = self.knot_weights(t);
        let mut phi = vec![0.0; m];
        self.kernels(x, &mut phi);
        let h2 = self.bandwidth * self.bandwidth;
        let mut local = vec![0.0; p];
        for c in 0..m {
            for i in 0..d {
                let dphi = -phi[c] * (x[i] - self.centers[c * d + i]) / h2;
                local[self.layout.w(c, i)] = coef_v[i] * phi[c] + coef_div * dphi;
            }
        }
        for i in 0..d {
            for k in 0..d {
                local[self.layout.a(i, k)] = coef_v[i] * x[k];
            }
            local[self.layout.a(i, i)] += coef_div;
            local[self.layout.b(i)] = coef_v[i];
        }
        for (q, l) in local.iter().enumerate() {
            if wl != 0.0 {
                grad[j * p + q] += wl * l;
            }
            if wr != 0.0 {
                grad[(j + 1) * p + q] += wr * l;
            }
        }
    }

    /// Shared feature vector `[φ_1..φ_m, x_1..x_d, 1]`: `∂v_i/∂θ` is this
    /// vector, scaled by the knot weight, in output `i`'s slots.
    pub fn features(&self, x: &[f64], out: &mut [f64]) {
        let RbfLayout { m, d } = self.layout;
        self.kernels(x, &mut out[..m]);
        out[m..m + d].copy_from_slice(x);
        out[m + d] = 1.0;
    }

    /// Index of the parameter multiplying feature `f` in output `i` of knot `k`.
    pub fn feature_param(&self, knot: usize, i: usize, f: usize) -> usize {
        let RbfLayout { m, d } = self.layout;
        let base = knot * self.layout.per_knot();
        if f < m {
            base + self.layout.w(f, i)
        } else if f < m + d {
            base + self.layout.a(i, f - m)
        } else {
            base + self.layout.b(i)
        }
    }

    /// Velocity, Jacobian and the feature vector of [`Self::features`] from
    /// one kernel evaluation. Returns the active knot and its weights as in
    /// [`Self::knot_weights`].
    pub(crate) fn eval_with_features(&self, x: &[f64], t: f64, v: &mut [f64], jac: &mut [f64], feat: &mut [f64]) -> (usize, f64, f64) {
        let RbfLayout { m, d } = self.layout;
        let p = self.layout.per_knot();
        let (j, wl, wr) = self.knot_weights(t);
        self.features(x, feat);
        let lo = &self.theta[j * p..(j + 1) * p];
        let hi = &self.theta[(j + 1) * p..(j + 2) * p];
        let th = |q: usize| wl * lo[q] + wr * hi[q];
        let h2 = self.bandwidth * self.bandwidth;
        for i in 0..d {
            let mut vi = th(self.layout.b(i));
            for k in 0..d {
                let a = th(self.layout.a(i, k));
                vi += a * x[k];
                jac[i * d + k] = a;
            }
            v[i] = vi;
        }
        for c in 0..m {
            let phi = feat[c];
            for i in 0..d {
                let w = th(self.layout.w(c, i));
                v[i] += w * phi;
                for k in 0..d {
                    jac[i * d + k] -= w * phi * (x[k] - self.centers[c * d + k]) / h2;
                }
            }
        }
        (j, wl, wr)
    }

    /// Adds `noise · ξ` where `ξ` has i.i.d. standard-normal RBF weights `W`
    /// (all knots), scaled to unit Euclidean norm.
    pub fn perturbed(&self, magnitude: f64, seed: u64) -> Result<Self> {
        use rand::Rng;
        let mut rng = crate::rng::rng(seed);
        let p = self.layout.per_knot();
        let md = self.layout.m * self.layout.d;
        let mut xi = vec![0.0; self.theta.len()];
        for k in 0..self.knot_times.len() {
            for q in 0..md {
                xi[k * p + q] = rng.sample(rand_distr::StandardNormal);
            }
        }
        let norm = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        let theta = self.theta.iter().zip(&xi).map(|(t, x)| t + magnitude * x / norm).collect();
        self.with_theta(theta)
    }
}

impl VelocityField for RbfField {
    fn dim(&self) -> usize {
        self.layout.d
    }

    fn horizon(&self) -> f64 {
        *self.knot_times.last().unwrap()
    }

    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let RbfLayout { m, d } = self.layout;
        let mut th = Vec::with_capacity(self.layout.per_knot());
        self.theta_at(t, &mut th);
        let mut phi = vec![0.0; m];
        self.kernels(x, &mut phi);
        for i in 0..d {
            let mut v = th[self.layout.b(i)];
            for k in 0..d {
                v += th[self.layout.a(i, k)] * x[k];
            }
            for (c, p) in phi.iter().enumerate() {
                v += p * th[self.layout.w(c, i)];
            }
            out[i] = v;
        }
    }

    fn jacobian(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let RbfLayout { m, d } = self.layout;
        let mut th = Vec::with_capacity(self.layout.per_knot());
        self.theta_at(t, &mut th);
        let mut phi = vec![0.0; m];
        self.kernels(x, &mut phi);
        let h2 = self.bandwidth * self.bandwidth;
        for i in 0..d {
            for k in 0..d {
                out[i * d + k] = th[self.layout.a(i, k)];
            }
        }
        for c in 0..m {
            for k in 0..d {
                let dphi = -phi[c] * (x[k] - self.centers[c * d + k]) / h2;
                for i in 0..d {
                    out[i * d + k] += th[self.layout.w(c, i)] * dphi;
                }
            }
        }
    }

    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        let RbfLayout { m, d } = self.layout;
        let mut th = Vec::with_capacity(self.layout.per_knot());
        self.theta_at(t, &mut th);
        let mut phi = vec![0.0; m];
        self.kernels(x, &mut phi);
        let h2 = self.bandwidth * self.bandwidth;
        let mut div: f64 = (0..d).map(|i| th[self.layout.a(i, i)]).sum();
        for c in 0..m {
            for i in 0..d {
                div -= th[self.layout.w(c, i)] * phi[c] * (x[i] - self.centers[c * d + i]) / h2;
            }
        }
        div
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KnotJson {
    w: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RbfJson {
    dim: usize,
    centers: Vec<Vec<f64>>,
    bandwidth: f64,
    knot_times: Vec<f64>,
    knots: Vec<KnotJson>,
}

impl TryFrom<RbfJson> for RbfField {
    type Error = Error;
    fn try_from(j: RbfJson) -> Result<Self> {
        let d = j.dim;
        let m = j.centers.len();
        if j.knots.len() != j.knot_times.len() {
            return Err(Error::invalid("one parameter block per knot time is required"));
        }
        let rows_ok = |rows: &Vec<Vec<f64>>, r: usize| rows.len() == r && rows.iter().all(|x| x.len() == d);
        if !rows_ok(&j.centers, m) {
            return Err(Error::invalid(format!("RBF centers must have {d} coordinates")));
        }
        let mut theta = Vec::new();
        for k in &j.knots {
            if !rows_ok(&k.w, m) || !rows_ok(&k.a, d) || k.b.len() != d {
                return Err(Error::invalid(format!("knot block must have w: {m}x{d}, a: {d}x{d}, b: {d}")));
            }
            theta.extend(k.w.iter().flatten());
            theta.extend(k.a.iter().flatten());
            theta.extend(&k.b);
        }
        RbfField::new(d, j.centers.into_iter().flatten().collect(), j.bandwidth, j.knot_times, theta)
    }
}

impl From<RbfField> for RbfJson {
    fn from(f: RbfField) -> Self {
        let RbfLayout { m, d } = f.layout;
        let p = f.layout.per_knot();
        let rows = |s: &[f64]| s.chunks(d).map(|c| c.to_vec()).collect::<Vec<_>>();
        let knots = f
            .theta
            .chunks(p)
            .map(|k| KnotJson { w: rows(&k[..m * d]), a: rows(&k[m * d..m * d + d * d]), b: k[m * d + d * d..].to_vec() })
            .collect();
        RbfJson { dim: d, centers: rows(&f.centers), bandwidth: f.bandwidth, knot_times: f.knot_times, knots }
    }
}
