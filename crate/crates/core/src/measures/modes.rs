use serde::{Deserialize, Serialize};

use super::ParticleEnsemble;
use crate::{Error, Result};

/// A measurable region standing for a semantic mode. Membership is open:
/// boundaries belong to no set, so a ball of radius 0 is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModeSet {
    /// `{x : normal·x > offset}`.
    HalfSpace {
        normal: Vec<f64>,
        offset: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
    /// `{x : lo < x < hi}` coordinatewise.
    AxisBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
    /// `{x : |x - center| < radius}`.
    Ball {
        center: Vec<f64>,
        radius: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
}

impl ModeSet {
    pub fn half_space(normal: Vec<f64>, offset: f64) -> Self {
        ModeSet::HalfSpace { normal, offset, label: None }
    }
    pub fn axis_box(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        ModeSet::AxisBox { lo, hi, label: None }
    }
    pub fn ball(center: Vec<f64>, radius: f64) -> Self {
        ModeSet::Ball { center, radius, label: None }
    }
    /// One-dimensional open interval `(lo, hi)`.
    pub fn interval(lo: f64, hi: f64) -> Self {
        Self::axis_box(vec![lo], vec![hi])
    }

    pub fn with_label(mut self, l: impl Into<String>) -> Self {
        let l = Some(l.into());
        match &mut self {
            ModeSet::HalfSpace { label, .. } | ModeSet::AxisBox { label, .. } | ModeSet::Ball { label, .. } => *label = l,
        }
        self
    }

    pub fn label(&self) -> Option<&str> {
        match self {
            ModeSet::HalfSpace { label, .. } | ModeSet::AxisBox { label, .. } | ModeSet::Ball { label, .. } => label.as_deref(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModeSet::HalfSpace { normal, .. } => normal.len(),
            ModeSet::AxisBox { lo, .. } => lo.len(),
            ModeSet::Ball { center, .. } => center.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            ModeSet::HalfSpace { normal, offset, .. } => {
                if normal.is_empty() || !finite(normal) || !offset.is_finite() || normal.iter().all(|v| *v == 0.0) {
                    return Err(Error::invalid("half-space needs a finite nonzero normal and finite offset"));
                }
            }
            ModeSet::AxisBox { lo, hi, .. } => {
                if lo.is_empty() || lo.len() != hi.len() {
                    return Err(Error::invalid("axis-box corners must be nonempty and of equal length"));
                }
                if !lo.iter().chain(hi).all(|v| !v.is_nan()) {
                    return Err(Error::invalid("axis-box corners must not be NaN"));
                }
            }
            ModeSet::Ball { center, radius, .. } => {
                if center.is_empty() || !finite(center) || !(*radius >= 0.0) || !radius.is_finite() {
                    return Err(Error::invalid("ball needs a finite center and finite radius >= 0"));
                }
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        match self {
            ModeSet::HalfSpace { .. } => false,
            ModeSet::AxisBox { lo, hi, .. } => lo.iter().zip(hi).any(|(l, h)| l >= h),
            ModeSet::Ball { radius, .. } => *radius <= 0.0,
        }
    }

    pub fn contains_point(&self, x: &[f64]) -> bool {
        match self {
            ModeSet::HalfSpace { normal, offset, .. } => dot(normal, x) > *offset,
            ModeSet::AxisBox { lo, hi, .. } => x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| v > l && v < h),
            ModeSet::Ball { center, radius, .. } => dist2(center, x) < radius * radius,
        }
    }

    /// Signed depth: positive inside, negative outside. Exact Euclidean
    /// signed distance for half-spaces and balls; for boxes the minimum slack
    /// over faces (exact inside, a lower bound on distance outside).
    /// Writes the gradient in `x` into `grad`.
    pub fn depth(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        match self {
            ModeSet::HalfSpace { normal, offset, .. } => {
                let nn = dot(normal, normal).sqrt();
                for (g, n) in grad.iter_mut().zip(normal) {
                    *g = n / nn;
                }
                (dot(normal, x) - offset) / nn
            }
            ModeSet::AxisBox { lo, hi, .. } => {
                let mut best = f64::INFINITY;
                let mut arg = (0usize, 1.0);
                for i in 0..x.len() {
                    if x[i] - lo[i] < best {
                        best = x[i] - lo[i];
                        arg = (i, 1.0);
                    }
                    if hi[i] - x[i] < best {
                        best = hi[i] - x[i];
                        arg = (i, -1.0);
                    }
                }
                grad.iter_mut().for_each(|g| *g = 0.0);
                grad[arg.0] = arg.1;
                best
            }
            ModeSet::Ball { center, radius, .. } => {
                let r = dist2(center, x).sqrt();
                for ((g, xi), ci) in grad.iter_mut().zip(x).zip(center) {
                    *g = if r > 0.0 { -(xi - ci) / r } else { 0.0 };
                }
                radius - r
            }
        }
    }

    /// Geometric containment `inner ⊆ self`, decided from the parameters.
    pub fn contains_set(&self, inner: &ModeSet) -> bool {
        if inner.dim() != self.dim() {
            return false;
        }
        if inner.is_empty() {
            return true;
        }
        match (self, inner) {
            (ModeSet::HalfSpace { normal: n1, offset: o1, .. }, ModeSet::HalfSpace { normal: n2, offset: o2, .. }) => {
                let (a, b) = (dot(n1, n1).sqrt(), dot(n2, n2).sqrt());
                let parallel = n1.iter().zip(n2).all(|(x, y)| (x / a - y / b).abs() <= 1e-12);
                parallel && o2 / b >= o1 / a
            }
            (ModeSet::HalfSpace { normal, offset, .. }, inner) => {
                // min of normal·x over the closure of inner must be >= offset
                inner_min_linear(inner, normal).is_some_and(|m| m >= *offset)
            }
            (_, ModeSet::HalfSpace { .. }) => false,
            (ModeSet::AxisBox { lo, hi, .. }, ModeSet::AxisBox { lo: l2, hi: h2, .. }) => {
                (0..lo.len()).all(|i| l2[i] >= lo[i] && h2[i] <= hi[i])
            }
            (ModeSet::AxisBox { lo, hi, .. }, ModeSet::Ball { center, radius, .. }) => {
                (0..lo.len()).all(|i| center[i] - radius >= lo[i] && center[i] + radius <= hi[i])
            }
            (ModeSet::Ball { center, radius, .. }, ModeSet::Ball { center: c2, radius: r2, .. }) => {
                dist2(center, c2).sqrt() + r2 <= *radius
            }
            (ModeSet::Ball { center, radius, .. }, ModeSet::AxisBox { lo, hi, .. }) => {
                // farthest corner of the box from the center
                let far: f64 = (0..lo.len()).map(|i| (center[i] - lo[i]).abs().max((hi[i] - center[i]).abs()).powi(2)).sum();
                far.sqrt() <= *radius
            }
        }
    }
}

fn inner_min_linear(set: &ModeSet, n: &[f64]) -> Option<f64> {
    match set {
        ModeSet::HalfSpace { .. } => None,
        ModeSet::AxisBox { lo, hi, .. } => {
            let mut m = 0.0;
            for i in 0..n.len() {
                let c = if n[i] >= 0.0 { n[i] * lo[i] } else { n[i] * hi[i] };
                if n[i] != 0.0 && !c.is_finite() {
                    return None;
                }
                m += if n[i] == 0.0 { 0.0 } else { c };
            }
            Some(m)
        }
        ModeSet::Ball { center, radius, .. } => Some(dot(n, center) - radius * dot(n, n).sqrt()),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Empirical mode mass with its sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeMass {
    pub mass: f64,
    pub n: usize,
}

impl ModeMass {
    /// Hoeffding radius for this sample size; see [`hoeffding_radius`].
    pub fn radius(&self, alpha: f64, n_modes: usize, n_times: usize) -> f64 {
        hoeffding_radius(alpha, n_modes, n_times, self.n)
    }
}

/// Fraction of an equal-weight ensemble lying in `set`.
pub fn mode_mass(ens: &ParticleEnsemble, set: &ModeSet) -> Result<ModeMass> {
    if !ens.is_equal_weight() {
        return Err(Error::invalid("mode_mass requires an equal-weight ensemble"));
    }
    if set.dim() != ens.dim() {
        return Err(Error::Dimension { expected: ens.dim(), got: set.dim() });
    }
    let hits = ens.iter_points().filter(|x| set.contains_point(x)).count();
    Ok(ModeMass { mass: hits as f64 / ens.n() as f64, n: ens.n() })
}

/// `sqrt(ln(2 K (N+1) / alpha) / (2 B))`, simultaneous over `K` modes and
/// `n_times = N + 1` grid times.
pub fn hoeffding_radius(alpha: f64, n_modes: usize, n_times: usize, batch: usize) -> f64 {
    ((2.0 * n_modes as f64 * n_times as f64 / alpha).ln() / (2.0 * batch as f64)).sqrt()
}
