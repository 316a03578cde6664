use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::VelocityField;
use crate::collapse_lab::CollapseParams;
use crate::{Error, Result};

/// Closed-form reference and teacher fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AnalyticField {
    Zero { dim: usize, horizon: f64 },
    /// `v(y, t) = -y / (tau - t)`; undefined (non-finite) for `t >= tau`.
    LinearContraction { dim: usize, tau: f64, horizon: f64 },
    /// `v(x) = A x + b`, `A` row-major.
    Affine { a: Vec<f64>, b: Vec<f64>, horizon: f64 },
    /// Marginal velocity of the independent-coupling linear interpolant
    /// between `N(m0, s0)` and `N(m1, s1)`:
    /// `v = (m1 - m0)/T + C Σ_t⁻¹ (x - m_t) / T` with `s = t/T`,
    /// `Σ_t = (1-s)² s0 + s² s1` and `C = s s1 - (1-s) s0`.
    GaussianInterpolant { m0: Vec<f64>, s0: Vec<f64>, m1: Vec<f64>, s1: Vec<f64>, horizon: f64 },
    /// Eulerian velocity of the collapse-then-redisperse map family (1D).
    Collapse(CollapseParams),
}

impl AnalyticField {
    pub fn zero(dim: usize, horizon: f64) -> Self {
        AnalyticField::Zero { dim, horizon }
    }

    pub fn linear_contraction(dim: usize, tau: f64, horizon: f64) -> Result<Self> {
        let f = AnalyticField::LinearContraction { dim, tau, horizon };
        f.validate()?;
        Ok(f)
    }

    pub fn affine(a: Vec<f64>, b: Vec<f64>, horizon: f64) -> Result<Self> {
        let f = AnalyticField::Affine { a, b, horizon };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let horizon = match self {
            AnalyticField::Zero { horizon, .. }
            | AnalyticField::LinearContraction { horizon, .. }
            | AnalyticField::Affine { horizon, .. }
            | AnalyticField::GaussianInterpolant { horizon, .. } => *horizon,
            AnalyticField::Collapse(p) => return p.validate(),
        };
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::invalid("field horizon must be finite and > 0"));
        }
        match self {
            AnalyticField::Zero { dim, .. } | AnalyticField::LinearContraction { dim, .. } if *dim == 0 => {
                Err(Error::invalid("field dimension must be >= 1"))
            }
            AnalyticField::LinearContraction { tau, .. } if !(*tau > 0.0) => Err(Error::invalid("contraction needs tau > 0")),
            AnalyticField::Affine { a, b, .. } => {
                if b.is_empty() || a.len() != b.len() * b.len() {
                    return Err(Error::invalid("affine field needs A of size d×d and b of size d >= 1"));
                }
                if a.iter().chain(b).any(|v| !v.is_finite()) {
                    return Err(Error::invalid("affine field has non-finite entries"));
                }
                Ok(())
            }
            AnalyticField::GaussianInterpolant { m0, s0, m1, s1, .. } => {
                let d = m0.len();
                if d == 0 || m1.len() != d || s0.len() != d * d || s1.len() != d * d {
                    return Err(Error::invalid("interpolant teacher has inconsistent shapes"));
                }
                // both covariances must be valid Gaussians
                crate::measures::GaussianMixture::gaussian(m0.clone(), s0.clone())?;
                crate::measures::GaussianMixture::gaussian(m1.clone(), s1.clone())?;
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// `A(t), b(t)` of an affine-in-x field, when the field is affine.
    fn affine_parts(&self, t: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            AnalyticField::Zero { dim, .. } => Some((vec![0.0; dim * dim], vec![0.0; *dim])),
            AnalyticField::LinearContraction { dim, tau, .. } => {
                let c = -1.0 / (tau - t);
                let c = if t < *tau { c } else { f64::NAN };
                let mut a = vec![0.0; dim * dim];
                for i in 0..*dim {
                    a[i * dim + i] = c;
                }
                Some((a, vec![0.0; *dim]))
            }
            AnalyticField::Affine { a, b, .. } => Some((a.clone(), b.clone())),
            AnalyticField::GaussianInterpolant { m0, s0, m1, s1, horizon } => {
                let d = m0.len();
                let s = t / horizon;
                let sig: Vec<f64> = s0.iter().zip(s1).map(|(p, q)| (1.0 - s).powi(2) * p + s * s * q).collect();
                let c: Vec<f64> = s0.iter().zip(s1).map(|(p, q)| s * q - (1.0 - s) * p).collect();
                let a = if d == 1 {
                    vec![c[0] / sig[0] / horizon]
                } else {
                    let inv = DMatrix::from_row_slice(d, d, &sig).try_inverse()?;
                    let prod = DMatrix::from_row_slice(d, d, &c) * inv / *horizon;
                    let mut a = vec![0.0; d * d];
                    for i in 0..d {
                        for j in 0..d {
                            a[i * d + j] = prod[(i, j)];
                        }
                    }
                    a
                };
                let mt: Vec<f64> = m0.iter().zip(m1).map(|(p, q)| (1.0 - s) * p + s * q).collect();
                let mut b: Vec<f64> = m0.iter().zip(m1).map(|(p, q)| (q - p) / horizon).collect();
                for i in 0..d {
                    for j in 0..d {
                        b[i] -= a[i * d + j] * mt[j];
                    }
                }
                Some((a, b))
            }
            AnalyticField::Collapse(_) => None,
        }
    }
}

impl VelocityField for AnalyticField {
    fn dim(&self) -> usize {
        match self {
            AnalyticField::Zero { dim, .. } | AnalyticField::LinearContraction { dim, .. } => *dim,
            AnalyticField::Affine { b, .. } => b.len(),
            AnalyticField::GaussianInterpolant { m0, .. } => m0.len(),
            AnalyticField::Collapse(_) => 1,
        }
    }

    fn horizon(&self) -> f64 {
        match self {
            AnalyticField::Zero { horizon, .. }
            | AnalyticField::LinearContraction { horizon, .. }
            | AnalyticField::Affine { horizon, .. }
            | AnalyticField::GaussianInterpolant { horizon, .. } => *horizon,
            AnalyticField::Collapse(p) => p.horizon,
        }
    }

    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) {
        match self {
            AnalyticField::Zero { .. } => out.iter_mut().for_each(|v| *v = 0.0),
            AnalyticField::LinearContraction { tau, .. } => {
                let c = if t < *tau { -1.0 / (tau - t) } else { f64::NAN };
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = c * xi;
                }
            }
            AnalyticField::Affine { a, b, .. } => affine_apply(a, b, x, out),
            AnalyticField::Collapse(p) => out[0] = p.velocity(t, x[0]).unwrap_or(f64::NAN),
            AnalyticField::GaussianInterpolant { .. } => {
                let (a, b) = self.affine_parts(t).unwrap_or_else(|| nan_parts(self.dim()));
                affine_apply(&a, &b, x, out)
            }
        }
    }

    fn jacobian(&self, x: &[f64], t: f64, out: &mut [f64]) {
        match self {
            AnalyticField::Affine { a, .. } => out.copy_from_slice(a),
            AnalyticField::Collapse(p) => out[0] = p.velocity_dy(t, x[0]).unwrap_or(f64::NAN),
            _ => {
                let (a, _) = self.affine_parts(t).unwrap_or_else(|| nan_parts(self.dim()));
                out.copy_from_slice(&a)
            }
        }
    }

    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        match self {
            AnalyticField::Zero { .. } => 0.0,
            AnalyticField::LinearContraction { dim, tau, .. } => {
                if t < *tau {
                    -(*dim as f64) / (tau - t)
                } else {
                    f64::NAN
                }
            }
            AnalyticField::Affine { a, b, .. } => (0..b.len()).map(|i| a[i * b.len() + i]).sum(),
            AnalyticField::Collapse(p) => p.velocity_dy(t, x[0]).unwrap_or(f64::NAN),
            AnalyticField::GaussianInterpolant { .. } => {
                let d = self.dim();
                let (a, _) = self.affine_parts(t).unwrap_or_else(|| nan_parts(d));
                (0..d).map(|i| a[i * d + i]).sum()
            }
        }
    }
}

fn nan_parts(d: usize) -> (Vec<f64>, Vec<f64>) {
    (vec![f64::NAN; d * d], vec![f64::NAN; d])
}

fn affine_apply(a: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let d = b.len();
    for i in 0..d {
        out[i] = b[i] + (0..d).map(|j| a[i * d + j] * x[j]).sum::<f64>();
    }
}
