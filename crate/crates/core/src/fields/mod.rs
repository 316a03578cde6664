//! Velocity fields with exact evaluation, Jacobians and divergence.

mod analytic;
mod rbf;
mod score;

pub use analytic::AnalyticField;
pub use rbf::{RbfField, RbfLayout};
pub use score::{CurrentVelocity, LawPath, ScoreField};

use rand::Rng;

use crate::stats::McEstimate;
use crate::{Error, Result};

/// A time-dependent vector field on `R^d × [0, T]` with an analytic Jacobian.
///
/// Implementations do not check their arguments; use [`eval`] and
/// [`divergence_exact`] for checked access.
pub trait VelocityField: Send + Sync {
    fn dim(&self) -> usize;
    fn horizon(&self) -> f64;

    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]);

    /// Row-major `J_ij = ∂v_i / ∂x_j`.
    fn jacobian(&self, x: &[f64], t: f64, out: &mut [f64]);

    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        let d = self.dim();
        let mut j = vec![0.0; d * d];
        self.jacobian(x, t, &mut j);
        (0..d).map(|i| j[i * d + i]).sum()
    }

    /// `J z`.
    fn jvp(&self, x: &[f64], t: f64, z: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let mut j = vec![0.0; d * d];
        self.jacobian(x, t, &mut j);
        for i in 0..d {
            out[i] = (0..d).map(|k| j[i * d + k] * z[k]).sum();
        }
    }
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn horizon(&self) -> f64 {
        (**self).horizon()
    }
    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (**self).velocity(x, t, out)
    }
    fn jacobian(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (**self).jacobian(x, t, out)
    }
    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        (**self).divergence(x, t)
    }
    fn jvp(&self, x: &[f64], t: f64, z: &[f64], out: &mut [f64]) {
        (**self).jvp(x, t, z, out)
    }
}

pub(crate) fn check_args(field: &dyn VelocityField, x: &[f64], t: f64) -> Result<()> {
    if x.len() != field.dim() {
        return Err(Error::Dimension { expected: field.dim(), got: x.len() });
    }
    let horizon = field.horizon();
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::TimeOutOfRange { t, horizon });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite evaluation point"));
    }
    Ok(())
}

/// Checked evaluation of `v(x, t)`.
pub fn eval(field: &dyn VelocityField, x: &[f64], t: f64) -> Result<Vec<f64>> {
    check_args(field, x, t)?;
    let mut out = vec![0.0; field.dim()];
    field.velocity(x, t, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { particle: 0, time: t });
    }
    Ok(out)
}

/// Trace of the analytic Jacobian.
pub fn divergence_exact(field: &dyn VelocityField, x: &[f64], t: f64) -> Result<f64> {
    check_args(field, x, t)?;
    Ok(field.divergence(x, t))
}

/// Hutchinson estimate `(1/R) Σ ζᵀ J ζ` with Rademacher probes; the standard
/// error is the spread over probes.
pub fn divergence_hutchinson(field: &dyn VelocityField, x: &[f64], t: f64, probes: usize, seed: u64) -> Result<McEstimate> {
    check_args(field, x, t)?;
    if probes == 0 {
        return Err(Error::invalid("Hutchinson needs at least one probe"));
    }
    let mut rng = crate::rng::rng(seed);
    Ok(hutchinson_with(field, x, t, probes, &mut rng))
}

pub(crate) fn hutchinson_with(field: &dyn VelocityField, x: &[f64], t: f64, probes: usize, rng: &mut impl Rng) -> McEstimate {
    let d = field.dim();
    let mut z = vec![0.0; d];
    let mut jz = vec![0.0; d];
    let vals: Vec<f64> = (0..probes)
        .map(|_| {
            for zi in z.iter_mut() {
                *zi = if rng.random::<bool>() { 1.0 } else { -1.0 };
            }
            field.jvp(x, t, &z, &mut jz);
            z.iter().zip(&jz).map(|(a, b)| a * b).sum()
        })
        .collect();
    crate::stats::mean_se(&vals)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hutchinson_identity_is_exact() {
        let f = AnalyticField::affine(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![0.0; 3], 1.0).unwrap();
        for r in [1, 7, 64] {
            let est = divergence_hutchinson(&f, &[0.3, -1.0, 2.0], 0.5, r, 3).unwrap();
            assert_eq!(est.value, 3.0);
        }
    }

    #[test]
    fn hutchinson_diag_matches_trace() {
        let f = AnalyticField::affine(vec![2.0, 0.0, 0.0, -3.0], vec![0.0; 2], 1.0).unwrap();
        let est = divergence_hutchinson(&f, &[1.0, 1.0], 0.0, 10_000, 5).unwrap();
        assert!((est.value + 1.0).abs() <= 3.0 * est.std_error.max(1e-300), "{est:?}");
    }

    #[test]
    fn eval_rejects_out_of_range_time() {
        let f = AnalyticField::zero(1, 1.0);
        assert!(matches!(eval(&f, &[0.0], 1.5), Err(Error::TimeOutOfRange { .. })));
        assert!(eval(&f, &[0.0], -0.1).is_err());
        assert_eq!(eval(&f, &[4.0], 1.0).unwrap(), vec![0.0]);
    }
}
