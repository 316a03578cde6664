use nalgebra::DMatrix;

use crate::measures::{GaussianMixture, ParticleEnsemble};
use crate::{Error, Result};

fn single(mu: &GaussianMixture) -> Result<(Vec<f64>, DMatrix<f64>)> {
    match mu.components() {
        [c] => {
            let d = c.dim();
            Ok((c.mean().to_vec(), DMatrix::from_row_slice(d, d, c.cov())))
        }
        _ => Err(Error::invalid("closed-form geodesics need single-component endpoints")),
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = m.clone().symmetric_eigen();
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let sym = (m + m.transpose()) * 0.5;
    sym.transpose().as_slice().to_vec()
}

/// Optimal (Bures) map between Gaussians, `T(x) = m1 + A (x - m0)`, returned
/// as the row-major matrix `A` and the offset `m1 - A m0`.
pub fn bb_map(mu0: &GaussianMixture, mu1: &GaussianMixture) -> Result<(Vec<f64>, Vec<f64>)> {
    let (m0, s0) = single(mu0)?;
    let (m1, s1) = single(mu1)?;
    if m0.len() != m1.len() {
        return Err(Error::Dimension { expected: m0.len(), got: m1.len() });
    }
    let r = sym_sqrt(&s0);
    let rinv = r.clone().try_inverse().ok_or_else(|| Error::invalid("singular covariance"))?;
    let a = &rinv * sym_sqrt(&(&r * &s1 * &r)) * &rinv;
    let a = (&a + a.transpose()) * 0.5;
    let shift: Vec<f64> = (0..m0.len()).map(|i| m1[i] - (0..m0.len()).map(|j| a[(i, j)] * m0[j]).sum::<f64>()).collect();
    Ok((row_major(&a), shift))
}

/// McCann interpolant at fraction `s ∈ [0, 1]`: the pushforward of `mu0`
/// under `(1 - s) id + s T`.
pub fn bb_geodesic(mu0: &GaussianMixture, mu1: &GaussianMixture, s: f64) -> Result<GaussianMixture> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::TimeOutOfRange { t: s, horizon: 1.0 });
    }
    let (a, b) = interpolated_map(mu0, mu1, s)?;
    mu0.affine_pushforward(&a, &b)
}

fn interpolated_map(mu0: &GaussianMixture, mu1: &GaussianMixture, s: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (a, b) = bb_map(mu0, mu1)?;
    let d = b.len();
    let a_s: Vec<f64> = (0..d * d).map(|k| (1.0 - s) * f64::from(u8::from(k / d == k % d)) + s * a[k]).collect();
    let b_s: Vec<f64> = b.iter().map(|v| s * v).collect();
    Ok((a_s, b_s))
}

/// Moves each particle of `ens` along the displacement interpolation to
/// fraction `s`; the ensemble is assumed to sample `mu0`.
pub fn bb_pushforward(ens: &ParticleEnsemble, mu0: &GaussianMixture, mu1: &GaussianMixture, s: f64) -> Result<ParticleEnsemble> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::TimeOutOfRange { t: s, horizon: 1.0 });
    }
    let (a, b) = interpolated_map(mu0, mu1, s)?;
    let d = b.len();
    if ens.dim() != d {
        return Err(Error::Dimension { expected: d, got: ens.dim() });
    }
    ens.map_points(|x, y| {
        for i in 0..d {
            y[i] = b[i] + (0..d).map(|j| a[i * d + j] * x[j]).sum::<f64>();
        }
    })
}

/// Closed-form W2 between single Gaussians.
pub fn gaussian_w2(mu0: &GaussianMixture, mu1: &GaussianMixture) -> Result<f64> {
    let (m0, s0) = single(mu0)?;
    let (m1, s1) = single(mu1)?;
    if m0.len() != m1.len() {
        return Err(Error::Dimension { expected: m0.len(), got: m1.len() });
    }
    let r = sym_sqrt(&s0);
    let cross = sym_sqrt(&(&r * &s1 * &r));
    let bures = (s0.trace() + s1.trace() - 2.0 * cross.trace()).max(0.0);
    let mean: f64 = m0.iter().zip(&m1).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((mean + bures).sqrt())
}
