use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ParticleEnsemble;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One weighted Gaussian component. Matrices are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    weight: f64,
    mean: Vec<f64>,
    cov: Vec<f64>,
    prec: Vec<f64>,
    chol: Vec<f64>,
    log_norm: f64,
}

impl Component {
    pub fn new(weight: f64, mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::invalid("component mean must have dimension >= 1"));
        }
        if cov.len() != d * d {
            return Err(Error::Dimension { expected: d * d, got: cov.len() });
        }
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(Error::invalid(format!("component weight {weight} must be finite and >= 0")));
        }
        if mean.iter().chain(&cov).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite mean or covariance entry"));
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (cov[i * d + j], cov[j * d + i]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::invalid("covariance is not symmetric"));
                }
            }
        }
        let m = DMatrix::from_row_slice(d, d, &cov);
        let eig = m.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&e| e <= 0.0) {
            return Err(Error::invalid("covariance is not positive definite"));
        }
        let chol = m.clone().cholesky().ok_or_else(|| Error::invalid("covariance Cholesky failed"))?;
        let l = chol.l();
        let logdet = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let inv = chol.inverse();
        let to_rows = |a: &DMatrix<f64>| -> Vec<f64> {
            let mut out = Vec::with_capacity(d * d);
            for i in 0..d {
                for j in 0..d {
                    out.push(a[(i, j)]);
                }
            }
            out
        };
        Ok(Self {
            weight,
            prec: to_rows(&inv),
            chol: to_rows(&l),
            log_norm: -0.5 * (d as f64 * LN_2PI + logdet),
            mean,
            cov,
        })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
    /// Row-major covariance.
    pub fn cov(&self) -> &[f64] {
        &self.cov
    }
    /// Row-major precision (inverse covariance).
    pub fn precision(&self) -> &[f64] {
        &self.prec
    }
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `log N(x; mean, cov)`.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis(x)
    }

    fn mahalanobis(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        if d == 1 {
            let r = x[0] - self.mean[0];
            return r * r * self.prec[0];
        }
        let mut q = 0.0;
        for i in 0..d {
            let ri = x[i] - self.mean[i];
            let mut row = 0.0;
            for j in 0..d {
                row += self.prec[i * d + j] * (x[j] - self.mean[j]);
            }
            q += ri * row;
        }
        q
    }

    /// `-P (x - mean)`, the score of the component.
    fn score_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s -= self.prec[i * d + j] * (x[j] - self.mean[j]);
            }
            out[i] = s;
        }
    }
}

/// Finite mixture of Gaussians; weights sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureJson", into = "MixtureJson")]
pub struct GaussianMixture {
    components: Vec<Component>,
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components.first().ok_or_else(|| Error::invalid("mixture needs a component"))?;
        let d = first.dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(Error::Dimension { expected: d, got: c.dim() });
        }
        let total: f64 = crate::stats::neumaier_sum(components.iter().map(|c| c.weight));
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(Self { components })
    }

    /// Single Gaussian with covariance `cov` (row-major).
    pub fn gaussian(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        Self::new(vec![Component::new(1.0, mean, cov)?])
    }

    /// One-dimensional `N(mean, var)`.
    pub fn normal_1d(mean: f64, var: f64) -> Result<Self> {
        Self::gaussian(vec![mean], vec![var])
    }

    /// Isotropic `N(mean, var * I)`.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = var;
        }
        Self::gaussian(mean, cov)
    }

    /// `½ N(-a, σ²) + ½ N(a, σ²)` in one dimension.
    pub fn symmetric_pair_1d(a: f64, sigma: f64) -> Result<Self> {
        let var = sigma * sigma;
        Self::new(vec![
            Component::new(0.5, vec![-a], vec![var])?,
            Component::new(0.5, vec![a], vec![var])?,
        ])
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for c in &self.components {
            for i in 0..d {
                m[i] += c.weight * c.mean[i];
            }
        }
        m
    }

    /// Covariance of the mixture (row-major).
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let m = self.mean();
        let mut cov = vec![0.0; d * d];
        for c in &self.components {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += c.weight * (c.cov[i * d + j] + (c.mean[i] - m[i]) * (c.mean[j] - m[j]));
                }
            }
        }
        cov
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        if self.components.len() == 1 {
            return self.components[0].log_pdf(x);
        }
        let mut max = f64::NEG_INFINITY;
        let mut logs = [0.0f64; 16];
        let mut heap;
        let buf: &mut [f64] = if self.components.len() <= 16 {
            &mut logs[..self.components.len()]
        } else {
            heap = vec![0.0; self.components.len()];
            &mut heap
        };
        for (b, c) in buf.iter_mut().zip(&self.components) {
            *b = if c.weight > 0.0 { c.weight.ln() + c.log_pdf(x) } else { f64::NEG_INFINITY };
            max = max.max(*b);
        }
        max + buf.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| if c.weight > 0.0 { c.weight.ln() + c.log_pdf(x) } else { f64::NEG_INFINITY })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut r: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
        r
    }

    /// Exact score `∇ log rho(x)` written into `out`.
    pub fn score_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        if self.components.len() == 1 {
            self.components[0].score_into(x, out);
            return;
        }
        let r = self.responsibilities(x);
        out[..d].iter_mut().for_each(|v| *v = 0.0);
        let mut g = vec![0.0; d];
        for (c, rk) in self.components.iter().zip(&r) {
            if *rk == 0.0 {
                continue;
            }
            c.score_into(x, &mut g);
            for i in 0..d {
                out[i] += rk * g[i];
            }
        }
    }

    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.score_into(x, &mut out);
        out
    }

    /// Hessian of `log rho` at `x` (row-major), i.e. the Jacobian of the score:
    /// `Σ_k r_k (-P_k + g_k g_kᵀ) - s sᵀ`.
    pub fn score_jacobian_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        out[..d * d].iter_mut().for_each(|v| *v = 0.0);
        let r = self.responsibilities(x);
        let mut g = vec![0.0; d];
        let mut s = vec![0.0; d];
        for (c, rk) in self.components.iter().zip(&r) {
            if *rk == 0.0 {
                continue;
            }
            c.score_into(x, &mut g);
            for i in 0..d {
                s[i] += rk * g[i];
                for j in 0..d {
                    out[i * d + j] += rk * (g[i] * g[j] - c.prec[i * d + j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] -= s[i] * s[j];
            }
        }
    }

    /// i.i.d. draws with equal weights `1/n`; reproducible for a fixed seed.
    pub fn sample(&self, n: usize, seed: u64) -> Result<ParticleEnsemble> {
        if n < 2 {
            return Err(Error::invalid("sample needs n >= 2"));
        }
        let d = self.dim();
        let mut rng = crate::rng::rng(seed);
        let mut points = Vec::with_capacity(n * d);
        let mut z = vec![0.0; d];
        for _ in 0..n {
            let c = self.pick(rng.random::<f64>());
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            for i in 0..d {
                let mut v = c.mean[i];
                for j in 0..=i {
                    v += c.chol[i * d + j] * z[j];
                }
                points.push(v);
            }
        }
        ParticleEnsemble::equal_weight(points, d, 0.0, seed)
    }

    fn pick(&self, u: f64) -> &Component {
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                return c;
            }
        }
        // u can exceed the rounded cumulative sum by a few ulps
        self.components.iter().rev().find(|c| c.weight > 0.0).unwrap_or(&self.components[0])
    }

    /// Pushforward under `x -> A x + b` (A row-major, d×d, invertible).
    pub fn affine_pushforward(&self, a: &[f64], b: &[f64]) -> Result<Self> {
        let d = self.dim();
        let comps = self
            .components
            .iter()
            .map(|c| {
                let mut mean = b.to_vec();
                let mut cov = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..d {
                        mean[i] += a[i * d + j] * c.mean[j];
                    }
                }
                // A Σ Aᵀ
                for i in 0..d {
                    for j in 0..d {
                        let mut s = 0.0;
                        for k in 0..d {
                            for l in 0..d {
                                s += a[i * d + k] * c.cov[k * d + l] * a[j * d + l];
                            }
                        }
                        cov[i * d + j] = s;
                    }
                }
                symmetrize(&mut cov, d);
                Component::new(c.weight, mean, cov)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(comps)
    }

    /// Convolution with `N(0, var * I)` (heat flow over time `var / (2 eps)`).
    pub fn convolve_isotropic(&self, var: f64) -> Result<Self> {
        let d = self.dim();
        let comps = self
            .components
            .iter()
            .map(|c| {
                let mut cov = c.cov.clone();
                for i in 0..d {
                    cov[i * d + i] += var;
                }
                Component::new(c.weight, c.mean.clone(), cov)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(comps)
    }

    /// One-dimensional CDF.
    pub fn cdf_1d(&self, x: f64) -> f64 {
        debug_assert_eq!(self.dim(), 1);
        self.components
            .iter()
            .map(|c| c.weight * crate::stats::normal_cdf((x - c.mean[0]) / c.cov[0].sqrt()))
            .sum()
    }
}

fn symmetrize(m: &mut [f64], d: usize) {
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = v;
            m[j * d + i] = v;
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentJson {
    w: f64,
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureJson {
    components: Vec<ComponentJson>,
}

impl TryFrom<MixtureJson> for GaussianMixture {
    type Error = Error;

    fn try_from(raw: MixtureJson) -> Result<Self> {
        let comps = raw
            .components
            .into_iter()
            .map(|c| {
                let d = c.mean.len();
                if c.cov.len() != d || c.cov.iter().any(|r| r.len() != d) {
                    return Err(Error::invalid(format!("covariance must be {d}x{d}")));
                }
                Component::new(c.w, c.mean, c.cov.into_iter().flatten().collect())
            })
            .collect::<Result<Vec<_>>>()?;
        GaussianMixture::new(comps)
    }
}

impl From<GaussianMixture> for MixtureJson {
    fn from(m: GaussianMixture) -> Self {
        MixtureJson {
            components: m
                .components
                .into_iter()
                .map(|c| {
                    let d = c.mean.len();
                    ComponentJson { w: c.weight, cov: c.cov.chunks(d).map(|r| r.to_vec()).collect(), mean: c.mean }
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_components() {
        assert!(Component::new(1.0, vec![0.0], vec![-1.0]).is_err());
        assert!(Component::new(1.0, vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0]).is_err());
        assert!(Component::new(1.0, vec![0.0, 0.0], vec![1.0, 0.5, 0.4, 1.0]).is_err());
        let c = Component::new(0.4, vec![0.0], vec![1.0]).unwrap();
        assert!(GaussianMixture::new(vec![c]).is_err());
    }

    #[test]
    fn sample_is_reproducible() {
        let mix = GaussianMixture::normal_1d(0.0, 1.0).unwrap();
        let a = mix.sample(4, 7).unwrap();
        let b = mix.sample(4, 7).unwrap();
        assert_eq!(a.points(), b.points());
        assert_eq!(a.n(), 4);
        assert!(a.weights().iter().all(|&w| w == 0.25));
    }

    #[test]
    fn symmetric_pair_sample_mean() {
        let mix = GaussianMixture::symmetric_pair_1d(2.0, 1.0).unwrap();
        let ens = mix.sample(100_000, 11).unwrap();
        let est = crate::stats::mean_se(ens.points());
        assert!(est.value.abs() < 3.0 * est.std_error, "{est:?}");
    }

    #[test]
    fn sample_variance_matches_closed_form() {
        let mix = GaussianMixture::normal_1d(3.0, 4.0).unwrap();
        let ens = mix.sample(100_000, 3).unwrap();
        let s = crate::stats::sample_std(ens.points());
        let var = s * s;
        assert!((3.9..=4.1).contains(&var), "variance {var}");
    }

    #[test]
    fn score_examples() {
        let n01 = GaussianMixture::normal_1d(0.0, 1.0).unwrap();
        assert_eq!(n01.score(&[2.0]), vec![-2.0]);
        let n34 = GaussianMixture::normal_1d(3.0, 4.0).unwrap();
        assert_eq!(n34.score(&[3.0]), vec![0.0]);
        let pair = GaussianMixture::symmetric_pair_1d(1.5, 1.0).unwrap();
        assert!(pair.score(&[0.0])[0].abs() < 1e-15);
    }

    #[test]
    fn single_gaussian_score_is_linear() {
        let mix = GaussianMixture::gaussian(vec![1.0, -1.0], vec![2.0, 0.3, 0.3, 1.0]).unwrap();
        let x = [0.4, 0.7];
        let s = mix.score(&x);
        let p = mix.components()[0].precision();
        let expect = [-(p[0] * (x[0] - 1.0) + p[1] * (x[1] + 1.0)), -(p[2] * (x[0] - 1.0) + p[3] * (x[1] + 1.0))];
        assert!((s[0] - expect[0]).abs() < 1e-14 && (s[1] - expect[1]).abs() < 1e-14);
    }

    #[test]
    fn score_jacobian_matches_finite_differences() {
        let mix = GaussianMixture::new(vec![
            Component::new(0.3, vec![-1.0, 0.5], vec![1.0, 0.2, 0.2, 0.7]).unwrap(),
            Component::new(0.7, vec![1.5, -0.5], vec![0.6, -0.1, -0.1, 1.2]).unwrap(),
        ])
        .unwrap();
        let x = [0.2, 0.1];
        let mut jac = [0.0; 4];
        mix.score_jacobian_into(&x, &mut jac);
        let h = 1e-5;
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let (sp, sm) = (mix.score(&xp), mix.score(&xm));
            for i in 0..2 {
                let fd = (sp[i] - sm[i]) / (2.0 * h);
                assert!((fd - jac[i * 2 + j]).abs() < 1e-4 * (1.0 + fd.abs()), "{i}{j}: {fd} vs {}", jac[i * 2 + j]);
            }
        }
    }

    #[test]
    fn json_schema_round_trip() {
        let text = r#"{"components":[{"w":0.5,"mean":[-2.0],"cov":[[1.0]]},{"w":0.5,"mean":[2.0],"cov":[[1.0]]}]}"#;
        let mix: GaussianMixture = serde_json::from_str(text).unwrap();
        assert_eq!(mix.components().len(), 2);
        assert_eq!(serde_json::to_string(&mix).unwrap(), text);
        let bad = r#"{"components":[{"w":1.0,"mean":[0.0],"cov":[[-1.0]]}]}"#;
        assert!(serde_json::from_str::<GaussianMixture>(bad).is_err());
    }
}
