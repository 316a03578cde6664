use std::sync::{Arc, RwLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::VelocityField;
use crate::dynamics::Diffusivity;
use crate::measures::GaussianMixture;
use crate::{Error, Result};

/// A curve of laws with closed-form Gaussian-mixture marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LawPath {
    Static { law: GaussianMixture },
    /// Pure diffusion with constant `eps`: covariances grow by `2 eps t I`.
    HeatFlow { initial: GaussianMixture, eps: f64 },
    /// Transport by `v(x) = A x + b`: the law is pushed by
    /// `x -> e^{tA} x + (∫_0^t e^{sA} ds) b`.
    AffineFlow { initial: GaussianMixture, a: Vec<f64>, b: Vec<f64> },
}

impl LawPath {
    pub fn dim(&self) -> usize {
        match self {
            LawPath::Static { law } => law.dim(),
            LawPath::HeatFlow { initial, .. } | LawPath::AffineFlow { initial, .. } => initial.dim(),
        }
    }

    pub fn law(&self, t: f64) -> Result<GaussianMixture> {
        match self {
            LawPath::Static { law } => Ok(law.clone()),
            LawPath::HeatFlow { initial, eps } => {
                if *eps < 0.0 {
                    return Err(Error::invalid("heat flow needs eps >= 0"));
                }
                if t == 0.0 || *eps == 0.0 {
                    return Ok(initial.clone());
                }
                initial.convolve_isotropic(2.0 * eps * t)
            }
            LawPath::AffineFlow { initial, a, b } => {
                let d = initial.dim();
                if a.len() != d * d || b.len() != d {
                    return Err(Error::invalid("affine flow needs A: d×d and b: d"));
                }
                // exp of the augmented generator [[A, b], [0, 0]]
                let mut g = DMatrix::zeros(d + 1, d + 1);
                for i in 0..d {
                    for j in 0..d {
                        g[(i, j)] = a[i * d + j] * t;
                    }
                    g[(i, d)] = b[i] * t;
                }
                let e = g.exp();
                let mut m = vec![0.0; d * d];
                let mut c = vec![0.0; d];
                for i in 0..d {
                    for j in 0..d {
                        m[i * d + j] = e[(i, j)];
                    }
                    c[i] = e[(i, d)];
                }
                initial.affine_pushforward(&m, &c)
            }
        }
    }
}

/// Exact score `∇ log rho_t` of a [`LawPath`], with a small cache of the
/// per-time mixtures.
pub struct ScoreField {
    path: LawPath,
    horizon: f64,
    cache: RwLock<Vec<(u64, Arc<GaussianMixture>)>>,
}

const CACHE_SLOTS: usize = 64;

impl std::fmt::Debug for ScoreField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScoreField").field("path", &self.path).field("horizon", &self.horizon).finish()
    }
}

impl Clone for ScoreField {
    fn clone(&self) -> Self {
        Self::new(self.path.clone(), self.horizon)
    }
}

impl ScoreField {
    pub fn new(path: LawPath, horizon: f64) -> Self {
        Self { path, horizon, cache: RwLock::new(Vec::new()) }
    }

    pub fn of_mixture(mix: GaussianMixture, horizon: f64) -> Self {
        Self::new(LawPath::Static { law: mix }, horizon)
    }

    pub fn path(&self) -> &LawPath {
        &self.path
    }

    /// Law at time `t` (cached).
    pub fn law(&self, t: f64) -> Result<Arc<GaussianMixture>> {
        let key = t.to_bits();
        if let Some((_, m)) = self.cache.read().unwrap().iter().find(|(k, _)| *k == key) {
            return Ok(m.clone());
        }
        let m = Arc::new(self.path.law(t)?);
        let mut w = self.cache.write().unwrap();
        if w.len() >= CACHE_SLOTS {
            w.remove(0);
        }
        w.push((key, m.clone()));
        Ok(m)
    }

    pub fn score(&self, x: &[f64], t: f64, out: &mut [f64]) {
        match self.law(t) {
            Ok(m) => m.score_into(x, out),
            Err(_) => out.iter_mut().for_each(|v| *v = f64::NAN),
        }
    }

    pub fn score_jacobian(&self, x: &[f64], t: f64, out: &mut [f64]) {
        match self.law(t) {
            Ok(m) => m.score_jacobian_into(x, out),
            Err(_) => out.iter_mut().for_each(|v| *v = f64::NAN),
        }
    }
}

impl VelocityField for ScoreField {
    fn dim(&self) -> usize {
        self.path.dim()
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.score(x, t, out)
    }
    fn jacobian(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.score_jacobian(x, t, out)
    }
}

/// `v = b - eps(t) ∇ log rho_t`: turns Fokker–Planck dynamics into a
/// continuity equation with the same marginals.
pub struct CurrentVelocity<'a> {
    pub drift: &'a dyn VelocityField,
    pub eps: Diffusivity,
    pub score: &'a ScoreField,
}

impl<'a> CurrentVelocity<'a> {
    pub fn new(drift: &'a dyn VelocityField, eps: Diffusivity, score: &'a ScoreField) -> Result<Self> {
        if drift.dim() != score.dim() {
            return Err(Error::Dimension { expected: drift.dim(), got: score.dim() });
        }
        Ok(Self { drift, eps, score })
    }
}

impl VelocityField for CurrentVelocity<'_> {
    fn dim(&self) -> usize {
        self.drift.dim()
    }
    fn horizon(&self) -> f64 {
        self.drift.horizon().min(self.score.horizon())
    }
    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.drift.velocity(x, t, out);
        let e = self.eps.at(t);
        if e != 0.0 {
            let mut s = vec![0.0; out.len()];
            self.score.score(x, t, &mut s);
            for (o, si) in out.iter_mut().zip(&s) {
                *o -= e * si;
            }
        }
    }
    fn jacobian(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.drift.jacobian(x, t, out);
        let e = self.eps.at(t);
        if e != 0.0 {
            let mut h = vec![0.0; out.len()];
            self.score.score_jacobian(x, t, &mut h);
            for (o, hi) in out.iter_mut().zip(&h) {
                *o -= e * hi;
            }
        }
    }
}
