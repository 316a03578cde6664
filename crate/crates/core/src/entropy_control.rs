//! Entropy-rate estimators, lower confidence bounds and effective budgets.
//!
//! For a continuity-equation flow `dH/dt = E[∇·v]`; for Fokker–Planck
//! dynamics `dH/dt = E[∇·b] + eps(t) I(mu_t)`. The finite-difference series
//! of k-NN entropies is an independent oracle for both.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Diffusivity, TrajectoryRecord};
use crate::fields::{hutchinson_with, ScoreField, VelocityField};
use crate::measures::{differential_entropy, EntropyConfig, ParticleEnsemble, TimeGrid};
use crate::stats::mean_se;
use crate::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_PROBES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateMethod {
    DivExact,
    DivHutchinson,
    FpForm,
    FiniteDifference,
}

impl RateMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            RateMethod::DivExact => "div-exact",
            RateMethod::DivHutchinson => "div-hutchinson",
            RateMethod::FpForm => "fp-form",
            RateMethod::FiniteDifference => "finite-difference",
        }
    }
}

/// How `∇·v` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DivMode {
    Exact,
    Hutchinson { probes: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyRateEstimate {
    pub index: usize,
    pub time: f64,
    /// Nats per unit time.
    pub value: f64,
    pub std_error: f64,
    pub probes: usize,
    pub method: RateMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRateSeries {
    pub grid: TimeGrid,
    pub estimates: Vec<EntropyRateEstimate>,
    pub alpha: f64,
}

impl EntropyRateSeries {
    pub fn new(grid: TimeGrid, mut estimates: Vec<EntropyRateEstimate>, alpha: f64) -> Result<Self> {
        if estimates.len() != grid.len() {
            return Err(Error::Dimension { expected: grid.len(), got: estimates.len() });
        }
        check_alpha(alpha)?;
        for (k, (e, &t)) in estimates.iter_mut().zip(grid.times()).enumerate() {
            if !e.value.is_finite() || !(e.std_error >= 0.0) {
                return Err(Error::NonFinite { particle: 0, time: t });
            }
            e.index = k;
            e.time = t;
        }
        Ok(Self { grid, estimates, alpha })
    }

    pub fn values(&self) -> Vec<f64> {
        self.estimates.iter().map(|e| e.value).collect()
    }

    pub fn std_errors(&self) -> Vec<f64> {
        self.estimates.iter().map(|e| e.std_error).collect()
    }

    /// Columns `t, value, std_error, lcb, method`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let lcbs = lcb(self, self.alpha)?;
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "value", "std_error", "lcb", "method"])?;
        for (e, l) in self.estimates.iter().zip(lcbs) {
            wr.write_record([
                format!("{:?}", e.time),
                format!("{:?}", e.value),
                format!("{:?}", e.std_error),
                format!("{l:?}"),
                e.method.as_str().to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn require_equal_weight(ens: &ParticleEnsemble) -> Result<()> {
    if !ens.is_equal_weight() {
        return Err(Error::invalid("entropy-rate estimators need equal-weight ensembles"));
    }
    Ok(())
}

/// Sample mean of `∇·v` over the ensemble.
///
/// In Hutchinson mode every particle gets its own probe stream and the
/// standard error is the spread of the per-particle estimates, which carries
/// both probe and sampling noise.
pub fn entropy_rate_div(field: &dyn VelocityField, ens: &ParticleEnsemble, mode: DivMode) -> Result<EntropyRateEstimate> {
    require_equal_weight(ens)?;
    if field.dim() != ens.dim() {
        return Err(Error::Dimension { expected: field.dim(), got: ens.dim() });
    }
    let t = ens.time();
    let pts: Vec<&[f64]> = ens.iter_points().collect();
    let (terms, probes, method): (Vec<f64>, usize, RateMethod) = match mode {
        DivMode::Exact => (pts.par_iter().map(|x| field.divergence(x, t)).collect(), 0, RateMethod::DivExact),
        DivMode::Hutchinson { probes, seed } => {
            if probes == 0 {
                return Err(Error::invalid("Hutchinson needs at least one probe"));
            }
            let terms = pts
                .par_iter()
                .enumerate()
                .map(|(i, x)| {
                    let mut rng = crate::rng::stream_rng(seed, i as u64);
                    hutchinson_with(field, x, t, probes, &mut rng).value
                })
                .collect();
            (terms, probes, RateMethod::DivHutchinson)
        }
    };
    let m = mean_se(&terms);
    if !m.value.is_finite() {
        return Err(Error::NonFinite { particle: terms.iter().position(|v| !v.is_finite()).unwrap_or(0), time: t });
    }
    Ok(EntropyRateEstimate { index: 0, time: t, value: m.value, std_error: m.std_error, probes, method })
}

/// `E[∇·b] + eps(t) E|s|²` with the exact score of the law at `t`.
pub fn entropy_rate_fp(
    drift: &dyn VelocityField,
    eps: &Diffusivity,
    score: &ScoreField,
    ens: &ParticleEnsemble,
) -> Result<EntropyRateEstimate> {
    require_equal_weight(ens)?;
    let t = ens.time();
    let e = eps.at(t);
    if !(e >= 0.0) {
        return Err(Error::invalid(format!("diffusivity must be >= 0, got {e}")));
    }
    let d = ens.dim();
    let law = score.law(t)?;
    let pts: Vec<&[f64]> = ens.iter_points().collect();
    let terms: Vec<f64> = pts
        .par_iter()
        .map(|x| {
            let div = drift.divergence(x, t);
            if e == 0.0 {
                return div;
            }
            let mut s = vec![0.0; d];
            law.score_into(x, &mut s);
            div + e * s.iter().map(|v| v * v).sum::<f64>()
        })
        .collect();
    let m = mean_se(&terms);
    if !m.value.is_finite() {
        return Err(Error::NonFinite { particle: 0, time: t });
    }
    Ok(EntropyRateEstimate { index: 0, time: t, value: m.value, std_error: m.std_error, probes: 0, method: RateMethod::FpForm })
}

/// Divergence-form series along a trajectory.
pub fn rate_series_div(field: &dyn VelocityField, traj: &TrajectoryRecord, mode: DivMode, alpha: f64) -> Result<EntropyRateSeries> {
    let est = traj
        .ensembles()
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let m = match mode {
                DivMode::Hutchinson { probes, seed } => DivMode::Hutchinson { probes, seed: crate::rng::derive_seed(seed, k as u64) },
                m => m,
            };
            entropy_rate_div(field, e, m)
        })
        .collect::<Result<Vec<_>>>()?;
    EntropyRateSeries::new(traj.grid().clone(), est, alpha)
}

/// FP-form series along a trajectory.
pub fn rate_series_fp(
    drift: &dyn VelocityField,
    eps: &Diffusivity,
    score: &ScoreField,
    traj: &TrajectoryRecord,
    alpha: f64,
) -> Result<EntropyRateSeries> {
    let est = traj.ensembles().iter().map(|e| entropy_rate_fp(drift, eps, score, e)).collect::<Result<Vec<_>>>()?;
    EntropyRateSeries::new(traj.grid().clone(), est, alpha)
}

/// k-NN entropies at every grid time.
pub fn entropy_series(traj: &TrajectoryRecord, cfg: EntropyConfig) -> Result<Vec<crate::measures::EntropyEstimate>> {
    traj.ensembles().iter().map(|e| differential_entropy(e, cfg)).collect()
}

/// Finite differences of k-NN entropies: centered at interior times,
/// one-sided at the ends. Standard errors treat the two entropies as
/// independent, which is conservative for positively correlated ensembles.
pub fn entropy_rate_fd(traj: &TrajectoryRecord, cfg: EntropyConfig, alpha: f64) -> Result<EntropyRateSeries> {
    let h = entropy_series(traj, cfg)?;
    let t = traj.grid().times();
    let last = t.len() - 1;
    let est = (0..=last)
        .map(|k| {
            let (a, b) = match k {
                0 => (0, 1),
                k if k == last => (last - 1, last),
                k => (k - 1, k + 1),
            };
            let dt = t[b] - t[a];
            let value = if traj.at(a).points() == traj.at(b).points() { 0.0 } else { (h[b].value - h[a].value) / dt };
            EntropyRateEstimate {
                index: k,
                time: t[k],
                value,
                std_error: (h[a].std_error.powi(2) + h[b].std_error.powi(2)).sqrt() / dt,
                probes: cfg.k,
                method: RateMethod::FiniteDifference,
            }
        })
        .collect();
    EntropyRateSeries::new(traj.grid().clone(), est, alpha)
}

/// Bonferroni radius multiplier `sqrt(2 ln(2 (N+1) / alpha))`.
pub fn lcb_multiplier(alpha: f64, n_times: usize) -> f64 {
    (2.0 * (2.0 * n_times as f64 / alpha).ln()).sqrt()
}

/// `LCB_n = value_n - std_error_n sqrt(2 ln(2 (N+1) / alpha))`.
pub fn lcb(series: &EntropyRateSeries, alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let c = lcb_multiplier(alpha, series.estimates.len());
    Ok(series.estimates.iter().map(|e| e.value - e.std_error * c).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveBudget {
    /// `max_n (-Ḣ_n)_+`.
    pub lambda_max: f64,
    /// `max_n (-LCB_n)_+`.
    pub lambda_lcb: f64,
}

pub fn lambda_eff(series: &EntropyRateSeries, alpha: f64) -> Result<EffectiveBudget> {
    if series.estimates.is_empty() {
        return Err(Error::invalid("empty rate series"));
    }
    let lcbs = lcb(series, alpha)?;
    let lambda_max = series.estimates.iter().map(|e| (-e.value).max(0.0)).fold(0.0, f64::max);
    let lambda_lcb = lcbs.iter().map(|l| (-l).max(0.0)).fold(0.0, f64::max);
    Ok(EffectiveBudget { lambda_max, lambda_lcb })
}
