//! The collapse-then-redisperse counterexample for unconstrained flow
//! matching: a 1D map family that shrinks a two-mode law onto a tube of
//! width `O(delta)`, holds it there, and expands it back to the identity.
//!
//! `Phi_t(x) = s(t) x + delta R(t) sgn x`, where `R` ramps 0 → 1 on
//! `[0, tau]`, stays at 1 on the plateau and mirrors back on `[T - tau, T]`.
//! The ramp has cosine-smoothed corners so that `Phi` is C¹ in time.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{fm_risk, Integrator, TrajectoryRecord};
use crate::entropy_control::{lambda_eff, lcb, rate_series_div, DivMode, EffectiveBudget};
use crate::fields::{AnalyticField, VelocityField};
use crate::measures::{differential_entropy, mode_mass, w2, EntropyConfig, GaussianMixture, ModeSet, TimeGrid};
use crate::rng::derive_seed;
use crate::{Error, Result};

/// How the spatial scale shrinks from 1 to `eps` during a transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// `log s = R log eps`: constant entropy rate `log(eps) / tau` mid-ramp.
    #[default]
    Geometric,
    /// `s = 1 - R (1 - eps)`: the textbook `(1 - t/tau) x` contraction.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollapseParams {
    /// Plateau contraction.
    pub eps: f64,
    /// Plateau offset.
    pub delta: f64,
    /// Transition window.
    pub tau: f64,
    /// Mode separation: endpoint components sit at `±a`.
    pub a: f64,
    /// Component standard deviation.
    pub sigma: f64,
    pub horizon: f64,
    /// Corner half-width as a fraction of `tau`.
    #[serde(default = "default_mollifier")]
    pub mollifier: f64,
    #[serde(default)]
    pub profile: Profile,
}

fn default_mollifier() -> f64 {
    0.01
}

impl CollapseParams {
    /// `delta = eps`, `T = 1`, default mollifier and geometric profile.
    pub fn new(eps: f64, tau: f64, a: f64, sigma: f64) -> Result<Self> {
        let p = Self { eps, delta: eps, tau, a, sigma, horizon: 1.0, mollifier: default_mollifier(), profile: Profile::Geometric };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !(pos(self.eps) && self.eps < 1.0) {
            return Err(Error::invalid(format!("collapse eps must lie in (0, 1), got {}", self.eps)));
        }
        if !pos(self.delta) || !pos(self.a) || !pos(self.sigma) || !pos(self.horizon) {
            return Err(Error::invalid("collapse delta, a, sigma and horizon must be positive"));
        }
        if !(pos(self.tau) && self.tau < 0.5 * self.horizon) {
            return Err(Error::invalid(format!("collapse tau must lie in (0, T/2), got {}", self.tau)));
        }
        if !(pos(self.mollifier) && self.mollifier < 0.25) {
            return Err(Error::invalid("mollifier fraction must lie in (0, 0.25)"));
        }
        Ok(())
    }

    /// `|log eps| / tau`.
    pub fn rate_coupling(&self) -> f64 {
        self.eps.ln().abs() / self.tau
    }

    pub fn delta_ratio(&self) -> f64 {
        self.delta / self.eps
    }

    /// Plateau `[tau, T - tau]`.
    pub fn plateau(&self) -> (f64, f64) {
        (self.tau, self.horizon - self.tau)
    }

    /// Rising ramp on `[0, tau]` and its derivative.
    fn ramp_up(&self, t: f64) -> (f64, f64) {
        let tau = self.tau;
        let h = self.mollifier * tau;
        let c = 1.0 / (tau - 2.0 * h);
        let corner = |u: f64| {
            let w = std::f64::consts::PI * u / (2.0 * h);
            (c * (u / 2.0 - h / std::f64::consts::PI * w.sin()), c * 0.5 * (1.0 - w.cos()))
        };
        if t <= 0.0 {
            (0.0, 0.0)
        } else if t < 2.0 * h {
            corner(t)
        } else if t <= tau - 2.0 * h {
            (c * (t - h), c)
        } else if t < tau {
            let (r, dr) = corner(tau - t);
            (1.0 - r, dr)
        } else {
            (1.0, 0.0)
        }
    }

    /// `R(t)` and `R'(t)` on the whole horizon.
    pub fn ramp(&self, t: f64) -> (f64, f64) {
        if t <= 0.5 * self.horizon {
            self.ramp_up(t)
        } else {
            let (r, dr) = self.ramp_up(self.horizon - t);
            (r, -dr)
        }
    }

    /// Scale `s(t)` and the log-rate `s'/s`.
    fn scale(&self, t: f64) -> (f64, f64) {
        let (r, dr) = self.ramp(t);
        match self.profile {
            Profile::Geometric => ((r * self.eps.ln()).exp(), dr * self.eps.ln()),
            Profile::Linear => {
                let s = 1.0 - r * (1.0 - self.eps);
                (s, -dr * (1.0 - self.eps) / s)
            }
        }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::TimeOutOfRange { t, horizon: self.horizon });
        }
        Ok(())
    }

    /// `Phi_t(x)`.
    pub fn map(&self, t: f64, x: f64) -> Result<f64> {
        self.check_time(t)?;
        let (s, _) = self.scale(t);
        let (r, _) = self.ramp(t);
        Ok(s * x + self.delta * r * sgn(x))
    }

    /// Eulerian velocity `∂_t Phi_t(Phi_t^{-1}(y))`. Points in the gap
    /// `(-delta R, delta R)` are outside the range of `Phi_t`.
    pub fn velocity(&self, t: f64, y: f64) -> Result<f64> {
        self.check_time(t)?;
        let (r, dr) = self.ramp(t);
        let (_, log_rate) = self.scale(t);
        let off = self.delta * r;
        if r > 0.0 && y.abs() < off {
            return Err(Error::invalid(format!("y = {y} lies outside the range of the collapse map at t = {t}")));
        }
        let sg = sgn(y);
        Ok(log_rate * (y - off * sg) + self.delta * dr * sg)
    }

    /// `∂_y v_t(y) = s'/s` away from the origin.
    pub fn velocity_dy(&self, t: f64, y: f64) -> Result<f64> {
        self.velocity(t, y)?;
        Ok(self.scale(t).1)
    }
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn collapse_map(params: &CollapseParams, t: f64, x: f64) -> Result<f64> {
    params.map(t, x)
}

pub fn collapse_velocity(params: &CollapseParams, t: f64, y: f64) -> Result<f64> {
    params.velocity(t, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollapseRunConfig {
    pub n_particles: usize,
    /// Uniform steps across the linear part of each transition window.
    pub window_steps: usize,
    pub plateau_steps: usize,
    pub alpha: f64,
    pub entropy_k: usize,
    pub seed: u64,
}

impl Default for CollapseRunConfig {
    fn default() -> Self {
        Self { n_particles: 20_000, window_steps: 16, plateau_steps: 8, alpha: 0.05, entropy_k: 5, seed: 0 }
    }
}

/// Times resolving both transitions, including the corner junctions.
pub fn collapse_grid(p: &CollapseParams, window_steps: usize, plateau_steps: usize) -> Result<TimeGrid> {
    p.validate()?;
    if window_steps == 0 || plateau_steps == 0 {
        return Err(Error::invalid("collapse grid needs at least one step per phase"));
    }
    let h = p.mollifier * p.tau;
    let mut up = vec![0.0, h];
    for i in 0..=window_steps {
        up.push(2.0 * h + (p.tau - 4.0 * h) * i as f64 / window_steps as f64);
    }
    up.extend([p.tau - h, p.tau]);
    let (a, b) = p.plateau();
    let mut times = up.clone();
    for i in 1..plateau_steps {
        times.push(a + (b - a) * i as f64 / plateau_steps as f64);
    }
    times.extend(up.iter().rev().map(|t| p.horizon - t));
    TimeGrid::new(times)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseRow {
    pub t: f64,
    pub entropy: f64,
    pub entropy_se: f64,
    pub rate: f64,
    pub rate_lcb: f64,
    /// Half-line masses `M_±`.
    pub half_plus: f64,
    pub half_minus: f64,
    /// Core masses `m_±` on `(±a - r, ±a + r)`.
    pub core_plus: f64,
    pub core_minus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseDiagnostics {
    pub index: usize,
    pub params: CollapseParams,
    pub seed: u64,
    pub rate_coupling: f64,
    pub delta_ratio: f64,
    /// FM risk of the collapse field against the teacher, minus the
    /// teacher's own risk (zero on its own interpolation).
    pub fm_risk_excess: f64,
    /// Kinetic lower bound `2 W2(mu_0, mu_tau)² / tau` on the transport
    /// part of `2 * fm_risk_excess` (two windows).
    pub kinetic_lower_bound: f64,
    /// Smallest core mass over all times.
    pub min_core_mass: f64,
    /// Largest core mass over plateau times.
    pub plateau_core_mass: f64,
    pub lambda_eff: EffectiveBudget,
    /// Plug-in budget from finite differences of k-NN entropies.
    pub lambda_eff_fd: f64,
    pub endpoint_w2: f64,
    pub rows: Vec<CollapseRow>,
}

impl CollapseDiagnostics {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "entropy", "entropy_se", "rate", "rate_lcb", "M+", "M-", "m+", "m-"])?;
        for r in &self.rows {
            let rec = [r.t, r.entropy, r.entropy_se, r.rate, r.rate_lcb, r.half_plus, r.half_minus, r.core_plus, r.core_minus];
            out.write_record(rec.iter().map(|v| crate::measures::format_f64(*v)))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-`n` summary row of the JSON export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseSummary {
    pub index: usize,
    pub eps: f64,
    pub tau: f64,
    pub rate_coupling: f64,
    pub lambda_eff_max: f64,
    pub lambda_eff_lcb: f64,
    pub lambda_eff_fd: f64,
    pub fm_risk_excess: f64,
    pub kinetic_lower_bound: f64,
    pub min_core_mass: f64,
    pub plateau_core_mass: f64,
    pub endpoint_w2: f64,
}

impl From<&CollapseDiagnostics> for CollapseSummary {
    fn from(d: &CollapseDiagnostics) -> Self {
        Self {
            index: d.index,
            eps: d.params.eps,
            tau: d.params.tau,
            rate_coupling: d.rate_coupling,
            lambda_eff_max: d.lambda_eff.lambda_max,
            lambda_eff_lcb: d.lambda_eff.lambda_lcb,
            lambda_eff_fd: d.lambda_eff_fd,
            fm_risk_excess: d.fm_risk_excess,
            kinetic_lower_bound: d.kinetic_lower_bound,
            min_core_mass: d.min_core_mass,
            plateau_core_mass: d.plateau_core_mass,
            endpoint_w2: d.endpoint_w2,
        }
    }
}

/// Writes `collapse_<n>.csv` per sequence index and `summary.json`.
pub fn write_collapse_outputs(dir: impl AsRef<Path>, diags: &[CollapseDiagnostics]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for d in diags {
        d.write_csv(std::fs::File::create(dir.join(format!("collapse_{}.csv", d.index)))?)?;
    }
    let summary: Vec<CollapseSummary> = diags.iter().map(CollapseSummary::from).collect();
    let mut f = std::fs::File::create(dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Pushes the two-mode endpoint law through each member of the family and
/// collects the failure diagnostics. Sequence members run in parallel, each
/// with its own seed derived from `cfg.seed` and its index.
pub fn run_collapse_sequence(
    params_list: &[CollapseParams],
    teacher: &dyn VelocityField,
    cfg: &CollapseRunConfig,
) -> Result<Vec<CollapseDiagnostics>> {
    if params_list.is_empty() {
        return Err(Error::invalid("empty collapse sequence"));
    }
    if teacher.dim() != 1 {
        return Err(Error::Dimension { expected: 1, got: teacher.dim() });
    }
    params_list
        .par_iter()
        .enumerate()
        .map(|(n, p)| run_one(n, p, teacher, cfg))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Exact pushforward of a sample of the symmetric pair under the collapse
/// map, recorded on [`collapse_grid`].
pub fn collapse_trajectory(p: &CollapseParams, n: usize, seed: u64, window_steps: usize, plateau_steps: usize) -> Result<TrajectoryRecord> {
    p.validate()?;
    let mix = GaussianMixture::symmetric_pair_1d(p.a, p.sigma)?;
    let ens0 = mix.sample(n, seed)?;
    let grid = collapse_grid(p, window_steps, plateau_steps)?;
    let ensembles = grid
        .times()
        .iter()
        .map(|&t| {
            let pts = ens0.points().iter().map(|&x| p.map(t, x)).collect::<Result<Vec<_>>>()?;
            Ok(ens0.with_points(pts)?.with_time(t))
        })
        .collect::<Result<Vec<_>>>()?;
    TrajectoryRecord::from_ensembles(grid, ensembles, Integrator::Exact, seed)
}

fn run_one(index: usize, p: &CollapseParams, teacher: &dyn VelocityField, cfg: &CollapseRunConfig) -> Result<CollapseDiagnostics> {
    p.validate()?;
    if (teacher.horizon() - p.horizon).abs() > 1e-12 {
        return Err(Error::invalid("teacher horizon differs from the collapse horizon"));
    }
    let seed = derive_seed(cfg.seed, index as u64);
    let traj = collapse_trajectory(p, cfg.n_particles, seed, cfg.window_steps, cfg.plateau_steps)?;
    let grid = traj.grid().clone();
    let field = AnalyticField::Collapse(p.clone());

    let fm_risk_excess = fm_risk(&field, teacher, &traj)? - fm_risk(teacher, teacher, &traj)?;
    let tau_idx = grid.times().iter().position(|&t| t == p.tau).expect("grid contains tau");
    let kinetic_lower_bound = 2.0 * w2(traj.first(), traj.at(tau_idx))?.powi(2) / p.tau;

    let rates = rate_series_div(&field, &traj, DivMode::Exact, cfg.alpha)?;
    let lcbs = lcb(&rates, cfg.alpha)?;
    let budget = lambda_eff(&rates, cfg.alpha)?;

    let ecfg = EntropyConfig { k: cfg.entropy_k, ..Default::default() };
    let entropies = traj.ensembles().iter().map(|e| differential_entropy(e, ecfg)).collect::<Result<Vec<_>>>()?;
    let times = grid.times();
    let lambda_eff_fd = (1..times.len())
        .map(|k| -(entropies[k].value - entropies[k - 1].value) / (times[k] - times[k - 1]))
        .fold(0.0, f64::max);

    let r = p.sigma;
    let cores = [ModeSet::interval(p.a - r, p.a + r), ModeSet::interval(-p.a - r, -p.a + r)];
    let halves = [ModeSet::half_space(vec![1.0], 0.0), ModeSet::half_space(vec![-1.0], 0.0)];
    let (pa, pb) = p.plateau();
    let mut rows = Vec::with_capacity(times.len());
    let mut min_core_mass = f64::INFINITY;
    let mut plateau_core_mass: f64 = 0.0;
    for (k, ens) in traj.ensembles().iter().enumerate() {
        let core_plus = mode_mass(ens, &cores[0])?.mass;
        let core_minus = mode_mass(ens, &cores[1])?.mass;
        min_core_mass = min_core_mass.min(core_plus.min(core_minus));
        if (pa..=pb).contains(&times[k]) {
            plateau_core_mass = plateau_core_mass.max(core_plus.max(core_minus));
        }
        rows.push(CollapseRow {
            t: times[k],
            entropy: entropies[k].value,
            entropy_se: entropies[k].std_error,
            rate: rates.estimates[k].value,
            rate_lcb: lcbs[k],
            half_plus: mode_mass(ens, &halves[0])?.mass,
            half_minus: mode_mass(ens, &halves[1])?.mass,
            core_plus,
            core_minus,
        });
    }
    Ok(CollapseDiagnostics {
        index,
        params: p.clone(),
        seed,
        rate_coupling: p.rate_coupling(),
        delta_ratio: p.delta_ratio(),
        fm_risk_excess,
        kinetic_lower_bound,
        min_core_mass,
        plateau_core_mass,
        lambda_eff: budget,
        lambda_eff_fd,
        endpoint_w2: w2(traj.first(), traj.last())?,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> CollapseParams {
        CollapseParams::new(0.01, 0.05, 4.0, 1.0).unwrap()
    }

    #[test]
    fn endpoints_are_identity() {
        let p = params();
        for x in [-3.0, -0.1, 0.0, 0.7, 5.0] {
            assert_eq!(p.map(0.0, x).unwrap(), x);
            assert_eq!(p.map(1.0, x).unwrap(), x);
        }
    }

    #[test]
    fn plateau_formula() {
        let p = params();
        assert!((p.map(0.5, 3.0).unwrap() - 0.04).abs() < 1e-15);
        assert_eq!(p.velocity(0.5, 0.04).unwrap(), 0.0);
        assert_eq!(p.velocity(0.3, -0.02).unwrap(), 0.0);
    }

    #[test]
    fn ramp_is_c1() {
        let p = params();
        let h = p.mollifier * p.tau;
        for t0 in [2.0 * h, p.tau - 2.0 * h, p.tau, 1.0 - p.tau] {
            let (a, da) = p.ramp(t0 - 1e-12);
            let (b, db) = p.ramp(t0 + 1e-12);
            assert!((a - b).abs() < 1e-9 && (da - db).abs() < 1e-6 * da.abs().max(1.0), "t0 = {t0}");
        }
    }

    #[test]
    fn velocity_matches_time_derivative_of_map() {
        let p = params();
        for t in [0.0, 0.0003, 0.01, 0.049, 0.96, 0.9995] {
            for x in [-2.5, 0.3, 4.0] {
                let y = p.map(t, x).unwrap();
                let dt = 1e-7;
                let (lo, hi) = ((t - dt).max(0.0), (t + dt).min(1.0));
                let fd = (p.map(hi, x).unwrap() - p.map(lo, x).unwrap()) / (hi - lo);
                let v = p.velocity(t, y).unwrap();
                assert!((fd - v).abs() < 1e-4 * v.abs().max(1.0), "t={t} x={x}: {fd} vs {v}");
            }
        }
    }

    #[test]
    fn linear_profile_contracts_like_one_minus_t_over_tau() {
        let p = CollapseParams { profile: Profile::Linear, eps: 1e-4, ..params() };
        let t = 0.02;
        let y = p.map(t, 2.0).unwrap();
        let v = p.velocity(t, y).unwrap();
        let expect = -(y - p.delta * p.ramp(t).0) / (p.tau - t);
        assert!((v / expect - 1.0).abs() < 0.05, "{v} vs {expect}");
    }

    #[test]
    fn gap_is_outside_range() {
        let p = params();
        assert!(p.velocity(0.5, 0.0).is_err());
        assert!(p.velocity(0.0, 0.0).is_ok());
    }

    #[test]
    fn rejects_bad_params() {
        assert!(CollapseParams::new(0.0, 0.05, 4.0, 1.0).is_err());
        assert!(CollapseParams::new(0.01, 0.5, 4.0, 1.0).is_err());
        let bad = CollapseParams { mollifier: 0.3, ..params() };
        assert!(bad.validate().is_err());
    }
}
