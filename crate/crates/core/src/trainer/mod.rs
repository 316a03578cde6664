//! Primal-dual training of an RBF velocity field under entropy-rate
//! constraints `Ḣ(mu_t) ≥ -lambda_n` at the grid times.
//!
//! Each outer iteration simulates particles under the current parameters and
//! differentiates the augmented Lagrangian with those samples held fixed for
//! the flow-matching and entropy-rate terms. The endpoint fit and the
//! mode-mass terms depend on where the flow carries the particles, so they are
//! differentiated pathwise through RK4 forward sensitivities.

mod config;
mod pathwise;

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{schedule, Optimizer, RbfSpec, TrainerConfig};

use crate::dynamics::{integrate_ode, TrajectoryRecord};
use crate::entropy_control::{entropy_rate_div, lcb_multiplier, DivMode, EntropyRateEstimate};
use crate::fields::{AnalyticField, RbfField, VelocityField};
use crate::measures::{mode_mass, GaussianMixture, ModeSet, ParticleEnsemble};
use crate::rng::derive_seed;
use crate::stats::{mean_se, neumaier_sum};
use crate::{Error, Result};

/// Endpoint laws, reference velocity `u*` and optional mode sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainProblem {
    pub mu0: GaussianMixture,
    #[serde(rename = "muT")]
    pub mu_t: GaussianMixture,
    pub teacher: AnalyticField,
    #[serde(default)]
    pub modes: Vec<ModeSet>,
}

impl TrainProblem {
    /// Pure transport between two laws (`u* = 0`).
    pub fn transport(mu0: GaussianMixture, mu_t: GaussianMixture, horizon: f64) -> Result<Self> {
        let dim = mu0.dim();
        let p = Self { mu0, mu_t, teacher: AnalyticField::zero(dim, horizon), modes: Vec::new() };
        p.validate_dims()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.mu0.dim()
    }

    fn validate_dims(&self) -> Result<()> {
        let d = self.mu0.dim();
        for got in [self.mu_t.dim(), self.teacher.dim()] {
            if got != d {
                return Err(Error::Dimension { expected: d, got });
            }
        }
        for m in &self.modes {
            m.validate()?;
            if m.dim() != d {
                return Err(Error::Dimension { expected: d, got: m.dim() });
            }
        }
        self.teacher.validate()
    }

    pub fn validate(&self, cfg: &TrainerConfig) -> Result<()> {
        self.validate_dims()?;
        cfg.validate()?;
        if self.teacher.horizon() < cfg.grid.horizon() {
            return Err(Error::invalid("teacher horizon is shorter than the training grid"));
        }
        if cfg.mode_floors.len() != self.modes.len() {
            return Err(Error::invalid(format!("{} mode floors for {} mode sets", cfg.mode_floors.len(), self.modes.len())));
        }
        Ok(())
    }
}

/// Multipliers `eta_n` for the rate constraints and `nu[k][n]` for the
/// mode floors, all kept nonnegative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub eta: Vec<f64>,
    pub nu: Vec<Vec<f64>>,
}

impl DualState {
    pub fn zeros(n_times: usize, n_modes: usize) -> Self {
        Self { eta: vec![0.0; n_times], nu: vec![vec![0.0; n_times]; n_modes] }
    }
}

/// `g_n = -Ḣ_n - lambda_n`, or `-LCB_n - lambda_n` when robust, with the LCB
/// multiplier for `n_times` simultaneous bounds. Unconstrained bins give `-inf`.
pub fn residual_from(est: &EntropyRateEstimate, lambda: f64, robust: bool, alpha: f64, n_times: usize) -> f64 {
    if lambda == f64::INFINITY {
        return f64::NEG_INFINITY;
    }
    let value = if robust { est.value - est.std_error * lcb_multiplier(alpha, n_times) } else { est.value };
    -value - lambda
}

/// Residual of the rate constraint on one ensemble.
pub fn residual(
    field: &dyn VelocityField,
    ens: &ParticleEnsemble,
    lambda: f64,
    robust: bool,
    alpha: f64,
    n_times: usize,
    mode: DivMode,
) -> Result<f64> {
    let est = entropy_rate_div(field, ens, mode)?;
    Ok(residual_from(&est, lambda, robust, alpha, n_times))
}

/// Projected dual ascent `[eta + beta g]_+`.
pub fn dual_step(eta: &[f64], residuals: &[f64], beta: f64) -> Result<Vec<f64>> {
    if eta.len() != residuals.len() {
        return Err(Error::Dimension { expected: eta.len(), got: residuals.len() });
    }
    if !(beta > 0.0) {
        return Err(Error::invalid("dual step must be > 0"));
    }
    Ok(eta
        .iter()
        .zip(residuals)
        .map(|(e, g)| {
            let v = e + beta * g;
            if v > 0.0 {
                v
            } else {
                0.0
            }
        })
        .collect())
}

/// Budget scheduler `Π_[lo, hi](lambda_n + zeta (Ḣ_n + gamma_n))`.
/// Unconstrained (`inf`) budgets are left alone.
pub fn schedule_lambda(lambda: &[f64], rates: &[f64], gamma: &[f64], zeta: f64, bounds: [f64; 2]) -> Result<Vec<f64>> {
    let [lo, hi] = bounds;
    if !(lo <= hi) {
        return Err(Error::invalid(format!("lambda bounds [{lo}, {hi}] are empty")));
    }
    if rates.len() != lambda.len() || (!gamma.is_empty() && gamma.len() != lambda.len()) {
        return Err(Error::Dimension { expected: lambda.len(), got: rates.len() });
    }
    Ok(lambda
        .iter()
        .enumerate()
        .map(|(n, &l)| {
            if l == f64::INFINITY {
                return l;
            }
            let g = gamma.get(n).copied().unwrap_or(0.0);
            (l + zeta * (rates[n] + g)).clamp(lo, hi)
        })
        .collect())
}

/// `h = floor - m̂(set)`: positive when the set holds less mass than the floor.
pub fn mode_residual(ens: &ParticleEnsemble, set: &ModeSet, floor: f64) -> Result<f64> {
    Ok(floor - mode_mass(ens, set)?.mass)
}

/// Worst `min(eta_n, (-g_n)_+) / max(1, eta_n)` over constrained bins.
pub fn complementary_slackness(eta: &[f64], residuals: &[f64]) -> f64 {
    eta.iter()
        .zip(residuals)
        .filter(|(_, g)| g.is_finite())
        .map(|(e, g)| e.min((-g).max(0.0)) / e.max(1.0))
        .fold(0.0, f64::max)
}

/// Samples and targets held fixed while one gradient is taken.
#[derive(Debug, Clone)]
pub struct FrozenBatch {
    /// Initial points, `n × d`.
    pub x0: Vec<f64>,
    /// Trajectory of `x0` under the parameters the batch was drawn with.
    pub traj: TrajectoryRecord,
    /// Endpoint target paired with each particle, `n × d`.
    pub targets: Vec<f64>,
}

impl FrozenBatch {
    /// Draws `cfg.batch` points from each endpoint law, transports the
    /// initial ones under `field` and pairs the arrivals with the targets by
    /// an optimal assignment.
    pub fn draw(field: &RbfField, problem: &TrainProblem, cfg: &TrainerConfig, seed: u64) -> Result<Self> {
        let ens0 = problem.mu0.sample(cfg.batch, derive_seed(seed, 0))?;
        let y = problem.mu_t.sample(cfg.batch, derive_seed(seed, 1))?;
        let traj = integrate_ode(field, &ens0, &cfg.grid, cfg.substeps)?;
        let targets = pair_targets(traj.last().points(), y.points(), problem.dim())?;
        Ok(Self { x0: ens0.points().to_vec(), traj, targets })
    }
}

/// Reorders `y` so that row `i` is the partner of `x` row `i` under the
/// quadratic-cost optimal assignment.
fn pair_targets(x: &[f64], y: &[f64], d: usize) -> Result<Vec<f64>> {
    let n = x.len() / d;
    let mut out = vec![0.0; n * d];
    if d == 1 {
        let mut ix: Vec<usize> = (0..n).collect();
        let mut iy: Vec<usize> = (0..n).collect();
        ix.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
        iy.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
        for (a, b) in ix.iter().zip(&iy) {
            out[*a] = y[*b];
        }
        return Ok(out);
    }
    if n > 2000 {
        return Err(Error::invalid("endpoint pairing in d > 1 is limited to 2000 particles"));
    }
    let cost: Vec<f64> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            (0..d).map(|q| (x[i * d + q] - y[j * d + q]).powi(2)).sum()
        })
        .collect();
    let assign = crate::measures::hungarian(&cost, n);
    for (i, j) in assign.into_iter().enumerate() {
        out[i * d..(i + 1) * d].copy_from_slice(&y[j * d..(j + 1) * d]);
    }
    Ok(out)
}

/// Value and gradient of the augmented Lagrangian at one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlEvaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub fm_loss: f64,
    pub endpoint_loss: f64,
    /// Exact-divergence rates on the frozen samples.
    pub rates: Vec<EntropyRateEstimate>,
    #[serde(with = "crate::stats::nonfinite")]
    pub residuals: Vec<f64>,
    /// Smoothed mode residuals `floor - m̃`, `[mode][time]`.
    pub mode_residuals: Vec<Vec<f64>>,
}

const CHUNK: usize = 64;

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `L_FM + (kappa/2) E|X_T - Y|² + Σ_n (eta_n g_n + (rho/2)(g_n)_+²)` plus the
/// same penalty form for mode floors.
///
/// The flow-matching loss and the rate residuals use the frozen samples in
/// `batch.traj` with exact divergences, so they are quadratic and linear in
/// the parameters (the LCB standard error adds a smooth term). Endpoint and
/// mode terms re-simulate `batch.x0` under `field`.
pub fn augmented_lagrangian(
    field: &RbfField,
    dual: &DualState,
    budgets: &[f64],
    batch: &FrozenBatch,
    problem: &TrainProblem,
    cfg: &TrainerConfig,
) -> Result<AlEvaluation> {
    let d = field.dim();
    let p = field.n_params();
    let traj = &batch.traj;
    let nt = traj.grid().len();
    if budgets.len() != nt || dual.eta.len() != nt {
        return Err(Error::Dimension { expected: nt, got: budgets.len().min(dual.eta.len()) });
    }
    let q = traj.grid().trapezoid_weights();
    let c_lcb = lcb_multiplier(cfg.alpha, nt);
    let mut grad = vec![0.0; p];
    let mut fm_parts = Vec::with_capacity(nt);
    let mut penalty = 0.0;
    let mut rates = Vec::with_capacity(nt);
    let mut residuals = Vec::with_capacity(nt);

    for (n, ens) in traj.ensembles().iter().enumerate() {
        let t = ens.time();
        let b = ens.n();
        let bf = b as f64;
        let pts: Vec<&[f64]> = ens.iter_points().collect();
        let evals: Vec<(Vec<f64>, f64)> = pts
            .par_iter()
            .map(|x| {
                let mut v = vec![0.0; d];
                let mut u = vec![0.0; d];
                field.velocity(x, t, &mut v);
                problem.teacher.velocity(x, t, &mut u);
                let diff: Vec<f64> = v.iter().zip(&u).map(|(a, c)| a - c).collect();
                (diff, field.divergence(x, t))
            })
            .collect();
        if let Some(i) = evals.iter().position(|(df, dv)| !dv.is_finite() || df.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { particle: i, time: t });
        }
        fm_parts.push(q[n] * neumaier_sum(evals.iter().map(|(df, _)| 0.5 * df.iter().map(|v| v * v).sum::<f64>())) / bf);
        let divs: Vec<f64> = evals.iter().map(|e| e.1).collect();
        let m = mean_se(&divs);
        let est = EntropyRateEstimate {
            index: n,
            time: t,
            value: m.value,
            std_error: m.std_error,
            probes: 0,
            method: crate::entropy_control::RateMethod::DivExact,
        };
        let g = residual_from(&est, budgets[n], cfg.robust, cfg.alpha, nt);
        rates.push(est);
        residuals.push(g);
        let coef_g = if g.is_finite() {
            penalty += dual.eta[n] * g + 0.5 * cfg.rho * g.max(0.0).powi(2);
            dual.eta[n] + cfg.rho * g.max(0.0)
        } else {
            0.0
        };
        let robust_scale = if cfg.robust && m.std_error > 0.0 { c_lcb / (m.std_error * bf * (bf - 1.0)) } else { 0.0 };
        let chunks: Vec<Vec<f64>> = (0..b)
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|idx| {
                let mut local = vec![0.0; p];
                let mut cv = vec![0.0; d];
                for &i in idx {
                    for (c, df) in cv.iter_mut().zip(&evals[i].0) {
                        *c = q[n] * df / bf;
                    }
                    let cd = coef_g * (-1.0 / bf + robust_scale * (divs[i] - m.value));
                    field.accumulate_param_grad(pts[i], t, &cv, cd, &mut local);
                }
                local
            })
            .collect();
        for c in &chunks {
            for (g, l) in grad.iter_mut().zip(c) {
                *g += l;
            }
        }
    }
    let fm_loss = neumaier_sum(fm_parts);

    let times = traj.grid().times();
    let with_modes = !problem.modes.is_empty();
    let record: Vec<bool> = (0..nt).map(|k| with_modes || (k == nt - 1 && cfg.kappa > 0.0)).collect();
    let mut endpoint_loss = 0.0;
    let mut mode_residuals = vec![Vec::new(); problem.modes.len()];
    if record.iter().any(|r| *r) {
        let sim = pathwise::simulate(field, &batch.x0, times, cfg.substeps, &record)?;
        let n = batch.x0.len() / d;
        let nf = n as f64;
        if cfg.kappa > 0.0 {
            let xt = &sim.x[nt - 1];
            let st = sim.s[nt - 1].as_ref().expect("endpoint sensitivities recorded");
            endpoint_loss =
                0.5 * cfg.kappa * neumaier_sum((0..n * d).map(|k| (xt[k] - batch.targets[k]).powi(2))) / nf;
            let chunks: Vec<Vec<f64>> = (0..n)
                .collect::<Vec<_>>()
                .par_chunks(CHUNK)
                .map(|idx| {
                    let mut local = vec![0.0; p];
                    for &i in idx {
                        for r in 0..d {
                            let c = cfg.kappa * (xt[i * d + r] - batch.targets[i * d + r]) / nf;
                            let row = &st[(i * d + r) * p..(i * d + r + 1) * p];
                            for (l, s) in local.iter_mut().zip(row) {
                                *l += c * s;
                            }
                        }
                    }
                    local
                })
                .collect();
            for c in &chunks {
                for (g, l) in grad.iter_mut().zip(c) {
                    *g += l;
                }
            }
        }
        let temp = cfg.mode_temperature;
        for (k, set) in problem.modes.iter().enumerate() {
            for tn in 0..nt {
                let xs = &sim.x[tn];
                let ss = sim.s[tn].as_ref().expect("mode sensitivities recorded");
                let mut dgrad = vec![0.0; d];
                let mut sig = Vec::with_capacity(n);
                let mut dsig = Vec::with_capacity(n * d);
                for i in 0..n {
                    let z = set.depth(&xs[i * d..(i + 1) * d], &mut dgrad) / temp;
                    let s = logistic(z);
                    sig.push(s);
                    dsig.extend(dgrad.iter().map(|g| s * (1.0 - s) * g / temp));
                }
                let h = cfg.mode_floors[k] - neumaier_sum(sig.iter().copied()) / nf;
                mode_residuals[k].push(h);
                penalty += dual.nu[k][tn] * h + 0.5 * cfg.rho * h.max(0.0).powi(2);
                let coef = dual.nu[k][tn] + cfg.rho * h.max(0.0);
                if coef != 0.0 {
                    for i in 0..n {
                        for r in 0..d {
                            let c = -coef * dsig[i * d + r] / nf;
                            let row = &ss[(i * d + r) * p..(i * d + r + 1) * p];
                            for (g, s) in grad.iter_mut().zip(row) {
                                *g += c * s;
                            }
                        }
                    }
                }
            }
        }
    }
    let value = fm_loss + endpoint_loss + penalty;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged { iteration: 0, reason: "non-finite augmented Lagrangian".into() });
    }
    Ok(AlEvaluation { value, gradient: grad, fm_loss, endpoint_loss, rates, residuals, mode_residuals })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    k: i32,
}

impl Adam {
    fn new(p: usize) -> Self {
        Self { m: vec![0.0; p], v: vec![0.0; p], k: 0 }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.k += 1;
        let (c1, c2) = (1.0 - B1.powi(self.k), 1.0 - B2.powi(self.k));
        for i in 0..theta.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// One outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Augmented Lagrangian at the pre-step parameters.
    pub al_value: f64,
    pub fm_loss: f64,
    pub endpoint_loss: f64,
    pub grad_norm: f64,
    pub step_size: f64,
    /// Rate estimates on the residual minibatch after the step.
    pub rates: Vec<f64>,
    pub rate_std_errors: Vec<f64>,
    #[serde(with = "crate::stats::nonfinite")]
    pub residuals: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub mode_residuals: Vec<Vec<f64>>,
    pub mode_multipliers: Vec<Vec<f64>>,
    #[serde(with = "crate::stats::nonfinite")]
    pub budgets: Vec<f64>,
    pub feasible: bool,
}

/// Append-only record of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    records: Vec<IterationRecord>,
}

impl TrainHistory {
    pub fn push(&mut self, r: IterationRecord) {
        self.records.push(r);
    }
    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }
    pub fn len(&self) -> usize {
        self.records.len()
    }
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    /// One JSON object per line.
    pub fn write_ndjson<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_ndjson(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ndjson(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Diagnostics of the final parameters on an evaluation batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    pub rates: Vec<f64>,
    pub rate_std_errors: Vec<f64>,
    /// `-LCB_n - lambda_n`.
    #[serde(with = "crate::stats::nonfinite")]
    pub robust_residuals: Vec<f64>,
    /// `-Ḣ_n - lambda_n`.
    #[serde(with = "crate::stats::nonfinite")]
    pub plain_residuals: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub mode_residuals: Vec<Vec<f64>>,
    /// Worst normalised `min(eta_n, (-g_n)_+)` over the residuals in force.
    pub complementary_slackness: f64,
    pub feasible: bool,
    /// `L_FM + endpoint fit`, without constraint terms.
    pub objective: f64,
    pub fm_loss: f64,
    pub endpoint_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub field: RbfField,
    pub history: TrainHistory,
    pub dual: DualState,
    #[serde(with = "crate::stats::nonfinite")]
    pub budgets: Vec<f64>,
    #[serde(rename = "final")]
    pub final_state: FinalState,
}

/// A run that hit a non-finite loss or trajectory; carries what was
/// recorded up to that point.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub history: TrainHistory,
    /// Parameters at the point of failure, if a field had been built.
    pub field: Option<RbfField>,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training aborted after {} iterations: {}", self.history.len(), self.error)
    }
}

impl std::error::Error for TrainFailure {}

/// Zero-initialised RBF field for `problem` under `cfg`.
pub fn initial_field(problem: &TrainProblem, cfg: &TrainerConfig) -> Result<RbfField> {
    let d = problem.dim();
    RbfField::zeros(d, cfg.field.centers(d), cfg.field.bandwidth(), cfg.grid.times().to_vec())
}

fn div_mode(cfg: &TrainerConfig, seed: u64) -> DivMode {
    match cfg.hutchinson_probes {
        Some(probes) => DivMode::Hutchinson { probes, seed },
        None => DivMode::Exact,
    }
}

struct Snapshot {
    rates: Vec<EntropyRateEstimate>,
    residuals: Vec<f64>,
    robust: Vec<f64>,
    plain: Vec<f64>,
    mode_residuals: Vec<Vec<f64>>,
    traj: TrajectoryRecord,
    ens_targets: Vec<f64>,
}

/// Fresh-minibatch residuals under `field`.
fn snapshot(field: &RbfField, problem: &TrainProblem, cfg: &TrainerConfig, budgets: &[f64], seed: u64) -> Result<Snapshot> {
    let batch = FrozenBatch::draw(field, problem, cfg, seed)?;
    let nt = cfg.grid.len();
    let rates = batch
        .traj
        .ensembles()
        .iter()
        .enumerate()
        .map(|(n, e)| entropy_rate_div(field, e, div_mode(cfg, derive_seed(seed, 2 + n as u64))))
        .collect::<Result<Vec<_>>>()?;
    let robust: Vec<f64> = rates.iter().zip(budgets).map(|(r, l)| residual_from(r, *l, true, cfg.alpha, nt)).collect();
    let plain: Vec<f64> = rates.iter().zip(budgets).map(|(r, l)| residual_from(r, *l, false, cfg.alpha, nt)).collect();
    let mode_residuals = problem
        .modes
        .iter()
        .zip(&cfg.mode_floors)
        .map(|(set, floor)| batch.traj.ensembles().iter().map(|e| mode_residual(e, set, *floor)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(Snapshot {
        residuals: if cfg.robust { robust.clone() } else { plain.clone() },
        rates,
        robust,
        plain,
        mode_residuals,
        traj: batch.traj,
        ens_targets: batch.targets,
    })
}

/// Runs the primal-dual loop from zero parameters.
pub fn train(problem: &TrainProblem, cfg: &TrainerConfig) -> std::result::Result<TrainOutcome, Box<TrainFailure>> {
    let init = initial_field(problem, cfg)
        .map_err(|error| Box::new(TrainFailure { error, history: TrainHistory::default(), field: None }))?;
    train_from(problem, cfg, init)
}

/// Runs the primal-dual loop from `init`, whose knots must be the grid times.
pub fn train_from(problem: &TrainProblem, cfg: &TrainerConfig, init: RbfField) -> std::result::Result<TrainOutcome, Box<TrainFailure>> {
    let mut history = TrainHistory::default();
    let fail = |error: Error, history: TrainHistory, field: RbfField| Box::new(TrainFailure { error, history, field: Some(field) });
    if let Err(e) = problem.validate(cfg) {
        return Err(fail(e, history, init));
    }
    if init.knot_times() != cfg.grid.times() || init.dim() != problem.dim() {
        return Err(fail(Error::invalid("initial field does not match the problem dimension and grid"), history, init));
    }
    let nt = cfg.grid.len();
    let mut field = init;
    let mut theta = field.theta().to_vec();
    let mut dual = DualState::zeros(nt, problem.modes.len());
    let mut budgets = cfg.budgets.clone();
    let mut adam = Adam::new(theta.len());

    for k in 0..cfg.outer_iters {
        let seed_k = derive_seed(cfg.seed, k as u64);
        let batch = match FrozenBatch::draw(&field, problem, cfg, derive_seed(seed_k, 0)) {
            Ok(b) => b,
            Err(e) => return Err(fail(e, history, field)),
        };
        let eval = match augmented_lagrangian(&field, &dual, &budgets, &batch, problem, cfg) {
            Ok(v) => v,
            Err(Error::Diverged { reason, .. }) => return Err(fail(Error::Diverged { iteration: k, reason }, history, field)),
            Err(e) => return Err(fail(e, history, field)),
        };
        let alpha_k = schedule(cfg.alpha0, 50.0, k);
        let grad_norm = eval.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
        match cfg.optimizer {
            Optimizer::Adam => adam.step(&mut theta, &eval.gradient, alpha_k),
            Optimizer::Sgd => theta.iter_mut().zip(&eval.gradient).for_each(|(t, g)| *t -= alpha_k * g),
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(fail(Error::Diverged { iteration: k, reason: "non-finite parameters".into() }, history, field));
        }
        field = field.with_theta(theta.clone()).expect("same layout");

        let (rates, residuals, mode_res) = if cfg.fresh_recompute {
            match snapshot(&field, problem, cfg, &budgets, derive_seed(seed_k, 1)) {
                Ok(s) => (s.rates, s.residuals, s.mode_residuals),
                Err(e) => return Err(fail(e, history, field)),
            }
        } else {
            (eval.rates.clone(), eval.residuals.clone(), eval.mode_residuals.clone())
        };
        let beta_k = schedule(cfg.beta0, 200.0, k);
        dual.eta = dual_step(&dual.eta, &residuals, beta_k).expect("matching lengths");
        for (nu, h) in dual.nu.iter_mut().zip(&mode_res) {
            *nu = dual_step(nu, h, beta_k).expect("matching lengths");
        }
        if cfg.zeta0 > 0.0 {
            let values: Vec<f64> = rates.iter().map(|r| r.value).collect();
            budgets = schedule_lambda(&budgets, &values, &cfg.margins, schedule(cfg.zeta0, 1000.0, k), cfg.lambda_bounds)
                .expect("validated bounds");
        }
        let feasible = residuals.iter().all(|g| *g <= 0.0) && mode_res.iter().flatten().all(|h| *h <= 0.0);
        log::debug!("iteration {k}: AL {:.6e}, |grad| {grad_norm:.3e}, feasible {feasible}", eval.value);
        history.push(IterationRecord {
            iteration: k,
            al_value: eval.value,
            fm_loss: eval.fm_loss,
            endpoint_loss: eval.endpoint_loss,
            grad_norm,
            step_size: alpha_k,
            rates: rates.iter().map(|r| r.value).collect(),
            rate_std_errors: rates.iter().map(|r| r.std_error).collect(),
            residuals,
            multipliers: dual.eta.clone(),
            mode_residuals: mode_res,
            mode_multipliers: dual.nu.clone(),
            budgets: budgets.clone(),
            feasible,
        });
    }

    let final_state = match final_state(&field, &dual, &budgets, problem, cfg) {
        Ok(s) => s,
        Err(e) => return Err(fail(e, history, field)),
    };
    Ok(TrainOutcome { field, history, dual, budgets, final_state })
}

/// Seed tag of the evaluation batch; shared across runs with the same master
/// seed so that runs at different budgets are compared on common samples.
const EVAL_TAG: u64 = 0xE7A1;

fn final_state(field: &RbfField, dual: &DualState, budgets: &[f64], problem: &TrainProblem, cfg: &TrainerConfig) -> Result<FinalState> {
    let snap = snapshot(field, problem, cfg, budgets, derive_seed(cfg.seed, EVAL_TAG))?;
    let fm_loss = crate::dynamics::fm_risk(field, &problem.teacher, &snap.traj)?;
    let last = snap.traj.last().points();
    let endpoint_loss =
        0.5 * cfg.kappa * neumaier_sum(last.iter().zip(&snap.ens_targets).map(|(a, b)| (a - b).powi(2))) / snap.traj.n() as f64;
    let feasible = snap.residuals.iter().all(|g| *g <= 0.0) && snap.mode_residuals.iter().flatten().all(|h| *h <= 0.0);
    Ok(FinalState {
        rates: snap.rates.iter().map(|r| r.value).collect(),
        rate_std_errors: snap.rates.iter().map(|r| r.std_error).collect(),
        complementary_slackness: complementary_slackness(&dual.eta, &snap.residuals),
        robust_residuals: snap.robust,
        plain_residuals: snap.plain,
        multipliers: dual.eta.clone(),
        mode_residuals: snap.mode_residuals,
        feasible,
        objective: fm_loss + endpoint_loss,
        fm_loss,
        endpoint_loss,
    })
}

/// Trajectory of `field` from a fresh sample of `mu0`.
pub fn rollout(field: &RbfField, problem: &TrainProblem, cfg: &TrainerConfig, n: usize, seed: u64) -> Result<TrajectoryRecord> {
    let ens0 = problem.mu0.sample(n, seed)?;
    integrate_ode(field, &ens0, &cfg.grid, cfg.substeps)
}
