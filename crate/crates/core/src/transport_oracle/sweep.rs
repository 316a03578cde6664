use std::io::Write;

use serde::{Deserialize, Serialize};

use super::bb_pushforward;
use crate::measures::w2;
use crate::rng::derive_seed;
use crate::stats::sample_std;
use crate::trainer::{rollout, train, TrainProblem, TrainerConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaSweepConfig {
    /// Training seeds per budget; seed `j` is shared by every budget.
    pub seeds: usize,
    /// Particles used to compare trajectories with the geodesic.
    pub eval_particles: usize,
    pub seed: u64,
}

impl Default for GammaSweepConfig {
    fn default() -> Self {
        Self { seeds: 5, eval_particles: 4000, seed: 0 }
    }
}

/// One budget of the ladder with its per-seed results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    #[serde(with = "crate::stats::nonfinite::scalar")]
    pub lambda: f64,
    /// Trained objective `V_lambda` per seed.
    pub objectives: Vec<f64>,
    /// `sup_t W2(mu_t, geodesic_t)` per seed.
    pub sup_w2: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl GammaRow {
    pub fn objective_mean(&self) -> f64 {
        self.objectives.iter().sum::<f64>() / self.objectives.len() as f64
    }
    pub fn objective_std(&self) -> f64 {
        sample_std(&self.objectives)
    }
    pub fn sup_w2_mean(&self) -> f64 {
        self.sup_w2.iter().sum::<f64>() / self.sup_w2.len() as f64
    }
    pub fn sup_w2_std(&self) -> f64 {
        sample_std(&self.sup_w2)
    }
}

/// Writes `lambda, objective, objective_std, sup_w2, sup_w2_std, seeds`.
pub fn write_gamma_csv<W: Write>(rows: &[GammaRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["lambda", "objective", "objective_std", "sup_w2", "sup_w2_std", "seeds"])?;
    for r in rows {
        let lambda = if r.lambda.is_finite() { crate::measures::format_f64(r.lambda) } else { "inf".into() };
        out.write_record([
            lambda,
            crate::measures::format_f64(r.objective_mean()),
            crate::measures::format_f64(r.objective_std()),
            crate::measures::format_f64(r.sup_w2_mean()),
            crate::measures::format_f64(r.sup_w2_std()),
            r.seeds.len().to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Rows finished before a training run failed, plus the failure.
#[derive(Debug)]
pub struct SweepFailure {
    pub error: Error,
    pub lambda: f64,
    pub partial: Vec<GammaRow>,
}

impl std::fmt::Display for SweepFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gamma sweep failed at lambda = {} after {} rows: {}", self.lambda, self.partial.len(), self.error)
    }
}

impl std::error::Error for SweepFailure {}

/// Trains at each budget of the ladder (uniform over the grid) and measures
/// the trained trajectory against the displacement interpolant of the
/// single-Gaussian endpoints.
pub fn gamma_sweep(
    problem: &TrainProblem,
    lambdas: &[f64],
    base: &TrainerConfig,
    cfg: &GammaSweepConfig,
) -> std::result::Result<Vec<GammaRow>, Box<SweepFailure>> {
    let fail = |error: Error, lambda: f64, partial: Vec<GammaRow>| Box::new(SweepFailure { error, lambda, partial });
    if lambdas.is_empty() || lambdas.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(fail(Error::invalid("gamma sweep needs a strictly descending budget list"), f64::NAN, Vec::new()));
    }
    if cfg.seeds == 0 || cfg.eval_particles < 2 {
        return Err(fail(Error::invalid("gamma sweep needs >= 1 seed and >= 2 evaluation particles"), f64::NAN, Vec::new()));
    }
    if problem.mu0.components().len() != 1 || problem.mu_t.components().len() != 1 {
        return Err(fail(Error::invalid("gamma sweep compares against closed-form geodesics: single-Gaussian endpoints only"), f64::NAN, Vec::new()));
    }
    let horizon = base.grid.horizon();
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut row = GammaRow { lambda, objectives: Vec::new(), sup_w2: Vec::new(), seeds: Vec::new() };
        for j in 0..cfg.seeds {
            let seed = derive_seed(cfg.seed, j as u64);
            let tc = TrainerConfig { seed, ..base.clone() }.with_budget(lambda);
            let out = match train(problem, &tc) {
                Ok(o) => o,
                Err(f) => return Err(fail(f.error, lambda, rows)),
            };
            let measured = (|| -> Result<f64> {
                let traj = rollout(&out.field, problem, &tc, cfg.eval_particles, derive_seed(seed, 0x6e0))?;
                let ens0 = traj.first().clone();
                let mut sup: f64 = 0.0;
                for ens in traj.ensembles() {
                    let geo = bb_pushforward(&ens0, &problem.mu0, &problem.mu_t, ens.time() / horizon)?;
                    sup = sup.max(w2(ens, &geo)?);
                }
                Ok(sup)
            })();
            match measured {
                Ok(s) => row.sup_w2.push(s),
                Err(e) => return Err(fail(e, lambda, rows)),
            }
            row.objectives.push(out.final_state.objective);
            row.seeds.push(seed);
            log::info!("gamma sweep: lambda {lambda}, seed {j}: V = {:.5}, sup W2 = {:.4}", out.final_state.objective, row.sup_w2[j]);
        }
        rows.push(row);
    }
    Ok(rows)
}
