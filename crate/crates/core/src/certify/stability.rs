use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{integrate_ode, TrajectoryRecord};
use crate::fields::{AnalyticField, RbfField};
use crate::measures::{mode_mass, w2, ModeSet};
use crate::rng::derive_seed;
use crate::stats::{fit_through_origin, OriginFit};
use crate::trainer::{train, TrainProblem, TrainerConfig};
use crate::{Error, Result};

/// What gets perturbed. Endpoint and drift shifts re-train the field; field
/// noise and initial shifts replay a fixed field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationAxis {
    /// Target law `mu_T` translated by `Δ e`.
    EndpointShift,
    /// Reference velocity `u*` plus the constant `Δ e`.
    DriftShift,
    /// Unit-norm random RBF weight direction scaled by `Δ`.
    FieldNoise,
    /// Initial particles translated by `Δ e`.
    InitShift,
}

impl PerturbationAxis {
    pub fn retrains(self) -> bool {
        matches!(self, PerturbationAxis::EndpointShift | PerturbationAxis::DriftShift)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    pub axis: PerturbationAxis,
    pub magnitudes: Vec<f64>,
    pub seeds: usize,
    pub eval_particles: usize,
    pub seed: u64,
    /// Sets whose mass deviation is tracked; the problem's mode sets when empty.
    #[serde(default)]
    pub mass_sets: Vec<ModeSet>,
}

impl StabilityConfig {
    pub fn new(axis: PerturbationAxis, magnitudes: Vec<f64>) -> Self {
        Self { axis, magnitudes, seeds: 3, eval_particles: 4000, seed: 0, mass_sets: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.magnitudes.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::invalid("perturbation magnitudes must be finite and >= 0"));
        }
        let mut pos: Vec<f64> = self.magnitudes.iter().copied().filter(|m| *m > 0.0).collect();
        pos.sort_by(f64::total_cmp);
        pos.dedup();
        if pos.len() < 4 || pos[pos.len() - 1] < 10.0 * pos[0] * (1.0 - 1e-9) {
            return Err(Error::invalid("stability sweep needs >= 4 distinct positive magnitudes spanning a decade"));
        }
        if self.seeds < 3 {
            return Err(Error::invalid("stability sweep needs >= 3 seeds"));
        }
        if self.eval_particles < 2 {
            return Err(Error::invalid("stability sweep needs >= 2 evaluation particles"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCell {
    pub magnitude: f64,
    pub seed: u64,
    /// `sup_n W2(mu_{t_n}, mũ_{t_n})`.
    pub sup_w2: f64,
    pub terminal_w2: f64,
    /// `max_{k,n} |M_k - M̃_k|` over the tracked sets (0 without sets).
    pub sup_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilitySweep {
    pub axis: PerturbationAxis,
    pub retrained: bool,
    pub cells: Vec<StabilityCell>,
    /// Empirical `Ĉ_W`: through-origin fit of the seed-mean `sup_w2` on
    /// magnitude.
    pub fit: OriginFit,
    pub terminal_fit: OriginFit,
    /// Empirical `Ĉ_M`; absent when no sets were tracked.
    pub mass_fit: Option<OriginFit>,
}

fn unit_direction(d: usize) -> Vec<f64> {
    vec![1.0 / (d as f64).sqrt(); d]
}

fn shifted_teacher(teacher: &AnalyticField, shift: &[f64]) -> Result<AnalyticField> {
    let d = shift.len();
    match teacher {
        AnalyticField::Zero { horizon, .. } => AnalyticField::affine(vec![0.0; d * d], shift.to_vec(), *horizon),
        AnalyticField::Affine { a, b, horizon } => {
            AnalyticField::affine(a.clone(), b.iter().zip(shift).map(|(x, y)| x + y).collect(), *horizon)
        }
        _ => Err(Error::invalid("drift-shift needs a zero or affine reference velocity")),
    }
}

fn compare(reference: &TrajectoryRecord, perturbed: &TrajectoryRecord, sets: &[ModeSet], magnitude: f64, seed: u64) -> Result<StabilityCell> {
    let mut sup_w2: f64 = 0.0;
    let mut sup_mass: f64 = 0.0;
    for (a, b) in reference.ensembles().iter().zip(perturbed.ensembles()) {
        sup_w2 = sup_w2.max(w2(a, b)?);
        for set in sets {
            sup_mass = sup_mass.max((mode_mass(a, set)?.mass - mode_mass(b, set)?.mass).abs());
        }
    }
    let terminal_w2 = w2(reference.last(), perturbed.last())?;
    Ok(StabilityCell { magnitude, seed, sup_w2, terminal_w2, sup_mass })
}

/// Measures trajectory deviation against perturbation size along one axis
/// and fits a line through the origin. Replay axes need `base`; re-train axes
/// train both the unperturbed and perturbed problems at every seed.
pub fn stability_sweep(problem: &TrainProblem, trainer: &TrainerConfig, base: Option<&RbfField>, cfg: &StabilityConfig) -> Result<StabilitySweep> {
    cfg.validate()?;
    problem.validate(trainer)?;
    if !cfg.axis.retrains() && base.is_none() {
        return Err(Error::invalid(format!("{:?} replays a fixed field; pass the base field", cfg.axis)));
    }
    let sets = if cfg.mass_sets.is_empty() { &problem.modes[..] } else { &cfg.mass_sets[..] };
    for s in sets {
        s.validate()?;
        if s.dim() != problem.dim() {
            return Err(Error::Dimension { expected: problem.dim(), got: s.dim() });
        }
    }
    let e = unit_direction(problem.dim());
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|j| derive_seed(cfg.seed, j)).collect();
    let retrained: Vec<Option<RbfField>> = seeds
        .iter()
        .map(|&s| {
            if cfg.axis.retrains() {
                let tc = TrainerConfig { seed: s, ..trainer.clone() };
                train(problem, &tc).map(|o| Some(o.field)).map_err(|f| f.error)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    let cells_in: Vec<(usize, f64)> = (0..seeds.len()).flat_map(|j| cfg.magnitudes.iter().map(move |&m| (j, m))).collect();
    let cells = cells_in
        .into_par_iter()
        .map(|(j, mag)| -> Result<StabilityCell> {
            let seed = seeds[j];
            let ens0 = problem.mu0.sample(cfg.eval_particles, derive_seed(seed, 0x57AB))?;
            let shift: Vec<f64> = e.iter().map(|v| v * mag).collect();
            let (reference_field, perturbed_field, start) = match cfg.axis {
                PerturbationAxis::FieldNoise => {
                    let f = base.unwrap();
                    (f.clone(), f.perturbed(mag, derive_seed(seed, 0xF1E1D))?, ens0.clone())
                }
                PerturbationAxis::InitShift => {
                    let f = base.unwrap();
                    let moved = ens0.map_points(|x, y| {
                        for i in 0..x.len() {
                            y[i] = x[i] + shift[i];
                        }
                    })?;
                    (f.clone(), f.clone(), moved)
                }
                PerturbationAxis::EndpointShift | PerturbationAxis::DriftShift => {
                    let mut p = problem.clone();
                    if cfg.axis == PerturbationAxis::EndpointShift {
                        let d = problem.dim();
                        let mut id = vec![0.0; d * d];
                        for i in 0..d {
                            id[i * d + i] = 1.0;
                        }
                        p.mu_t = problem.mu_t.affine_pushforward(&id, &shift)?;
                    } else {
                        p.teacher = shifted_teacher(&problem.teacher, &shift)?;
                    }
                    let reference = retrained[j].clone().unwrap();
                    let perturbed = if mag == 0.0 {
                        reference.clone()
                    } else {
                        train(&p, &TrainerConfig { seed, ..trainer.clone() }).map_err(|f| f.error)?.field
                    };
                    (reference, perturbed, ens0.clone())
                }
            };
            let reference = integrate_ode(&reference_field, &ens0, &trainer.grid, trainer.substeps)?;
            let perturbed = integrate_ode(&perturbed_field, &start, &trainer.grid, trainer.substeps)?;
            compare(&reference, &perturbed, sets, mag, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    // seeds are replicates: fit the seed-averaged deviation per magnitude
    let x = cfg.magnitudes.clone();
    let mean_of = |f: fn(&StabilityCell) -> f64| -> Vec<f64> {
        x.iter()
            .map(|&m| {
                let v: Vec<f64> = cells.iter().filter(|c| c.magnitude == m).map(f).collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect()
    };
    let fit = fit_through_origin(&x, &mean_of(|c| c.sup_w2));
    let terminal_fit = fit_through_origin(&x, &mean_of(|c| c.terminal_w2));
    let mass_fit = (!sets.is_empty()).then(|| fit_through_origin(&x, &mean_of(|c| c.sup_mass)));
    Ok(StabilitySweep { axis: cfg.axis, retrained: cfg.axis.retrains(), cells, fit, terminal_fit, mass_fit })
}
