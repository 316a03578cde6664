//! Particle transport under ODE and SDE dynamics, and the flow-matching risk
//! along a trajectory.

use std::path::Path;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fields::VelocityField;
use crate::measures::{ParticleEnsemble, TimeGrid};
use crate::stats::mean_se;
use crate::{Error, Result};

/// Diffusivity schedule `t -> eps(t) >= 0`.
#[derive(Clone)]
pub struct Diffusivity {
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    constant: Option<f64>,
}

impl Diffusivity {
    pub fn constant(eps: f64) -> Self {
        Self { f: Arc::new(move |_| eps), constant: Some(eps) }
    }
    pub fn from_fn(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { f: Arc::new(f), constant: None }
    }
    pub fn at(&self, t: f64) -> f64 {
        (self.f)(t)
    }
    pub fn as_constant(&self) -> Option<f64> {
        self.constant
    }
}

impl std::fmt::Debug for Diffusivity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.constant {
            Some(e) => write!(f, "Diffusivity({e})"),
            None => f.write_str("Diffusivity(<fn>)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    Rk4,
    EulerMaruyama,
    /// Exact pushforward supplied by the caller.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub time: f64,
    /// Largest particle displacement since the previous grid time.
    pub max_displacement: f64,
    /// Ensemble mean and standard deviation of `∇·v` at this time.
    pub divergence_mean: f64,
    pub divergence_std: f64,
}

/// Ensembles at every grid time plus integrator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    grid: TimeGrid,
    ensembles: Vec<ParticleEnsemble>,
    pub integrator: Integrator,
    pub substeps: usize,
    pub seed: u64,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl TrajectoryRecord {
    /// Assembles a record from per-time ensembles (one per grid time, equal `n`).
    pub fn from_ensembles(grid: TimeGrid, ensembles: Vec<ParticleEnsemble>, integrator: Integrator, seed: u64) -> Result<Self> {
        if ensembles.len() != grid.len() {
            return Err(Error::Dimension { expected: grid.len(), got: ensembles.len() });
        }
        let (n, d) = (ensembles[0].n(), ensembles[0].dim());
        for (e, &t) in ensembles.iter().zip(grid.times()) {
            if e.n() != n || e.dim() != d {
                return Err(Error::invalid("trajectory ensembles must share n and d"));
            }
            if e.time() != t {
                return Err(Error::invalid(format!("ensemble time {} does not match grid time {t}", e.time())));
            }
        }
        let diagnostics = grid
            .times()
            .iter()
            .enumerate()
            .map(|(k, &t)| StepDiagnostics {
                time: t,
                max_displacement: if k == 0 { 0.0 } else { max_disp(&ensembles[k - 1], &ensembles[k]) },
                divergence_mean: f64::NAN,
                divergence_std: f64::NAN,
            })
            .collect();
        Ok(Self { grid, ensembles, integrator, substeps: 1, seed, diagnostics })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn ensembles(&self) -> &[ParticleEnsemble] {
        &self.ensembles
    }
    pub fn at(&self, k: usize) -> &ParticleEnsemble {
        &self.ensembles[k]
    }
    pub fn first(&self) -> &ParticleEnsemble {
        &self.ensembles[0]
    }
    pub fn last(&self) -> &ParticleEnsemble {
        self.ensembles.last().unwrap()
    }
    pub fn dim(&self) -> usize {
        self.ensembles[0].dim()
    }
    pub fn n(&self) -> usize {
        self.ensembles[0].n()
    }

    /// Fills the divergence statistics from `field`.
    pub fn with_divergence_stats(mut self, field: &dyn VelocityField) -> Self {
        for (diag, ens) in self.diagnostics.iter_mut().zip(&self.ensembles) {
            let divs: Vec<f64> = ens.iter_points().map(|x| field.divergence(x, ens.time())).collect();
            let m = mean_se(&divs);
            diag.divergence_mean = m.value;
            diag.divergence_std = m.std_error * (divs.len() as f64).sqrt();
        }
        self
    }

    /// Writes `ensemble_0000.csv, …` and `manifest.json` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (k, e) in self.ensembles.iter().enumerate() {
            let name = format!("ensemble_{k:04}.csv");
            e.save_csv(dir.join(&name))?;
            files.push(name);
        }
        let manifest = Manifest {
            grid: self.grid.times().to_vec(),
            seed: self.seed,
            integrator: self.integrator,
            substeps: self.substeps,
            n: self.n(),
            dim: self.dim(),
            files,
            diagnostics: self.diagnostics.clone(),
        };
        let f = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), &manifest)?;
        Ok(())
    }

    /// Reads a directory written by [`write_dir`](Self::write_dir).
    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m: Manifest = serde_json::from_reader(std::fs::File::open(dir.join("manifest.json"))?)?;
        let grid = TimeGrid::new(m.grid)?;
        let ensembles = m
            .files
            .iter()
            .zip(grid.times())
            .map(|(f, &t)| ParticleEnsemble::load_csv(dir.join(f), t, m.seed))
            .collect::<Result<Vec<_>>>()?;
        let mut rec = Self::from_ensembles(grid, ensembles, m.integrator, m.seed)?;
        rec.substeps = m.substeps;
        rec.diagnostics = m.diagnostics;
        Ok(rec)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    grid: Vec<f64>,
    seed: u64,
    integrator: Integrator,
    substeps: usize,
    n: usize,
    dim: usize,
    files: Vec<String>,
    diagnostics: Vec<StepDiagnostics>,
}

fn max_disp(a: &ParticleEnsemble, b: &ParticleEnsemble) -> f64 {
    a.iter_points()
        .zip(b.iter_points())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

fn check_inputs(field: &dyn VelocityField, ens0: &ParticleEnsemble, grid: &TimeGrid, substeps: usize) -> Result<()> {
    if substeps == 0 {
        return Err(Error::invalid("substeps must be >= 1"));
    }
    if field.dim() != ens0.dim() {
        return Err(Error::Dimension { expected: field.dim(), got: ens0.dim() });
    }
    if grid.horizon() > field.horizon() * (1.0 + 1e-12) {
        return Err(Error::TimeOutOfRange { t: grid.horizon(), horizon: field.horizon() });
    }
    Ok(())
}

/// Stage times of one grid interval split into `substeps` pieces; the last
/// equals `t1` exactly.
fn substep_times(t0: f64, t1: f64, substeps: usize) -> impl Iterator<Item = (f64, f64)> {
    let h = (t1 - t0) / substeps as f64;
    (0..substeps).map(move |s| {
        let a = t0 + s as f64 * h;
        let b = if s + 1 == substeps { t1 } else { t0 + (s + 1) as f64 * h };
        (a, b)
    })
}

/// One classical RK4 step of `ẋ = v(x, t)` from `t` to `t + h`.
pub(crate) fn rk4_step(field: &dyn VelocityField, x: &mut [f64], t: f64, t_next: f64, scratch: &mut [Vec<f64>; 5]) {
    let h = t_next - t;
    let d = x.len();
    let [k1, k2, k3, k4, y] = scratch;
    field.velocity(x, t, k1);
    for i in 0..d {
        y[i] = x[i] + 0.5 * h * k1[i];
    }
    let tm = t + 0.5 * h;
    field.velocity(y, tm, k2);
    for i in 0..d {
        y[i] = x[i] + 0.5 * h * k2[i];
    }
    field.velocity(y, tm, k3);
    for i in 0..d {
        y[i] = x[i] + h * k3[i];
    }
    field.velocity(y, t_next, k4);
    for i in 0..d {
        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

fn assemble(
    grid: &TimeGrid,
    ens0: &ParticleEnsemble,
    per_particle: Vec<std::result::Result<Vec<f64>, (usize, f64)>>,
) -> Result<Vec<ParticleEnsemble>> {
    let d = ens0.dim();
    let n = ens0.n();
    let mut paths = Vec::with_capacity(n);
    for (i, r) in per_particle.into_iter().enumerate() {
        match r {
            Ok(p) => paths.push(p),
            Err((k, t)) => {
                log::debug!("particle {i} left the finite range at grid index {k}");
                return Err(Error::NonFinite { particle: i, time: t });
            }
        }
    }
    grid.times()
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let mut pts = Vec::with_capacity(n * d);
            for p in &paths {
                pts.extend_from_slice(&p[k * d..(k + 1) * d]);
            }
            ParticleEnsemble::new(pts, d, ens0.weights().to_vec(), t, ens0.seed())
        })
        .collect()
}

/// Classical RK4 with `substeps` sub-intervals per grid interval.
pub fn integrate_ode(field: &dyn VelocityField, ens0: &ParticleEnsemble, grid: &TimeGrid, substeps: usize) -> Result<TrajectoryRecord> {
    check_inputs(field, ens0, grid, substeps)?;
    let d = ens0.dim();
    let times = grid.times();
    let per_particle: Vec<_> = (0..ens0.n())
        .into_par_iter()
        .map(|i| {
            let mut x = ens0.point(i).to_vec();
            let mut path = Vec::with_capacity(times.len() * d);
            path.extend_from_slice(&x);
            let mut scratch = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
            for (k, w) in times.windows(2).enumerate() {
                for (a, b) in substep_times(w[0], w[1], substeps) {
                    rk4_step(field, &mut x, a, b, &mut scratch);
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err((k + 1, w[1]));
                }
                path.extend_from_slice(&x);
            }
            Ok(path)
        })
        .collect();
    let ensembles = assemble(grid, ens0, per_particle)?;
    let mut rec = TrajectoryRecord::from_ensembles(grid.clone(), ensembles, Integrator::Rk4, ens0.seed())?;
    rec.substeps = substeps;
    Ok(rec.with_divergence_stats(field))
}

/// Euler–Maruyama for `dX = b dt + sqrt(2 eps(t)) dW`, one RNG stream per
/// particle so results do not depend on thread scheduling.
pub fn integrate_sde(
    drift: &dyn VelocityField,
    eps: &Diffusivity,
    ens0: &ParticleEnsemble,
    grid: &TimeGrid,
    substeps: usize,
    seed: u64,
) -> Result<TrajectoryRecord> {
    check_inputs(drift, ens0, grid, substeps)?;
    let times = grid.times();
    for w in times.windows(2) {
        for (a, _) in substep_times(w[0], w[1], substeps) {
            let e = eps.at(a);
            if !(e >= 0.0) || !e.is_finite() {
                return Err(Error::invalid(format!("diffusivity must be finite and >= 0, got {e} at t = {a}")));
            }
        }
    }
    let d = ens0.dim();
    let per_particle: Vec<_> = (0..ens0.n())
        .into_par_iter()
        .map(|i| {
            let mut rng = crate::rng::stream_rng(seed, i as u64);
            let mut x = ens0.point(i).to_vec();
            let mut b = vec![0.0; d];
            let mut path = Vec::with_capacity(times.len() * d);
            path.extend_from_slice(&x);
            for (k, w) in times.windows(2).enumerate() {
                for (a, c) in substep_times(w[0], w[1], substeps) {
                    let h = c - a;
                    drift.velocity(&x, a, &mut b);
                    let amp = (2.0 * eps.at(a) * h).sqrt();
                    for j in 0..d {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        x[j] += b[j] * h + amp * z;
                    }
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err((k + 1, w[1]));
                }
                path.extend_from_slice(&x);
            }
            Ok(path)
        })
        .collect();
    let ensembles = assemble(grid, ens0, per_particle)?;
    let mut rec = TrajectoryRecord::from_ensembles(grid.clone(), ensembles, Integrator::EulerMaruyama, seed)?;
    rec.substeps = substeps;
    Ok(rec.with_divergence_stats(drift))
}

/// Per-time weighted means of `½ |v - u*|²`.
pub fn fm_risk_profile(field: &dyn VelocityField, teacher: &dyn VelocityField, traj: &TrajectoryRecord) -> Result<Vec<f64>> {
    if field.dim() != traj.dim() || teacher.dim() != traj.dim() {
        return Err(Error::Dimension { expected: traj.dim(), got: field.dim() });
    }
    let d = traj.dim();
    traj.ensembles()
        .iter()
        .map(|ens| {
            let t = ens.time();
            let terms: Vec<f64> = ens
                .iter_points()
                .zip(ens.weights())
                .collect::<Vec<_>>()
                .par_iter()
                .map(|(x, w)| {
                    let mut v = vec![0.0; d];
                    let mut u = vec![0.0; d];
                    field.velocity(x, t, &mut v);
                    teacher.velocity(x, t, &mut u);
                    *w * 0.5 * v.iter().zip(&u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                })
                .collect();
            let r = crate::stats::neumaier_sum(terms);
            if r.is_finite() {
                Ok(r)
            } else {
                Err(Error::NonFinite { particle: 0, time: t })
            }
        })
        .collect()
}

/// `½ ∫∫ |v - u*|² dmu_t dt` with trapezoid quadrature on the trajectory grid.
pub fn fm_risk(field: &dyn VelocityField, teacher: &dyn VelocityField, traj: &TrajectoryRecord) -> Result<f64> {
    let prof = fm_risk_profile(field, teacher, traj)?;
    Ok(prof.iter().zip(traj.grid().trapezoid_weights()).map(|(p, w)| p * w).sum())
}
