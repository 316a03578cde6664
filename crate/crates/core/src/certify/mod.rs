//! Certification: budget selection, time-grid adequacy, modal and density
//! floors, perturbation-stability sweeps and the final report.

mod report;
mod stability;

pub use report::{assemble_report, CertificateReport, Measured, NotMeasured, ReportInputs, Verdict, REPORT_SCHEMA};
pub use stability::{stability_sweep, PerturbationAxis, StabilityCell, StabilityConfig, StabilitySweep};

use serde::{Deserialize, Serialize};

use crate::dynamics::TrajectoryRecord;
use crate::entropy_control::{lambda_eff, EntropyRateSeries};
use crate::measures::{hoeffding_radius, mode_mass, ModeSet, ParticleEnsemble, TimeGrid};
use crate::{Error, Result};

/// `lambda* = lambda_eff^LCB + delta_safe`.
pub fn select_budget(series: &EntropyRateSeries, alpha: f64, delta_safe: f64) -> Result<f64> {
    if !(delta_safe >= 0.0) || !delta_safe.is_finite() {
        return Err(Error::invalid(format!("delta_safe must be finite and >= 0, got {delta_safe}")));
    }
    Ok(lambda_eff(series, alpha)?.lambda_lcb + delta_safe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAdequacy {
    /// Largest finite-difference slope `|ΔḢ / Δt|` of the fine series.
    pub lipschitz: f64,
    pub max_step: f64,
    /// `eps_H / L_H` (infinite when the rate is flat).
    pub threshold: f64,
    pub adequate: bool,
    /// Coarse intervals whose local slope times width exceeds `eps_H`;
    /// reported as refinement advice only.
    pub refine: Vec<usize>,
}

/// Checks `max Δt ≤ eps_H / L_H` with `L_H` read off a fine reference series.
pub fn grid_adequacy(fine: &EntropyRateSeries, coarse: &TimeGrid, eps_h: f64) -> Result<GridAdequacy> {
    if !(eps_h > 0.0) {
        return Err(Error::invalid("eps_H must be > 0"));
    }
    let ft = fine.grid.times();
    if fine.grid.steps() < 4 * coarse.steps() {
        return Err(Error::invalid(format!(
            "fine series has {} steps; need at least 4x the {} coarse steps",
            fine.grid.steps(),
            coarse.steps()
        )));
    }
    let vals = fine.values();
    let slopes: Vec<f64> = (0..ft.len() - 1).map(|k| ((vals[k + 1] - vals[k]) / (ft[k + 1] - ft[k])).abs()).collect();
    let lipschitz = slopes.iter().copied().fold(0.0, f64::max);
    let max_step = coarse.max_step();
    let threshold = if lipschitz > 0.0 { eps_h / lipschitz } else { f64::INFINITY };
    let ct = coarse.times();
    let refine = (0..ct.len().saturating_sub(1))
        .filter(|&n| {
            let (a, b) = (ct[n], ct[n + 1]);
            // fine intervals overlapping [a, b]
            let local = (0..slopes.len()).filter(|&k| ft[k + 1] > a && ft[k] < b).map(|k| slopes[k]).fold(0.0, f64::max);
            local * (b - a) > eps_h
        })
        .collect();
    Ok(GridAdequacy { lipschitz, max_step, threshold, adequate: max_step <= threshold, refine })
}

/// Simultaneous lower confidence floors for mode and core masses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloorCertificate {
    pub alpha: f64,
    pub times: Vec<f64>,
    pub batch: Vec<usize>,
    /// Hoeffding radius per grid time (union over every certified set).
    pub radius: Vec<f64>,
    /// `[k][n]` empirical masses.
    pub mode_mass: Vec<Vec<f64>>,
    pub core_mass: Vec<Vec<f64>>,
    /// `[k][n]` floors `mass - radius`.
    pub mode_floors: Vec<Vec<f64>>,
    pub core_floors: Vec<Vec<f64>>,
    /// `min_n` of each row.
    pub mode_min: Vec<f64>,
    pub core_min: Vec<f64>,
}

impl FloorCertificate {
    /// Minimum over every certified set and time.
    pub fn global_min(&self) -> f64 {
        self.mode_min.iter().chain(&self.core_min).copied().fold(f64::INFINITY, f64::min)
    }

    /// Core floors when cores were given, mode floors otherwise.
    pub fn certified_cores(&self) -> &[f64] {
        if self.core_min.is_empty() {
            &self.mode_min
        } else {
            &self.core_min
        }
    }
}

/// Floors `M̂_{k,n} - r_n` and `m̂_{k,n} - r_n` holding jointly with
/// probability `1 - alpha`; the union bound runs over all modes, cores and
/// grid times.
pub fn mode_floor_certificate(traj: &TrajectoryRecord, modes: &[ModeSet], cores: &[ModeSet], alpha: f64) -> Result<FloorCertificate> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if modes.is_empty() {
        return Err(Error::invalid("floor certificate needs at least one mode set"));
    }
    if !cores.is_empty() && cores.len() != modes.len() {
        return Err(Error::invalid(format!("{} cores for {} modes", cores.len(), modes.len())));
    }
    for (m, c) in modes.iter().zip(cores) {
        if !m.contains_set(c) {
            return Err(Error::invalid("every core must lie inside its mode set"));
        }
    }
    let n_sets = modes.len() + cores.len();
    let n_times = traj.ensembles().len();
    let batch: Vec<usize> = traj.ensembles().iter().map(ParticleEnsemble::n).collect();
    let radius: Vec<f64> = batch.iter().map(|&b| hoeffding_radius(alpha, n_sets, n_times, b)).collect();
    let masses = |sets: &[ModeSet]| -> Result<Vec<Vec<f64>>> {
        sets.iter().map(|s| traj.ensembles().iter().map(|e| mode_mass(e, s).map(|m| m.mass)).collect()).collect()
    };
    let mode_mass = masses(modes)?;
    let core_mass = masses(cores)?;
    let floors = |m: &[Vec<f64>]| -> Vec<Vec<f64>> { m.iter().map(|row| row.iter().zip(&radius).map(|(a, r)| a - r).collect()).collect() };
    let mode_floors = floors(&mode_mass);
    let core_floors = floors(&core_mass);
    let mins = |f: &[Vec<f64>]| -> Vec<f64> { f.iter().map(|row| row.iter().copied().fold(f64::INFINITY, f64::min)).collect() };
    Ok(FloorCertificate {
        alpha,
        times: traj.grid().times().to_vec(),
        batch,
        radius,
        mode_min: mins(&mode_floors),
        core_min: mins(&core_floors),
        mode_mass,
        core_mass,
        mode_floors,
        core_floors,
    })
}

/// Local-occupancy lower proxy for the density on one probe ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityProxy {
    pub center: Vec<f64>,
    pub radius: f64,
    pub occupancy: f64,
    pub hoeffding: f64,
    /// `(occupancy - hoeffding) / |B_r|`; nonpositive means no certificate.
    pub proxy: f64,
}

impl DensityProxy {
    pub fn certified(&self) -> bool {
        self.proxy > 0.0
    }
}

fn ball_volume(d: usize, r: f64) -> f64 {
    let h = d as f64 / 2.0;
    std::f64::consts::PI.powf(h) * r.powi(d as i32) / libm::tgamma(h + 1.0)
}

/// `(p̂ - eps) / |B_r|` per probe, with the Hoeffding radius shared across
/// the probes at level `alpha`.
pub fn density_floor_proxy(ens: &ParticleEnsemble, probes: &[(Vec<f64>, f64)], alpha: f64) -> Result<Vec<DensityProxy>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let eps = hoeffding_radius(alpha, probes.len().max(1), 1, ens.n());
    probes
        .iter()
        .map(|(center, r)| {
            if !(*r > 0.0) {
                return Err(Error::invalid(format!("probe radius must be > 0, got {r}")));
            }
            let occupancy = mode_mass(ens, &ModeSet::ball(center.clone(), *r))?.mass;
            Ok(DensityProxy {
                center: center.clone(),
                radius: *r,
                occupancy,
                hoeffding: eps,
                proxy: (occupancy - eps) / ball_volume(ens.dim(), *r),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy_control::{EntropyRateEstimate, RateMethod};
    use crate::measures::GaussianMixture;

    fn series(grid: TimeGrid, f: impl Fn(f64) -> f64, se: f64) -> EntropyRateSeries {
        let est = grid
            .times()
            .iter()
            .map(|&t| EntropyRateEstimate { index: 0, time: t, value: f(t), std_error: se, probes: 0, method: RateMethod::DivExact })
            .collect();
        EntropyRateSeries::new(grid, est, 0.05).unwrap()
    }

    #[test]
    fn budget_examples() {
        let grid = TimeGrid::uniform(1.0, 9).unwrap();
        let mut vals = vec![1.0; 10];
        vals[3] = -0.5;
        let est = grid
            .times()
            .iter()
            .zip(&vals)
            .map(|(&t, &v)| EntropyRateEstimate { index: 0, time: t, value: v, std_error: if v < 0.0 { 0.1 } else { 0.0 }, probes: 0, method: RateMethod::DivExact })
            .collect();
        let s = EntropyRateSeries::new(grid.clone(), est, 0.05).unwrap();
        assert!((select_budget(&s, 0.05, 0.1).unwrap() - 0.9462).abs() < 1e-4);
        let lcb = lambda_eff(&s, 0.05).unwrap().lambda_lcb;
        assert_eq!(select_budget(&s, 0.05, 0.0).unwrap(), lcb);
        let flat = series(grid, |_| 0.3, 0.0);
        assert_eq!(select_budget(&flat, 0.05, 0.05).unwrap(), 0.05);
        assert!(select_budget(&flat, 0.05, -1.0).is_err());
    }

    #[test]
    fn grid_adequacy_examples() {
        let fine = series(TimeGrid::uniform(1.0, 40).unwrap(), |_| -0.7, 0.0);
        let g = grid_adequacy(&fine, &TimeGrid::uniform(1.0, 2).unwrap(), 1e-3).unwrap();
        assert_eq!(g.lipschitz, 0.0);
        assert!(g.adequate && g.refine.is_empty());

        // rate -1/(tau - t) near t = 0 with tau = 0.2: slope ≈ 1/tau² = 25
        let fine = series(TimeGrid::uniform(0.01, 40).unwrap(), |t| -1.0 / (0.2 - t), 0.0);
        let g = grid_adequacy(&fine, &TimeGrid::uniform(0.01, 1).unwrap(), 1.0).unwrap();
        assert!((g.lipschitz - 25.0).abs() < 3.0, "{}", g.lipschitz);
        assert!(g.adequate);
        let l = g.lipschitz;
        // boundary: a single step just above eps_H / L fails
        let fine = series(TimeGrid::uniform(1.0, 40).unwrap(), |t| 2.0 * t, 0.0);
        let at = grid_adequacy(&fine, &TimeGrid::uniform(1.0, 1).unwrap(), 2.0 * (1.0 + 1e-9)).unwrap();
        assert!(at.adequate);
        let above = grid_adequacy(&fine, &TimeGrid::uniform(1.0, 1).unwrap(), 2.0 * (1.0 - 1e-9)).unwrap();
        assert!(!above.adequate && above.refine == vec![0]);
        assert!(l > 0.0);
        assert!(grid_adequacy(&fine, &TimeGrid::uniform(1.0, 11).unwrap(), 1.0).is_err());
    }

    #[test]
    fn floors_of_stationary_pair() {
        let law = GaussianMixture::symmetric_pair_1d(3.0, 0.5).unwrap();
        let grid = TimeGrid::uniform(1.0, 9).unwrap();
        let ens: Vec<_> = grid.times().iter().enumerate().map(|(k, &t)| law.sample(2000, k as u64).unwrap().with_time(t)).collect();
        let traj = TrajectoryRecord::from_ensembles(grid, ens, crate::dynamics::Integrator::Exact, 0).unwrap();
        let modes = [ModeSet::half_space(vec![1.0], 0.0), ModeSet::half_space(vec![-1.0], 0.0)];
        let c = mode_floor_certificate(&traj, &modes, &[], 0.05).unwrap();
        assert!((c.radius[0] - 0.0409).abs() < 5e-5);
        for k in 0..2 {
            assert!((c.mode_min[k] - (0.5 - 0.0409)).abs() < 0.04);
        }
        let cores = [ModeSet::interval(2.0, 4.0), ModeSet::interval(-4.0, -2.0)];
        let c2 = mode_floor_certificate(&traj, &modes, &cores, 0.05).unwrap();
        assert!(c2.radius[0] > c.radius[0]);
        assert_eq!(c2.certified_cores().len(), 2);
        assert!(mode_floor_certificate(&traj, &modes, &cores[..1], 0.05).is_err());
        let outside = [ModeSet::interval(-1.0, 1.0), ModeSet::interval(-4.0, -2.0)];
        assert!(mode_floor_certificate(&traj, &modes, &outside, 0.05).is_err());
    }

    #[test]
    fn density_proxy_examples() {
        let law = GaussianMixture::normal_1d(0.0, 1.0).unwrap();
        let ens = law.sample(100_000, 1).unwrap();
        let p = density_floor_proxy(&ens, &[(vec![0.0], 0.1), (vec![10.0], 0.1)], 0.05).unwrap();
        let rho0 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!(((p[0].proxy - rho0) / rho0).abs() < 0.15, "{}", p[0].proxy);
        assert!(p[0].certified());
        assert!(p[1].proxy <= 0.0 && !p[1].certified());
        let half = density_floor_proxy(&law.sample(50_000, 1).unwrap(), &[(vec![0.0], 0.1), (vec![10.0], 0.1)], 0.05).unwrap();
        assert!(half[0].hoeffding > p[0].hoeffding);
        assert!(density_floor_proxy(&ens, &[(vec![0.0], 0.0)], 0.05).is_err());
        assert!((ball_volume(2, 1.0) - std::f64::consts::PI).abs() < 1e-12);
        assert!((ball_volume(3, 2.0) - 4.0 / 3.0 * std::f64::consts::PI * 8.0).abs() < 1e-10);
    }
}
