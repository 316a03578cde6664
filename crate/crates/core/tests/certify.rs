use ecfm::certify::{
    assemble_report, density_floor_proxy, mode_floor_certificate, select_budget, stability_sweep, PerturbationAxis, ReportInputs,
    StabilityConfig, Verdict,
};
use ecfm::collapse_lab::{collapse_trajectory, CollapseParams};
use ecfm::dynamics::{Integrator, TrajectoryRecord};
use ecfm::entropy_control::{rate_series_div, DivMode};
use ecfm::fields::AnalyticField;
use ecfm::measures::{GaussianMixture, ModeSet, TimeGrid};
use ecfm::rng::derive_seed;
use ecfm::trainer::{rollout, train, TrainProblem, TrainerConfig};

fn stationary(law: &GaussianMixture, b: usize, seed: u64) -> TrajectoryRecord {
    let grid = TimeGrid::uniform(1.0, 9).unwrap();
    let ens = grid
        .times()
        .iter()
        .enumerate()
        .map(|(k, &t)| law.sample(b, derive_seed(seed, k as u64)).unwrap().with_time(t))
        .collect();
    TrajectoryRecord::from_ensembles(grid, ens, Integrator::Exact, seed).unwrap()
}

#[test]
fn floors_cover_true_masses() {
    let law = GaussianMixture::symmetric_pair_1d(2.0, 1.0).unwrap();
    let modes = [ModeSet::half_space(vec![1.0], 0.0), ModeSet::half_space(vec![-1.0], 0.0)];
    let cores = [ModeSet::interval(1.0, 3.0), ModeSet::interval(-3.0, -1.0)];
    let core_truth = law.cdf_1d(3.0) - law.cdf_1d(1.0);
    let trials = 300;
    let mut covered = 0;
    for trial in 0..trials {
        let c = mode_floor_certificate(&stationary(&law, 500, trial), &modes, &cores, 0.05).unwrap();
        let ok = c.mode_floors.iter().flatten().all(|f| *f <= 0.5) && c.core_floors.iter().flatten().all(|f| *f <= core_truth);
        covered += ok as usize;
    }
    assert!(covered as f64 >= 0.95 * trials as f64, "{covered}/{trials}");
}

#[test]
fn floors_rise_with_batch() {
    let law = GaussianMixture::symmetric_pair_1d(3.0, 0.5).unwrap();
    let modes = [ModeSet::half_space(vec![1.0], 0.0), ModeSet::half_space(vec![-1.0], 0.0)];
    let mut prev = f64::NEG_INFINITY;
    for b in [500, 2000, 8000] {
        let c = mode_floor_certificate(&stationary(&law, b, 4), &modes, &[], 0.05).unwrap();
        assert!(c.global_min() > prev && c.global_min() < 0.5);
        prev = c.global_min();
    }
}

#[test]
fn collapse_plateau_is_detected_and_infeasible() {
    let p = CollapseParams::new(0.04, 0.1, 4.0, 1.0).unwrap();
    let traj = collapse_trajectory(&p, 4000, 11, 16, 8).unwrap();
    let modes = [ModeSet::half_space(vec![1.0], 0.0), ModeSet::half_space(vec![-1.0], 0.0)];
    let cores = [ModeSet::interval(3.0, 5.0), ModeSet::interval(-5.0, -3.0)];
    let c = mode_floor_certificate(&traj, &modes, &cores, 0.05).unwrap();
    let radius = c.radius[0];
    assert!(c.core_min.iter().all(|m| *m <= 0.01 + radius), "{:?}", c.core_min);

    let field = AnalyticField::Collapse(p.clone());
    let rates = rate_series_div(&field, &traj, DivMode::Exact, 0.05).unwrap();
    let report = assemble_report(&ReportInputs {
        model: "collapse".into(),
        alpha: 0.05,
        lambda_star: Some(1.0),
        rates: Some(rates),
        floors: Some(c),
        core_thresholds: vec![0.1, 0.1],
        ..Default::default()
    })
    .unwrap();
    assert_eq!(report.verdict, Verdict::Infeasible);
    assert!(*report.lambda_eff_lcb.value().unwrap() > 10.0);
}

#[test]
fn density_proxy_matches_gaussian_peak() {
    let ens = GaussianMixture::normal_1d(0.0, 1.0).unwrap().sample(100_000, 2).unwrap();
    let p = density_floor_proxy(&ens, &[(vec![0.0], 0.1)], 0.05).unwrap();
    assert!((p[0].proxy / 0.398_942_280_4 - 1.0).abs() < 0.15);
}

#[test]
fn trained_transport_certifies_feasible() {
    let problem = TrainProblem::transport(GaussianMixture::normal_1d(-2.0, 1.0).unwrap(), GaussianMixture::normal_1d(2.0, 1.0).unwrap(), 1.0).unwrap();
    let base = TrainerConfig { batch: 200, outer_iters: 40, ..Default::default() };
    let pilot = train(&problem, &base.clone().with_budget(f64::INFINITY)).unwrap();
    let eval = |f| rollout(f, &problem, &base, 2000, 77).unwrap();
    let pilot_rates = rate_series_div(&pilot.field, &eval(&pilot.field), DivMode::Exact, 0.05).unwrap();
    let lambda = select_budget(&pilot_rates, 0.05, 0.1).unwrap();
    let trained = train(&problem, &base.clone().with_budget(lambda)).unwrap();
    let traj = eval(&trained.field);
    let rates = rate_series_div(&trained.field, &traj, DivMode::Exact, 0.05).unwrap();
    let floors = mode_floor_certificate(&traj, &[ModeSet::interval(-6.0, 6.0)], &[ModeSet::interval(-5.0, 5.0)], 0.05).unwrap();
    let sweep = stability_sweep(
        &problem,
        &base,
        Some(&trained.field),
        &StabilityConfig { eval_particles: 500, ..StabilityConfig::new(PerturbationAxis::InitShift, vec![0.05, 0.1, 0.2, 0.5]) },
    )
    .unwrap();
    let report = assemble_report(&ReportInputs {
        model: "two-gaussian".into(),
        alpha: 0.05,
        delta_safe: 0.1,
        lambda_star: Some(lambda),
        rates: Some(rates),
        floors: Some(floors),
        core_thresholds: vec![0.5],
        stability: vec![sweep],
        delta_tot_max: 0.0,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(report.verdict, Verdict::Feasible, "{}", report.to_markdown());
    assert!(report.deployment_floors.value().unwrap().iter().all(|f| *f > 0.0));
    assert!(report.stability_w.is_measured());
}
