use ecfm::dynamics::{integrate_ode, Diffusivity, TrajectoryRecord, Integrator};
use ecfm::entropy_control::{entropy_rate_div, entropy_rate_fd, entropy_rate_fp, lambda_eff, rate_series_div, DivMode};
use ecfm::fields::{AnalyticField, CurrentVelocity, LawPath, RbfField, ScoreField};
use ecfm::measures::{EntropyConfig, GaussianMixture, ParticleEnsemble, TimeGrid};
use ecfm::stats::ols_slope;
use rand::Rng;

#[test]
fn de_bruijn_heat_flow_rate() {
    let ens = GaussianMixture::normal_1d(0.0, 1.0).unwrap().sample(100_000, 1).unwrap();
    let s = ScoreField::new(LawPath::HeatFlow { initial: GaussianMixture::normal_1d(0.0, 1.0).unwrap(), eps: 0.5 }, 1.0);
    let r = entropy_rate_fp(&AnalyticField::zero(1, 1.0), &Diffusivity::constant(0.5), &s, &ens).unwrap();
    assert!((r.value - 0.5).abs() <= 3.0 * r.std_error, "{r:?}");
}

#[test]
fn gibbs_stationary_ou_has_zero_rate() {
    let ens = GaussianMixture::normal_1d(0.0, 1.0).unwrap().sample(100_000, 2).unwrap();
    let s = ScoreField::of_mixture(GaussianMixture::normal_1d(0.0, 1.0).unwrap(), 1.0);
    let b = AnalyticField::affine(vec![-1.0], vec![0.0], 1.0).unwrap();
    let r = entropy_rate_fp(&b, &Diffusivity::constant(1.0), &s, &ens).unwrap();
    assert!(r.value.abs() <= 3.0 * r.std_error, "{r:?}");
}

#[test]
fn fp_form_equals_div_form_of_current_velocity() {
    let init = GaussianMixture::symmetric_pair_1d(1.5, 0.8).unwrap();
    let eps = 0.3;
    let s = ScoreField::new(LawPath::HeatFlow { initial: init.clone(), eps }, 1.0);
    let b = AnalyticField::affine(vec![-0.5], vec![0.1], 1.0).unwrap();
    let v = CurrentVelocity::new(&b, Diffusivity::constant(eps), &s).unwrap();
    for (t, seed) in [(0.0, 3), (0.5, 4)] {
        let ens = s.law(t).unwrap().sample(50_000, seed).unwrap().with_time(t);
        let fp = entropy_rate_fp(&b, &Diffusivity::constant(eps), &s, &ens).unwrap();
        let dv = entropy_rate_div(&v, &ens, DivMode::Exact).unwrap();
        let pooled = (fp.std_error.powi(2) + dv.std_error.powi(2)).sqrt();
        assert!((fp.value - dv.value).abs() <= 3.0 * pooled, "t = {t}: {fp:?} vs {dv:?}");
    }
}

#[test]
fn finite_difference_zero_field() {
    let e = GaussianMixture::normal_1d(0.0, 1.0).unwrap().sample(2_000, 5).unwrap();
    let tr = integrate_ode(&AnalyticField::zero(1, 1.0), &e, &TimeGrid::uniform(1.0, 4).unwrap(), 1).unwrap();
    let s = entropy_rate_fd(&tr, EntropyConfig::default(), 0.05).unwrap();
    assert!(s.values().iter().all(|v| *v == 0.0));
}

#[test]
fn finite_difference_uniform_contraction() {
    // x -> (1 - t) x shifts the entropy by d log(1 - t)
    let d = 2;
    let e = GaussianMixture::isotropic(vec![0.0; d], 1.0).unwrap().sample(20_000, 6).unwrap();
    let grid = TimeGrid::uniform(0.5, 50).unwrap();
    let ens: Vec<ParticleEnsemble> = grid
        .times()
        .iter()
        .map(|&t| e.map_points(|x, y| y.iter_mut().zip(x).for_each(|(b, a)| *b = (1.0 - t) * a)).unwrap().with_time(t))
        .collect();
    let tr = TrajectoryRecord::from_ensembles(grid.clone(), ens, Integrator::Exact, 6).unwrap();
    let s = entropy_rate_fd(&tr, EntropyConfig::default(), 0.05).unwrap();
    for est in &s.estimates[1..grid.len() - 1] {
        let exact = -(d as f64) / (1.0 - est.time);
        assert!((est.value - exact).abs() < 1e-3 * exact.abs(), "{est:?}");
    }
}

#[test]
fn estimators_agree_on_smooth_flow() {
    let mut rng = ecfm::rng::rng(7);
    let mut f = RbfField::zeros(1, vec![-1.0, 0.0, 1.0], 1.0, vec![0.0, 1.0]).unwrap();
    let theta: Vec<f64> = (0..f.n_params()).map(|_| rng.random_range(-0.5..0.5)).collect();
    f = f.with_theta(theta).unwrap();
    let e = GaussianMixture::normal_1d(0.0, 1.0).unwrap().sample(100_000, 8).unwrap();
    let tr = integrate_ode(&f, &e, &TimeGrid::uniform(1.0, 9).unwrap(), 8).unwrap();
    let div = rate_series_div(&f, &tr, DivMode::Exact, 0.05).unwrap();
    let fd = entropy_rate_fd(&tr, EntropyConfig::default(), 0.05).unwrap();
    for k in 1..9 {
        let (a, b) = (&div.estimates[k], &fd.estimates[k]);
        let pooled = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        assert!((a.value - b.value).abs() <= 3.0 * pooled, "k = {k}: {a:?} vs {b:?}");
    }
    let budget = lambda_eff(&div, 0.05).unwrap();
    assert!(budget.lambda_lcb >= budget.lambda_max);
}

#[test]
fn hutchinson_error_decays_like_inverse_sqrt_probes() {
    let mut rng = ecfm::rng::rng(9);
    let d = 3;
    let centers: Vec<f64> = (0..6 * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let mut f = RbfField::zeros(d, centers, 1.0, vec![0.0, 1.0]).unwrap();
    let theta: Vec<f64> = (0..f.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
    f = f.with_theta(theta).unwrap();
    let ens = GaussianMixture::isotropic(vec![0.0; d], 1.0).unwrap().sample(100, 10).unwrap().with_time(0.3);
    let exact = entropy_rate_div(&f, &ens, DivMode::Exact).unwrap().value;
    let rs = [10usize, 100, 1000, 10_000];
    let mut log_err = Vec::new();
    for &r in &rs {
        let mse: f64 = (0..20u64)
            .map(|s| (entropy_rate_div(&f, &ens, DivMode::Hutchinson { probes: r, seed: s }).unwrap().value - exact).powi(2))
            .sum::<f64>()
            / 20.0;
        log_err.push(0.5 * mse.ln());
    }
    let x: Vec<f64> = rs.iter().map(|r| (*r as f64).ln()).collect();
    let slope = ols_slope(&x, &log_err);
    assert!((slope + 0.5).abs() <= 0.1, "slope {slope}");
}
