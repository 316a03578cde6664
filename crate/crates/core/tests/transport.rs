use ecfm::dynamics::{integrate_ode, Diffusivity};
use ecfm::fields::{AnalyticField, CurrentVelocity, LawPath, ScoreField};
use ecfm::measures::{GaussianMixture, TimeGrid};
use ecfm::transport_oracle::{
    bb_geodesic, ecfm_kl_identity_check, gaussian_bridge_variance, gaussian_w2, sb_marginal, sinkhorn, GridDensity,
    SinkhornConfig,
};

fn endpoints(m: usize) -> (GridDensity, GridDensity) {
    let a = GridDensity::from_mixture(&GaussianMixture::normal_1d(-1.0, 0.25).unwrap(), -6.0, 6.0, m).unwrap();
    let b = GridDensity::from_mixture(&GaussianMixture::normal_1d(1.0, 0.25).unwrap(), -6.0, 6.0, m).unwrap();
    (a, b)
}

#[test]
fn sinkhorn_bridge_is_self_consistent() {
    let cfg = SinkhornConfig { eps: 0.1, horizon: 1.0, tol: 1e-10, max_iter: 5000 };
    let (a, b) = endpoints(512);
    let t0 = std::time::Instant::now();
    let pots = sinkhorn(&a, &b, cfg).unwrap();
    eprintln!("512: {} iterations, {:?}", pots.iterations, t0.elapsed());
    assert!(pots.iterations <= 5000);
    assert!(pots.log_f.iter().chain(pots.log_g.iter()).all(|v| !v.is_nan() && *v < f64::INFINITY));
    for w in pots.residual_history.windows(2) {
        assert!(w[1] <= w[0] + 1e-14);
    }

    let start = sb_marginal(&pots, 0.0).unwrap();
    let end = sb_marginal(&pots, 1.0).unwrap();
    assert!(start.l1(&a).unwrap() <= 1e-8, "{}", start.l1(&a).unwrap());
    assert!(end.l1(&b).unwrap() <= 1e-8, "{}", end.l1(&b).unwrap());

    // coupling: marginals and the mean shift
    let pi = pots.coupling();
    let (m, xs) = (a.cells(), a.centers());
    let shift: f64 = (0..m * m).map(|k| pi[k] * (xs[k % m] - xs[k / m])).sum();
    assert!((shift - 2.0).abs() <= a.width(), "{shift}");

    let mid = sb_marginal(&pots, 0.5).unwrap();
    let var = gaussian_bridge_variance(0.25, 0.25, 0.1, 1.0, 0.5);
    assert!(mid.mean().abs() < 1e-6);
    assert!((mid.variance().sqrt() - var.sqrt()).abs() <= 2.0 * a.width(), "{} vs {var}", mid.variance());

    let (a2, b2) = endpoints(1024);
    let t0 = std::time::Instant::now();
    let fine = sinkhorn(&a2, &b2, cfg).unwrap();
    eprintln!("1024: {} iterations, {:?}", fine.iterations, t0.elapsed());
    let mid2 = sb_marginal(&fine, 0.5).unwrap().coarsen().unwrap();
    let d = mid2.l1(&mid).unwrap();
    assert!(d <= 1e-3, "grid halving moved the mid marginal by {d}");
}

#[test]
fn displacement_geodesic_has_constant_speed() {
    let a = GaussianMixture::normal_1d(-1.0, 0.5).unwrap();
    let b = GaussianMixture::normal_1d(3.0, 2.0).unwrap();
    let total = gaussian_w2(&a, &b).unwrap();
    for (s, t) in [(0.0, 1.0), (0.1, 0.4), (0.25, 0.75), (0.5, 0.6), (0.9, 0.2)] {
        let d = gaussian_w2(&bb_geodesic(&a, &b, s).unwrap(), &bb_geodesic(&a, &b, t).unwrap()).unwrap();
        assert!((d - (t - s as f64).abs() * total).abs() < 1e-12, "({s}, {t}): {d}");
    }
    let a2 = GaussianMixture::gaussian(vec![0.0, 0.0], vec![1.0, 0.3, 0.3, 0.5]).unwrap();
    let b2 = GaussianMixture::gaussian(vec![1.0, 2.0], vec![2.0, -0.4, -0.4, 1.0]).unwrap();
    let total = gaussian_w2(&a2, &b2).unwrap();
    let d = gaussian_w2(&bb_geodesic(&a2, &b2, 0.2).unwrap(), &bb_geodesic(&a2, &b2, 0.7).unwrap()).unwrap();
    assert!((d - 0.5 * total).abs() < 1e-10);
}

fn pooled_ok(c: &ecfm::transport_oracle::IdentityCheck) -> bool {
    c.residual < 5.0 * c.std_error
}

#[test]
fn identity_holds_on_heat_flow() {
    let eps = 0.5;
    let law0 = GaussianMixture::normal_1d(0.0, 1.0).unwrap();
    let score = ScoreField::new(LawPath::HeatFlow { initial: law0.clone(), eps }, 1.0);
    let zero = AnalyticField::zero(1, 1.0);
    let v = CurrentVelocity::new(&zero, Diffusivity::constant(eps), &score).unwrap();
    let traj = integrate_ode(&v, &law0.sample(20_000, 7).unwrap(), &TimeGrid::uniform(1.0, 20).unwrap(), 4).unwrap();
    let c = ecfm_kl_identity_check(&v, &zero, &traj, &score, eps).unwrap();
    assert!(c.kl_term.abs() < 1e-9, "{c:?}");
    assert!(pooled_ok(&c), "{c:?}");
}

#[test]
fn identity_holds_on_affine_transport() {
    let eps = 0.2;
    let law0 = GaussianMixture::symmetric_pair_1d(1.5, 0.6).unwrap();
    let (a, b) = (vec![-0.8], vec![0.5]);
    let score = ScoreField::new(LawPath::AffineFlow { initial: law0.clone(), a: a.clone(), b: b.clone() }, 1.0);
    let v = AnalyticField::affine(a, b, 1.0).unwrap();
    let zero = AnalyticField::zero(1, 1.0);
    let traj = integrate_ode(&v, &law0.sample(20_000, 9).unwrap(), &TimeGrid::uniform(1.0, 20).unwrap(), 4).unwrap();
    let c = ecfm_kl_identity_check(&v, &zero, &traj, &score, eps).unwrap();
    assert!(pooled_ok(&c), "{c:?}");
    // the residual is a genuine check: a wrong rate sign breaks it
    assert!((c.lhs - (c.kl_term - c.rate_term + c.cross_term - c.fisher_term)).abs() > 5.0 * c.std_error, "{c:?}");
}
