use ecfm::collapse_lab::{run_collapse_sequence, write_collapse_outputs, CollapseParams, CollapseRunConfig};
use ecfm::fields::AnalyticField;

fn sequence() -> Vec<CollapseParams> {
    (1..=4)
        .map(|n| {
            let s = 0.5f64.powi(n);
            CollapseParams::new(0.04 * s, 0.1 * s, 4.0, 1.0).unwrap()
        })
        .collect()
}

fn run(params: &[CollapseParams], n: usize) -> Vec<ecfm::collapse_lab::CollapseDiagnostics> {
    let cfg = CollapseRunConfig { n_particles: n, seed: 11, ..Default::default() };
    run_collapse_sequence(params, &AnalyticField::zero(1, 1.0), &cfg).unwrap()
}

#[test]
fn plateau_empties_the_cores() {
    let p = CollapseParams::new(0.01, 0.05, 4.0, 1.0).unwrap();
    let d = &run(&[p], 20_000)[0];
    assert!(d.plateau_core_mass < 0.01, "{}", d.plateau_core_mass);
    assert!(d.min_core_mass < 0.01);
    for r in &d.rows {
        assert!((0.45..=0.55).contains(&r.half_plus) && (0.45..=0.55).contains(&r.half_minus), "{r:?}");
    }
}

#[test]
fn budget_grows_with_rate_coupling() {
    let diags = run(&sequence(), 5_000);
    for w in diags.windows(2) {
        assert!(w[1].lambda_eff.lambda_max > w[0].lambda_eff.lambda_max);
    }
    for d in &diags {
        let ratio = d.lambda_eff.lambda_max / d.rate_coupling;
        assert!((ratio - 1.0).abs() < 0.25, "n={} ratio {ratio}", d.index);
        // the k-NN finite-difference oracle sees the same dissipation
        let fd = d.lambda_eff_fd / d.rate_coupling;
        assert!((fd - 1.0).abs() < 0.25, "n={} fd ratio {fd}", d.index);
    }
    for lambda in [1.0, 10.0, 50.0] {
        let violated = diags.iter().any(|d| d.rows.iter().filter(|r| r.rate_lcb < -lambda).count() >= 2);
        assert!(violated, "lambda = {lambda}");
    }
}

#[test]
fn transitions_cost_at_least_the_kinetic_bound() {
    // halving tau doubles the transport cost of the collapse: the excess
    // grows instead of vanishing
    let diags = run(&sequence(), 5_000);
    for d in &diags {
        assert!(d.fm_risk_excess >= 0.5 * d.kinetic_lower_bound * 0.99, "{} < {}", d.fm_risk_excess, d.kinetic_lower_bound);
    }
    for w in diags.windows(2) {
        assert!(w[1].fm_risk_excess > 1.5 * w[0].fm_risk_excess);
    }
}

#[test]
fn endpoints_are_recovered() {
    let diags = run(&sequence()[..1], 5_000);
    let d = &diags[0];
    assert_eq!(d.endpoint_w2, 0.0);
    let (a, b) = (d.rows.first().unwrap(), d.rows.last().unwrap());
    assert!((a.entropy - b.entropy).abs() <= 3.0 * (a.entropy_se.powi(2) + b.entropy_se.powi(2)).sqrt());
}

#[test]
fn writes_one_csv_per_member_and_a_summary() {
    let diags = run(&sequence()[..2], 1_000);
    let dir = tempfile::tempdir().unwrap();
    write_collapse_outputs(dir.path(), &diags).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("collapse_1.csv")).unwrap();
    assert!(csv.starts_with("t,entropy,entropy_se,rate,rate_lcb,M+,M-,m+,m-\n"));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 2);
}
