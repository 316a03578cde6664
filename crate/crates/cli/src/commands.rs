use ecfm::certify::{
    assemble_report, density_floor_proxy, grid_adequacy, mode_floor_certificate, select_budget, stability_sweep, ReportInputs,
    StabilityConfig, StabilitySweep,
};
use ecfm::collapse_lab::{run_collapse_sequence, CollapseRunConfig};
use ecfm::dynamics::{integrate_ode, integrate_sde, Diffusivity, TrajectoryRecord};
use ecfm::entropy_control::{entropy_rate_fd, rate_series_div, rate_series_fp, DivMode, EntropyRateSeries};
use ecfm::fields::{AnalyticField, CurrentVelocity, LawPath, RbfField, ScoreField};
use ecfm::measures::{EntropyConfig, ModeSet, TimeGrid};
use ecfm::rng::derive_seed;
use ecfm::transport_oracle::{
    bb_geodesic, ecfm_kl_identity_check, gamma_sweep, gaussian_bridge_variance, gaussian_w2, sb_marginal, sinkhorn, write_gamma_csv,
    GammaSweepConfig, GridDensity, SinkhornConfig,
};
use ecfm::trainer::{rollout, train as train_field, TrainOutcome, TrainProblem, TrainerConfig};
use serde::Serialize;

use crate::config::{Command, ExperimentConfig, FlowSpec, SweepSpec};
use crate::{CliError, Output};

// child-seed tags
const TRAIN: u64 = 0x7261;
const PILOT: u64 = 0x7069;
const EVAL: u64 = 0x6576;
const SAMPLE: u64 = 0x7361;
const NOISE: u64 = 0x6e6f;
const SWEEP: u64 = 0x7377;
const FINE: u64 = 0x6669;

pub(crate) fn dispatch(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    match cfg.command {
        Command::Train => train(cfg, out),
        Command::Entropy => entropy(cfg, out),
        Command::Collapse => collapse(cfg, out),
        Command::Geodesic => geodesic(cfg, out),
        Command::Gamma => gamma(cfg, out),
        Command::Identity => identity(cfg, out),
        Command::Certify => certify(cfg, out),
        Command::Stability => stability(cfg, out),
    }
}

fn trainer_config(cfg: &ExperimentConfig, tag: u64) -> TrainerConfig {
    let mut tc = cfg.trainer.clone().unwrap_or_default();
    tc.seed = derive_seed(cfg.seed, tag);
    tc
}

fn problem_and_trainer(cfg: &ExperimentConfig) -> Result<(&TrainProblem, TrainerConfig), CliError> {
    let problem = cfg.block(&cfg.problem, "problem")?;
    let tc = trainer_config(cfg, TRAIN);
    problem.validate(&tc)?;
    Ok((problem, tc))
}

/// Trains and writes `<prefix>history.ndjson`, `<prefix>field.json` and
/// `<prefix>final.json`; a failed run still leaves its partial history.
fn train_and_save(problem: &TrainProblem, tc: &TrainerConfig, out: &mut Output, prefix: &str) -> Result<TrainOutcome, CliError> {
    problem.validate(tc)?;
    match train_field(problem, tc) {
        Ok(o) => {
            out.with_writer(&format!("{prefix}history.ndjson"), |w| o.history.write_ndjson(w))?;
            out.json(&format!("{prefix}field.json"), &o.field)?;
            #[derive(Serialize)]
            struct Final<'a> {
                #[serde(with = "ecfm::stats::nonfinite")]
                budgets: &'a [f64],
                dual: &'a ecfm::trainer::DualState,
                #[serde(rename = "final")]
                state: &'a ecfm::trainer::FinalState,
            }
            out.json(&format!("{prefix}final.json"), &Final { budgets: &o.budgets, dual: &o.dual, state: &o.final_state })?;
            Ok(o)
        }
        Err(f) => {
            out.with_writer(&format!("{prefix}history.ndjson"), |w| f.history.write_ndjson(w))?;
            if let Some(field) = &f.field {
                out.json(&format!("{prefix}field.json"), field)?;
            }
            Err(match f.error {
                e @ (ecfm::Error::Invalid(_) | ecfm::Error::Dimension { .. }) => CliError::from(e),
                e => CliError::Numerical(format!("training aborted: {e}")),
            })
        }
    }
}

/// Exact-divergence rate series of `field` on a fresh evaluation sample.
fn eval_rates(field: &RbfField, problem: &TrainProblem, tc: &TrainerConfig, n: usize, seed: u64) -> Result<(TrajectoryRecord, EntropyRateSeries), CliError> {
    let traj = rollout(field, problem, tc, n, seed)?;
    let rates = rate_series_div(field, &traj, DivMode::Exact, tc.alpha)?;
    Ok((traj, rates))
}

fn train(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let block = cfg.block(&cfg.train, "train")?;
    let (problem, mut tc) = problem_and_trainer(cfg)?;
    if let Some(l) = block.lambda {
        tc = tc.with_budget(l);
    }
    let o = train_and_save(problem, &tc, out, "")?;
    let (_, rates) = eval_rates(&o.field, problem, &tc, block.eval_particles, derive_seed(cfg.seed, EVAL))?;
    out.with_writer("rates.csv", |w| rates.write_csv(w))
}

struct FlowSetup {
    traj: TrajectoryRecord,
    score: ScoreField,
    /// Drift `b`; the law moves with the current velocity `b - eps s`.
    drift: AnalyticField,
    eps: f64,
}

impl FlowSetup {
    fn velocity(&self) -> Result<CurrentVelocity<'_>, CliError> {
        Ok(CurrentVelocity::new(&self.drift, Diffusivity::constant(self.eps), &self.score)?)
    }
}

fn flow_setup(flow: &FlowSpec, horizon: f64, steps: usize, substeps: usize, particles: usize, seed: u64, stochastic: bool) -> Result<FlowSetup, CliError> {
    let grid = TimeGrid::uniform(horizon, steps)?;
    let ens0 = flow.initial().sample(particles, derive_seed(seed, SAMPLE))?;
    let d = flow.initial().dim();
    match flow {
        FlowSpec::Heat { initial, eps } => {
            let score = ScoreField::new(LawPath::HeatFlow { initial: initial.clone(), eps: *eps }, horizon);
            let drift = AnalyticField::zero(d, horizon);
            let traj = if stochastic {
                integrate_sde(&drift, &Diffusivity::constant(*eps), &ens0, &grid, substeps, derive_seed(seed, NOISE))?
            } else {
                let v = CurrentVelocity::new(&drift, Diffusivity::constant(*eps), &score)?;
                integrate_ode(&v, &ens0, &grid, substeps)?
            };
            Ok(FlowSetup { traj, score, drift, eps: *eps })
        }
        FlowSpec::Affine { initial, a, b } => {
            let drift = AnalyticField::affine(a.clone(), b.clone(), horizon)?;
            let score = ScoreField::new(LawPath::AffineFlow { initial: initial.clone(), a: a.clone(), b: b.clone() }, horizon);
            let traj = integrate_ode(&drift, &ens0, &grid, substeps)?;
            Ok(FlowSetup { traj, score, drift, eps: 0.0 })
        }
    }
}

#[derive(Serialize)]
struct Agreement {
    time: f64,
    #[serde(with = "ecfm::stats::nonfinite::scalar")]
    z_div_fp: f64,
    #[serde(with = "ecfm::stats::nonfinite::scalar")]
    z_div_fd: f64,
    #[serde(with = "ecfm::stats::nonfinite::scalar")]
    z_fp_fd: f64,
}

fn z(a: (f64, f64), b: (f64, f64)) -> f64 {
    let pooled = (a.1 * a.1 + b.1 * b.1).sqrt();
    let diff = (a.0 - b.0).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / pooled
    }
}

fn entropy(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let b = cfg.block(&cfg.entropy, "entropy")?;
    let s = flow_setup(&b.flow, b.horizon, b.steps, b.substeps, b.particles, cfg.seed, true)?;
    let div = rate_series_div(&s.velocity()?, &s.traj, DivMode::Exact, b.alpha)?;
    let fp = rate_series_fp(&s.drift, &Diffusivity::constant(s.eps), &s.score, &s.traj, b.alpha)?;
    let fd = entropy_rate_fd(&s.traj, EntropyConfig { k: b.k, ..Default::default() }, b.alpha)?;
    out.with_writer("rates.csv", |w| {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "div", "div_se", "fp", "fp_se", "fd", "fd_se"])?;
        for ((a, p), f) in div.estimates.iter().zip(&fp.estimates).zip(&fd.estimates) {
            wr.write_record([a.time, a.value, a.std_error, p.value, p.std_error, f.value, f.std_error].map(|v| format!("{v:?}")))?;
        }
        wr.flush()?;
        Ok(())
    })?;
    let n = div.estimates.len();
    let rows: Vec<Agreement> = (1..n - 1)
        .map(|k| {
            let (a, p, f) = (&div.estimates[k], &fp.estimates[k], &fd.estimates[k]);
            Agreement {
                time: a.time,
                z_div_fp: z((a.value, a.std_error), (p.value, p.std_error)),
                z_div_fd: z((a.value, a.std_error), (f.value, f.std_error)),
                z_fp_fd: z((p.value, p.std_error), (f.value, f.std_error)),
            }
        })
        .collect();
    out.json("agreement.json", &rows)
}

fn collapse(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let b = cfg.block(&cfg.collapse, "collapse")?;
    let params = match (&b.sequence, b.terms.is_empty()) {
        (Some(s), true) => s.params()?,
        (None, false) => b.terms.clone(),
        _ => return Err(CliError::Config("[collapse] needs exactly one of `sequence` or `terms`".into())),
    };
    let horizon = params[0].horizon;
    let run = CollapseRunConfig { seed: derive_seed(cfg.seed, SAMPLE), ..b.run };
    let diags = run_collapse_sequence(&params, &AnalyticField::zero(1, horizon), &run)?;
    ecfm::collapse_lab::write_collapse_outputs(out.dir(), &diags)?;
    out.record(diags.iter().map(|d| format!("collapse_{}.csv", d.index)));
    out.record(["summary.json".to_string()]);
    Ok(())
}

#[derive(Serialize)]
struct GeodesicSummary {
    iterations: usize,
    residual: f64,
    log_domain: bool,
    endpoint_l1: [f64; 2],
    mid_time: f64,
    mid_mean: f64,
    mid_variance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    closed_form_variance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    halving_l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    w2: Option<f64>,
}

fn geodesic(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let b = cfg.block(&cfg.geodesic, "geodesic")?;
    if b.mu0.dim() != 1 || b.mu_t.dim() != 1 {
        return Err(CliError::Config("[geodesic] works on 1D endpoints".into()));
    }
    if b.times.iter().any(|t| !(0.0..=b.horizon).contains(t)) {
        return Err(CliError::Config("[geodesic] times must lie in [0, horizon]".into()));
    }
    let scfg = SinkhornConfig { eps: b.eps, horizon: b.horizon, tol: b.tol, max_iter: b.max_iter };
    let solve = |cells: usize| -> Result<_, CliError> {
        let a = GridDensity::from_mixture(&b.mu0, b.lo, b.hi, cells)?;
        let c = GridDensity::from_mixture(&b.mu_t, b.lo, b.hi, cells)?;
        let pots = sinkhorn(&a, &c, scfg)?;
        Ok((a, c, pots))
    };
    let (a, c, pots) = solve(b.cells)?;
    out.json("sinkhorn.json", &pots)?;
    let marginals = b.times.iter().map(|&t| sb_marginal(&pots, t)).collect::<ecfm::Result<Vec<_>>>()?;
    out.with_writer("marginals.csv", |w| {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["x".to_string()];
        header.extend(b.times.iter().map(|t| format!("t={t:?}")));
        wr.write_record(&header)?;
        for (i, x) in a.centers().iter().enumerate() {
            let mut row = vec![format!("{x:?}")];
            row.extend(marginals.iter().map(|m| format!("{:?}", m.masses()[i])));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    })?;
    let mid_time = 0.5 * b.horizon;
    let mid = sb_marginal(&pots, mid_time)?;
    let single = b.mu0.components().len() == 1 && b.mu_t.components().len() == 1;
    let closed_form_variance =
        single.then(|| gaussian_bridge_variance(b.mu0.covariance()[0], b.mu_t.covariance()[0], b.eps, b.horizon, 0.5));
    let halving_l1 = if b.halving {
        let (_, _, fine) = solve(2 * b.cells)?;
        Some(sb_marginal(&fine, mid_time)?.coarsen()?.l1(&mid)?)
    } else {
        None
    };
    let summary = GeodesicSummary {
        iterations: pots.iterations,
        residual: pots.residual,
        log_domain: pots.log_domain,
        endpoint_l1: [sb_marginal(&pots, 0.0)?.l1(&a)?, sb_marginal(&pots, b.horizon)?.l1(&c)?],
        mid_time,
        mid_mean: mid.mean(),
        mid_variance: mid.variance(),
        closed_form_variance,
        halving_l1,
        w2: if single { Some(gaussian_w2(&b.mu0, &b.mu_t)?) } else { None },
    };
    out.json("summary.json", &summary)?;
    if single {
        // displacement interpolant at the same times
        out.with_writer("bb.csv", |w| {
            let mut wr = csv::Writer::from_writer(w);
            wr.write_record(["t", "mean", "variance"])?;
            for &t in &b.times {
                let g = bb_geodesic(&b.mu0, &b.mu_t, t / b.horizon)?;
                wr.write_record([t, g.mean()[0], g.covariance()[0]].map(|v| format!("{v:?}")))?;
            }
            wr.flush()?;
            Ok(())
        })?;
    }
    Ok(())
}

fn gamma(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let b = cfg.block(&cfg.gamma, "gamma")?;
    let (problem, tc) = problem_and_trainer(cfg)?;
    let scfg = GammaSweepConfig { seeds: b.seeds, eval_particles: b.eval_particles, seed: derive_seed(cfg.seed, SWEEP) };
    let (rows, err) = match gamma_sweep(problem, &b.lambdas, &tc, &scfg) {
        Ok(rows) => (rows, None),
        Err(f) => (f.partial.clone(), Some(*f)),
    };
    out.with_writer("gamma.csv", |w| write_gamma_csv(&rows, w))?;
    out.json("gamma.json", &rows)?;
    match err {
        None => Ok(()),
        Some(f) => match CliError::from(f.error) {
            CliError::Numerical(m) => Err(CliError::Numerical(format!("gamma sweep aborted at lambda = {}: {m}", f.lambda))),
            other => Err(other),
        },
    }
}

fn identity(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let b = cfg.block(&cfg.identity, "identity")?;
    let s = flow_setup(&b.flow, b.horizon, b.steps, b.substeps, b.particles, cfg.seed, false)?;
    let zero = AnalyticField::zero(b.flow.initial().dim(), b.horizon);
    let check = ecfm_kl_identity_check(&s.velocity()?, &zero, &s.traj, &s.score, b.eps)?;
    #[derive(Serialize)]
    struct Report {
        #[serde(flatten)]
        check: ecfm::transport_oracle::IdentityCheck,
        z: f64,
    }
    let z = if check.std_error > 0.0 { check.residual / check.std_error } else { 0.0 };
    out.json("identity.json", &Report { check, z })
}

fn sweep_config(s: &SweepSpec, seed: u64, mass_sets: Vec<ModeSet>) -> StabilityConfig {
    StabilityConfig { axis: s.axis, magnitudes: s.magnitudes.clone(), seeds: s.seeds, eval_particles: s.eval_particles, seed, mass_sets }
}

fn write_sweep(out: &mut Output, name: &str, s: &StabilitySweep) -> Result<(), CliError> {
    out.with_writer(&format!("{name}.csv"), |w| {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["magnitude", "seed", "sup_w2", "terminal_w2", "sup_mass"])?;
        for c in &s.cells {
            wr.write_record([format!("{:?}", c.magnitude), c.seed.to_string(), format!("{:?}", c.sup_w2), format!("{:?}", c.terminal_w2), format!("{:?}", c.sup_mass)])?;
        }
        wr.flush()?;
        Ok(())
    })?;
    out.json(&format!("{name}.json"), s)
}

fn certify(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let b = cfg.block(&cfg.certify, "certify")?;
    let (problem, tc) = problem_and_trainer(cfg)?;
    let eval_seed = derive_seed(cfg.seed, EVAL);
    let lambda = match b.lambda {
        Some(l) => l,
        None => {
            let pilot_tc = TrainerConfig { seed: derive_seed(cfg.seed, PILOT), ..tc.clone() }.with_budget(f64::INFINITY);
            let pilot = train_and_save(problem, &pilot_tc, out, "pilot_")?;
            let (_, rates) = eval_rates(&pilot.field, problem, &pilot_tc, b.eval_particles, eval_seed)?;
            out.with_writer("pilot_rates.csv", |w| rates.write_csv(w))?;
            select_budget(&rates, b.alpha, b.delta_safe)?
        }
    };
    let tc = tc.with_budget(lambda);
    let trained = train_and_save(problem, &tc, out, "")?;
    let (traj, rates) = eval_rates(&trained.field, problem, &tc, b.eval_particles, eval_seed)?;
    out.with_writer("rates.csv", |w| rates.write_csv(w))?;

    let modes = if b.modes.is_empty() { problem.modes.clone() } else { b.modes.clone() };
    let floors = if modes.is_empty() { None } else { Some(mode_floor_certificate(&traj, &modes, &b.cores, b.alpha)?) };
    if let Some(f) = &floors {
        out.json("floors.json", f)?;
    }
    let grid = match b.eps_h {
        Some(eps_h) => {
            let fine_tc = TrainerConfig { grid: tc.grid.refine(b.fine_factor)?, ..tc.clone() };
            let fine = rollout(&trained.field, problem, &fine_tc, b.eval_particles, derive_seed(cfg.seed, FINE))?;
            let fine_rates = rate_series_div(&trained.field, &fine, DivMode::Exact, b.alpha)?;
            Some(grid_adequacy(&fine_rates, &tc.grid, eps_h)?)
        }
        None => None,
    };
    let density = if b.probes.is_empty() {
        None
    } else {
        let probes: Vec<(Vec<f64>, f64)> = b.probes.iter().map(|p| (p.center.clone(), p.radius)).collect();
        Some(density_floor_proxy(traj.last(), &probes, b.alpha)?)
    };
    let tracked = if b.cores.is_empty() { modes.clone() } else { b.cores.clone() };
    let mut sweeps = Vec::new();
    for (j, s) in b.sweeps.iter().enumerate() {
        let sweep = stability_sweep(problem, &tc, Some(&trained.field), &sweep_config(s, derive_seed(cfg.seed, SWEEP + j as u64), tracked.clone()))?;
        write_sweep(out, &format!("stability_{j}"), &sweep)?;
        sweeps.push(sweep);
    }
    let report = assemble_report(&ReportInputs {
        model: b.model.clone(),
        alpha: b.alpha,
        delta_safe: b.delta_safe,
        lambda_star: Some(lambda),
        rates: Some(rates),
        floors,
        core_thresholds: b.core_thresholds.clone(),
        density,
        stability: sweeps,
        delta_tot_max: b.delta_tot_max,
        grid,
        seeds: vec![cfg.seed, tc.seed, eval_seed],
    })?;
    out.text("report.json", &format!("{}\n", report.to_json()?))?;
    out.text("report.md", &report.to_markdown())
}

fn stability(cfg: &ExperimentConfig, out: &mut Output) -> Result<(), CliError> {
    let b = cfg.block(&cfg.stability, "stability")?;
    let (problem, tc) = problem_and_trainer(cfg)?;
    let tc = tc.with_budget(b.lambda);
    let base = if b.sweep.axis.retrains() { None } else { Some(train_and_save(problem, &tc, out, "base_")?.field) };
    let sweep = stability_sweep(problem, &tc, base.as_ref(), &sweep_config(&b.sweep, derive_seed(cfg.seed, SWEEP), Vec::new()))?;
    write_sweep(out, "stability", &sweep)
}
