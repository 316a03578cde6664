use std::path::Path;
use std::process::Command as Process;

use ecfm::certify::CertificateReport;
use ecfm::collapse_lab::CollapseSummary;
use ecfm::fields::RbfField;
use ecfm::trainer::IterationRecord;
use ecfm_cli::{run, CliError, Command, ExperimentConfig, RunManifest};

const PROBLEM: &str = r#"
[problem]
mu0 = { components = [{ w = 1.0, mean = [-1.0], cov = [[1.0]] }] }
muT = { components = [{ w = 1.0, mean = [1.0], cov = [[1.0]] }] }
teacher = { kind = "zero", dim = 1, horizon = 1.0 }

[trainer]
grid = [0.0, 0.25, 0.5, 0.75, 1.0]
budgets = ["inf", "inf", "inf", "inf", "inf"]
batch = 64
outer_iters = 4
substeps = 2
"#;

fn config(command: &str, seed: u64, out: &Path, body: &str) -> String {
    format!("version = \"ecfm-config-v1\"\ncommand = \"{command}\"\nseed = {seed}\noutdir = {:?}\n{body}", out.display().to_string())
}

fn parse(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(text).unwrap()
}

fn collapse_body(terms: usize) -> String {
    format!(
        "[collapse]\nsequence = {{ eps0 = 0.04, tau0 = 0.1, ratio = 0.5, terms = {terms}, a = 4.0, sigma = 1.0 }}\n\
         run = {{ n_particles = 2000, window_steps = 8, plateau_steps = 4, alpha = 0.05, entropy_k = 5, seed = 0 }}\n"
    )
}

#[test]
fn strict_parsing_reports_lines() {
    let dir = tempfile::tempdir().unwrap();
    let bad = config("train", 0, dir.path(), &format!("{PROBLEM}\n[train]\neval_particles = 100\nbogus = 1\n"));
    let err = ExperimentConfig::from_toml(&bad).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let msg = err.to_string();
    assert!(msg.contains("line") && msg.contains("bogus"), "{msg}");

    let old = config("train", 0, dir.path(), "").replace("ecfm-config-v1", "ecfm-config-v0");
    assert!(matches!(ExperimentConfig::from_toml(&old), Err(CliError::Config(_))));
    let missing = "command = \"train\"\nseed = 0\noutdir = \"x\"\n";
    assert!(ExperimentConfig::from_toml(missing).is_err());
}

#[test]
fn json_and_toml_agree_and_ids_track_content() {
    let dir = tempfile::tempdir().unwrap();
    let a = parse(&config("train", 3, dir.path(), &format!("{PROBLEM}\n[train]\nlambda = \"inf\"\neval_particles = 100\n")));
    let b = ExperimentConfig::from_json(&a.canonical_json()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.run_id(), b.run_id());
    assert_eq!(a.run_id().len(), 12);
    assert!(a.run_id().chars().all(|c| c.is_ascii_hexdigit()));
    let c = ExperimentConfig { seed: 4, ..a.clone() };
    assert_ne!(a.run_id(), c.run_id());
    assert!(a.run_dir().ends_with(Path::new("train").join(a.run_id())));
}

#[test]
fn minimal_train_writes_readable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse(&config("train", 1, dir.path(), &format!("{PROBLEM}\n[train]\neval_particles = 200\n")));
    let out = run(&cfg).unwrap();
    let history = std::fs::read_to_string(out.dir.join("history.ndjson")).unwrap();
    assert_eq!(history.lines().count(), 4);
    for line in history.lines() {
        let _: IterationRecord = serde_json::from_str(line).unwrap();
    }
    let field: RbfField = serde_json::from_str(&std::fs::read_to_string(out.dir.join("field.json")).unwrap()).unwrap();
    assert_eq!(field.knot_times().len(), 5);
    let rates = csv::Reader::from_path(out.dir.join("rates.csv")).unwrap().records().count();
    assert_eq!(rates, 5);
    let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(out.dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest.status, "ok");
    for f in &manifest.files {
        assert!(out.dir.join(f).exists(), "{f}");
    }
    let reloaded = ExperimentConfig::from_json(&std::fs::read_to_string(out.dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(reloaded, cfg);
}

#[test]
fn inverted_budget_bounds_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{PROBLEM}lambda_bounds = [5.0, 1.0]\n\n[train]\neval_particles = 100\n");
    let err = run(&parse(&config("train", 1, dir.path(), &body))).unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
}

#[test]
fn collapse_files_follow_the_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&parse(&config("collapse", 5, dir.path(), &collapse_body(4)))).unwrap();
    for n in 0..4 {
        assert!(out.dir.join(format!("collapse_{n}.csv")).exists());
    }
    let summary: Vec<CollapseSummary> = serde_json::from_str(&std::fs::read_to_string(out.dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary.windows(2).all(|w| w[1].lambda_eff_max > w[0].lambda_eff_max));

    let single = run(&parse(&config("collapse", 5, dir.path(), &collapse_body(1)))).unwrap();
    let csvs = std::fs::read_dir(&single.dir).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("collapse_")).count();
    assert_eq!(csvs, 1);
}

#[test]
fn runs_are_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run(&parse(&config("collapse", 9, a.path(), &collapse_body(2)))).unwrap();
    let rb = run(&parse(&config("collapse", 9, b.path(), &collapse_body(2)))).unwrap();
    assert_eq!(ra.manifest.run_id, rb.manifest.run_id);
    for f in ra.manifest.files.iter().filter(|f| *f != "run.json" && *f != "config.json") {
        assert_eq!(std::fs::read(ra.dir.join(f)).unwrap(), std::fs::read(rb.dir.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn stationary_geodesic_stays_put() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"
[geodesic]
mu0 = { components = [{ w = 1.0, mean = [0.5], cov = [[0.5]] }] }
muT = { components = [{ w = 1.0, mean = [0.5], cov = [[0.5]] }] }
lo = -6.0
hi = 6.0
cells = 128
eps = 0.1
horizon = 1.0
tol = 1e-10
max_iter = 5000
times = [0.0, 0.5, 1.0]
halving = false
"#;
    let out = run(&parse(&config("geodesic", 2, dir.path(), body))).unwrap();
    let mut rd = csv::Reader::from_path(out.dir.join("bb.csv")).unwrap();
    for rec in rd.records() {
        let rec = rec.unwrap();
        let (m, v): (f64, f64) = (rec[1].parse().unwrap(), rec[2].parse().unwrap());
        assert!((m - 0.5).abs() < 1e-12 && (v - 0.5).abs() < 1e-12, "{rec:?}");
    }
}

#[test]
fn certify_with_fixed_budget_reports() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "{PROBLEM}\n[certify]\nmodel = \"tiny\"\nalpha = 0.05\ndelta_safe = 0.1\nlambda = 1e3\neval_particles = 300\n\
         modes = [{{ kind = \"axis-box\", lo = [-8.0], hi = [8.0] }}]\ncore_thresholds = [0.5]\nfine_factor = 4\ndelta_tot_max = 0.0\n"
    );
    let out = run(&parse(&config("certify", 4, dir.path(), &body))).unwrap();
    let report = CertificateReport::from_json(&std::fs::read_to_string(out.dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.verdict.as_str(), "feasible");
    assert!(std::fs::read_to_string(out.dir.join("report.md")).unwrap().contains("| tiny |"));
}

fn bin() -> Process {
    Process::new(env!("CARGO_BIN_EXE_ecfm"))
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    };
    let good = write("c.toml", &config("collapse", 1, &dir.path().join("runs"), &collapse_body(1)));
    let ok = bin().args(["collapse", "--config"]).arg(&good).output().unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(Path::new(String::from_utf8(ok.stdout).unwrap().trim()).join("run.json").exists());

    let wrong = bin().args(["train", "--config"]).arg(&good).output().unwrap();
    assert_eq!(wrong.status.code(), Some(1));
    let malformed = write("m.toml", "version = \"ecfm-config-v1\"\ncommand = \n");
    let out = bin().args(["collapse", "--config"]).arg(&malformed).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    let missing = bin().args(["collapse", "--config"]).arg(dir.path().join("nope.toml")).output().unwrap();
    assert_eq!(missing.status.code(), Some(3));
    let threads = bin().env("ECFM_THREADS", "many").args(["collapse", "--config"]).arg(&good).output().unwrap();
    assert_eq!(threads.status.code(), Some(1));

    let geo = r#"
[geodesic]
mu0 = { components = [{ w = 1.0, mean = [-1.0], cov = [[0.25]] }] }
muT = { components = [{ w = 1.0, mean = [1.0], cov = [[0.25]] }] }
lo = -6.0
hi = 6.0
cells = 64
eps = 0.1
horizon = 1.0
tol = 1e-14
max_iter = 1
times = [0.5]
halving = false
"#;
    let abort = write("g.toml", &config("geodesic", 1, &dir.path().join("runs"), geo));
    let out = bin().args(["geodesic", "--config"]).arg(&abort).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for e in std::fs::read_dir(&root).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            let cfg = ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            assert!(matches!(
                cfg.command,
                Command::Train | Command::Entropy | Command::Collapse | Command::Geodesic | Command::Gamma | Command::Identity | Command::Certify | Command::Stability
            ));
            seen += 1;
        }
    }
    assert!(seen >= 8);
}
