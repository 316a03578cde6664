use std::path::{Path, PathBuf};

use ecfm::certify::PerturbationAxis;
use ecfm::collapse_lab::{CollapseParams, CollapseRunConfig};
use ecfm::measures::{GaussianMixture, ModeSet};
use ecfm::trainer::{TrainProblem, TrainerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CONFIG_VERSION: &str = "ecfm-config-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Train,
    Entropy,
    Collapse,
    Geodesic,
    Gamma,
    Identity,
    Certify,
    Stability,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Entropy => "entropy",
            Command::Collapse => "collapse",
            Command::Geodesic => "geodesic",
            Command::Gamma => "gamma",
            Command::Identity => "identity",
            Command::Certify => "certify",
            Command::Stability => "stability",
        }
    }
}

/// One experiment: a version stamp, the subcommand it is meant for, the
/// master seed, the output root and the blocks that subcommand reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: String,
    pub command: Command,
    pub seed: u64,
    pub outdir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<TrainProblem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer: Option<TrainerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<EntropyBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collapse: Option<CollapseBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geodesic: Option<GeodesicBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<GammaBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<IdentityBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certify: Option<CertifyBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability: Option<StabilityBlock>,
}

fn inf() -> f64 {
    f64::INFINITY
}

/// Uniform budget and evaluation settings for `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBlock {
    /// Uniform budget; `"inf"` trains unconstrained. Overrides `trainer.budgets`
    /// when given.
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_nonfinite")]
    pub lambda: Option<f64>,
    pub eval_particles: usize,
}

/// Law path whose entropy rate is checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FlowSpec {
    /// Pure diffusion with diffusivity `eps` from `initial`.
    Heat { initial: GaussianMixture, eps: f64 },
    /// Deterministic flow `x' = A x + b` from `initial`.
    Affine { initial: GaussianMixture, a: Vec<f64>, b: Vec<f64> },
}

impl FlowSpec {
    pub fn initial(&self) -> &GaussianMixture {
        match self {
            FlowSpec::Heat { initial, .. } | FlowSpec::Affine { initial, .. } => initial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyBlock {
    pub flow: FlowSpec,
    pub horizon: f64,
    pub steps: usize,
    pub substeps: usize,
    pub particles: usize,
    pub alpha: f64,
    /// Neighbour index of the k-NN entropy estimator.
    pub k: usize,
}

/// `eps_n = eps0 ratio^n`, `tau_n = tau0 ratio^n` for `n = 1..=terms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub eps0: f64,
    pub tau0: f64,
    pub ratio: f64,
    pub terms: usize,
    pub a: f64,
    pub sigma: f64,
}

impl SequenceSpec {
    pub fn params(&self) -> ecfm::Result<Vec<CollapseParams>> {
        (1..=self.terms as i32)
            .map(|n| {
                let s = self.ratio.powi(n);
                CollapseParams::new(self.eps0 * s, self.tau0 * s, self.a, self.sigma)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollapseBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<SequenceSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub terms: Vec<CollapseParams>,
    pub run: CollapseRunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeodesicBlock {
    pub mu0: GaussianMixture,
    #[serde(rename = "muT")]
    pub mu_t: GaussianMixture,
    pub lo: f64,
    pub hi: f64,
    pub cells: usize,
    pub eps: f64,
    pub horizon: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Times in `[0, horizon]` at which bridge marginals are written.
    pub times: Vec<f64>,
    /// Re-solve on a grid with twice the cells and compare the mid marginal.
    pub halving: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaBlock {
    #[serde(with = "ecfm::stats::nonfinite")]
    pub lambdas: Vec<f64>,
    pub seeds: usize,
    pub eval_particles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityBlock {
    pub flow: FlowSpec,
    /// Reference diffusivity in the identity.
    pub eps: f64,
    pub horizon: f64,
    pub steps: usize,
    pub substeps: usize,
    pub particles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: PerturbationAxis,
    pub magnitudes: Vec<f64>,
    pub seeds: usize,
    pub eval_particles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyBlock {
    pub model: String,
    pub alpha: f64,
    pub delta_safe: f64,
    /// Fixed budget; when absent a pilot unconstrained run selects
    /// `lambda* = lambda_eff^LCB + delta_safe`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub eval_particles: usize,
    #[serde(default)]
    pub modes: Vec<ModeSet>,
    #[serde(default)]
    pub cores: Vec<ModeSet>,
    #[serde(default)]
    pub core_thresholds: Vec<f64>,
    #[serde(default)]
    pub probes: Vec<ProbeSpec>,
    /// Grid-adequacy tolerance; skipped when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_h: Option<f64>,
    pub fine_factor: usize,
    #[serde(default)]
    pub sweeps: Vec<SweepSpec>,
    pub delta_tot_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityBlock {
    pub sweep: SweepSpec,
    /// Budget of the base field trained for replay axes.
    #[serde(default = "inf", with = "ecfm::stats::nonfinite::scalar")]
    pub lambda: f64,
}

mod opt_nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    struct Wrap(#[serde(with = "ecfm::stats::nonfinite::scalar")] f64);

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => ecfm::stats::nonfinite::scalar::serialize(x, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when the path ends in `.json`. Parse errors keep
    /// the parser's line and column.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg = if json { Self::from_json(&text) } else { Self::from_toml(&text) };
        cfg.map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))?;
        cfg.check_version()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.check_version()?;
        Ok(cfg)
    }

    fn check_version(&self) -> Result<(), CliError> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!("unsupported config version {:?}, expected {CONFIG_VERSION:?}", self.version)));
        }
        Ok(())
    }

    /// Canonical JSON form.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hash of the canonical config without `outdir`, then the seed, so a
    /// run keeps its id wherever it is written.
    pub fn sha256(&self) -> String {
        let keyed = Self { outdir: PathBuf::new(), ..self.clone() };
        let mut h = Sha256::new();
        h.update(keyed.canonical_json().as_bytes());
        h.update(self.seed.to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// First 12 hex digits of [`Self::sha256`].
    pub fn run_id(&self) -> String {
        self.sha256()[..12].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.outdir.join(self.command.as_str()).join(self.run_id())
    }

    pub(crate) fn block<'a, T>(&self, b: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
        b.as_ref().ok_or_else(|| CliError::Config(format!("`{}` needs a [{name}] block", self.command.as_str())))
    }
}
