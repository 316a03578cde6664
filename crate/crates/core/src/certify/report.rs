use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{select_budget, DensityProxy, FloorCertificate, GridAdequacy, StabilitySweep};
use crate::entropy_control::{lambda_eff, EntropyRateSeries, RateMethod};
use crate::{Error, Result};

pub const REPORT_SCHEMA: &str = "ecfm-certificate-v1";

/// Serializes as the string `"not-measured"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NotMeasured {
    #[serde(rename = "not-measured")]
    Marker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Measured<T> {
    Value(T),
    Missing(NotMeasured),
}

impl<T> Measured<T> {
    pub fn missing() -> Self {
        Measured::Missing(NotMeasured::Marker)
    }
    pub fn value(&self) -> Option<&T> {
        match self {
            Measured::Value(v) => Some(v),
            Measured::Missing(_) => None,
        }
    }
    pub fn is_measured(&self) -> bool {
        matches!(self, Measured::Value(_))
    }
}

impl<T> From<Option<T>> for Measured<T> {
    fn from(o: Option<T>) -> Self {
        o.map_or_else(Measured::missing, Measured::Value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Feasible,
    Infeasible,
    Incomplete,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Feasible => "feasible",
            Verdict::Infeasible => "infeasible",
            Verdict::Incomplete => "incomplete",
        }
    }
}

/// Everything a report can draw on; absent components become
/// `"not-measured"` entries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportInputs {
    pub model: String,
    pub alpha: f64,
    pub delta_safe: f64,
    /// Configured budget; selected from `rates` when absent.
    pub lambda_star: Option<f64>,
    pub rates: Option<EntropyRateSeries>,
    pub floors: Option<FloorCertificate>,
    /// Required core floors `beta_k`, one per certified core (may be empty).
    pub core_thresholds: Vec<f64>,
    pub density: Option<Vec<DensityProxy>>,
    pub stability: Vec<StabilitySweep>,
    /// Total perturbation envelope used for deployment floors.
    pub delta_tot_max: f64,
    pub grid: Option<GridAdequacy>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub schema: String,
    pub model: String,
    /// Number of grid steps `N`.
    pub n_steps: Measured<usize>,
    pub alpha: f64,
    pub lambda_star: Measured<f64>,
    pub lambda_eff_lcb: Measured<f64>,
    pub lambda_eff_max: Measured<f64>,
    /// `min_n` certified floor per mode.
    pub mode_floors: Measured<Vec<f64>>,
    /// `min_n` certified floor per core (mode floors when no cores were given).
    pub core_floors: Measured<Vec<f64>>,
    pub min_core_floor: Measured<f64>,
    pub core_thresholds: Vec<f64>,
    pub density_floors: Measured<Vec<DensityProxy>>,
    /// Slopes fitted on sweeps, labelled as such.
    pub stability_kind: String,
    pub stability_w: Measured<f64>,
    pub stability_m: Measured<f64>,
    pub delta_tot_max: f64,
    /// `m_k^cert - Ĉ_M Δ_tot^max`.
    pub deployment_floors: Measured<Vec<f64>>,
    pub robust_floor: Measured<f64>,
    pub verdict: Verdict,
    /// Particles per grid time.
    pub batch_sizes: Measured<Vec<usize>>,
    /// Hutchinson probes per grid time (0 for exact divergence).
    pub probes: Measured<Vec<usize>>,
    pub grid: Measured<GridAdequacy>,
    pub advice: Vec<String>,
    pub caveats: Vec<String>,
    pub not_measured: Vec<String>,
    pub seeds: Vec<u64>,
}

/// Builds the report and its verdict: feasible iff `lambda_eff^LCB ≤ lambda*`
/// and every certified core floor reaches its threshold.
pub fn assemble_report(inputs: &ReportInputs) -> Result<CertificateReport> {
    if !(inputs.alpha > 0.0 && inputs.alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {}", inputs.alpha)));
    }
    if !(inputs.delta_tot_max >= 0.0) {
        return Err(Error::invalid("delta_tot_max must be >= 0"));
    }
    let mut not_measured = Vec::new();
    let mut advice = Vec::new();
    let mut caveats = vec!["rate confidence bounds assume sub-Gaussian estimator errors; not verified for the series used".to_string()];

    let budget = inputs.rates.as_ref().map(|s| lambda_eff(s, inputs.alpha)).transpose()?;
    let lambda_star = match (inputs.lambda_star, &inputs.rates) {
        (Some(l), _) => Some(l),
        (None, Some(s)) => Some(select_budget(s, inputs.alpha, inputs.delta_safe)?),
        (None, None) => None,
    };
    if inputs.rates.is_none() {
        not_measured.push("entropy-rate series".to_string());
    }
    if let Some(s) = &inputs.rates {
        if s.estimates.iter().any(|e| e.method == RateMethod::FiniteDifference) {
            caveats.push("k-NN finite-difference rates carry no sub-Gaussian guarantee".to_string());
        }
    }

    let cores: Option<Vec<f64>> = inputs.floors.as_ref().map(|f| f.certified_cores().to_vec());
    if let Some(c) = &cores {
        if !inputs.core_thresholds.is_empty() && inputs.core_thresholds.len() != c.len() {
            return Err(Error::invalid(format!("{} core thresholds for {} certified cores", inputs.core_thresholds.len(), c.len())));
        }
    } else {
        not_measured.push("modal floors".to_string());
    }
    if inputs.density.is_none() {
        not_measured.push("density proxies".to_string());
    }

    let c_w = inputs.stability.iter().map(|s| s.fit.slope).reduce(f64::max);
    let c_m = inputs.stability.iter().filter_map(|s| s.mass_fit.map(|f| f.slope)).reduce(f64::max);
    if c_w.is_none() {
        not_measured.push("trajectory stability slope".to_string());
    }
    if c_m.is_none() {
        not_measured.push("mass stability slope".to_string());
    }
    let deployment: Option<Vec<f64>> = match (&cores, c_m) {
        (Some(c), Some(cm)) => Some(c.iter().map(|m| m - cm.max(0.0) * inputs.delta_tot_max).collect()),
        (Some(c), None) if inputs.delta_tot_max == 0.0 => Some(c.clone()),
        _ => None,
    };
    let min_of = |v: &Vec<f64>| v.iter().copied().fold(f64::INFINITY, f64::min);

    if let Some(g) = &inputs.grid {
        for n in &g.refine {
            advice.push(format!("refine grid interval {n}"));
        }
        if !g.adequate {
            advice.push(format!("max step {} exceeds eps_H / L_H = {}", g.max_step, g.threshold));
        }
    } else {
        not_measured.push("grid adequacy".to_string());
    }

    let verdict = match (budget, lambda_star, &cores) {
        (Some(b), Some(ls), cores) => {
            let floors_ok = match cores {
                Some(c) => c.iter().zip(&inputs.core_thresholds).all(|(m, beta)| m >= beta),
                None => inputs.core_thresholds.is_empty(),
            };
            if inputs.core_thresholds.len() > 0 && cores.is_none() {
                Verdict::Incomplete
            } else if b.lambda_lcb <= ls && floors_ok {
                Verdict::Feasible
            } else {
                Verdict::Infeasible
            }
        }
        _ => Verdict::Incomplete,
    };
    if let (Some(b), Some(ls)) = (budget, lambda_star) {
        if b.lambda_lcb > ls {
            advice.push(format!("effective budget {} exceeds lambda* = {ls}", b.lambda_lcb));
        }
    }

    Ok(CertificateReport {
        schema: REPORT_SCHEMA.to_string(),
        model: inputs.model.clone(),
        n_steps: inputs.rates.as_ref().map(|s| s.grid.steps()).into(),
        alpha: inputs.alpha,
        lambda_star: lambda_star.into(),
        lambda_eff_lcb: budget.map(|b| b.lambda_lcb).into(),
        lambda_eff_max: budget.map(|b| b.lambda_max).into(),
        mode_floors: inputs.floors.as_ref().map(|f| f.mode_min.clone()).into(),
        min_core_floor: cores.as_ref().map(min_of).into(),
        core_floors: cores.into(),
        core_thresholds: inputs.core_thresholds.clone(),
        density_floors: inputs.density.clone().into(),
        stability_kind: "empirical".to_string(),
        stability_w: c_w.into(),
        stability_m: c_m.into(),
        delta_tot_max: inputs.delta_tot_max,
        robust_floor: deployment.as_ref().map(min_of).into(),
        deployment_floors: deployment.into(),
        verdict,
        batch_sizes: inputs.floors.as_ref().map(|f| f.batch.clone()).into(),
        probes: inputs.rates.as_ref().map(|s| s.estimates.iter().map(|e| e.probes).collect()).into(),
        grid: inputs.grid.clone().into(),
        advice,
        caveats,
        not_measured,
        seeds: inputs.seeds.clone(),
    })
}

fn cell(v: &Measured<f64>) -> String {
    v.value().map_or("not-measured".to_string(), |x| format!("{x:.4}"))
}

impl CertificateReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Summary table plus estimator settings and notes.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| Model | λ* | λ̂_eff^LCB | min_k m_k^cert | Feasible? | Ĉ_W (empirical) | Robust floor |");
        let _ = writeln!(out, "|---|---|---|---|---|---|---|");
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            self.model,
            cell(&self.lambda_star),
            cell(&self.lambda_eff_lcb),
            cell(&self.min_core_floor),
            self.verdict.as_str(),
            cell(&self.stability_w),
            cell(&self.robust_floor),
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "- alpha: {}", self.alpha);
        if let Some(n) = self.n_steps.value() {
            let _ = writeln!(out, "- grid steps N: {n}");
        }
        if let Some(b) = self.batch_sizes.value() {
            let (lo, hi) = (b.iter().min().copied().unwrap_or(0), b.iter().max().copied().unwrap_or(0));
            let _ = writeln!(out, "- particles per time B_n: {lo}..{hi}");
        }
        if let Some(r) = self.probes.value() {
            let _ = writeln!(out, "- probes per time R_n: {}", r.iter().max().copied().unwrap_or(0));
        }
        let _ = writeln!(out, "- Ĉ_M (empirical): {}, Δ_tot^max: {}", cell(&self.stability_m), self.delta_tot_max);
        if let Some(g) = self.grid.value() {
            let verdict = if g.adequate { "adequate" } else { "inadequate" };
            let _ = writeln!(out, "- time grid: {verdict} (L_H = {:.4}, max step {:.4})", g.lipschitz, g.max_step);
        }
        if let Some(d) = self.density_floors.value() {
            for p in d {
                let _ = writeln!(out, "- density proxy at {:?} (r = {}): {:.4}", p.center, p.radius, p.proxy);
            }
        }
        for a in &self.advice {
            let _ = writeln!(out, "- advice: {a}");
        }
        for c in &self.caveats {
            let _ = writeln!(out, "- caveat: {c}");
        }
        for m in &self.not_measured {
            let _ = writeln!(out, "- not measured: {m}");
        }
        out
    }
}
