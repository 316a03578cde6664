use serde::{Deserialize, Serialize};

use crate::measures::TimeGrid;
use crate::{Error, Result};

/// Primal update rule; both use the step schedule `alpha_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

/// RBF family: a regular grid of centers on `[lo, hi]^d`, knots at the
/// training grid times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RbfSpec {
    pub centers_per_axis: usize,
    pub lo: f64,
    pub hi: f64,
    /// Defaults to 1.5 center spacings.
    #[serde(default)]
    pub bandwidth: Option<f64>,
}

impl Default for RbfSpec {
    fn default() -> Self {
        Self { centers_per_axis: 12, lo: -5.0, hi: 5.0, bandwidth: None }
    }
}

impl RbfSpec {
    pub fn centers(&self, dim: usize) -> Vec<f64> {
        let m = self.centers_per_axis;
        let axis: Vec<f64> = (0..m).map(|i| self.lo + (self.hi - self.lo) * i as f64 / (m - 1) as f64).collect();
        let total = m.pow(dim as u32);
        let mut out = Vec::with_capacity(total * dim);
        for c in 0..total {
            let mut rest = c;
            for _ in 0..dim {
                out.push(axis[rest % m]);
                rest /= m;
            }
        }
        out
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth.unwrap_or(1.5 * (self.hi - self.lo) / (self.centers_per_axis - 1) as f64)
    }

    fn validate(&self) -> Result<()> {
        if self.centers_per_axis < 2 || !(self.hi > self.lo) {
            return Err(Error::invalid("RBF spec needs >= 2 centers per axis and hi > lo"));
        }
        if let Some(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::invalid("RBF bandwidth must be finite and > 0"));
            }
        }
        Ok(())
    }
}

/// Step schedule `a0 / (1 + k / b)`.
pub fn schedule(a0: f64, b: f64, k: usize) -> f64 {
    a0 / (1.0 + k as f64 / b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub grid: TimeGrid,
    /// Entropy-rate budgets `lambda_n`, one per grid time; `"inf"` removes the
    /// constraint at that time.
    #[serde(with = "crate::stats::nonfinite")]
    pub budgets: Vec<f64>,
    /// Augmented-Lagrangian penalty.
    pub rho: f64,
    /// Primal steps `alpha_k = alpha0 / (1 + k/50)`.
    pub alpha0: f64,
    /// Dual steps `beta_k = beta0 / (1 + k/200)`.
    pub beta0: f64,
    /// Scheduler steps `zeta_k = zeta0 / (1 + k/1000)`; 0 keeps budgets fixed.
    pub zeta0: f64,
    /// Scheduler margins `gamma_n`; empty means all zero.
    pub margins: Vec<f64>,
    pub lambda_bounds: [f64; 2],
    pub batch: usize,
    /// Use lower-confidence-bound residuals `-LCB_n - lambda_n`.
    pub robust: bool,
    /// Confidence level of the LCB.
    pub alpha: f64,
    pub outer_iters: usize,
    pub substeps: usize,
    /// Weight of the endpoint fit `(kappa/2) E|X_T - Y|²`.
    pub kappa: f64,
    /// Recompute residuals on a fresh minibatch before the dual step.
    pub fresh_recompute: bool,
    /// Hutchinson probes for residual estimates; `None` uses the exact divergence.
    pub hutchinson_probes: Option<usize>,
    pub optimizer: Optimizer,
    pub field: RbfSpec,
    /// Floors `beta_k` for the configured mode sets.
    pub mode_floors: Vec<f64>,
    /// Logistic smoothing scale of mode-set indicators in the gradient.
    pub mode_temperature: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let grid = TimeGrid::uniform(1.0, 10).expect("valid default grid");
        let n = grid.len();
        Self {
            grid,
            budgets: vec![f64::INFINITY; n],
            rho: 10.0,
            alpha0: 0.05,
            beta0: 1.0,
            zeta0: 0.0,
            margins: Vec::new(),
            lambda_bounds: [0.0, 1e3],
            batch: 1000,
            robust: true,
            alpha: 0.05,
            outer_iters: 200,
            substeps: 4,
            kappa: 100.0,
            fresh_recompute: true,
            hutchinson_probes: None,
            optimizer: Optimizer::Adam,
            field: RbfSpec::default(),
            mode_floors: Vec::new(),
            mode_temperature: 0.05,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    /// The same budget at every grid time.
    pub fn with_budget(mut self, lambda: f64) -> Self {
        self.budgets = vec![lambda; self.grid.len()];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.len();
        if self.budgets.len() != n {
            return Err(Error::invalid(format!("{} budgets for {n} grid times", self.budgets.len())));
        }
        if self.budgets.iter().any(|l| l.is_nan() || *l < 0.0) {
            return Err(Error::invalid("budgets must be >= 0 (or inf)"));
        }
        if !(self.rho > 0.0) || !(self.alpha0 > 0.0) || !(self.beta0 > 0.0) || self.zeta0 < 0.0 || !self.kappa.is_finite() || self.kappa < 0.0 {
            return Err(Error::invalid("trainer needs rho, alpha0, beta0 > 0 and zeta0, kappa >= 0"));
        }
        if !self.margins.is_empty() && self.margins.len() != n {
            return Err(Error::invalid("margins must be empty or one per grid time"));
        }
        let [lo, hi] = self.lambda_bounds;
        if !(lo >= 0.0 && lo <= hi) {
            return Err(Error::invalid(format!("lambda bounds [{lo}, {hi}] are not an interval in [0, inf)")));
        }
        if self.batch < 8 || self.outer_iters == 0 || self.substeps == 0 {
            return Err(Error::invalid("trainer needs batch >= 8, outer_iters >= 1 and substeps >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("confidence alpha must lie in (0, 1)"));
        }
        if self.hutchinson_probes == Some(0) {
            return Err(Error::invalid("Hutchinson needs at least one probe"));
        }
        if self.mode_floors.iter().any(|b| !(0.0..=1.0).contains(b)) || !(self.mode_temperature > 0.0) {
            return Err(Error::invalid("mode floors must lie in [0, 1] and the temperature be > 0"));
        }
        self.field.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budgets_round_trip_with_inf() {
        let mut c = TrainerConfig::default();
        c.budgets[3] = 2.5;
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"inf\""));
        let back: TrainerConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn default_validates() {
        TrainerConfig::default().validate().unwrap();
        let bad = TrainerConfig { lambda_bounds: [2.0, 1.0], ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn product_centers() {
        let s = RbfSpec { centers_per_axis: 3, lo: -1.0, hi: 1.0, bandwidth: None };
        assert_eq!(s.centers(1), vec![-1.0, 0.0, 1.0]);
        assert_eq!(s.centers(2).len(), 18);
        assert!((s.bandwidth() - 1.5).abs() < 1e-15);
    }
}
