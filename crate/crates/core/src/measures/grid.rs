use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Strictly increasing times `0 = t_0 < … < t_N = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    times: Vec<f64>,
    max_step: f64,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::invalid("time grid needs at least two times"));
        }
        if times[0] != 0.0 {
            return Err(Error::invalid(format!("time grid must start at 0, got {}", times[0])));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("time grid has non-finite entries"));
        }
        let mut max_step = 0.0f64;
        for w in times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::invalid(format!("time grid not strictly increasing at {} -> {}", w[0], w[1])));
            }
            max_step = max_step.max(w[1] - w[0]);
        }
        Ok(Self { times, max_step })
    }

    /// `N + 1` equally spaced times on `[0, horizon]`; the last equals `horizon` exactly.
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || n_steps == 0 {
            return Err(Error::invalid("uniform grid needs horizon > 0 and at least one step"));
        }
        let mut times: Vec<f64> = (0..=n_steps).map(|i| horizon * i as f64 / n_steps as f64).collect();
        times[n_steps] = horizon;
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
    pub fn len(&self) -> usize {
        self.times.len()
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }
    pub fn max_step(&self) -> f64 {
        self.max_step
    }
    /// Number of intervals `N`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn trapezoid_weights(&self) -> Vec<f64> {
        crate::stats::trapezoid_weights(&self.times)
    }

    /// Splits every interval into `factor` equal pieces.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("refinement factor must be >= 1"));
        }
        let mut out = Vec::with_capacity(self.steps() * factor + 1);
        for w in self.times.windows(2) {
            for j in 0..factor {
                out.push(w[0] + (w[1] - w[0]) * j as f64 / factor as f64);
            }
        }
        out.push(self.horizon());
        Self::new(out)
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(g: TimeGrid) -> Self {
        g.times
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid() {
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(g.horizon(), 1.0);
        assert!((g.max_step() - 0.1).abs() < 1e-15);
        assert_eq!(g.refine(4).unwrap().len(), 41);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(TimeGrid::new(vec![0.0]).is_err());
        assert!(TimeGrid::new(vec![0.1, 1.0]).is_err());
        assert!(TimeGrid::new(vec![0.0, 0.5, 0.5, 1.0]).is_err());
    }
}
