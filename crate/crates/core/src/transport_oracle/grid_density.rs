use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::measures::GaussianMixture;
use crate::{Error, Result};

pub const MIN_CELLS: usize = 16;

/// Cell masses on a uniform 1D grid `[lo, hi]` with `m` cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    lo: f64,
    hi: f64,
    masses: Vec<f64>,
}

impl GridDensity {
    pub fn new(lo: f64, hi: f64, masses: Vec<f64>) -> Result<Self> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid("grid needs finite lo < hi"));
        }
        if masses.len() < MIN_CELLS {
            return Err(Error::invalid(format!("grid needs at least {MIN_CELLS} cells, got {}", masses.len())));
        }
        if masses.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::invalid("grid masses must be finite and >= 0"));
        }
        let s = crate::stats::neumaier_sum(masses.iter().copied());
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("grid masses sum to {s}, expected 1")));
        }
        Ok(Self { lo, hi, masses })
    }

    /// Normalizes nonnegative weights onto the grid.
    pub fn from_unnormalized(lo: f64, hi: f64, w: Vec<f64>) -> Result<Self> {
        let s = crate::stats::neumaier_sum(w.iter().copied());
        if !(s > 0.0) {
            return Err(Error::invalid("cannot normalize a zero measure"));
        }
        Self::new(lo, hi, w.into_iter().map(|v| v / s).collect())
    }

    /// Cell masses of a 1D mixture from CDF differences, renormalized to the
    /// grid. Errors if the grid holds less than `1 - 1e-8` of the mass.
    pub fn from_mixture(mix: &GaussianMixture, lo: f64, hi: f64, m: usize) -> Result<Self> {
        if mix.dim() != 1 {
            return Err(Error::invalid("grid densities are one-dimensional"));
        }
        if m < MIN_CELLS {
            return Err(Error::invalid(format!("grid needs at least {MIN_CELLS} cells")));
        }
        let h = (hi - lo) / m as f64;
        let edges: Vec<f64> = (0..=m).map(|i| mix.cdf_1d(lo + i as f64 * h)).collect();
        let captured = edges[m] - edges[0];
        if captured < 1.0 - 1e-8 {
            return Err(Error::invalid(format!("grid [{lo}, {hi}] holds only {captured} of the mass")));
        }
        Self::from_unnormalized(lo, hi, edges.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect())
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }
    pub fn hi(&self) -> f64 {
        self.hi
    }
    pub fn cells(&self) -> usize {
        self.masses.len()
    }
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.masses.len() as f64
    }
    pub fn masses(&self) -> &[f64] {
        &self.masses
    }
    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.width()
    }
    pub fn centers(&self) -> Vec<f64> {
        (0..self.cells()).map(|i| self.center(i)).collect()
    }

    pub fn same_grid(&self, other: &GridDensity) -> bool {
        self.lo == other.lo && self.hi == other.hi && self.cells() == other.cells()
    }

    pub fn mean(&self) -> f64 {
        self.masses.iter().enumerate().map(|(i, p)| p * self.center(i)).sum()
    }

    /// Variance with Sheppard's correction for the cell width.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let raw: f64 = self.masses.iter().enumerate().map(|(i, p)| p * (self.center(i) - m).powi(2)).sum();
        raw - self.width().powi(2) / 12.0
    }

    pub fn l1(&self, other: &GridDensity) -> Result<f64> {
        if !self.same_grid(other) {
            return Err(Error::invalid("L1 distance needs identical grids"));
        }
        Ok(self.masses.iter().zip(&other.masses).map(|(a, b)| (a - b).abs()).sum())
    }

    /// Merges pairs of cells (grid with half the resolution).
    pub fn coarsen(&self) -> Result<GridDensity> {
        if self.cells() % 2 != 0 {
            return Err(Error::invalid("coarsening needs an even number of cells"));
        }
        Self::from_unnormalized(self.lo, self.hi, self.masses.chunks(2).map(|c| c[0] + c[1]).collect())
    }

    /// Columns `x, mass`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x", "mass"])?;
        for (i, p) in self.masses.iter().enumerate() {
            wr.write_record([format!("{:?}", self.center(i)), format!("{p:?}")])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_moments() {
        let g = GridDensity::from_mixture(&GaussianMixture::normal_1d(0.5, 0.25).unwrap(), -6.0, 6.0, 512).unwrap();
        assert!((g.mean() - 0.5).abs() < 1e-6);
        assert!((g.variance() - 0.25).abs() < 1e-5);
        assert!(GridDensity::from_mixture(&GaussianMixture::normal_1d(5.0, 1.0).unwrap(), -6.0, 6.0, 512).is_err());
        assert!(GridDensity::new(0.0, 1.0, vec![0.125; 8]).is_err());
    }
}
