use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

/// Weighted sample cloud representing a measure at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    points: Vec<f64>,
    dim: usize,
    weights: Vec<f64>,
    time: f64,
    seed: u64,
}

impl ParticleEnsemble {
    /// `points` is row-major `n × dim`.
    pub fn new(points: Vec<f64>, dim: usize, weights: Vec<f64>, time: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("ensemble dimension must be >= 1"));
        }
        if points.len() % dim != 0 {
            return Err(Error::invalid(format!("{} coordinates do not split into rows of {dim}", points.len())));
        }
        let n = points.len() / dim;
        if n < 2 {
            return Err(Error::invalid("ensemble needs at least 2 points"));
        }
        if weights.len() != n {
            return Err(Error::Dimension { expected: n, got: weights.len() });
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { particle: i / dim, time });
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("ensemble weights must be finite and >= 0"));
        }
        let total = crate::stats::neumaier_sum(weights.iter().copied());
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("ensemble weights sum to {total}, expected 1")));
        }
        Ok(Self { points, dim, weights, time, seed })
    }

    pub fn equal_weight(points: Vec<f64>, dim: usize, time: f64, seed: u64) -> Result<Self> {
        let n = if dim == 0 { 0 } else { points.len() / dim };
        let w = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        Self::new(points, dim, vec![w; n], time, seed)
    }

    pub fn n(&self) -> usize {
        self.weights.len()
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn points(&self) -> &[f64] {
        &self.points
    }
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
    pub fn iter_points(&self) -> std::slice::ChunksExact<'_, f64> {
        self.points.chunks_exact(self.dim)
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn time(&self) -> f64 {
        self.time
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_equal_weight(&self) -> bool {
        let w0 = self.weights[0];
        self.weights.iter().all(|&w| w == w0)
    }

    /// Same particles relabelled to time `t`.
    pub fn with_time(mut self, t: f64) -> Self {
        self.time = t;
        self
    }

    /// New ensemble with the same weights, time and seed but new positions.
    pub fn with_points(&self, points: Vec<f64>) -> Result<Self> {
        if points.len() != self.points.len() {
            return Err(Error::Dimension { expected: self.points.len(), got: points.len() });
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { particle: i / self.dim, time: self.time });
        }
        Ok(Self { points, dim: self.dim, weights: self.weights.clone(), time: self.time, seed: self.seed })
    }

    /// Apply `f` to every point.
    pub fn map_points(&self, mut f: impl FnMut(&[f64], &mut [f64])) -> Result<Self> {
        let mut out = vec![0.0; self.points.len()];
        for (x, y) in self.points.chunks_exact(self.dim).zip(out.chunks_exact_mut(self.dim)) {
            f(x, y);
        }
        self.with_points(out)
    }

    /// Weighted mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (x, w) in self.iter_points().zip(&self.weights) {
            for (mi, xi) in m.iter_mut().zip(x) {
                *mi += w * xi;
            }
        }
        m
    }

    /// Weighted second moment `E |x|^2`.
    pub fn second_moment(&self) -> f64 {
        self.iter_points().zip(&self.weights).map(|(x, w)| w * x.iter().map(|v| v * v).sum::<f64>()).sum()
    }

    /// Writes one row per point with a trailing weight column.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim).map(|i| format!("x{i}")).collect();
        header.push("weight".into());
        wr.write_record(&header)?;
        let mut row: Vec<String> = Vec::with_capacity(self.dim + 1);
        for (x, wt) in self.iter_points().zip(&self.weights) {
            row.clear();
            row.extend(x.iter().map(|v| format_f64(*v)));
            row.push(format_f64(*wt));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Reads the CSV layout of [`write_csv`](Self::write_csv).
    pub fn read_csv<R: std::io::Read>(r: R, time: f64, seed: u64) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let cols = rd.headers()?.len();
        if cols < 2 {
            return Err(Error::invalid("ensemble CSV needs at least one coordinate and a weight column"));
        }
        let dim = cols - 1;
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| Error::invalid(format!("bad number {field:?} in ensemble CSV")))?;
                if j < dim {
                    points.push(v);
                } else {
                    weights.push(v);
                }
            }
        }
        Self::new(points, dim, weights, time, seed)
    }

    pub fn load_csv(path: impl AsRef<Path>, time: f64, seed: u64) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, time, seed)
    }
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:?}")
}
