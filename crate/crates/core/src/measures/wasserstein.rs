use super::ParticleEnsemble;
use crate::{Error, Result};

/// Largest equal-size ensemble accepted by the assignment path (d > 1).
pub const MAX_ASSIGNMENT_N: usize = 2000;

/// Quadratic Wasserstein distance between two ensembles.
///
/// In 1D this is the exact weighted quantile coupling. For `2 <= d <= 3` the
/// ensembles must be equal-weight with equal `n <= 2000`, and the optimal
/// assignment is solved exactly.
pub fn w2(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<f64> {
    w2_squared(a, b).map(|v| v.max(0.0).sqrt())
}

pub fn w2_squared(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension { expected: a.dim(), got: b.dim() });
    }
    match a.dim() {
        1 => Ok(quantile_w2_squared(a.points(), a.weights(), b.points(), b.weights())),
        2 | 3 => {
            if a.n() != b.n() || !a.is_equal_weight() || !b.is_equal_weight() {
                return Err(Error::invalid("W2 in d > 1 needs equal-weight ensembles of equal size"));
            }
            if a.n() > MAX_ASSIGNMENT_N {
                return Err(Error::invalid(format!("W2 in d > 1 supports n <= {MAX_ASSIGNMENT_N}, got {}", a.n())));
            }
            let n = a.n();
            let cost: Vec<f64> = (0..n * n)
                .map(|ij| {
                    let (i, j) = (ij / n, ij % n);
                    a.point(i).iter().zip(b.point(j)).map(|(x, y)| (x - y) * (x - y)).sum()
                })
                .collect();
            let assign = hungarian(&cost, n);
            Ok(assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64)
        }
        d => Err(Error::invalid(format!("W2 is only supported for d <= 3, got d = {d}"))),
    }
}

fn sorted_pairs(x: &[f64], w: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = x.iter().copied().zip(w.iter().copied()).collect();
    v.sort_by(|p, q| p.0.total_cmp(&q.0));
    v
}

/// Squared W2 between two weighted 1D samples via the monotone coupling.
pub(crate) fn quantile_w2_squared(xa: &[f64], wa: &[f64], xb: &[f64], wb: &[f64]) -> f64 {
    let a = sorted_pairs(xa, wa);
    let b = sorted_pairs(xb, wb);
    if a.len() == b.len() && wa.iter().chain(wb).all(|&w| w == wa[0]) {
        let s: f64 = a.iter().zip(&b).map(|(p, q)| (p.0 - q.0) * (p.0 - q.0)).sum();
        return s / a.len() as f64;
    }
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let m = ra.min(rb);
        total += m * (a[i].0 - b[j].0).powi(2);
        ra -= m;
        rb -= m;
        if ra <= 0.0 {
            i += 1;
            if i < a.len() {
                ra = a[i].1;
            }
        }
        if rb <= 0.0 {
            j += 1;
            if j < b.len() {
                rb = b[j].1;
            }
        }
    }
    total
}

/// Minimum-cost perfect assignment on a dense `n × n` cost matrix
/// (shortest augmenting paths with potentials, O(n³)). Returns the column
/// assigned to each row.
pub(crate) fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}
