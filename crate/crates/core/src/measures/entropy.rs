use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use super::ParticleEnsemble;
use crate::{Error, Result};

/// Settings for the Kozachenko–Leonenko estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyConfig {
    /// Neighbour rank.
    pub k: usize,
    /// Break exact ties with a tiny deterministic perturbation instead of failing.
    pub jitter: bool,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self { k: 5, jitter: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    /// Nats.
    pub value: f64,
    /// Standard error from the spread of the per-point log-distance terms.
    pub std_error: f64,
    pub k: usize,
    pub n: usize,
    pub jittered: bool,
}

/// Kozachenko–Leonenko estimate of `H = -∫ rho log rho`:
/// `psi(n) - psi(k) + log c_d + (d/n) Σ log eps_i`, with `c_d` the unit-ball
/// volume and `eps_i` the distance from point `i` to its `k`-th neighbour.
pub fn differential_entropy(ens: &ParticleEnsemble, cfg: EntropyConfig) -> Result<EntropyEstimate> {
    let (n, d, k) = (ens.n(), ens.dim(), cfg.k);
    if k == 0 {
        return Err(Error::invalid("k-NN entropy needs k >= 1"));
    }
    if n <= k + 1 {
        return Err(Error::invalid(format!("k-NN entropy needs n > k + 1 (n = {n}, k = {k})")));
    }
    if !ens.is_equal_weight() {
        return Err(Error::invalid("k-NN entropy rejects weighted ensembles"));
    }
    let mut dists = knn_distances(ens.points(), d, k);
    let mut jittered = false;
    if dists.iter().any(|&r| r == 0.0) {
        if !cfg.jitter {
            return Err(Error::DuplicatePoints);
        }
        let scale = ens.points().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        let mut rng = crate::rng::rng(crate::rng::derive_seed(ens.seed(), 0x6a17));
        let pts: Vec<f64> = ens.points().iter().map(|v| v + 1e-12 * scale * (rng.random::<f64>() - 0.5)).collect();
        log::warn!("k-NN entropy: duplicate points at t = {}, jittering by 1e-12 x {scale}", ens.time());
        dists = knn_distances(&pts, d, k);
        if dists.iter().any(|&r| r == 0.0) {
            return Err(Error::DuplicatePoints);
        }
        jittered = true;
    }
    let df = d as f64;
    let terms: Vec<f64> = dists.iter().map(|r| df * r.ln()).collect();
    let m = crate::stats::mean_se(&terms);
    let log_cd = 0.5 * df * std::f64::consts::PI.ln() - ln_gamma(0.5 * df + 1.0);
    Ok(EntropyEstimate {
        value: digamma(n as f64) - digamma(k as f64) + log_cd + m.value,
        std_error: m.std_error,
        k,
        n,
        jittered,
    })
}

/// Distance from each point to its `k`-th nearest other point.
fn knn_distances(points: &[f64], d: usize, k: usize) -> Vec<f64> {
    match d {
        1 => knn_1d(points, k),
        2 => knn_kdtree::<2>(points, k),
        3 => knn_kdtree::<3>(points, k),
        4 => knn_kdtree::<4>(points, k),
        _ => knn_brute(points, d, k),
    }
}

fn knn_1d(points: &[f64], k: usize) -> Vec<f64> {
    let mut sorted = points.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // only the multiset of distances matters, so sorted order is fine
    (0..n)
        .into_par_iter()
        .map(|i| {
            // the k nearest neighbours of a point on the line form a window
            let (mut l, mut r) = (i, i);
            let mut last = 0.0;
            for _ in 0..k {
                let dl = if l > 0 { sorted[i] - sorted[l - 1] } else { f64::INFINITY };
                let dr = if r + 1 < n { sorted[r + 1] - sorted[i] } else { f64::INFINITY };
                if dl <= dr {
                    l -= 1;
                    last = dl;
                } else {
                    r += 1;
                    last = dr;
                }
            }
            last
        })
        .collect()
}

fn knn_kdtree<const K: usize>(points: &[f64], k: usize) -> Vec<f64> {
    let pts: Vec<[f64; K]> = points.chunks_exact(K).map(|c| c.try_into().unwrap()).collect();
    let Ok(tree) = ImmutableKdTree::<f64, K>::new_from_slice(&pts) else {
        return knn_brute(points, K, k);
    };
    let kk = NonZero::new(k + 1).unwrap();
    pts.par_iter()
        .map(|p| {
            // the query point itself comes back first at distance 0
            let res = tree.query(p).nearest_n::<SquaredEuclidean<f64>>(kk).execute();
            res.last().map(|r| r.distance.sqrt()).unwrap_or(0.0)
        })
        .collect()
}

fn knn_brute(points: &[f64], d: usize, k: usize) -> Vec<f64> {
    let n = points.len() / d;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &points[i * d..(i + 1) * d];
            let mut ds: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| points[j * d..(j + 1) * d].iter().zip(xi).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            let (_, kth, _) = ds.select_nth_unstable_by(k - 1, f64::total_cmp);
            kth.sqrt()
        })
        .collect()
}
