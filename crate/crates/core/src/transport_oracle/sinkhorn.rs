use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::GridDensity;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Diffusivity of the Brownian reference (`dX = sqrt(2 eps) dW`).
    pub eps: f64,
    pub horizon: f64,
    /// Target for the L1 marginal residual.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { eps: 0.1, horizon: 1.0, tol: 1e-10, max_iter: 5000 }
    }
}

/// Scalings `f, g` of the static Schrödinger system, stored as logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchrodingerPotentials {
    pub lo: f64,
    pub hi: f64,
    pub cells: usize,
    pub eps: f64,
    pub horizon: f64,
    pub log_f: Vec<f64>,
    pub log_g: Vec<f64>,
    pub iterations: usize,
    /// L1 residual of the first marginal after the last sweep (the second is
    /// matched exactly by construction).
    pub residual: f64,
    pub residual_history: Vec<f64>,
    pub log_domain: bool,
}

impl SchrodingerPotentials {
    pub fn f(&self) -> Vec<f64> {
        self.log_f.iter().map(|v| v.exp()).collect()
    }
    pub fn g(&self) -> Vec<f64> {
        self.log_g.iter().map(|v| v.exp()).collect()
    }

    fn template(&self) -> GridDensity {
        let m = self.cells;
        GridDensity::new(self.lo, self.hi, vec![1.0 / m as f64; m]).expect("uniform grid is valid")
    }

    /// Static plan `pi_ij = f_i K_ij g_j` (row-major).
    pub fn coupling(&self) -> Vec<f64> {
        let lk = transition_log_kernel(&self.template(), self.eps, self.horizon);
        let m = self.cells;
        let mut pi = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                pi[i * m + j] = (self.log_f[i] + lk[i * m + j] + self.log_g[j]).exp();
            }
        }
        pi
    }
}

/// Log transition matrix of Brownian motion with diffusivity `eps` over time
/// `tau`, reflected at the grid ends: entry `(i, k)` is the mass landing in
/// cell `k` from the center of cell `i`. Symmetric.
pub(crate) fn transition_log_kernel(grid: &GridDensity, eps: f64, tau: f64) -> Vec<f64> {
    let m = grid.cells();
    let h = grid.width();
    let (lo, hi) = (grid.lo(), grid.hi());
    let sd = (2.0 * eps * tau).sqrt();
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI * sd * sd).ln() + h.ln();
    let centers = grid.centers();
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let xi = centers[i];
            let images = [xi, 2.0 * lo - xi, 2.0 * hi - xi];
            (0..m)
                .map(|k| {
                    let (a, b) = (lo + k as f64 * h, lo + (k + 1) as f64 * h);
                    let mass: f64 = images.iter().map(|&c| cell_mass(a, b, c, sd)).sum();
                    if mass > 1e-280 {
                        mass.ln()
                    } else {
                        // far tail: midpoint rule in log space, nearest image dominates
                        let z = images.iter().map(|&c| (centers[k] - c).abs()).fold(f64::INFINITY, f64::min) / sd;
                        log_norm - 0.5 * z * z
                    }
                })
                .collect()
        })
        .collect();
    let mut out = rows.concat();
    // enforce exact symmetry against rounding in the CDF differences
    for i in 0..m {
        for k in 0..i {
            let v = 0.5 * (out[i * m + k] + out[k * m + i]);
            out[i * m + k] = v;
            out[k * m + i] = v;
        }
    }
    out
}

/// `P(a < N(c, sd²) < b)`, evaluated on the side with the smaller tail.
fn cell_mass(a: f64, b: f64, c: f64, sd: f64) -> f64 {
    let (za, zb) = ((a - c) / sd, (b - c) / sd);
    let q = |z: f64| 0.5 * libm::erfc(z / std::f64::consts::SQRT_2);
    if za >= 0.0 {
        q(za) - q(zb)
    } else if zb <= 0.0 {
        q(-zb) - q(-za)
    } else {
        1.0 - q(-za) - q(zb)
    }
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `out_i = log Σ_j K_ij exp(v_j)`, with `K` symmetric so rows serve for both sides.
fn apply_log(lk: &[f64], v: &[f64], m: usize, log_domain: bool, kexp: Option<&[f64]>) -> Vec<f64> {
    (0..m)
        .into_par_iter()
        .map(|i| {
            let row = &lk[i * m..(i + 1) * m];
            if log_domain {
                logsumexp(row.iter().zip(v).map(|(a, b)| a + b))
            } else {
                let k = &kexp.unwrap()[i * m..(i + 1) * m];
                k.iter().zip(v).map(|(a, b)| a * b.exp()).sum::<f64>().ln()
            }
        })
        .collect()
}

/// Alternating scaling for `mu0_i = f_i (K g)_i`, `muT_j = g_j (Kᵀ f)_j`
/// with the Brownian kernel over `[0, T]`. Runs in the log domain when
/// `eps T < 0.05 (hi - lo)²`.
pub fn sinkhorn(mu0: &GridDensity, mut_: &GridDensity, cfg: SinkhornConfig) -> Result<SchrodingerPotentials> {
    if !mu0.same_grid(mut_) {
        return Err(Error::invalid("Sinkhorn needs both marginals on the same grid"));
    }
    if !(cfg.eps > 0.0) || !(cfg.horizon > 0.0) || !(cfg.tol > 0.0) {
        return Err(Error::invalid("Sinkhorn needs eps > 0, horizon > 0 and tol > 0"));
    }
    let m = mu0.cells();
    let span = mu0.hi() - mu0.lo();
    let log_domain = cfg.eps * cfg.horizon < 0.05 * span * span;
    let lk = transition_log_kernel(mu0, cfg.eps, cfg.horizon);
    let kexp: Option<Vec<f64>> = (!log_domain).then(|| lk.iter().map(|v| v.exp()).collect());
    let lmu0: Vec<f64> = mu0.masses().iter().map(|v| v.ln()).collect();
    let lmut: Vec<f64> = mut_.masses().iter().map(|v| v.ln()).collect();
    let update = |lmu: &[f64], s: &[f64]| -> Vec<f64> {
        lmu.iter().zip(s).map(|(a, b)| if *a == f64::NEG_INFINITY { *a } else { a - b }).collect()
    };
    let mut lf = vec![0.0; m];
    let mut lg = vec![0.0; m];
    let mut s = apply_log(&lk, &lg, m, log_domain, kexp.as_deref());
    let mut history = Vec::new();
    for it in 1..=cfg.max_iter {
        lf = update(&lmu0, &s);
        let sg = apply_log(&lk, &lf, m, log_domain, kexp.as_deref());
        lg = update(&lmut, &sg);
        s = apply_log(&lk, &lg, m, log_domain, kexp.as_deref());
        let residual: f64 = (0..m)
            .map(|i| {
                let row = if lf[i] == f64::NEG_INFINITY { 0.0 } else { (lf[i] + s[i]).exp() };
                (row - mu0.masses()[i]).abs()
            })
            .sum();
        if !residual.is_finite() {
            return Err(Error::NoConvergence { iterations: it, residual });
        }
        history.push(residual);
        if residual < cfg.tol {
            return Ok(SchrodingerPotentials {
                lo: mu0.lo(),
                hi: mu0.hi(),
                cells: m,
                eps: cfg.eps,
                horizon: cfg.horizon,
                log_f: lf,
                log_g: lg,
                iterations: it,
                residual,
                residual_history: history,
                log_domain,
            });
        }
    }
    Err(Error::NoConvergence { iterations: cfg.max_iter, residual: history.last().copied().unwrap_or(f64::NAN) })
}

/// Bridge marginal `rho_t ∝ (P_tᵀ f) ⊙ (P_{T-t} g)`, normalized; `P_0 = I`
/// so the endpoints reproduce the Sinkhorn marginals.
pub fn sb_marginal(pots: &SchrodingerPotentials, t: f64) -> Result<GridDensity> {
    if !(0.0..=pots.horizon).contains(&t) {
        return Err(Error::TimeOutOfRange { t, horizon: pots.horizon });
    }
    let m = pots.cells;
    let template = pots.template();
    let propagate = |lv: &[f64], tau: f64| -> Vec<f64> {
        if tau <= 0.0 {
            return lv.to_vec();
        }
        let lk = transition_log_kernel(&template, pots.eps, tau);
        apply_log(&lk, lv, m, true, None)
    };
    let la = propagate(&pots.log_f, t);
    let lb = propagate(&pots.log_g, pots.horizon - t);
    let lp: Vec<f64> = la.iter().zip(&lb).map(|(a, b)| a + b).collect();
    let mx = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    GridDensity::from_unnormalized(pots.lo, pots.hi, lp.iter().map(|v| (v - mx).exp()).collect())
}

/// Variance at `s = t/T` of the Brownian bridge between Gaussian endpoints
/// with variances `var0`, `var1` under diffusivity `eps`: with `σ² = 2 eps T`
/// and optimal coupling covariance `c = (sqrt(4 var0 var1 + σ⁴) - σ²)/2`,
/// `var_s = (1-s)² var0 + s² var1 + 2 s (1-s) c + σ² s (1-s)`.
pub fn gaussian_bridge_variance(var0: f64, var1: f64, eps: f64, horizon: f64, s: f64) -> f64 {
    let sig2 = 2.0 * eps * horizon;
    let c = ((4.0 * var0 * var1 + sig2 * sig2).sqrt() - sig2) / 2.0;
    (1.0 - s).powi(2) * var0 + s * s * var1 + 2.0 * s * (1.0 - s) * c + sig2 * s * (1.0 - s)
}
