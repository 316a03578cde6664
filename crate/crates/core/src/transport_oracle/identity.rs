use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::TrajectoryRecord;
use crate::fields::{ScoreField, VelocityField};
use crate::stats::{mean_se, neumaier_sum};
use crate::{Error, Result};

/// Both sides of the ECFM–KL identity
/// `½∫E|v - u*|² = 2ε KL + ε∫Ḣ + ε∫E[s·u*] - (ε²/2)∫I`, with
/// `KL = (1/4ε)∫E|w|²`, `w = v - u* + ε s` and `H = -∫ρ log ρ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub lhs: f64,
    /// `2ε KL`.
    pub kl_term: f64,
    /// `ε∫Ḣ` with `Ḣ = E[∇·v]`.
    pub rate_term: f64,
    /// `ε∫E[s·u*]`.
    pub cross_term: f64,
    /// `(ε²/2)∫I`.
    pub fisher_term: f64,
    /// `lhs - rhs`.
    pub signed_residual: f64,
    pub residual: f64,
    /// Standard error of the residual across particles.
    pub std_error: f64,
}

fn check_dims(fields: &[&dyn VelocityField], traj: &TrajectoryRecord) -> Result<()> {
    for f in fields {
        if f.dim() != traj.dim() {
            return Err(Error::Dimension { expected: traj.dim(), got: f.dim() });
        }
    }
    Ok(())
}

/// `(1/4ε)∫E|w|²` by trapezoid quadrature over the trajectory grid.
pub fn kl_control_energy(w: &dyn VelocityField, traj: &TrajectoryRecord, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::invalid("control energy needs eps > 0"));
    }
    check_dims(&[w], traj)?;
    let d = traj.dim();
    let mut total = 0.0;
    for (ens, q) in traj.ensembles().iter().zip(traj.grid().trapezoid_weights()) {
        let t = ens.time();
        let terms: Vec<f64> = ens
            .iter_points()
            .zip(ens.weights())
            .collect::<Vec<_>>()
            .par_iter()
            .map(|(x, wt)| {
                let mut v = vec![0.0; d];
                w.velocity(x, t, &mut v);
                *wt * v.iter().map(|a| a * a).sum::<f64>()
            })
            .collect();
        total += q * neumaier_sum(terms);
    }
    if !total.is_finite() {
        return Err(Error::invalid("non-finite control energy"));
    }
    Ok(total / (4.0 * eps))
}

/// Evaluates both sides of the identity on an equal-weight trajectory whose
/// laws are known exactly through `score`. Each particle path contributes one
/// sample of every term, so the residual's standard error is the spread of
/// per-particle residuals.
pub fn ecfm_kl_identity_check(
    v: &dyn VelocityField,
    u_star: &dyn VelocityField,
    traj: &TrajectoryRecord,
    score: &ScoreField,
    eps: f64,
) -> Result<IdentityCheck> {
    if !(eps > 0.0) {
        return Err(Error::invalid("identity check needs eps > 0"));
    }
    check_dims(&[v, u_star, score], traj)?;
    if !traj.ensembles().iter().all(|e| e.is_equal_weight()) {
        return Err(Error::invalid("identity check needs equal-weight ensembles"));
    }
    let d = traj.dim();
    let n = traj.n();
    let q = traj.grid().trapezoid_weights();
    // per particle: [lhs, kl, rate, cross, fisher]
    let mut acc = vec![[0.0f64; 5]; n];
    for (k, ens) in traj.ensembles().iter().enumerate() {
        let t = ens.time();
        score.law(t)?;
        let rows: Vec<[f64; 5]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = ens.point(i);
                let (mut vv, mut uu, mut ss) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
                v.velocity(x, t, &mut vv);
                u_star.velocity(x, t, &mut uu);
                score.score(x, t, &mut ss);
                let mut lhs = 0.0;
                let mut w2 = 0.0;
                let mut cross = 0.0;
                let mut fisher = 0.0;
                for j in 0..d {
                    let diff = vv[j] - uu[j];
                    let w = diff + eps * ss[j];
                    lhs += 0.5 * diff * diff;
                    w2 += w * w;
                    cross += ss[j] * uu[j];
                    fisher += ss[j] * ss[j];
                }
                [lhs, 0.5 * w2, eps * v.divergence(x, t), eps * cross, 0.5 * eps * eps * fisher]
            })
            .collect();
        for (i, r) in rows.iter().enumerate() {
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { particle: i, time: t });
            }
            for c in 0..5 {
                acc[i][c] += q[k] * r[c];
            }
        }
    }
    let mean = |c: usize| neumaier_sum(acc.iter().map(|r| r[c])) / n as f64;
    let (lhs, kl_term, rate_term, cross_term, fisher_term) = (mean(0), mean(1), mean(2), mean(3), mean(4));
    let per_particle: Vec<f64> = acc.iter().map(|r| r[0] - (r[1] + r[2] + r[3] - r[4])).collect();
    let res = mean_se(&per_particle);
    let signed_residual = lhs - (kl_term + rate_term + cross_term - fisher_term);
    Ok(IdentityCheck {
        lhs,
        kl_term,
        rate_term,
        cross_term,
        fisher_term,
        signed_residual,
        residual: signed_residual.abs(),
        std_error: res.std_error,
    })
}
