//! RK4 transport of particles together with their forward sensitivities
//! `S = ∂x/∂θ`, which obey `Ṡ = J_x v · S + ∂v/∂θ`.

use rayon::prelude::*;

use crate::fields::{RbfField, VelocityField};
use crate::{Error, Result};

pub(crate) struct Pathwise {
    /// Positions per grid time, `n × d` row-major.
    pub x: Vec<Vec<f64>>,
    /// Sensitivities per grid time where requested, `n × d × P`.
    pub s: Vec<Option<Vec<f64>>>,
}

struct Scratch {
    j: Vec<f64>,
    feat: Vec<f64>,
}

fn deriv(field: &RbfField, x: &[f64], s: &[f64], t: f64, dx: &mut [f64], ds: &mut [f64], sc: &mut Scratch) {
    let d = x.len();
    let p = field.n_params();
    let (knot, wl, wr) = field.eval_with_features(x, t, dx, &mut sc.j, &mut sc.feat);
    for i in 0..d {
        let row = &mut ds[i * p..(i + 1) * p];
        row.iter_mut().for_each(|r| *r = 0.0);
        for k in 0..d {
            let jik = sc.j[i * d + k];
            if jik != 0.0 {
                for (r, sv) in row.iter_mut().zip(&s[k * p..(k + 1) * p]) {
                    *r += jik * sv;
                }
            }
        }
        for (f, &phi) in sc.feat.iter().enumerate() {
            row[field.feature_param(knot, i, f)] += wl * phi;
            if wr != 0.0 {
                row[field.feature_param(knot + 1, i, f)] += wr * phi;
            }
        }
    }
}

/// Transports `x0` (`n × d`) over `times` and records sensitivities at the
/// grid indices flagged in `record`.
pub(crate) fn simulate(field: &RbfField, x0: &[f64], times: &[f64], substeps: usize, record: &[bool]) -> Result<Pathwise> {
    let d = field.dim();
    let p = field.n_params();
    let n = x0.len() / d;
    let nt = times.len();
    type Particle = std::result::Result<(Vec<f64>, Vec<Vec<f64>>), (usize, f64)>;
    let per: Vec<Particle> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut sc = Scratch { j: vec![0.0; d * d], feat: vec![0.0; field.layout().m + d + 1] };
            let mut x = x0[i * d..(i + 1) * d].to_vec();
            let mut s = vec![0.0; d * p];
            let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
            let (mut s1, mut s2, mut s3, mut s4) = (vec![0.0; d * p], vec![0.0; d * p], vec![0.0; d * p], vec![0.0; d * p]);
            let mut xt = vec![0.0; d];
            let mut st = vec![0.0; d * p];
            let mut path = Vec::with_capacity(nt * d);
            let mut sens = Vec::new();
            path.extend_from_slice(&x);
            if record[0] {
                sens.push(s.clone());
            }
            for k in 0..nt - 1 {
                let (ta, tb) = (times[k], times[k + 1]);
                for sub in 0..substeps {
                    let t0 = ta + (tb - ta) * sub as f64 / substeps as f64;
                    let t1 = if sub + 1 == substeps { tb } else { ta + (tb - ta) * (sub + 1) as f64 / substeps as f64 };
                    let h = t1 - t0;
                    let tm = t0 + 0.5 * h;
                    deriv(field, &x, &s, t0, &mut k1, &mut s1, &mut sc);
                    for q in 0..d {
                        xt[q] = x[q] + 0.5 * h * k1[q];
                    }
                    for q in 0..d * p {
                        st[q] = s[q] + 0.5 * h * s1[q];
                    }
                    deriv(field, &xt, &st, tm, &mut k2, &mut s2, &mut sc);
                    for q in 0..d {
                        xt[q] = x[q] + 0.5 * h * k2[q];
                    }
                    for q in 0..d * p {
                        st[q] = s[q] + 0.5 * h * s2[q];
                    }
                    deriv(field, &xt, &st, tm, &mut k3, &mut s3, &mut sc);
                    for q in 0..d {
                        xt[q] = x[q] + h * k3[q];
                    }
                    for q in 0..d * p {
                        st[q] = s[q] + h * s3[q];
                    }
                    deriv(field, &xt, &st, t1, &mut k4, &mut s4, &mut sc);
                    for q in 0..d {
                        x[q] += h / 6.0 * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q]);
                    }
                    for q in 0..d * p {
                        s[q] += h / 6.0 * (s1[q] + 2.0 * s2[q] + 2.0 * s3[q] + s4[q]);
                    }
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err((i, tb));
                }
                path.extend_from_slice(&x);
                if record[k + 1] {
                    sens.push(s.clone());
                }
            }
            Ok((path, sens))
        })
        .collect();
    let mut x = vec![Vec::with_capacity(n * d); nt];
    let recorded: Vec<usize> = (0..nt).filter(|&k| record[k]).collect();
    let mut s: Vec<Option<Vec<f64>>> = (0..nt).map(|k| record[k].then(|| Vec::with_capacity(n * d * p))).collect();
    for (i, r) in per.into_iter().enumerate() {
        let (path, sens) = r.map_err(|(particle, time)| {
            log::debug!("pathwise simulation of particle {i} diverged");
            Error::NonFinite { particle, time }
        })?;
        for (k, xk) in x.iter_mut().enumerate() {
            xk.extend_from_slice(&path[k * d..(k + 1) * d]);
        }
        for (slot, sk) in recorded.iter().zip(sens) {
            s[*slot].as_mut().expect("recorded slot").extend_from_slice(&sk);
        }
    }
    Ok(Pathwise { x, s })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sensitivities_match_finite_differences() {
        let centers = vec![-1.0, 0.0, 1.0];
        let knots = vec![0.0, 0.5, 1.0];
        let base = RbfField::zeros(1, centers.clone(), 0.8, knots.clone()).unwrap();
        let theta: Vec<f64> = (0..base.n_params()).map(|q| 0.3 * ((q as f64) * 1.7).sin()).collect();
        let field = base.with_theta(theta.clone()).unwrap();
        let x0 = vec![-0.4, 0.9];
        let times = [0.0, 0.5, 1.0];
        let out = simulate(&field, &x0, &times, 8, &[false, false, true]).unwrap();
        let s = out.s[2].as_ref().unwrap();
        let p = field.n_params();
        for q in 0..p {
            let h = 1e-6;
            let mut tp = theta.clone();
            tp[q] += h;
            let mut tm = theta.clone();
            tm[q] -= h;
            let xp = simulate(&field.with_theta(tp).unwrap(), &x0, &times, 8, &[false; 3]).unwrap().x[2].clone();
            let xm = simulate(&field.with_theta(tm).unwrap(), &x0, &times, 8, &[false; 3]).unwrap().x[2].clone();
            for i in 0..2 {
                let fd = (xp[i] - xm[i]) / (2.0 * h);
                assert!((fd - s[i * p + q]).abs() < 1e-6 * fd.abs().max(1.0), "param {q} particle {i}: {fd} vs {}", s[i * p + q]);
            }
        }
    }
}
