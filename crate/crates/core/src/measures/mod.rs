//! Probability-measure representations and functionals: Gaussian mixtures,
//! particle ensembles, differential entropy, Fisher information, `W_2`, and
//! mode-mass queries.
//!
//! Entropy is `H(mu) = -∫ rho log rho` everywhere in this crate.

mod ensemble;
mod entropy;
mod grid;
mod mixture;
mod modes;
mod wasserstein;

pub use ensemble::ParticleEnsemble;
pub(crate) use ensemble::format_f64;
pub use entropy::{differential_entropy, EntropyConfig, EntropyEstimate};
pub use grid::TimeGrid;
pub use mixture::{Component, GaussianMixture};
pub use modes::{hoeffding_radius, mode_mass, ModeMass, ModeSet};
pub use wasserstein::{w2, w2_squared};
pub(crate) use wasserstein::hungarian;

use crate::stats::McEstimate;

/// Monte-Carlo estimate of `H(mix)` using the exact mixture density.
pub fn entropy_exact_mixture(mix: &GaussianMixture, n_mc: usize, seed: u64) -> crate::Result<McEstimate> {
    if n_mc < 1000 {
        return Err(crate::Error::invalid("entropy_exact_mixture needs n_mc >= 1000"));
    }
    let ens = mix.sample(n_mc, seed)?;
    let vals: Vec<f64> = ens.iter_points().map(|x| -mix.log_density(x)).collect();
    Ok(crate::stats::mean_se(&vals))
}

/// Monte-Carlo estimate of the Fisher information `E ||∇ log rho||^2`.
pub fn fisher_information(mix: &GaussianMixture, n_mc: usize, seed: u64) -> crate::Result<McEstimate> {
    if n_mc < 1000 {
        return Err(crate::Error::invalid("fisher_information needs n_mc >= 1000"));
    }
    let ens = mix.sample(n_mc, seed)?;
    let mut s = vec![0.0; mix.dim()];
    let vals: Vec<f64> = ens
        .iter_points()
        .map(|x| {
            mix.score_into(x, &mut s);
            s.iter().map(|v| v * v).sum()
        })
        .collect();
    Ok(crate::stats::mean_se(&vals))
}
