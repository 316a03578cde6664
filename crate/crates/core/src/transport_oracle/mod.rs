//! Independent ground truth: Sinkhorn / Schrödinger-bridge marginals on a 1D
//! grid, Benamou–Brenier displacement geodesics between Gaussians, the
//! Girsanov control energy and the ECFM–KL objective identity.

mod geodesic;
mod grid_density;
mod identity;
mod sinkhorn;
mod sweep;

pub use geodesic::{bb_geodesic, bb_map, bb_pushforward, gaussian_w2};
pub use grid_density::GridDensity;
pub use identity::{ecfm_kl_identity_check, kl_control_energy, IdentityCheck};
pub use sinkhorn::{gaussian_bridge_variance, sb_marginal, sinkhorn, SchrodingerPotentials, SinkhornConfig};
pub use sweep::{gamma_sweep, write_gamma_csv, GammaRow, GammaSweepConfig, SweepFailure};
