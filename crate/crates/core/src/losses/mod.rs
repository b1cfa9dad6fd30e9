//! Scalar training objectives with analytic gradients with respect to their
//! matrix inputs.

mod bce;
mod commitment;
mod infonce;
mod kernel;
mod mmd;
mod mse;

pub use bce::{bce, BceOutput};
pub use commitment::{rq_commitment_loss, CommitmentOutput};
pub use infonce::{info_nce, InfoNceOutput};
pub use kernel::{gaussian_kernel, median_pairwise_distance, KernelConfig, SigmaPolicy};
pub use mmd::{mmd2, mmd2_with_grad, MmdEstimator, MmdOutput};
pub use mse::{mse, MseOutput};
