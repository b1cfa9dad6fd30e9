use crate::diffkit::Matrix;
use crate::error::Result;
use crate::losses::{mmd2_with_grad, mse, KernelConfig, MmdEstimator};
use crate::registry::Registry;

/// Settings resolved once per modality and shared by every reconstruction call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconContext {
    pub kernel: KernelConfig,
    pub estimator: MmdEstimator,
}

/// Reconstruction objective between original rows and their decodings.
pub trait ReconLoss: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns the loss and its gradient with respect to `recon`.
    fn loss(&self, originals: &Matrix, recon: &Matrix, ctx: &ReconContext)
        -> Result<(f64, Matrix)>;
}

/// Squared MMD between the batch of originals and the batch of reconstructions.
#[derive(Debug, Clone, Copy, Default)]
pub struct MmdRecon;

impl ReconLoss for MmdRecon {
    fn name(&self) -> &'static str {
        "mmd"
    }

    fn loss(
        &self,
        originals: &Matrix,
        recon: &Matrix,
        ctx: &ReconContext,
    ) -> Result<(f64, Matrix)> {
        let out = mmd2_with_grad(originals, recon, &ctx.kernel, ctx.estimator)?;
        Ok((out.value, out.grad_y))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MseRecon;

impl ReconLoss for MseRecon {
    fn name(&self) -> &'static str {
        "mse"
    }

    fn loss(
        &self,
        originals: &Matrix,
        recon: &Matrix,
        _ctx: &ReconContext,
    ) -> Result<(f64, Matrix)> {
        let out = mse(recon, originals)?;
        Ok((out.value, out.grad_a))
    }
}

pub fn recon_registry() -> Registry<dyn ReconLoss> {
    let mut r: Registry<dyn ReconLoss> = Registry::new("reconstruction loss");
    r.register("mmd", || Box::new(MmdRecon));
    r.register("mse", || Box::new(MseRecon));
    r
}
