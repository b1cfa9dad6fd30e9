use crate::diffkit::Matrix;
use crate::error::{MmqError, Result};

#[derive(Debug, Clone)]
pub struct CommitmentOutput {
    pub value: f64,
    /// `Σ_l ‖SG(r_{l−1}) − CE_l‖²`, the part that moves codes.
    pub codebook_term: f64,
    /// `α Σ_l ‖r_{l−1} − SG(CE_l)‖²`, the part that moves residuals.
    pub commitment_term: f64,
    pub grad_residuals: Vec<Matrix>,
    pub grad_codes: Vec<Matrix>,
}

/// Residual-quantization codebook + commitment loss with stop-gradients.
///
/// `residuals[l]` is the residual entering level `l` and `codes[l]` the code
/// chosen for it, one row per item. Squared norms are summed over the
/// embedding dimension and averaged over items. Code gradients come only from
/// the codebook term and residual gradients only from the commitment term.
pub fn rq_commitment_loss(
    residuals: &[Matrix],
    codes: &[Matrix],
    alpha: f64,
) -> Result<CommitmentOutput> {
    if residuals.len() != codes.len() {
        return Err(MmqError::dim(
            "rq_commitment_loss levels",
            residuals.len(),
            codes.len(),
        ));
    }
    if !(alpha >= 0.0) {
        return Err(MmqError::InvalidArgument(format!(
            "alpha must be >= 0, got {alpha}"
        )));
    }
    let mut codebook_term = 0.0;
    let mut grad_residuals = Vec::with_capacity(residuals.len());
    let mut grad_codes = Vec::with_capacity(residuals.len());
    for (l, (r, c)) in residuals.iter().zip(codes).enumerate() {
        r.check_same_shape(c, &format!("rq_commitment_loss level {l}"))?;
        let n = r.rows().max(1) as f64;
        let diff = r.sub(c);
        codebook_term += diff.data().iter().map(|v| v * v).sum::<f64>() / n;
        grad_residuals.push(diff.scaled(2.0 * alpha / n));
        grad_codes.push(diff.scaled(-2.0 / n));
    }
    let commitment_term = alpha * codebook_term;
    Ok(CommitmentOutput {
        value: codebook_term + commitment_term,
        codebook_term,
        commitment_term,
        grad_residuals,
        grad_codes,
    })
}
