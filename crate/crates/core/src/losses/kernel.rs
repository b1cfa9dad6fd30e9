use serde::{Deserialize, Serialize};

use crate::diffkit::{sq_dist, Matrix};
use crate::error::{MmqError, Result};

/// How the Gaussian bandwidth is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaPolicy {
    Fixed(f64),
    /// `"median"`: median pairwise distance of the first training batch,
    /// frozen afterwards.
    Named(SigmaName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaName {
    Median,
}

impl SigmaPolicy {
    pub const MEDIAN: SigmaPolicy = SigmaPolicy::Named(SigmaName::Median);

    /// Resolves the bandwidth against a reference batch.
    pub fn resolve(&self, reference: &Matrix) -> Result<KernelConfig> {
        match *self {
            SigmaPolicy::Fixed(s) => KernelConfig::new(s),
            SigmaPolicy::Named(SigmaName::Median) => {
                let med = median_pairwise_distance(reference);
                // A degenerate batch (all rows equal) has no scale; fall back to 1.
                KernelConfig::new(if med > 0.0 && med.is_finite() {
                    med
                } else {
                    1.0
                })
            }
        }
    }
}

/// Resolved Gaussian kernel `k(x, y) = exp(−‖x − y‖² / 2σ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub sigma: f64,
}

impl KernelConfig {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(MmqError::InvalidArgument(format!(
                "kernel sigma must be > 0, got {sigma}"
            )));
        }
        Ok(KernelConfig { sigma })
    }

    #[inline]
    pub(crate) fn eval_sq(&self, d2: f64) -> f64 {
        (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

pub fn gaussian_kernel(x: &[f64], y: &[f64], cfg: &KernelConfig) -> Result<f64> {
    if x.len() != y.len() {
        return Err(MmqError::dim("gaussian_kernel", x.len(), y.len()));
    }
    if !(cfg.sigma > 0.0) {
        return Err(MmqError::InvalidArgument(format!(
            "kernel sigma must be > 0, got {}",
            cfg.sigma
        )));
    }
    Ok(cfg.eval_sq(sq_dist(x, y)))
}

/// Median of the pairwise Euclidean distances between distinct rows.
pub fn median_pairwise_distance(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(m.row(i), m.row(j)).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    }
}
