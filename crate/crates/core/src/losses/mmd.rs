use serde::{Deserialize, Serialize};

use super::KernelConfig;
use crate::diffkit::{sq_dist, Matrix};
use crate::error::{MmqError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MmdEstimator {
    /// V-statistic; never negative.
    #[default]
    Biased,
    /// U-statistic; drops the diagonal kernel terms.
    Unbiased,
}

#[derive(Debug, Clone)]
pub struct MmdOutput {
    pub value: f64,
    pub grad_x: Matrix,
    pub grad_y: Matrix,
}

/// Squared maximum mean discrepancy between the row sets `x` and `y`.
pub fn mmd2(x: &Matrix, y: &Matrix, kernel: &KernelConfig, estimator: MmdEstimator) -> Result<f64> {
    mmd2_with_grad(x, y, kernel, estimator).map(|o| o.value)
}

pub fn mmd2_with_grad(
    x: &Matrix,
    y: &Matrix,
    kernel: &KernelConfig,
    estimator: MmdEstimator,
) -> Result<MmdOutput> {
    if x.cols() != y.cols() {
        return Err(MmqError::dim("mmd2 sample dimension", x.cols(), y.cols()));
    }
    let (n, m) = (x.rows(), y.rows());
    if n == 0 || m == 0 {
        return Err(MmqError::InvalidArgument(
            "mmd2 needs at least one sample per side".into(),
        ));
    }
    if estimator == MmdEstimator::Unbiased && (n < 2 || m < 2) {
        return Err(MmqError::InvalidArgument(format!(
            "unbiased mmd2 needs at least two samples per side, got {n} and {m}"
        )));
    }
    if !(kernel.sigma > 0.0) {
        return Err(MmqError::InvalidArgument(format!(
            "kernel sigma must be > 0, got {}",
            kernel.sigma
        )));
    }
    let inv_s2 = 1.0 / (kernel.sigma * kernel.sigma);
    let (wxx, wyy) = match estimator {
        MmdEstimator::Biased => (1.0 / (n * n) as f64, 1.0 / (m * m) as f64),
        MmdEstimator::Unbiased => (1.0 / (n * (n - 1)) as f64, 1.0 / (m * (m - 1)) as f64),
    };
    let wxy = 2.0 / (n * m) as f64;
    let skip_diag = estimator == MmdEstimator::Unbiased;
    let dim = x.cols();

    let mut grad_x = Matrix::zeros(n, dim);
    let mut grad_y = Matrix::zeros(m, dim);

    // Within-sample term: w Σ_{i,j} k(a_i, a_j); ∂/∂a_i = 2w Σ_j −k_ij (a_i − a_j)/σ².
    let within = |a: &Matrix, w: f64, grad: &mut Matrix| -> f64 {
        let rows = a.rows();
        let mut total = 0.0;
        for i in 0..rows {
            if !skip_diag {
                total += 1.0;
            }
            for j in i + 1..rows {
                let k = kernel.eval_sq(sq_dist(a.row(i), a.row(j)));
                total += 2.0 * k;
                let c = 2.0 * w * k * inv_s2;
                for d in 0..dim {
                    let diff = a.get(i, d) - a.get(j, d);
                    grad.data_mut()[i * dim + d] -= c * diff;
                    grad.data_mut()[j * dim + d] += c * diff;
                }
            }
        }
        w * total
    };
    let xx = within(x, wxx, &mut grad_x);
    let yy = within(y, wyy, &mut grad_y);

    let mut xy = 0.0;
    for i in 0..n {
        for j in 0..m {
            let k = kernel.eval_sq(sq_dist(x.row(i), y.row(j)));
            xy += k;
            // −wxy·k: ∂/∂x_i = wxy·k·(x_i − y_j)/σ², ∂/∂y_j = −wxy·k·(x_i − y_j)/σ²
            let c = wxy * k * inv_s2;
            for d in 0..dim {
                let diff = x.get(i, d) - y.get(j, d);
                grad_x.data_mut()[i * dim + d] += c * diff;
                grad_y.data_mut()[j * dim + d] -= c * diff;
            }
        }
    }
    let value = xx + yy - wxy * xy;
    Ok(MmdOutput {
        value,
        grad_x,
        grad_y,
    })
}
