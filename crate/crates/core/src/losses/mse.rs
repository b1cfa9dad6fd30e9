use crate::diffkit::Matrix;
use crate::error::{MmqError, Result};

#[derive(Debug, Clone)]
pub struct MseOutput {
    pub value: f64,
    /// ∂/∂a; the gradient with respect to `b` is its negation.
    pub grad_a: Matrix,
}

/// Mean of squared elementwise differences.
pub fn mse(a: &Matrix, b: &Matrix) -> Result<MseOutput> {
    a.check_same_shape(b, "mse")?;
    if a.is_empty() {
        return Err(MmqError::InvalidArgument("mse of empty matrices".into()));
    }
    let n = a.len() as f64;
    let diff = a.sub(b);
    let value = diff.data().iter().map(|v| v * v).sum::<f64>() / n;
    Ok(MseOutput {
        value,
        grad_a: diff.scaled(2.0 / n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_is_zero() {
        let a = Matrix::from_rows(&[[1.0, -2.0]]);
        assert_eq!(mse(&a, &a).unwrap().value, 0.0);
    }

    #[test]
    fn mean_convention() {
        let v = mse(&Matrix::from_rows(&[[1.0, 2.0]]), &Matrix::zeros(1, 2))
            .unwrap()
            .value;
        assert_eq!(v, 2.5);
    }

    #[test]
    fn homogeneous_of_degree_two() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [0.5, -1.0]]);
        let b = Matrix::from_rows(&[[0.0, 1.0], [2.0, 2.0]]);
        let base = mse(&a, &b).unwrap().value;
        let scaled = mse(&a.scaled(3.0), &b.scaled(3.0)).unwrap().value;
        assert!((scaled - 9.0 * base).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        assert!(mse(&Matrix::zeros(1, 2), &Matrix::zeros(2, 1)).is_err());
    }
}
