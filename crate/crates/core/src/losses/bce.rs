use crate::error::{MmqError, Result};

#[derive(Debug, Clone)]
pub struct BceOutput {
    pub value: f64,
    /// ∂loss/∂logit per sample.
    pub grad: Vec<f64>,
}

/// Mean binary cross-entropy on logits, `max(x,0) − x·y + ln(1 + e^{−|x|})`.
pub fn bce(logits: &[f64], labels: &[f64]) -> Result<BceOutput> {
    if logits.len() != labels.len() {
        return Err(MmqError::dim("bce labels", logits.len(), labels.len()));
    }
    if logits.is_empty() {
        return Err(MmqError::InvalidArgument(
            "bce needs at least one sample".into(),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(MmqError::InvalidArgument(format!(
            "bce label must be 0 or 1, got {bad}"
        )));
    }
    let n = logits.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &y) in logits.iter().zip(labels) {
        value += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        grad.push((sigmoid(x) - y) / n);
    }
    Ok(BceOutput {
        value: value / n,
        grad,
    })
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logit_is_ln2() {
        let o = bce(&[0.0], &[1.0]).unwrap();
        assert!((o.value - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_is_tiny_and_finite() {
        let o = bce(&[20.0], &[1.0]).unwrap();
        assert!(o.value.is_finite());
        assert!((o.value - 2.061_153_6e-9).abs() < 1e-15, "{}", o.value);
        let o = bce(&[20.0, -20.0], &[1.0, 0.0]).unwrap();
        assert!(o.value < 1e-8);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let o = bce(&[800.0, -800.0], &[0.0, 1.0]).unwrap();
        assert_eq!(o.value, 800.0);
    }

    #[test]
    fn bad_label_is_rejected() {
        assert!(bce(&[0.0], &[0.5]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let xs = [-3.0, -0.2, 0.0, 1.7, 6.0];
        let ys = [0.0, 1.0, 1.0, 0.0, 1.0];
        let g = bce(&xs, &ys).unwrap().grad;
        let h = 1e-6;
        for i in 0..xs.len() {
            let mut p = xs;
            p[i] += h;
            let mut m = xs;
            m[i] -= h;
            let fd = (bce(&p, &ys).unwrap().value - bce(&m, &ys).unwrap().value) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-12) + 1e-10);
        }
    }
}
