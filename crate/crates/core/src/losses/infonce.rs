use crate::diffkit::{dot, Matrix};
use crate::error::{MmqError, Result};

#[derive(Debug, Clone)]
pub struct InfoNceOutput {
    pub value: f64,
    pub grad_anchors: Matrix,
    pub grad_positives: Matrix,
}

/// Contrastive loss with cosine similarity and in-batch negatives.
///
/// Row `i` of `anchors` is pulled toward row `i` of `positives` and pushed
/// from every other positive row; the result is the batch mean of
/// `−log softmax_i(sim(a_i, ·)/ε)`.
pub fn info_nce(anchors: &Matrix, positives: &Matrix, epsilon: f64) -> Result<InfoNceOutput> {
    anchors.check_same_shape(positives, "info_nce anchors vs positives")?;
    let b = anchors.rows();
    if b == 0 {
        return Err(MmqError::InvalidArgument(
            "info_nce needs a non-empty batch".into(),
        ));
    }
    if !(epsilon > 0.0) {
        return Err(MmqError::InvalidArgument(format!(
            "temperature must be > 0, got {epsilon}"
        )));
    }
    let unit = |m: &Matrix, what: &str| -> Result<(Matrix, Vec<f64>)> {
        let mut out = m.clone();
        let mut norms = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let n = dot(m.row(r), m.row(r)).sqrt();
            if !(n > 0.0) {
                return Err(MmqError::InvalidArgument(format!(
                    "info_nce: {what} row {r} has zero norm under cosine similarity"
                )));
            }
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok((out, norms))
    };
    let (a_hat, a_norm) = unit(anchors, "anchor")?;
    let (p_hat, p_norm) = unit(positives, "positive")?;
    let sim = a_hat.matmul_t(&p_hat);

    // g_ij = ∂L/∂sim_ij = (softmax_ij − δ_ij) / (B·ε)
    let mut g = Matrix::zeros(b, b);
    let mut value = 0.0;
    for i in 0..b {
        let logits: Vec<f64> = sim.row(i).iter().map(|s| s / epsilon).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        let lse = mx + z.ln();
        value += lse - logits[i];
        for j in 0..b {
            let p = (logits[j] - lse).exp();
            let t = if i == j { 1.0 } else { 0.0 };
            g.set(i, j, (p - t) / (b as f64 * epsilon));
        }
    }
    value /= b as f64;

    // sim_ij = â_i·p̂_j; ∂sim/∂a_i = (p̂_j − sim_ij â_i)/‖a_i‖, symmetric for p_j.
    let gp = g.matmul(&p_hat);
    let ga = g.t_matmul(&a_hat);
    let dim = anchors.cols();
    let mut grad_anchors = Matrix::zeros(b, dim);
    let mut grad_positives = Matrix::zeros(b, dim);
    for i in 0..b {
        let row_coef: f64 = (0..b).map(|j| g.get(i, j) * sim.get(i, j)).sum();
        let col_coef: f64 = (0..b).map(|j| g.get(j, i) * sim.get(j, i)).sum();
        for d in 0..dim {
            grad_anchors.set(
                i,
                d,
                (gp.get(i, d) - row_coef * a_hat.get(i, d)) / a_norm[i],
            );
            grad_positives.set(
                i,
                d,
                (ga.get(i, d) - col_coef * p_hat.get(i, d)) / p_norm[i],
            );
        }
    }
    Ok(InfoNceOutput {
        value,
        grad_anchors,
        grad_positives,
    })
}
