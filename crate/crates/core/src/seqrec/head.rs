use crate::dataio::{Modality, PerModality};
use crate::diffkit::{dot, Activation, GradStore, Matrix, MlpCache, MlpParams, ParamSet};
use crate::error::{MmqError, Result};
use crate::rng::Rng;

use super::tokenizer::{ItemCatalog, ItemTokenizer};

/// Number of fusion weights: `(w_x, w_c, w_t, w_v)`.
pub const FUSION_WEIGHTS: usize = 4;

/// Frequency-gated scoring head.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    /// `g: q″ → (w_x, w_c, w_t, w_v)`.
    pub gate: MlpParams,
    /// `E_x`, one row per catalog item.
    pub target: Matrix,
    /// Normalize the four weights with a softmax.
    pub softmax: bool,
}

pub struct GateCache {
    mlp: MlpCache,
    weights: Matrix,
}

impl FusionHead {
    /// The gate's output bias starts at `1/4` per branch so that every score
    /// branch contributes from the first step. Hidden biases start at `0.1`:
    /// the least frequent item has `q″ = 0`, which would otherwise sit every
    /// hidden unit exactly on the relu kink.
    pub fn init(
        items: usize,
        d_model: usize,
        gate_hidden: usize,
        softmax: bool,
        rng: &mut Rng,
    ) -> Self {
        let dims = if gate_hidden > 0 {
            vec![1, gate_hidden, FUSION_WEIGHTS]
        } else {
            vec![1, FUSION_WEIGHTS]
        };
        let mut gate = MlpParams::init(&dims, Activation::Identity, rng);
        let n = gate.layers.len();
        for (i, layer) in gate.layers.iter_mut().enumerate() {
            layer.bias.fill(if i + 1 == n {
                1.0 / FUSION_WEIGHTS as f64
            } else {
                0.1
            });
        }
        FusionHead {
            gate,
            target: Matrix::randn(items, d_model, 0.1, rng),
            softmax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gate.d_in() != 1 || self.gate.d_out() != FUSION_WEIGHTS {
            return Err(MmqError::dim(
                "fusion gate shape",
                format!("1 -> {FUSION_WEIGHTS}"),
                format!("{} -> {}", self.gate.d_in(), self.gate.d_out()),
            ));
        }
        Ok(())
    }

    /// Fusion weights for each frequency value, `n × 4`.
    pub fn weights(&self, q: &[f64]) -> Result<Matrix> {
        Ok(self.gate_forward(q)?.0)
    }

    pub fn gate_forward(&self, q: &[f64]) -> Result<(Matrix, GateCache)> {
        let input = Matrix::new(q.len(), 1, q.to_vec())?;
        let (mut w, mlp) = self.gate.forward(&input)?;
        if self.softmax {
            for r in 0..w.rows() {
                let row = w.row_mut(r);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
        }
        Ok((w.clone(), GateCache { mlp, weights: w }))
    }

    pub fn gate_backward(
        &self,
        cache: &GateCache,
        d_weights: &Matrix,
        grads: &mut GradStore,
    ) -> Result<()> {
        let mut d_raw = d_weights.clone();
        if self.softmax {
            for r in 0..d_raw.rows() {
                let w = cache.weights.row(r);
                let row = d_raw.row_mut(r);
                let s: f64 = w.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                for (d, wi) in row.iter_mut().zip(w) {
                    *d = wi * (*d - s);
                }
            }
        }
        let b = self.gate.backward(&cache.mlp, &d_raw)?;
        grads.merge_prefixed("gate.", b.grads);
        Ok(())
    }
}

impl ParamSet for FusionHead {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.gate
            .visit_params(&mut |n, m| f(&format!("gate.{n}"), m));
        f("target", &self.target);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.gate
            .visit_params_mut(&mut |n, m| f(&format!("gate.{n}"), m));
        f("target", &mut self.target);
    }
}

/// `w_x·⟨o, e_x⟩ + Σ_j w_j·⟨o, p_j⟩`.
pub fn combine_scores(o: &[f64], weights: &[f64], target: &[f64], proj: [&[f64]; 3]) -> f64 {
    weights[0] * dot(o, target)
        + (0..3)
            .map(|j| weights[1 + j] * dot(o, proj[j]))
            .sum::<f64>()
}

/// Score of one target item for the hidden state `o`.
pub fn fused_score(
    o: &[f64],
    item: usize,
    head: &FusionHead,
    tokenizer: &ItemTokenizer,
    catalog: &ItemCatalog,
) -> Result<f64> {
    if item >= head.target.rows() || item >= catalog.items() {
        return Err(MmqError::Missing(format!(
            "target embedding for item {item}"
        )));
    }
    let (proj, _) = tokenizer.project(catalog, &[item])?;
    for m in Modality::ALL {
        if proj[m].cols() != o.len() {
            return Err(MmqError::dim(
                format!("projection {m} vs hidden state"),
                o.len(),
                proj[m].cols(),
            ));
        }
    }
    if head.target.cols() != o.len() {
        return Err(MmqError::dim(
            "target table vs hidden state",
            o.len(),
            head.target.cols(),
        ));
    }
    let w = head.weights(&[catalog.frequency[item]])?;
    Ok(combine_scores(
        o,
        w.row(0),
        head.target.row(item),
        [proj.c.row(0), proj.t.row(0), proj.v.row(0)],
    ))
}

/// Per-item matrix `C` with `score(o, i) = ⟨o, C[i]⟩` for every catalog item.
pub fn combined_item_matrix(
    head: &FusionHead,
    proj: &PerModality<Matrix>,
    weights: &Matrix,
) -> Matrix {
    let (n, d) = head.target.shape();
    let mut c = Matrix::zeros(n, d);
    for i in 0..n {
        let w = weights.row(i);
        let row = c.row_mut(i);
        for k in 0..d {
            row[k] = w[0] * head.target.get(i, k)
                + w[1] * proj.c.get(i, k)
                + w[2] * proj.t.get(i, k)
                + w[3] * proj.v.get(i, k);
        }
    }
    c
}
