use serde::{Deserialize, Serialize};

use super::codebook::{residual_quantize, Codebook};
use super::recon::{recon_registry, ReconContext};
use crate::dataio::{Modality, PerModality};
use crate::diffkit::{GradStore, Matrix, MlpParams, ParamSet};
use crate::error::{MmqError, Result};
use crate::losses::{info_nce, rq_commitment_loss, KernelConfig, MmdEstimator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Commitment weight inside each residual-quantization loss.
    pub alpha: f64,
    /// Alignment weight.
    pub beta: f64,
    /// Residual-quantization weight.
    pub gamma: f64,
    /// Reconstruction weight.
    pub recon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1e-3,
            gamma: 1.0,
            recon: 1.0,
        }
    }
}

/// Encoder, decoder and residual codebooks of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub codebooks: Vec<Codebook>,
}

impl Branch {
    pub fn code_dim(&self) -> usize {
        self.encoder.d_out()
    }

    pub fn levels(&self) -> usize {
        self.codebooks.len()
    }

    fn validate(&self, m: Modality) -> Result<()> {
        let d = self.code_dim();
        if self.decoder.d_in() != d {
            return Err(MmqError::dim(
                format!("modality {m} decoder input"),
                d,
                self.decoder.d_in(),
            ));
        }
        if self.decoder.d_out() != self.encoder.d_in() {
            return Err(MmqError::dim(
                format!("modality {m} decoder output"),
                self.encoder.d_in(),
                self.decoder.d_out(),
            ));
        }
        if self.codebooks.is_empty() {
            return Err(MmqError::InvalidArgument(format!(
                "modality {m} has no codebook levels"
            )));
        }
        for cb in &self.codebooks {
            if cb.dim() != d {
                return Err(MmqError::dim(
                    format!("modality {m} codebook level {}", cb.level),
                    d,
                    cb.dim(),
                ));
            }
        }
        Ok(())
    }

    /// Encodes rows and quantizes them greedily level by level.
    pub fn encode(&self, s: &Matrix) -> Result<Encoded> {
        let z = self.encoder.apply(s)?;
        let mut sids = Vec::with_capacity(z.rows());
        let mut zhat = Matrix::zeros(z.rows(), z.cols());
        for i in 0..z.rows() {
            let (ids, q) = residual_quantize(z.row(i), &self.codebooks)?;
            zhat.row_mut(i).copy_from_slice(&q);
            sids.push(ids);
        }
        Ok(Encoded { z, sids, zhat })
    }
}

/// Encoder outputs, per-row ids and quantized embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub z: Matrix,
    pub sids: Vec<Vec<usize>>,
    pub zhat: Matrix,
}

/// Three-branch residual quantizer with its loss settings.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerModel {
    pub branches: PerModality<Branch>,
    pub kernels: PerModality<KernelConfig>,
    pub estimator: MmdEstimator,
    pub weights: LossWeights,
    /// InfoNCE temperature.
    pub epsilon: f64,
    /// Registered name of the reconstruction loss.
    pub recon: String,
}

impl QuantizerModel {
    pub fn validate(&self) -> Result<()> {
        for (m, b) in self.branches.iter() {
            b.validate(m)?;
        }
        if !(self.epsilon > 0.0) {
            return Err(MmqError::InvalidArgument(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        recon_registry().create(&self.recon).map(|_| ())
    }

    pub fn encode(&self, modality: Modality, s: &Matrix) -> Result<Encoded> {
        self.branches[modality].encode(s)
    }
}

fn param_name(m: Modality, part: &str, inner: &str) -> String {
    format!("{m}.{part}.{inner}")
}

impl ParamSet for QuantizerModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        for (m, b) in self.branches.iter() {
            b.encoder
                .visit_params(&mut |n, p| f(&param_name(m, "enc", n), p));
            b.decoder
                .visit_params(&mut |n, p| f(&param_name(m, "dec", n), p));
            for cb in &b.codebooks {
                f(&param_name(m, "code", &cb.level.to_string()), &cb.codes);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for m in Modality::ALL {
            let b = &mut self.branches[m];
            b.encoder
                .visit_params_mut(&mut |n, p| f(&param_name(m, "enc", n), p));
            b.decoder
                .visit_params_mut(&mut |n, p| f(&param_name(m, "dec", n), p));
            for cb in &mut b.codebooks {
                f(&param_name(m, "code", &cb.level.to_string()), &mut cb.codes);
            }
        }
    }
}

/// Stop-gradient values and discrete choices of one branch for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSnapshot {
    /// `sids[l][i]`: code chosen at level `l` for row `i`.
    pub sids: Vec<Vec<usize>>,
    /// Residual entering each level.
    pub residuals: Vec<Matrix>,
    /// Code chosen at each level, gathered per row.
    pub codes: Vec<Matrix>,
    /// `ẑ − z`, added to the encoder output on the decoder path.
    pub st_offset: Matrix,
}

/// Everything the batch loss treats as constant.
///
/// Taking a snapshot at the current parameters and then evaluating
/// [`batch_loss`] gives the training loss. Holding a snapshot fixed while the
/// parameters move gives a smooth function whose gradient is the one used for
/// training, which is what finite differences can check.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantSnapshot {
    pub branches: PerModality<BranchSnapshot>,
}

pub fn take_snapshot(model: &QuantizerModel, batch: &PerModality<Matrix>) -> Result<QuantSnapshot> {
    let branches = PerModality::try_from_fn(|m| -> Result<BranchSnapshot> {
        let b = &model.branches[m];
        let enc = b.encode(&batch[m])?;
        let mut residual = enc.z.clone();
        let mut residuals = Vec::with_capacity(b.levels());
        let mut codes = Vec::with_capacity(b.levels());
        let mut sids = Vec::with_capacity(b.levels());
        for (l, cb) in b.codebooks.iter().enumerate() {
            let ids: Vec<usize> = enc.sids.iter().map(|s| s[l]).collect();
            let chosen = cb.codes.select_rows(&ids);
            residuals.push(residual.clone());
            residual.sub_assign(&chosen);
            codes.push(chosen);
            sids.push(ids);
        }
        Ok(BranchSnapshot {
            sids,
            residuals,
            codes,
            st_offset: enc.zhat.sub(&enc.z),
        })
    })?;
    Ok(QuantSnapshot { branches })
}

/// Per-term values of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    /// Sum over modalities.
    pub recon: f64,
    pub align: f64,
    /// Sum over modalities of the residual-quantization losses.
    pub commitment: f64,
    pub total: f64,
}

fn gather_zhat(b: &Branch, snap: &BranchSnapshot) -> Matrix {
    let rows = snap.st_offset.rows();
    let mut zhat = Matrix::zeros(rows, b.code_dim());
    for (cb, ids) in b.codebooks.iter().zip(&snap.sids) {
        for (i, &s) in ids.iter().enumerate() {
            for (acc, c) in zhat.row_mut(i).iter_mut().zip(cb.codes.row(s)) {
                *acc += c;
            }
        }
    }
    zhat
}

fn scatter_codes(
    grads: &mut GradStore,
    m: Modality,
    b: &Branch,
    ids: &[Vec<usize>],
    level_grads: &[&Matrix],
) {
    for ((cb, ids), g) in b.codebooks.iter().zip(ids).zip(level_grads) {
        let mut full = Matrix::zeros(cb.size(), cb.dim());
        for (i, &s) in ids.iter().enumerate() {
            for (dst, v) in full.row_mut(s).iter_mut().zip(g.row(i)) {
                *dst += v;
            }
        }
        grads.accumulate(&param_name(m, "code", &cb.level.to_string()), &full);
    }
}

/// Weighted quantizer loss of a batch and its gradient for every parameter.
///
/// The decoder sees `z + (ẑ − z)` with the offset held constant, so its input
/// gradient reaches the encoder unchanged. Codes receive gradient from the
/// codebook term and the alignment term; residuals, and through them the
/// encoder, from the commitment term. Earlier codes in the residual chain are
/// constants.
pub fn batch_loss(
    model: &QuantizerModel,
    batch: &PerModality<Matrix>,
    snap: &QuantSnapshot,
) -> Result<(LossParts, GradStore)> {
    let w = model.weights;
    let recon_fn = recon_registry().create(&model.recon)?;
    let mut grads = GradStore::new();
    let mut parts = LossParts::default();
    let mut zhats = PerModality::from_fn(|_| Matrix::zeros(0, 0));

    for m in Modality::ALL {
        let b = &model.branches[m];
        let sb = &snap.branches[m];
        let s = &batch[m];
        let (z, enc_cache) = b.encoder.forward(s)?;
        sb.st_offset.check_same_shape(&z, "snapshot offset")?;

        let dec_in = z.add(&sb.st_offset);
        let (s_hat, dec_cache) = b.decoder.forward(&dec_in)?;
        let ctx = ReconContext {
            kernel: model.kernels[m],
            estimator: model.estimator,
        };
        let (recon, g_recon) = recon_fn.loss(s, &s_hat, &ctx)?;
        parts.recon += recon;
        let dec_back = b.decoder.backward(&dec_cache, &g_recon.scaled(w.recon))?;
        grads.merge_prefixed(&format!("{m}.dec."), dec_back.grads);
        let mut g_z = dec_back.input_grad;

        // Live residuals with constant earlier codes.
        let mut live_res = Vec::with_capacity(b.levels());
        let mut running = z.clone();
        for c in &sb.codes {
            live_res.push(running.clone());
            running.sub_assign(c);
        }
        let live_codes: Vec<Matrix> = b
            .codebooks
            .iter()
            .zip(&sb.sids)
            .map(|(cb, ids)| cb.codes.select_rows(ids))
            .collect();
        let code_side = rq_commitment_loss(&sb.residuals, &live_codes, w.alpha)?;
        let residual_side = rq_commitment_loss(&live_res, &sb.codes, w.alpha)?;
        parts.commitment += code_side.codebook_term + residual_side.commitment_term;
        for gr in &residual_side.grad_residuals {
            g_z.axpy(w.gamma, gr);
        }
        let scaled: Vec<Matrix> = code_side
            .grad_codes
            .iter()
            .map(|g| g.scaled(w.gamma))
            .collect();
        scatter_codes(
            &mut grads,
            m,
            b,
            &sb.sids,
            &scaled.iter().collect::<Vec<_>>(),
        );

        let enc_back = b.encoder.backward(&enc_cache, &g_z)?;
        grads.merge_prefixed(&format!("{m}.enc."), enc_back.grads);
        zhats[m] = gather_zhat(b, sb);
    }

    if w.beta != 0.0 {
        use Modality::{Collaborative as C, Text as T, Visual as V};
        let mut g_anchor = Matrix::zeros(zhats[C].rows(), zhats[C].cols());
        for other in [T, V] {
            let out = info_nce(&zhats[C], &zhats[other], model.epsilon)?;
            parts.align += out.value;
            g_anchor.add_assign(&out.grad_anchors);
            let g = out.grad_positives.scaled(w.beta);
            let b = &model.branches[other];
            let per_level: Vec<&Matrix> = (0..b.levels()).map(|_| &g).collect();
            scatter_codes(&mut grads, other, b, &snap.branches[other].sids, &per_level);
        }
        g_anchor.scale(w.beta);
        let b = &model.branches[C];
        let per_level: Vec<&Matrix> = (0..b.levels()).map(|_| &g_anchor).collect();
        scatter_codes(&mut grads, C, b, &snap.branches[C].sids, &per_level);
    }

    parts.total = w.recon * parts.recon + w.beta * parts.align + w.gamma * parts.commitment;
    Ok((parts, grads))
}
