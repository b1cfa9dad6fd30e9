use serde::{Deserialize, Serialize};

use super::codebook::{kmeans_pp, Codebook};
use super::model::{batch_loss, take_snapshot, Branch, LossParts, LossWeights, QuantizerModel};
use crate::dataio::{EmbeddingTable, Modality, PerModality};
use crate::diffkit::{Activation, AdamW, AdamWConfig, Matrix, MlpParams};
use crate::error::{MmqError, Result};
use crate::losses::{MmdEstimator, SigmaPolicy};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    pub codebook_size: PerModality<usize>,
    pub levels: PerModality<usize>,
    pub code_dim: usize,
    pub hidden: usize,
    pub weights: LossWeights,
    pub epsilon: f64,
    /// Registered reconstruction loss name.
    pub recon: String,
    pub sigma: SigmaPolicy,
    pub estimator: MmdEstimator,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub kmeans_iters: usize,
    /// Std of the noise added to a revived code.
    pub revive_noise: f64,
    pub seed: u64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            codebook_size: PerModality::new(32, 32, 32),
            levels: PerModality::new(3, 3, 3),
            code_dim: 16,
            hidden: 64,
            weights: LossWeights::default(),
            epsilon: 0.1,
            recon: "mmd".into(),
            sigma: SigmaPolicy::MEDIAN,
            estimator: MmdEstimator::Biased,
            epochs: 30,
            batch_size: 128,
            lr: 2e-3,
            weight_decay: 0.0,
            kmeans_iters: 10,
            revive_noise: 0.01,
            seed: 0,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MmqError::Config(m));
        if let Some((m, s)) = self.codebook_size.iter().find(|(_, &s)| s < 2) {
            return bad(format!(
                "codebook_size of modality {m} must be >= 2, got {s}"
            ));
        }
        if let Some((m, _)) = self.levels.iter().find(|(_, &l)| l == 0) {
            return bad(format!("levels of modality {m} must be >= 1"));
        }
        if self.code_dim == 0 || self.hidden == 0 {
            return bad("code_dim and hidden must be positive".into());
        }
        let w = self.weights;
        if [w.alpha, w.beta, w.gamma, w.recon]
            .iter()
            .any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return bad(format!("loss weights must be finite and >= 0: {w:?}"));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        super::recon_registry().create(&self.recon).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochLosses {
    pub recon: f64,
    pub align: f64,
    pub commitment: f64,
    pub total: f64,
    pub revived_codes: usize,
}

/// Mean batch losses per epoch, in order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochLosses>,
}

fn check_tables(tables: &PerModality<EmbeddingTable>) -> Result<usize> {
    let n = tables.c.rows();
    for (m, t) in tables.iter() {
        if t.rows() != n {
            return Err(MmqError::dim(
                format!("rows of modality {m} table"),
                n,
                t.rows(),
            ));
        }
        if !t.data.is_finite() {
            return Err(MmqError::NonFinite(format!("modality {m} table")));
        }
    }
    if n < 2 {
        return Err(MmqError::InvalidArgument(format!(
            "need at least 2 items, got {n}"
        )));
    }
    Ok(n)
}

/// Mini-batches over a shuffled order; a trailing single row joins the previous batch.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let k = out.len();
        let start = (k - 2) * size;
        out.truncate(k - 2);
        out.push(&order[start..]);
    }
    out
}

fn select(tables: &PerModality<EmbeddingTable>, idx: &[usize]) -> PerModality<Matrix> {
    tables.map(|_, t| t.data.select_rows(idx))
}

/// Fresh, untrained model with codebooks seeded by k-means++ on the encoder
/// outputs of every item, level by level on the residuals.
pub fn init_model(
    tables: &PerModality<EmbeddingTable>,
    cfg: &QuantizerConfig,
) -> Result<QuantizerModel> {
    cfg.validate()?;
    check_tables(tables)?;
    let branches = PerModality::try_from_fn(|m| -> Result<Branch> {
        let mut rng = Rng::derive(cfg.seed, &format!("quantizer/init/{m}"));
        let dim = tables[m].dim();
        let encoder = MlpParams::init(
            &[dim, cfg.hidden, cfg.code_dim],
            Activation::Identity,
            &mut rng,
        );
        let decoder = MlpParams::init(
            &[cfg.code_dim, cfg.hidden, dim],
            Activation::Identity,
            &mut rng,
        );
        let mut residual = encoder.apply(&tables[m].data)?;
        let mut codebooks = Vec::with_capacity(cfg.levels[m]);
        for level in 0..cfg.levels[m] {
            let codes = kmeans_pp(&residual, cfg.codebook_size[m], cfg.kmeans_iters, &mut rng)?;
            let cb = Codebook::new(level, codes)?;
            for i in 0..residual.rows() {
                let sid = cb.nearest(residual.row(i))?;
                let code = cb.codes.row(sid).to_vec();
                for (r, c) in residual.row_mut(i).iter_mut().zip(code) {
                    *r -= c;
                }
            }
            codebooks.push(cb);
        }
        Ok(Branch {
            encoder,
            decoder,
            codebooks,
        })
    })?;

    // Bandwidth from the first training batch, frozen afterwards.
    let mut order: Vec<usize> = (0..tables.c.rows()).collect();
    Rng::derive(cfg.seed, "quantizer/epoch/0").shuffle(&mut order);
    let first = &order[..cfg.batch_size.min(order.len())];
    let kernels =
        PerModality::try_from_fn(|m| cfg.sigma.resolve(&tables[m].data.select_rows(first)))?;

    let model = QuantizerModel {
        branches,
        kernels,
        estimator: cfg.estimator,
        weights: cfg.weights,
        epsilon: cfg.epsilon,
        recon: cfg.recon.clone(),
    };
    model.validate()?;
    Ok(model)
}

/// Reseeds every code unused since the last reset to the residual of a random
/// item at that level plus Gaussian noise. Used codes are left untouched.
/// Returns the number of revived codes.
pub fn revive_dead_codes(
    model: &mut QuantizerModel,
    tables: &PerModality<EmbeddingTable>,
    noise: f64,
    rng: &mut Rng,
) -> Result<usize> {
    let mut revived = 0;
    for m in Modality::ALL {
        let branch = &mut model.branches[m];
        if branch
            .codebooks
            .iter()
            .all(|cb| cb.usage.iter().all(|&u| u > 0))
        {
            continue;
        }
        let mut residual = branch.encoder.apply(&tables[m].data)?;
        for cb in &mut branch.codebooks {
            let n = residual.rows();
            let d = cb.dim();
            let dead: Vec<usize> = (0..cb.size()).filter(|&k| cb.usage[k] == 0).collect();
            // Residuals for the next level use the codebook as it was.
            let mut next = residual.clone();
            for i in 0..n {
                let sid = cb.nearest(residual.row(i))?;
                for (r, c) in next.row_mut(i).iter_mut().zip(cb.codes.row(sid)) {
                    *r -= c;
                }
            }
            for k in dead {
                let src = rng.below(n);
                for j in 0..d {
                    let v = residual.get(src, j) + noise * rng.normal();
                    cb.codes.set(k, j, v);
                }
                revived += 1;
            }
            residual = next;
        }
    }
    Ok(revived)
}

/// Trains the three-branch quantizer with mini-batch AdamW.
pub fn train_mm_rqvae(
    tables: &PerModality<EmbeddingTable>,
    cfg: &QuantizerConfig,
) -> Result<(QuantizerModel, TrainTrace)> {
    let mut model = init_model(tables, cfg)?;
    let trace = train_from(&mut model, tables, cfg)?;
    Ok((model, trace))
}

/// Continues training an existing model for `cfg.epochs` epochs.
pub fn train_from(
    model: &mut QuantizerModel,
    tables: &PerModality<EmbeddingTable>,
    cfg: &QuantizerConfig,
) -> Result<TrainTrace> {
    let n = check_tables(tables)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    })?;
    let mut revive_rng = Rng::derive(cfg.seed, "quantizer/revive");
    let mut trace = TrainTrace::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        Rng::derive(cfg.seed, &format!("quantizer/epoch/{epoch}")).shuffle(&mut order);
        for m in Modality::ALL {
            model.branches[m]
                .codebooks
                .iter_mut()
                .for_each(Codebook::reset_usage);
        }
        let mut sum = LossParts::default();
        let groups = batches(&order, cfg.batch_size);
        for idx in &groups {
            let x = select(tables, idx);
            let snap = take_snapshot(model, &x)?;
            for m in Modality::ALL {
                for (cb, ids) in model.branches[m]
                    .codebooks
                    .iter_mut()
                    .zip(&snap.branches[m].sids)
                {
                    ids.iter().for_each(|&s| cb.usage[s] += 1);
                }
            }
            let (parts, grads) = batch_loss(model, &x, &snap)?;
            if !parts.total.is_finite() {
                return Err(MmqError::Diverged {
                    stage: "quantizer".into(),
                    step,
                });
            }
            opt.step(model, &grads)?;
            sum.recon += parts.recon;
            sum.align += parts.align;
            sum.commitment += parts.commitment;
            sum.total += parts.total;
            step += 1;
        }
        let k = groups.len() as f64;
        let revived = revive_dead_codes(model, tables, cfg.revive_noise, &mut revive_rng)?;
        let e = EpochLosses {
            recon: sum.recon / k,
            align: sum.align / k,
            commitment: sum.commitment / k,
            total: sum.total / k,
            revived_codes: revived,
        };
        log::debug!("quantizer epoch {epoch}: {e:?}");
        trace.epochs.push(e);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::TableTag;

    fn toy_tables(n: usize, seed: u64) -> PerModality<EmbeddingTable> {
        let mut rng = Rng::new(seed);
        let latent = Matrix::randn(n, 3, 1.0, &mut rng);
        PerModality::from_fn(|m| {
            let d = [4, 6, 6][m.index()];
            let mix = Matrix::randn(d, 3, 0.6, &mut rng);
            let mut e = latent.matmul_t(&mix);
            e.add_assign(&Matrix::randn(n, d, 0.05, &mut rng));
            EmbeddingTable::new(TableTag::Modality(m), e, "toy").unwrap()
        })
    }

    fn toy_cfg() -> QuantizerConfig {
        QuantizerConfig {
            codebook_size: PerModality::new(8, 8, 8),
            levels: PerModality::new(2, 2, 2),
            code_dim: 4,
            hidden: 8,
            batch_size: 16,
            epochs: 40,
            lr: 5e-3,
            ..Default::default()
        }
    }

    #[test]
    fn batching_never_leaves_a_single_row() {
        let order: Vec<usize> = (0..33).collect();
        let b = batches(&order, 16);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![16, 17]);
        assert_eq!(batches(&order[..32], 16).len(), 2);
    }

    #[test]
    fn commitment_only_training_halves_the_loss() {
        let tables = toy_tables(64, 1);
        let cfg = QuantizerConfig {
            weights: LossWeights {
                alpha: 1.0,
                beta: 0.0,
                gamma: 1.0,
                recon: 0.0,
            },
            ..toy_cfg()
        };
        let (_, trace) = train_mm_rqvae(&tables, &cfg).unwrap();
        let first = trace.epochs[0].commitment;
        let last = trace.epochs.last().unwrap().commitment;
        assert!(last <= 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn full_loss_reduces_alignment() {
        let tables = toy_tables(128, 2);
        let cfg = QuantizerConfig {
            weights: LossWeights {
                beta: 0.1,
                ..Default::default()
            },
            ..toy_cfg()
        };
        let (_, trace) = train_mm_rqvae(&tables, &cfg).unwrap();
        let first = trace.epochs[0].align;
        let last = trace.epochs.last().unwrap().align;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let tables = toy_tables(40, 3);
        let cfg = QuantizerConfig {
            epochs: 3,
            ..toy_cfg()
        };
        let (a, ta) = train_mm_rqvae(&tables, &cfg).unwrap();
        let (b, tb) = train_mm_rqvae(&tables, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn revival_leaves_used_codes_alone() {
        let tables = toy_tables(40, 4);
        let mut model = init_model(&tables, &toy_cfg()).unwrap();
        for m in Modality::ALL {
            for cb in &mut model.branches[m].codebooks {
                for (k, u) in cb.usage.iter_mut().enumerate() {
                    *u = (k % 2) as u64;
                }
            }
        }
        let before = model.clone();
        let revived = revive_dead_codes(&mut model, &tables, 0.01, &mut Rng::new(0)).unwrap();
        assert_eq!(revived, 3 * 2 * 4);
        for m in Modality::ALL {
            for (a, b) in before.branches[m]
                .codebooks
                .iter()
                .zip(&model.branches[m].codebooks)
            {
                for k in 0..a.size() {
                    if a.usage[k] > 0 {
                        assert_eq!(a.codes.row(k), b.codes.row(k));
                    } else {
                        assert_ne!(a.codes.row(k), b.codes.row(k));
                    }
                }
            }
        }
    }

    #[test]
    fn unknown_recon_is_a_config_error() {
        let cfg = QuantizerConfig {
            recon: "huber".into(),
            ..toy_cfg()
        };
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    }
}
