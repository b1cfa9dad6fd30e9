use serde::{Deserialize, Serialize};

use super::model::{Recommender, SeqRecConfig, TrainSequence};
use crate::dataio::LeaveLastOut;
use crate::diffkit::{AdamW, AdamWConfig};
use crate::error::{MmqError, Result};
use crate::rng::Rng;

/// Users whose loss is tracked before and after training.
const PROBE_USERS: usize = 256;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecTrace {
    /// Mean BCE per optimizer step.
    pub steps: Vec<f64>,
    /// Mean of the step losses of each epoch.
    pub epochs: Vec<f64>,
    /// BCE on a fixed probe set (fixed negatives) before the first step.
    pub probe_initial: f64,
    pub probe_final: f64,
}

/// Item sequences used for training: the train history followed by the
/// train target, keeping the last `max_items + 1` items.
pub fn training_sequences(split: &LeaveLastOut, max_items: usize) -> Vec<Vec<usize>> {
    split
        .train
        .iter()
        .map(|ex| {
            let mut s = ex.history.clone();
            s.push(ex.target);
            let start = s.len().saturating_sub(max_items + 1);
            s.split_off(start)
        })
        .filter(|s| s.len() >= 2)
        .collect()
}

/// Uniform negatives per position, redrawn when they hit the positive.
pub fn sample_negatives(
    positives: &[usize],
    count: usize,
    items: usize,
    rng: &mut Rng,
) -> Vec<Vec<usize>> {
    positives
        .iter()
        .map(|&p| {
            (0..count)
                .map(|_| loop {
                    let n = rng.below(items);
                    if n != p || items < 2 {
                        break n;
                    }
                })
                .collect()
        })
        .collect()
}

fn to_example(seq: &[usize], negatives: usize, items: usize, rng: &mut Rng) -> TrainSequence {
    let inputs = seq[..seq.len() - 1].to_vec();
    let positives = seq[1..].to_vec();
    let negatives = sample_negatives(&positives, negatives, items, rng);
    TrainSequence {
        inputs,
        positives,
        negatives,
    }
}

fn probe_set(seqs: &[Vec<usize>], cfg: &SeqRecConfig, items: usize) -> Vec<TrainSequence> {
    let mut rng = Rng::derive(cfg.seed, "seqrec/probe");
    seqs.iter()
        .take(PROBE_USERS)
        .map(|s| to_example(s, cfg.negatives, items, &mut rng))
        .collect()
}

/// BCE training of tokenizer, head and (adapters or) backbone.
///
/// With adapters enabled the base backbone has no gradient entries, so the
/// optimizer leaves it untouched.
pub fn train_recommender(
    model: &mut Recommender,
    split: &LeaveLastOut,
    cfg: &SeqRecConfig,
) -> Result<RecTrace> {
    cfg.validate()?;
    if split.num_items != model.items() {
        return Err(MmqError::dim(
            "catalog size",
            model.items(),
            split.num_items,
        ));
    }
    let seqs = training_sequences(split, cfg.max_items());
    if seqs.is_empty() {
        return Err(MmqError::InvalidArgument("no training sequences".into()));
    }
    let items = model.items();
    let probe = probe_set(&seqs, cfg, items);
    let mut trace = RecTrace {
        probe_initial: model.batch_loss(&probe)?.0,
        ..Default::default()
    };
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    })?;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = Rng::derive(cfg.seed, &format!("seqrec/epoch/{epoch}"));
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_users) {
            let batch: Vec<TrainSequence> = chunk
                .iter()
                .map(|&u| to_example(&seqs[u], cfg.negatives, items, &mut rng))
                .collect();
            let (loss, grads) = match model.batch_loss(&batch) {
                Ok(r) => r,
                Err(MmqError::NonFinite(_)) => {
                    return Err(MmqError::Diverged {
                        stage: "recommender".into(),
                        step,
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || !grads.global_norm().is_finite() {
                return Err(MmqError::Diverged {
                    stage: "recommender".into(),
                    step,
                });
            }
            if cfg.warmup_steps > 0 {
                opt.set_lr(cfg.lr * ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0));
            }
            opt.step(model, &grads)?;
            trace.steps.push(loss);
            sum += loss;
            batches += 1;
            step += 1;
        }
        let mean = sum / batches.max(1) as f64;
        log::info!("recommender epoch {epoch}: bce {mean:.5}");
        trace.epochs.push(mean);
    }
    trace.probe_final = model.batch_loss(&probe)?.0;
    Ok(trace)
}
