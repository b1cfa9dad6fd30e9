use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneConfig};
use super::head::{combined_item_matrix, FusionHead, FUSION_WEIGHTS};
use super::tokenizer::{
    sid_init_registry, CodeEmbeddingInit, ItemCatalog, ItemTokenizer, TokenMode,
};
use crate::dataio::{Modality, PerModality};
use crate::diffkit::{dot, GradStore, Matrix, ParamSet};
use crate::error::{MmqError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeqRecConfig {
    pub backbone: BackboneConfig,
    pub token_mode: TokenMode,
    /// Hidden width of the token fusion MLP; `0` makes it a single layer.
    pub fuse_hidden: usize,
    pub gate_hidden: usize,
    pub fusion_softmax: bool,
    /// Registered name of the semantic-ID embedding initialisation.
    pub init_sids: String,
    pub negatives: usize,
    pub epochs: usize,
    /// Users per optimizer step.
    pub batch_users: usize,
    pub lr: f64,
    /// Linear learning-rate ramp over the first steps.
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for SeqRecConfig {
    fn default() -> Self {
        SeqRecConfig {
            backbone: BackboneConfig::default(),
            token_mode: TokenMode::Fused,
            fuse_hidden: 128,
            gate_hidden: 16,
            fusion_softmax: false,
            init_sids: "code-embeddings".into(),
            negatives: 4,
            epochs: 3,
            batch_users: 16,
            lr: 1e-3,
            warmup_steps: 0,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl SeqRecConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        sid_init_registry().create(&self.init_sids)?;
        if self.negatives == 0 {
            return Err(MmqError::Config("negatives must be >= 1".into()));
        }
        if self.batch_users == 0 {
            return Err(MmqError::Config("batch_users must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(MmqError::Config(format!(
                "lr must be finite and > 0, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(MmqError::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.backbone.max_len < self.token_mode.tokens_per_item() {
            return Err(MmqError::Config("max_len shorter than one item".into()));
        }
        Ok(())
    }

    /// Longest item history that fits in the backbone context.
    pub fn max_items(&self) -> usize {
        self.backbone.max_len / self.token_mode.tokens_per_item()
    }
}

/// Tokenizer, backbone and head over a frozen item catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct Recommender {
    pub tokenizer: ItemTokenizer,
    pub backbone: Backbone,
    pub head: FusionHead,
    pub catalog: ItemCatalog,
}

/// One training sequence: at position `t` the model reads `inputs[..=t]`
/// and scores `positives[t]` against `negatives[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSequence {
    pub inputs: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
}

impl TrainSequence {
    fn terms(&self) -> usize {
        self.positives.len() + self.negatives.iter().map(Vec::len).sum::<usize>()
    }
}

/// Trainable-parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub backbone_total: usize,
    pub backbone_trainable: usize,
    pub model_total: usize,
    pub model_trainable: usize,
}

impl ParameterReport {
    /// Trainable share of the backbone (base plus adapters).
    pub fn backbone_fraction(&self) -> f64 {
        self.backbone_trainable as f64 / self.backbone_total.max(1) as f64
    }

    pub fn model_fraction(&self) -> f64 {
        self.model_trainable as f64 / self.model_total.max(1) as f64
    }
}

/// Precomputed tokens and scoring matrix for ranking.
#[derive(Debug, Clone)]
pub struct InferenceTables {
    /// `items·tokens_per_item × D_model`, item-major.
    pub tokens: Matrix,
    /// `score(o, i) = ⟨o, combined[i]⟩`.
    pub combined: Matrix,
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit.
pub fn bce_with_logit(score: f64, label: f64) -> f64 {
    stable_softplus(score) - label * score
}

impl Recommender {
    /// `codes[m][l]` are the exported code embeddings used to initialise
    /// the semantic-ID tables.
    pub fn init(
        config: &SeqRecConfig,
        catalog: ItemCatalog,
        codes: &PerModality<Vec<Matrix>>,
    ) -> Result<Self> {
        config.validate()?;
        let sid_init = sid_init_registry().create(&config.init_sids)?;
        let d = config.backbone.d_model;
        let dims = catalog.tables.map(|_, t| t.cols());
        let mut rng = Rng::derive(config.seed, "seqrec/init/tokenizer");
        let mut sid_rng = Rng::derive(config.seed, "seqrec/init/sids");
        // Id tables are drawn from their own stream afterwards so that every
        // other initial weight is the same whichever init is chosen.
        let mut tokenizer = ItemTokenizer::init(
            config.token_mode,
            dims,
            d,
            config.fuse_hidden,
            codes,
            &CodeEmbeddingInit,
            &mut rng,
        )?;
        for m in Modality::ALL {
            for (tab, c) in tokenizer.sid_tables[m].iter_mut().zip(&codes[m]) {
                *tab = sid_init.init(c, &mut sid_rng);
            }
        }
        let backbone = Backbone::init(
            config.backbone,
            &mut Rng::derive(config.seed, "seqrec/init/backbone"),
        )?;
        let head = FusionHead::init(
            catalog.items(),
            d,
            config.gate_hidden,
            config.fusion_softmax,
            &mut Rng::derive(config.seed, "seqrec/init/head"),
        );
        let model = Recommender {
            tokenizer,
            backbone,
            head,
            catalog,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.head.validate()?;
        let d = self.backbone.config.d_model;
        if self.tokenizer.d_model() != d {
            return Err(MmqError::dim(
                "tokenizer width",
                d,
                self.tokenizer.d_model(),
            ));
        }
        if self.head.target.shape() != (self.catalog.items(), d) {
            return Err(MmqError::dim(
                "target table shape",
                format!("{}x{d}", self.catalog.items()),
                format!("{:?}", self.head.target.shape()),
            ));
        }
        Ok(())
    }

    pub fn items(&self) -> usize {
        self.catalog.items()
    }

    pub fn parameter_report(&self) -> ParameterReport {
        let backbone_total = self.backbone.param_count();
        let backbone_trainable = self.backbone.trainable_count();
        let others = self.tokenizer.param_count() + self.head.param_count();
        ParameterReport {
            backbone_total,
            backbone_trainable,
            model_total: backbone_total + others,
            model_trainable: backbone_trainable + others,
        }
    }

    /// Summed BCE over every scored pair of `sequences`, its gradient
    /// scaled by `grad_scale` and added to `grads`.
    fn sequence_pass(
        &self,
        seq: &TrainSequence,
        grad_scale: f64,
        grads: &mut GradStore,
    ) -> Result<f64> {
        let t_len = seq.inputs.len();
        if t_len == 0 || seq.positives.len() != t_len || seq.negatives.len() != t_len {
            return Err(MmqError::InvalidArgument(format!(
                "training sequence with {t_len} inputs, {} positives and {} negative lists",
                seq.positives.len(),
                seq.negatives.len()
            )));
        }
        let k = self.tokenizer.tokens_per_item();
        let d = self.backbone.config.d_model;

        // Unique inputs first, then the remaining candidates.
        let mut slot: HashMap<usize, usize> = HashMap::new();
        let mut all = Vec::new();
        let mut intern = |i: usize, all: &mut Vec<usize>| {
            *slot.entry(i).or_insert_with(|| {
                all.push(i);
                all.len() - 1
            })
        };
        let input_slots: Vec<usize> = seq.inputs.iter().map(|&i| intern(i, &mut all)).collect();
        let n_inputs = all.len();
        let pos_slots: Vec<usize> = seq.positives.iter().map(|&i| intern(i, &mut all)).collect();
        let neg_slots: Vec<Vec<usize>> = seq
            .negatives
            .iter()
            .map(|ns| ns.iter().map(|&i| intern(i, &mut all)).collect())
            .collect();
        if let Some(&bad) = all.iter().find(|&&i| i >= self.items()) {
            return Err(MmqError::Missing(format!(
                "item {bad} in a catalog of {}",
                self.items()
            )));
        }

        let (proj, pcache) = self.tokenizer.project(&self.catalog, &all)?;
        let in_rows: Vec<usize> = (0..n_inputs).collect();
        let proj_in = proj.map(|_, p| p.select_rows(&in_rows));
        let (tokens, fcache) =
            self.tokenizer
                .fuse_tokens(&self.catalog, &all[..n_inputs], &proj_in)?;
        let mut x = Matrix::zeros(t_len * k, d);
        for (t, &s) in input_slots.iter().enumerate() {
            for r in 0..k {
                x.row_mut(t * k + r).copy_from_slice(tokens.row(s * k + r));
            }
        }
        let (out, bcache) = self.backbone.forward(&x)?;
        let q: Vec<f64> = all.iter().map(|&i| self.catalog.frequency[i]).collect();
        let (w, gcache) = self.head.gate_forward(&q)?;

        let mut loss = 0.0;
        let mut d_out = Matrix::zeros(t_len * k, d);
        let mut d_target = Matrix::zeros(self.items(), d);
        let mut d_proj = PerModality::from_fn(|_| Matrix::zeros(all.len(), d));
        let mut d_w = Matrix::zeros(all.len(), FUSION_WEIGHTS);
        for t in 0..t_len {
            let o_row = t * k + k - 1;
            let o = out.row(o_row).to_vec();
            let cands =
                std::iter::once((pos_slots[t], 1.0)).chain(neg_slots[t].iter().map(|&s| (s, 0.0)));
            for (s, label) in cands {
                let item = all[s];
                let wr = w.row(s);
                let dots = [
                    dot(&o, self.head.target.row(item)),
                    dot(&o, proj.c.row(s)),
                    dot(&o, proj.t.row(s)),
                    dot(&o, proj.v.row(s)),
                ];
                let score: f64 = wr.iter().zip(&dots).map(|(a, b)| a * b).sum();
                loss += bce_with_logit(score, label);
                let g = grad_scale * (sigmoid(score) - label);
                if g == 0.0 {
                    continue;
                }
                for (dw, dt) in d_w.row_mut(s).iter_mut().zip(&dots) {
                    *dw += g * dt;
                }
                let srcs = [
                    self.head.target.row(item),
                    proj.c.row(s),
                    proj.t.row(s),
                    proj.v.row(s),
                ];
                let d_o = d_out.row_mut(o_row);
                for (b, src) in srcs.iter().enumerate() {
                    let c = g * wr[b];
                    for (acc, v) in d_o.iter_mut().zip(src.iter()) {
                        *acc += c * v;
                    }
                }
                for (acc, v) in d_target.row_mut(item).iter_mut().zip(&o) {
                    *acc += g * wr[0] * v;
                }
                for m in Modality::ALL {
                    let c = g * wr[1 + m.index()];
                    for (acc, v) in d_proj[m].row_mut(s).iter_mut().zip(&o) {
                        *acc += c * v;
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(MmqError::NonFinite("recommender loss".into()));
        }

        let mut head_grads = GradStore::new();
        self.head.gate_backward(&gcache, &d_w, &mut head_grads)?;
        head_grads.accumulate("target", &d_target);
        grads.merge_prefixed("head.", head_grads);

        let mut bb_grads = GradStore::new();
        let d_x = self.backbone.backward(&bcache, &d_out, &mut bb_grads)?;
        grads.merge_prefixed("bb.", bb_grads);

        let mut d_tokens = Matrix::zeros(n_inputs * k, d);
        for (t, &s) in input_slots.iter().enumerate() {
            for r in 0..k {
                for (acc, v) in d_tokens
                    .row_mut(s * k + r)
                    .iter_mut()
                    .zip(d_x.row(t * k + r))
                {
                    *acc += v;
                }
            }
        }
        let mut tok_grads = GradStore::new();
        let d_proj_in =
            self.tokenizer
                .fuse_backward(&self.catalog, &fcache, &d_tokens, &mut tok_grads)?;
        for m in Modality::ALL {
            for r in 0..n_inputs {
                for (acc, v) in d_proj[m].row_mut(r).iter_mut().zip(d_proj_in[m].row(r)) {
                    *acc += v;
                }
            }
        }
        self.tokenizer
            .project_backward(&pcache, &d_proj, &mut tok_grads)?;
        grads.merge_prefixed("tok.", tok_grads);
        Ok(loss)
    }

    /// Mean BCE over every scored pair of the batch and its gradient.
    pub fn batch_loss(&self, batch: &[TrainSequence]) -> Result<(f64, GradStore)> {
        let terms: usize = batch.iter().map(TrainSequence::terms).sum();
        if terms == 0 {
            return Err(MmqError::InvalidArgument("empty training batch".into()));
        }
        let scale = 1.0 / terms as f64;
        let mut grads = GradStore::new();
        let mut total = 0.0;
        for seq in batch {
            total += self.sequence_pass(seq, scale, &mut grads)?;
        }
        Ok((total * scale, grads))
    }

    /// Tokens of every item and the combined scoring matrix.
    pub fn inference_tables(&self) -> Result<InferenceTables> {
        let items: Vec<usize> = (0..self.items()).collect();
        let (proj, _) = self.tokenizer.project(&self.catalog, &items)?;
        let (tokens, _) = self.tokenizer.fuse_tokens(&self.catalog, &items, &proj)?;
        let w = self.head.weights(&self.catalog.frequency)?;
        let combined = combined_item_matrix(&self.head, &proj, &w);
        Ok(InferenceTables { tokens, combined })
    }

    /// Hidden state after reading `history` (truncated to the context).
    pub fn hidden_state(&self, tables: &InferenceTables, history: &[usize]) -> Result<Vec<f64>> {
        let k = self.tokenizer.tokens_per_item();
        let cap = self.backbone.config.max_len / k;
        let hist = &history[history.len().saturating_sub(cap)..];
        if hist.is_empty() {
            return Err(MmqError::InvalidArgument("empty history".into()));
        }
        let mut rows = Vec::with_capacity(hist.len() * k);
        for &i in hist {
            if i >= self.items() {
                return Err(MmqError::Missing(format!(
                    "item {i} in a catalog of {}",
                    self.items()
                )));
            }
            rows.extend((0..k).map(|r| i * k + r));
        }
        let (out, _) = self.backbone.forward(&tables.tokens.select_rows(&rows))?;
        Ok(out.row(out.rows() - 1).to_vec())
    }

    /// Scores of every catalog item after `history`.
    pub fn score_all(&self, tables: &InferenceTables, history: &[usize]) -> Result<Vec<f64>> {
        let o = self.hidden_state(tables, history)?;
        Ok(tables.combined.row_iter().map(|c| dot(&o, c)).collect())
    }

    /// Semantic-ID embedding of every item in modality `m`: the sum of its
    /// per-level id rows.
    pub fn sid_embeddings(&self, m: Modality) -> Result<Matrix> {
        let items: Vec<usize> = (0..self.items()).collect();
        self.tokenizer.sid_sum(&self.catalog, m, &items)
    }

    /// Backbone weights without adapters.
    pub fn base_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        crate::diffkit::checkpoint_bytes(&self.backbone.base)
    }
}

impl ParamSet for Recommender {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.tokenizer
            .visit_params(&mut |n, m| f(&format!("tok.{n}"), m));
        self.backbone
            .visit_params(&mut |n, m| f(&format!("bb.{n}"), m));
        self.head
            .visit_params(&mut |n, m| f(&format!("head.{n}"), m));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.tokenizer
            .visit_params_mut(&mut |n, m| f(&format!("tok.{n}"), m));
        self.backbone
            .visit_params_mut(&mut |n, m| f(&format!("bb.{n}"), m));
        self.head
            .visit_params_mut(&mut |n, m| f(&format!("head.{n}"), m));
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::diffkit::{grad_check_with, GradCheckOptions};

    pub(crate) fn tiny_config(lora_rank: usize, mode: TokenMode) -> SeqRecConfig {
        SeqRecConfig {
            backbone: BackboneConfig {
                d_model: 6,
                layers: 1,
                heads: 2,
                ff_dim: 8,
                max_len: 12,
                lora_rank,
                lora_alpha: 4.0,
            },
            token_mode: mode,
            fuse_hidden: 5,
            gate_hidden: 3,
            negatives: 2,
            ..Default::default()
        }
    }

    /// Eight items, dims (3, 4, 2), two levels of four 2-dim codes.
    pub(crate) fn tiny_model(seed: u64, cfg: &SeqRecConfig) -> Recommender {
        let mut rng = Rng::new(seed);
        let n = 8;
        let tables = PerModality::new(
            Matrix::randn(n, 3, 1.0, &mut rng),
            Matrix::randn(n, 4, 1.0, &mut rng),
            Matrix::randn(n, 2, 1.0, &mut rng),
        );
        let sids = PerModality::from_fn(|m| {
            (0..n)
                .map(|i| vec![(i + m.index()) % 4, (i / 2) % 4])
                .collect()
        });
        let freq = (0..n).map(|i| i as f64 / 7.0).collect();
        let catalog = ItemCatalog::new(tables, sids, freq).unwrap();
        let codes = PerModality::from_fn(|_| {
            vec![
                Matrix::randn(4, 2, 1.0, &mut rng),
                Matrix::randn(4, 2, 0.4, &mut rng),
            ]
        });
        let mut model = Recommender::init(
            &SeqRecConfig {
                seed,
                ..cfg.clone()
            },
            catalog,
            &codes,
        )
        .unwrap();
        // Nonzero adapter B so every adapter tensor has a gradient path.
        if let Some(l) = &mut model.backbone.lora {
            l.visit_params_mut(&mut |_, m| m.data_mut().iter_mut().for_each(|v| *v += 0.05));
        }
        model
    }

    pub(crate) fn tiny_batch() -> Vec<TrainSequence> {
        vec![
            TrainSequence {
                inputs: vec![0, 3, 3, 5],
                positives: vec![3, 3, 5, 1],
                negatives: vec![vec![2, 7], vec![0, 6], vec![4, 4], vec![3, 2]],
            },
            TrainSequence {
                inputs: vec![6, 1],
                positives: vec![1, 2],
                negatives: vec![vec![5, 0], vec![7, 1]],
            },
        ]
    }

    fn check(cfg: SeqRecConfig, softmax: bool) -> f64 {
        let cfg = SeqRecConfig {
            fusion_softmax: softmax,
            ..cfg
        };
        let model = tiny_model(3, &cfg);
        let batch = tiny_batch();
        grad_check_with(
            |m: &Recommender| m.batch_loss(&batch),
            &model,
            GradCheckOptions {
                step: 1e-5,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn full_graph_gradients_with_adapters() {
        let err = check(tiny_config(2, TokenMode::Fused), false);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn full_graph_gradients_full_finetune_softmax() {
        let err = check(tiny_config(0, TokenMode::Fused), true);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn full_graph_gradients_three_tokens_per_item() {
        let err = check(tiny_config(2, TokenMode::PerModality), false);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn adapters_exempt_base_and_catalog_from_gradients() {
        let model = tiny_model(4, &tiny_config(2, TokenMode::Fused));
        let (_, g) = model.batch_loss(&tiny_batch()).unwrap();
        let mut base = Vec::new();
        model
            .backbone
            .base
            .visit_params(&mut |n, _| base.push(format!("bb.{n}")));
        for (name, _) in g.iter() {
            assert!(!base.contains(&name.to_string()), "{name}");
        }
        let mut names: Vec<&str> = g.iter().map(|(n, _)| n).collect();
        names.sort();
        let mut expect: Vec<String> = model
            .param_names()
            .into_iter()
            .filter(|n| !base.contains(n))
            .collect();
        expect.sort();
        assert_eq!(names, expect);
    }

    #[test]
    fn catalog_tables_are_not_parameters() {
        // The raw modality tables are stop-gradient inputs: nothing in the
        // parameter set aliases them and no gradient entry names them.
        let model = tiny_model(5, &tiny_config(2, TokenMode::Fused));
        let mut shapes = Vec::new();
        model.visit_params(&mut |n, m| shapes.push((n.to_string(), m.clone())));
        for m in Modality::ALL {
            assert!(shapes.iter().all(|(_, p)| p != &model.catalog.tables[m]));
        }
    }

    #[test]
    fn combined_scores_match_training_scores() {
        let model = tiny_model(6, &tiny_config(2, TokenMode::Fused));
        let tables = model.inference_tables().unwrap();
        let hist = [0usize, 3, 5];
        let scores = model.score_all(&tables, &hist).unwrap();
        let o = model.hidden_state(&tables, &hist).unwrap();
        for i in 0..model.items() {
            let s = super::super::head::fused_score(
                &o,
                i,
                &model.head,
                &model.tokenizer,
                &model.catalog,
            )
            .unwrap();
            assert!((s - scores[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn unknown_sid_init_is_config_error() {
        let cfg = SeqRecConfig {
            init_sids: "zeros".into(),
            ..Default::default()
        };
        assert!(matches!(
            cfg.validate(),
            Err(MmqError::UnknownStrategy { .. })
        ));
    }

    #[test]
    fn default_adapter_fraction_is_small() {
        let cfg = SeqRecConfig::default();
        let bb = Backbone::init(cfg.backbone, &mut Rng::new(0)).unwrap();
        let frac = bb.trainable_count() as f64 / bb.param_count() as f64;
        assert!(frac < 0.10, "{frac}");
    }

    #[test]
    fn stable_bce_matches_naive_form() {
        for &(s, y) in &[(0.3, 1.0), (-2.0, 0.0), (5.0, 0.0), (-40.0, 1.0)] {
            let p: f64 = 1.0 / (1.0 + f64::exp(-s));
            let naive = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            assert!((bce_with_logit(s, y) - naive).abs() < 1e-9 * naive.max(1.0));
        }
    }
}
