//! Multimodal item tokens built from projected modality embeddings and
//! summed semantic-ID embeddings.

use serde::{Deserialize, Serialize};

use super::frequency::frequency_from_counts;
use crate::dataio::{EmbeddingTable, Modality, PerModality};
use crate::diffkit::{Activation, GradStore, Matrix, MlpCache, MlpParams, ParamSet};
use crate::error::{MmqError, Result};
use crate::quantizer::{sid_matrix, CodeTable, SemanticIdAssignment};
use crate::registry::Registry;
use crate::rng::Rng;

/// Frozen per-item inputs: modality tables, semantic ids and the frequency
/// feature. Nothing here receives gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemCatalog {
    pub tables: PerModality<Matrix>,
    /// `sids[m][item][level]`.
    pub sids: PerModality<Vec<Vec<usize>>>,
    /// `q″` per item.
    pub frequency: Vec<f64>,
}

impl ItemCatalog {
    pub fn new(
        tables: PerModality<Matrix>,
        sids: PerModality<Vec<Vec<usize>>>,
        frequency: Vec<f64>,
    ) -> Result<Self> {
        let n = frequency.len();
        for m in Modality::ALL {
            if tables[m].rows() != n {
                return Err(MmqError::dim(
                    format!("item table {m} rows"),
                    n,
                    tables[m].rows(),
                ));
            }
            if sids[m].len() != n {
                return Err(MmqError::dim(
                    format!("semantic ids {m} items"),
                    n,
                    sids[m].len(),
                ));
            }
        }
        Ok(ItemCatalog {
            tables,
            sids,
            frequency,
        })
    }

    /// Catalog from modality tables, semantic-id assignments and training
    /// interaction counts.
    pub fn from_artifacts(
        tables: &PerModality<EmbeddingTable>,
        assignments: &[SemanticIdAssignment],
        item_counts: &[u64],
    ) -> Result<Self> {
        let n = item_counts.len();
        let sids = PerModality::try_from_fn(|m| sid_matrix(assignments, m, n))?;
        ItemCatalog::new(
            tables.map(|_, t| t.data.clone()),
            sids,
            frequency_from_counts(item_counts),
        )
    }

    pub fn items(&self) -> usize {
        self.frequency.len()
    }

    fn check_item(&self, item: usize, m: Modality) -> Result<()> {
        if item >= self.tables[m].rows() || item >= self.sids[m].len() {
            return Err(MmqError::Missing(format!(
                "data for item {item} in modality {m}"
            )));
        }
        Ok(())
    }
}

/// Exported code tables regrouped as `codes[m][level]`.
pub fn code_matrices(codes: &[CodeTable]) -> Result<PerModality<Vec<Matrix>>> {
    PerModality::try_from_fn(|m| {
        let mut of_m: Vec<&CodeTable> = codes.iter().filter(|c| c.modality == m).collect();
        of_m.sort_by_key(|c| c.level);
        if of_m.is_empty() {
            return Err(MmqError::Missing(format!("code tables for modality {m}")));
        }
        if let Some((l, _)) = of_m.iter().enumerate().find(|(l, c)| c.level != *l) {
            return Err(MmqError::Missing(format!(
                "code table for modality {m} level {l}"
            )));
        }
        Ok(of_m.iter().map(|c| c.table.data.clone()).collect())
    })
}

/// How item tokens enter the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenMode {
    /// One token per item from a single MLP over all six pieces.
    Fused,
    /// Three tokens per item (c, t, v), each from its own MLP over
    /// `[projection, id sum]` of one modality.
    PerModality,
}

impl TokenMode {
    pub fn tokens_per_item(self) -> usize {
        match self {
            TokenMode::Fused => 1,
            TokenMode::PerModality => 3,
        }
    }
}

/// Builds the initial semantic-ID embedding table of one level from the
/// exported code embeddings of that level.
pub trait SidInit: Send + Sync {
    fn name(&self) -> &'static str;
    fn init(&self, codes: &Matrix, rng: &mut Rng) -> Matrix;
}

/// Copies the trained code embeddings.
pub struct CodeEmbeddingInit;

impl SidInit for CodeEmbeddingInit {
    fn name(&self) -> &'static str {
        "code-embeddings"
    }

    fn init(&self, codes: &Matrix, _rng: &mut Rng) -> Matrix {
        codes.clone()
    }
}

/// Gaussian noise with the same shape and overall standard deviation as
/// the code table, so both inits start at a comparable scale.
pub struct RandomInit;

impl SidInit for RandomInit {
    fn name(&self) -> &'static str {
        "random"
    }

    fn init(&self, codes: &Matrix, rng: &mut Rng) -> Matrix {
        let n = codes.len().max(1) as f64;
        let mean = codes.data().iter().sum::<f64>() / n;
        let var = codes
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Matrix::randn(codes.rows(), codes.cols(), std, rng)
    }
}

pub fn sid_init_registry() -> Registry<dyn SidInit> {
    let mut r: Registry<dyn SidInit> = Registry::new("sid init");
    r.register("code-embeddings", || Box::new(CodeEmbeddingInit));
    r.register("random", || Box::new(RandomInit));
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemTokenizer {
    pub mode: TokenMode,
    /// `W_j, b_j`: one affine layer `D_j → D_model` per modality.
    pub proj: PerModality<MlpParams>,
    /// Per modality, one `S × d` table per level.
    pub sid_tables: PerModality<Vec<Matrix>>,
    /// One MLP in fused mode, three (c, t, v) in per-modality mode.
    pub fuse: Vec<MlpParams>,
}

pub struct ProjectionCache {
    caches: PerModality<MlpCache>,
}

pub struct FuseCache {
    items: Vec<usize>,
    caches: Vec<MlpCache>,
}

impl ItemTokenizer {
    /// `codes[m][l]` are the exported code embeddings of modality `m`, level `l`.
    pub fn init(
        mode: TokenMode,
        input_dims: PerModality<usize>,
        d_model: usize,
        fuse_hidden: usize,
        codes: &PerModality<Vec<Matrix>>,
        sid_init: &dyn SidInit,
        rng: &mut Rng,
    ) -> Result<Self> {
        let proj = PerModality::from_fn(|m| {
            MlpParams::init(&[input_dims[m], d_model], Activation::Identity, rng)
        });
        let sid_tables = PerModality::from_fn(|m| {
            codes[m]
                .iter()
                .map(|c| sid_init.init(c, rng))
                .collect::<Vec<_>>()
        });
        let code_dim = |m: Modality| {
            sid_tables[m]
                .first()
                .map(|t: &Matrix| t.cols())
                .unwrap_or(0)
        };
        let chain = |w: usize| {
            if fuse_hidden > 0 {
                vec![w, fuse_hidden, d_model]
            } else {
                vec![w, d_model]
            }
        };
        let fuse = match mode {
            TokenMode::Fused => {
                let w: usize = Modality::ALL.iter().map(|&m| d_model + code_dim(m)).sum();
                vec![MlpParams::init(&chain(w), Activation::Identity, rng)]
            }
            TokenMode::PerModality => Modality::ALL
                .iter()
                .map(|&m| MlpParams::init(&chain(d_model + code_dim(m)), Activation::Identity, rng))
                .collect(),
        };
        let tok = ItemTokenizer {
            mode,
            proj,
            sid_tables,
            fuse,
        };
        tok.validate()?;
        Ok(tok)
    }

    pub fn d_model(&self) -> usize {
        self.proj.c.d_out()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        for m in Modality::ALL {
            if self.proj[m].d_out() != d {
                return Err(MmqError::dim(
                    format!("projection {m} output"),
                    d,
                    self.proj[m].d_out(),
                ));
            }
            let tabs = &self.sid_tables[m];
            if tabs.is_empty() {
                return Err(MmqError::InvalidArgument(format!(
                    "modality {m} has no semantic-id tables"
                )));
            }
            if let Some(t) = tabs.iter().find(|t| t.cols() != tabs[0].cols()) {
                return Err(MmqError::dim(
                    format!("semantic-id tables {m} width"),
                    tabs[0].cols(),
                    t.cols(),
                ));
            }
        }
        let expected = match self.mode {
            TokenMode::Fused => vec![self.concat_width()],
            TokenMode::PerModality => Modality::ALL
                .iter()
                .map(|&m| d + self.sid_tables[m][0].cols())
                .collect(),
        };
        if self.fuse.len() != expected.len() {
            return Err(MmqError::dim(
                "fusion MLP count",
                expected.len(),
                self.fuse.len(),
            ));
        }
        for (f, w) in self.fuse.iter().zip(expected) {
            if f.d_in() != w {
                return Err(MmqError::dim("fusion MLP input", w, f.d_in()));
            }
            if f.d_out() != d {
                return Err(MmqError::dim("fusion MLP output", d, f.d_out()));
            }
        }
        Ok(())
    }

    /// `Σ_j (D_model + d_j)`.
    pub fn concat_width(&self) -> usize {
        Modality::ALL
            .iter()
            .map(|&m| self.d_model() + self.sid_tables[m][0].cols())
            .sum()
    }

    pub fn tokens_per_item(&self) -> usize {
        self.mode.tokens_per_item()
    }

    /// `E_j[items]·W_j + b_j` for every modality, rows aligned to `items`.
    pub fn project(
        &self,
        catalog: &ItemCatalog,
        items: &[usize],
    ) -> Result<(PerModality<Matrix>, ProjectionCache)> {
        let mut outs = Vec::with_capacity(3);
        let mut caches = Vec::with_capacity(3);
        for m in Modality::ALL {
            for &i in items {
                catalog.check_item(i, m)?;
            }
            let (o, c) = self.proj[m].forward(&catalog.tables[m].select_rows(items))?;
            outs.push(o);
            caches.push(c);
        }
        let mut outs = outs.into_iter();
        let mut caches = caches.into_iter();
        let mut next = || (outs.next().unwrap(), caches.next().unwrap());
        let (c, cc) = next();
        let (t, tc) = next();
        let (v, vc) = next();
        Ok((
            PerModality::new(c, t, v),
            ProjectionCache {
                caches: PerModality::new(cc, tc, vc),
            },
        ))
    }

    pub fn project_backward(
        &self,
        cache: &ProjectionCache,
        d_proj: &PerModality<Matrix>,
        grads: &mut GradStore,
    ) -> Result<()> {
        for m in Modality::ALL {
            let b = self.proj[m].backward(&cache.caches[m], &d_proj[m])?;
            grads.merge_prefixed(&format!("proj.{m}."), b.grads);
        }
        Ok(())
    }

    /// `Σ_l E_{SID_j^l}[sid_l(item)]` for each item.
    pub fn sid_sum(&self, catalog: &ItemCatalog, m: Modality, items: &[usize]) -> Result<Matrix> {
        let tabs = &self.sid_tables[m];
        let mut out = Matrix::zeros(items.len(), tabs[0].cols());
        for (r, &i) in items.iter().enumerate() {
            catalog.check_item(i, m)?;
            let sids = &catalog.sids[m][i];
            if sids.len() != tabs.len() {
                return Err(MmqError::dim(
                    format!("semantic ids of item {i} in modality {m}"),
                    tabs.len(),
                    sids.len(),
                ));
            }
            for (l, &s) in sids.iter().enumerate() {
                if s >= tabs[l].rows() {
                    return Err(MmqError::InvalidArgument(format!(
                        "item {i} modality {m} level {l}: id {s} outside codebook of {}",
                        tabs[l].rows()
                    )));
                }
                for (acc, v) in out.row_mut(r).iter_mut().zip(tabs[l].row(s)) {
                    *acc += v;
                }
            }
        }
        Ok(out)
    }

    /// Tokens for `items` given their projections. Rows are item-major:
    /// `tokens_per_item` consecutive rows per item.
    pub fn fuse_tokens(
        &self,
        catalog: &ItemCatalog,
        items: &[usize],
        proj: &PerModality<Matrix>,
    ) -> Result<(Matrix, FuseCache)> {
        let sums = PerModality::try_from_fn(|m| self.sid_sum(catalog, m, items))?;
        let (tokens, caches) = match self.mode {
            TokenMode::Fused => {
                let x = Matrix::hconcat(&[&proj.c, &proj.t, &proj.v, &sums.c, &sums.t, &sums.v]);
                let (y, c) = self.fuse[0].forward(&x)?;
                (y, vec![c])
            }
            TokenMode::PerModality => {
                let d = self.d_model();
                let mut out = Matrix::zeros(items.len() * 3, d);
                let mut caches = Vec::with_capacity(3);
                for m in Modality::ALL {
                    let x = Matrix::hconcat(&[&proj[m], &sums[m]]);
                    let (y, c) = self.fuse[m.index()].forward(&x)?;
                    for r in 0..items.len() {
                        out.row_mut(r * 3 + m.index()).copy_from_slice(y.row(r));
                    }
                    caches.push(c);
                }
                (out, caches)
            }
        };
        Ok((
            tokens,
            FuseCache {
                items: items.to_vec(),
                caches,
            },
        ))
    }

    /// Backpropagates token gradients into the fusion MLPs and id tables;
    /// returns the gradient with respect to the projections.
    pub fn fuse_backward(
        &self,
        catalog: &ItemCatalog,
        cache: &FuseCache,
        d_tokens: &Matrix,
        grads: &mut GradStore,
    ) -> Result<PerModality<Matrix>> {
        let n = cache.items.len();
        let d = self.d_model();
        let mut d_proj = PerModality::from_fn(|_| Matrix::zeros(n, d));
        let mut d_sums: PerModality<Matrix> =
            PerModality::from_fn(|m| Matrix::zeros(n, self.sid_tables[m][0].cols()));
        match self.mode {
            TokenMode::Fused => {
                let b = self.fuse[0].backward(&cache.caches[0], d_tokens)?;
                grads.merge_prefixed("fuse.0.", b.grads);
                let g = &b.input_grad;
                let mut off = 0;
                for m in Modality::ALL {
                    d_proj[m] = g.column_block(off, d);
                    off += d;
                }
                for m in Modality::ALL {
                    let w = d_sums[m].cols();
                    d_sums[m] = g.column_block(off, w);
                    off += w;
                }
            }
            TokenMode::PerModality => {
                for m in Modality::ALL {
                    let rows: Vec<usize> = (0..n).map(|r| r * 3 + m.index()).collect();
                    let b = self.fuse[m.index()]
                        .backward(&cache.caches[m.index()], &d_tokens.select_rows(&rows))?;
                    grads.merge_prefixed(&format!("fuse.{}.", m.index()), b.grads);
                    d_proj[m] = b.input_grad.column_block(0, d);
                    d_sums[m] = b.input_grad.column_block(d, d_sums[m].cols());
                }
            }
        }
        for m in Modality::ALL {
            for (l, tab) in self.sid_tables[m].iter().enumerate() {
                let mut g = Matrix::zeros(tab.rows(), tab.cols());
                for (r, &i) in cache.items.iter().enumerate() {
                    let s = catalog.sids[m][i][l];
                    for (acc, v) in g.row_mut(s).iter_mut().zip(d_sums[m].row(r)) {
                        *acc += v;
                    }
                }
                grads.accumulate(&format!("sid.{m}.{l}"), &g);
            }
        }
        Ok(d_proj)
    }
}

impl ParamSet for ItemTokenizer {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        for (m, p) in self.proj.iter() {
            p.visit_params(&mut |n, x| f(&format!("proj.{m}.{n}"), x));
        }
        for (m, tabs) in self.sid_tables.iter() {
            for (l, t) in tabs.iter().enumerate() {
                f(&format!("sid.{m}.{l}"), t);
            }
        }
        for (k, p) in self.fuse.iter().enumerate() {
            p.visit_params(&mut |n, x| f(&format!("fuse.{k}.{n}"), x));
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for m in Modality::ALL {
            self.proj[m].visit_params_mut(&mut |n, x| f(&format!("proj.{m}.{n}"), x));
        }
        for m in Modality::ALL {
            for (l, t) in self.sid_tables[m].iter_mut().enumerate() {
                f(&format!("sid.{m}.{l}"), t);
            }
        }
        for (k, p) in self.fuse.iter_mut().enumerate() {
            p.visit_params_mut(&mut |n, x| f(&format!("fuse.{k}.{n}"), x));
        }
    }
}

/// Token(s) of a single item, `tokens_per_item × D_model`.
pub fn build_item_token(
    item: usize,
    tokenizer: &ItemTokenizer,
    catalog: &ItemCatalog,
) -> Result<Matrix> {
    let (proj, _) = tokenizer.project(catalog, &[item])?;
    let (tokens, _) = tokenizer.fuse_tokens(catalog, &[item], &proj)?;
    Ok(tokens)
}
