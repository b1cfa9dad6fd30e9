//! Small pre-LN causal transformer with optional low-rank adapters on the
//! query and value projections.

use serde::{Deserialize, Serialize};

use crate::diffkit::{Activation, GradStore, Matrix, MlpCache, MlpParams, ParamSet};
use crate::error::{MmqError, Result};
use crate::rng::Rng;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    /// Adapter rank; `0` disables adapters and trains the base weights.
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_model: 64,
            layers: 2,
            heads: 4,
            ff_dim: 256,
            max_len: 64,
            lora_rank: 8,
            lora_alpha: 16.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(MmqError::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.ff_dim == 0 || self.max_len == 0 {
            return Err(MmqError::Config(
                "layers, ff_dim and max_len must be positive".into(),
            ));
        }
        if self.lora_rank > 0 && !(self.lora_alpha > 0.0) {
            return Err(MmqError::Config(format!(
                "lora_alpha must be > 0, got {}",
                self.lora_alpha
            )));
        }
        Ok(())
    }

    pub fn lora_enabled(&self) -> bool {
        self.lora_rank > 0
    }

    fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Matrix,
    pub bias: Matrix,
}

struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        LayerNorm {
            gain: Matrix::filled(1, d, 1.0),
            bias: Matrix::zeros(1, d),
        }
    }

    fn forward(&self, x: &Matrix) -> (Matrix, LnCache) {
        let (t, d) = x.shape();
        let mut xhat = Matrix::zeros(t, d);
        let mut y = Matrix::zeros(t, d);
        let mut inv_std = Vec::with_capacity(t);
        for i in 0..t {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat.set(i, j, h);
                y.set(i, j, h * self.gain.get(0, j) + self.bias.get(0, j));
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    /// Returns `(dx, dgain, dbias)`.
    fn backward(&self, cache: &LnCache, dy: &Matrix) -> (Matrix, Matrix, Matrix) {
        let (t, d) = dy.shape();
        let mut dx = Matrix::zeros(t, d);
        let mut dg = Matrix::zeros(1, d);
        let mut db = Matrix::zeros(1, d);
        let mut dxhat = vec![0.0; d];
        for i in 0..t {
            let xh = cache.xhat.row(i);
            let g = dy.row(i);
            for j in 0..d {
                dg.data_mut()[j] += g[j] * xh[j];
                db.data_mut()[j] += g[j];
                dxhat[j] = g[j] * self.gain.get(0, j);
            }
            let m1 = dxhat.iter().sum::<f64>() / d as f64;
            let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let is = cache.inv_std[i];
            for j in 0..d {
                dx.set(i, j, is * (dxhat[j] - m1 - xh[j] * m2));
            }
        }
        (dx, dg, db)
    }
}

/// Frozen-able weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2: LayerNorm,
    pub ff: MlpParams,
}

/// Base (pre-adapter) weights of the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneBase {
    pub pos: Matrix,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
}

/// Low-rank update `x·Aᵀ·Bᵀ·(α/r)` for one projection; `a` is `r × D`, `b` is `D × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapters {
    pub q: Vec<LoraPair>,
    pub v: Vec<LoraPair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub base: BackboneBase,
    pub lora: Option<LoraAdapters>,
}

impl ParamSet for BackboneBase {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("pos", &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("l{i}.ln1.g"), &b.ln1.gain);
            f(&format!("l{i}.ln1.b"), &b.ln1.bias);
            f(&format!("l{i}.wq"), &b.wq);
            f(&format!("l{i}.wk"), &b.wk);
            f(&format!("l{i}.wv"), &b.wv);
            f(&format!("l{i}.wo"), &b.wo);
            f(&format!("l{i}.ln2.g"), &b.ln2.gain);
            f(&format!("l{i}.ln2.b"), &b.ln2.bias);
            b.ff.visit_params(&mut |n, p| f(&format!("l{i}.ff.{n}"), p));
        }
        f("lnf.g", &self.ln_final.gain);
        f("lnf.b", &self.ln_final.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("pos", &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("l{i}.ln1.g"), &mut b.ln1.gain);
            f(&format!("l{i}.ln1.b"), &mut b.ln1.bias);
            f(&format!("l{i}.wq"), &mut b.wq);
            f(&format!("l{i}.wk"), &mut b.wk);
            f(&format!("l{i}.wv"), &mut b.wv);
            f(&format!("l{i}.wo"), &mut b.wo);
            f(&format!("l{i}.ln2.g"), &mut b.ln2.gain);
            f(&format!("l{i}.ln2.b"), &mut b.ln2.bias);
            b.ff.visit_params_mut(&mut |n, p| f(&format!("l{i}.ff.{n}"), p));
        }
        f("lnf.g", &mut self.ln_final.gain);
        f("lnf.b", &mut self.ln_final.bias);
    }
}

impl ParamSet for LoraAdapters {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        for (i, (q, v)) in self.q.iter().zip(&self.v).enumerate() {
            f(&format!("l{i}.lora.q.a"), &q.a);
            f(&format!("l{i}.lora.q.b"), &q.b);
            f(&format!("l{i}.lora.v.a"), &v.a);
            f(&format!("l{i}.lora.v.b"), &v.b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for (i, (q, v)) in self.q.iter_mut().zip(self.v.iter_mut()).enumerate() {
            f(&format!("l{i}.lora.q.a"), &mut q.a);
            f(&format!("l{i}.lora.q.b"), &mut q.b);
            f(&format!("l{i}.lora.v.a"), &mut v.a);
            f(&format!("l{i}.lora.v.b"), &mut v.b);
        }
    }
}

impl ParamSet for Backbone {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.base.visit_params(f);
        if let Some(l) = &self.lora {
            l.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.base.visit_params_mut(f);
        if let Some(l) = &mut self.lora {
            l.visit_params_mut(f);
        }
    }
}

struct BlockCache {
    ln1: LnCache,
    h: Matrix,
    u_q: Option<Matrix>,
    u_v: Option<Matrix>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    attn: Matrix,
    ln2: LnCache,
    ff: MlpCache,
}

/// Activations kept for the backward pass of one sequence.
pub struct BackboneCache {
    blocks: Vec<BlockCache>,
    ln_final: LnCache,
    len: usize,
}

impl Backbone {
    pub fn init(config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                wq: Matrix::randn(d, d, std, rng),
                wk: Matrix::randn(d, d, std, rng),
                wv: Matrix::randn(d, d, std, rng),
                wo: Matrix::randn(d, d, std, rng),
                ln2: LayerNorm::new(d),
                ff: MlpParams::init(&[d, config.ff_dim, d], Activation::Identity, rng),
            })
            .collect();
        let base = BackboneBase {
            pos: Matrix::randn(config.max_len, d, 0.02, rng),
            blocks,
            ln_final: LayerNorm::new(d),
        };
        let lora = config.lora_enabled().then(|| {
            let r = config.lora_rank;
            let pair = |rng: &mut Rng| LoraPair {
                a: Matrix::randn(r, d, std, rng),
                b: Matrix::zeros(d, r),
            };
            let q = (0..config.layers).map(|_| pair(rng)).collect();
            let v = (0..config.layers).map(|_| pair(rng)).collect();
            LoraAdapters { q, v }
        });
        Ok(Backbone { config, base, lora })
    }

    /// Parameters that receive gradients: adapters when enabled, else the base.
    pub fn trainable_count(&self) -> usize {
        match &self.lora {
            Some(l) => l.param_count(),
            None => self.base.param_count(),
        }
    }

    fn project(
        &self,
        h: &Matrix,
        w: &Matrix,
        adapter: Option<&LoraPair>,
    ) -> (Matrix, Option<Matrix>) {
        let mut out = h.matmul(w);
        let u = adapter.map(|p| {
            let u = h.matmul_t(&p.a);
            out.axpy(self.config.lora_scale(), &u.matmul_t(&p.b));
            u
        });
        (out, u)
    }

    /// Runs the stack over `tokens` (`T × D`); returns the normalized final
    /// hidden state of every position.
    pub fn forward(&self, tokens: &Matrix) -> Result<(Matrix, BackboneCache)> {
        let (t, d) = tokens.shape();
        if d != self.config.d_model {
            return Err(MmqError::dim(
                "backbone token width",
                self.config.d_model,
                d,
            ));
        }
        if t == 0 || t > self.config.max_len {
            return Err(MmqError::InvalidArgument(format!(
                "sequence length {t} outside 1..={}",
                self.config.max_len
            )));
        }
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = tokens.add(&self.base.pos.select_rows(&(0..t).collect::<Vec<_>>()));
        let mut caches = Vec::with_capacity(self.base.blocks.len());
        for (li, b) in self.base.blocks.iter().enumerate() {
            let (h, ln1) = b.ln1.forward(&x);
            let lq = self.lora.as_ref().map(|l| &l.q[li]);
            let lv = self.lora.as_ref().map(|l| &l.v[li]);
            let (q, u_q) = self.project(&h, &b.wq, lq);
            let k = h.matmul(&b.wk);
            let (v, u_v) = self.project(&h, &b.wv, lv);
            let mut attn = Matrix::zeros(t, d);
            let mut probs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (qh, kh, vh) = (
                    q.column_block(hd * dh, dh),
                    k.column_block(hd * dh, dh),
                    v.column_block(hd * dh, dh),
                );
                let mut p = qh.matmul_t(&kh);
                for i in 0..t {
                    let row = p.row_mut(i);
                    let mut mx = f64::NEG_INFINITY;
                    for (j, s) in row.iter_mut().enumerate() {
                        if j > i {
                            *s = f64::NEG_INFINITY;
                        } else {
                            *s *= scale;
                            mx = mx.max(*s);
                        }
                    }
                    let mut z = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= z);
                }
                let oh = p.matmul(&vh);
                for i in 0..t {
                    attn.row_mut(i)[hd * dh..(hd + 1) * dh].copy_from_slice(oh.row(i));
                }
                probs.push(p);
            }
            x.add_assign(&attn.matmul(&b.wo));
            let (h2, ln2) = b.ln2.forward(&x);
            let (f, ff) = b.ff.forward(&h2)?;
            x.add_assign(&f);
            caches.push(BlockCache {
                ln1,
                h,
                u_q,
                u_v,
                q,
                k,
                v,
                probs,
                attn,
                ln2,
                ff,
            });
        }
        let (out, ln_final) = self.base.ln_final.forward(&x);
        Ok((
            out,
            BackboneCache {
                blocks: caches,
                ln_final,
                len: t,
            },
        ))
    }

    /// Backpropagates `d_out` (`T × D`). Gradients go to the adapters when
    /// enabled and to the base weights otherwise; the token gradient is
    /// returned.
    pub fn backward(
        &self,
        cache: &BackboneCache,
        d_out: &Matrix,
        grads: &mut GradStore,
    ) -> Result<Matrix> {
        let t = cache.len;
        let d = self.config.d_model;
        if d_out.shape() != (t, d) {
            return Err(MmqError::dim(
                "backbone upstream",
                format!("{t}x{d}"),
                format!("{:?}", d_out.shape()),
            ));
        }
        let base_trainable = self.lora.is_none();
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let s_lora = if self.config.lora_enabled() {
            self.config.lora_scale()
        } else {
            0.0
        };

        let (mut dx, dg, db) = self.base.ln_final.backward(&cache.ln_final, d_out);
        if base_trainable {
            grads.accumulate("lnf.g", &dg);
            grads.accumulate("lnf.b", &db);
        }
        for (li, (b, c)) in self.base.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            // Feed-forward residual branch.
            let ff_back = b.ff.backward(&c.ff, &dx)?;
            let (dx_ln2, dg2, db2) = b.ln2.backward(&c.ln2, &ff_back.input_grad);
            dx.add_assign(&dx_ln2);
            if base_trainable {
                grads.merge_prefixed(&format!("l{li}.ff."), ff_back.grads);
                grads.accumulate(&format!("l{li}.ln2.g"), &dg2);
                grads.accumulate(&format!("l{li}.ln2.b"), &db2);
            }

            // Attention residual branch.
            let d_attn = dx.matmul_t(&b.wo);
            if base_trainable {
                grads.accumulate(&format!("l{li}.wo"), &c.attn.t_matmul(&dx));
            }
            let mut dq = Matrix::zeros(t, d);
            let mut dk = Matrix::zeros(t, d);
            let mut dv = Matrix::zeros(t, d);
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let p = &c.probs[hd];
                let d_oh = d_attn.column_block(hd * dh, dh);
                let vh = c.v.column_block(hd * dh, dh);
                let qh = c.q.column_block(hd * dh, dh);
                let kh = c.k.column_block(hd * dh, dh);
                let dvh = p.t_matmul(&d_oh);
                let dp = d_oh.matmul_t(&vh);
                let mut ds = Matrix::zeros(t, t);
                for i in 0..t {
                    let pr = p.row(i);
                    let dpr = dp.row(i);
                    let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        ds.set(i, j, pr[j] * (dpr[j] - dot) * scale);
                    }
                }
                let dqh = ds.matmul(&kh);
                let dkh = ds.t_matmul(&qh);
                for i in 0..t {
                    dq.row_mut(i)[cols.clone()].copy_from_slice(dqh.row(i));
                    dk.row_mut(i)[cols.clone()].copy_from_slice(dkh.row(i));
                    dv.row_mut(i)[cols.clone()].copy_from_slice(dvh.row(i));
                }
            }
            let mut dh_in = dq.matmul_t(&b.wq);
            dh_in.add_assign(&dk.matmul_t(&b.wk));
            dh_in.add_assign(&dv.matmul_t(&b.wv));
            if base_trainable {
                grads.accumulate(&format!("l{li}.wq"), &c.h.t_matmul(&dq));
                grads.accumulate(&format!("l{li}.wk"), &c.h.t_matmul(&dk));
                grads.accumulate(&format!("l{li}.wv"), &c.h.t_matmul(&dv));
            }
            if let Some(l) = &self.lora {
                for (name, pair, u, dproj) in [
                    ("q", &l.q[li], c.u_q.as_ref(), &dq),
                    ("v", &l.v[li], c.u_v.as_ref(), &dv),
                ] {
                    let u = u.expect("adapter activations cached");
                    // out += s · U · Bᵀ with U = H · Aᵀ
                    grads.accumulate(
                        &format!("l{li}.lora.{name}.b"),
                        &dproj.t_matmul(u).scaled(s_lora),
                    );
                    let du = dproj.matmul(&pair.b).scaled(s_lora);
                    grads.accumulate(&format!("l{li}.lora.{name}.a"), &du.t_matmul(&c.h));
                    dh_in.add_assign(&du.matmul(&pair.a));
                }
            }
            let (dx_ln1, dg1, db1) = b.ln1.backward(&c.ln1, &dh_in);
            dx.add_assign(&dx_ln1);
            if base_trainable {
                grads.accumulate(&format!("l{li}.ln1.g"), &dg1);
                grads.accumulate(&format!("l{li}.ln1.b"), &db1);
            }
        }
        if base_trainable {
            let mut dpos = Matrix::zeros(self.config.max_len, d);
            for i in 0..t {
                dpos.row_mut(i).copy_from_slice(dx.row(i));
            }
            grads.accumulate("pos", &dpos);
        }
        Ok(dx)
    }
}
