use serde::{Deserialize, Serialize};

use super::{GradStore, Matrix, ParamSet};
use crate::error::{MmqError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer `y = act(x·W + b)`, `W` is `d_in × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(MmqError::dim("Layer::new bias", weight.cols(), bias.len()));
        }
        Ok(Layer {
            weight,
            bias: Matrix::row_vector(&bias),
            activation,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }
}

/// Feed-forward network: a chain of affine layers with per-layer activation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Activations recorded by [`MlpParams::forward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    fingerprint: u64,
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct MlpBackward {
    /// Entries `"{layer}.w"` and `"{layer}.b"`.
    pub grads: GradStore,
    pub input_grad: Matrix,
}

impl MlpParams {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(MmqError::dim(
                    format!("mlp layer {} input", i + 1),
                    pair[0].d_out(),
                    pair[1].d_in(),
                ));
            }
        }
        Ok(MlpParams { layers })
    }

    /// Random init for the dimension chain `dims`; hidden layers get relu,
    /// the last layer gets `last`.
    pub fn init(dims: &[usize], last: Activation, rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { Activation::Relu };
                let gain = if act == Activation::Relu { 2.0 } else { 1.0 };
                let std = (gain / dims[i] as f64).sqrt();
                Layer {
                    weight: Matrix::randn(dims[i], dims[i + 1], std, rng),
                    bias: Matrix::zeros(1, dims[i + 1]),
                    activation: act,
                }
            })
            .collect();
        MlpParams { layers }
    }

    /// Single identity layer of width `n`.
    pub fn identity(n: usize) -> Self {
        MlpParams {
            layers: vec![Layer {
                weight: Matrix::identity(n),
                bias: Matrix::zeros(1, n),
                activation: Activation::Identity,
            }],
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.layers.iter().map(|l| l.d_in()).collect();
        if let Some(l) = self.layers.last() {
            d.push(l.d_out());
        }
        d
    }

    pub fn d_in(&self) -> usize {
        self.layers.first().map(|l| l.d_in()).unwrap_or(0)
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map(|l| l.d_out()).unwrap_or(0)
    }

    /// Σ (d_in·d_out + d_out) over layers.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.d_in() * l.d_out() + l.d_out())
            .sum()
    }

    fn fingerprint(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(PRIME);
        };
        for l in &self.layers {
            mix(l.d_in() as u64);
            mix(l.d_out() as u64);
            for v in l.weight.data().iter().chain(l.bias.data()) {
                mix(v.to_bits());
            }
        }
        h
    }

    /// Forward pass over a batch (rows are samples).
    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, MlpCache)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if x.cols() != layer.d_in() {
                return Err(MmqError::dim(
                    format!("mlp layer {i} input"),
                    layer.d_in(),
                    x.cols(),
                ));
            }
            let mut pre = x.matmul(&layer.weight);
            pre.add_row_broadcast(layer.bias.data());
            let out = pre.map(|v| layer.activation.apply(v));
            inputs.push(x);
            pres.push(pre);
            x = out;
        }
        Ok((
            x,
            MlpCache {
                fingerprint: self.fingerprint(),
                inputs,
                pre_activations: pres,
            },
        ))
    }

    /// Output only; skips cache bookkeeping.
    pub fn apply(&self, input: &Matrix) -> Result<Matrix> {
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if x.cols() != layer.d_in() {
                return Err(MmqError::dim(
                    format!("mlp layer {i} input"),
                    layer.d_in(),
                    x.cols(),
                ));
            }
            let mut pre = x.matmul(&layer.weight);
            pre.add_row_broadcast(layer.bias.data());
            let act = layer.activation;
            pre.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            x = pre;
        }
        Ok(x)
    }

    /// Backward pass for `upstream = ∂L/∂output`.
    pub fn backward(&self, cache: &MlpCache, upstream: &Matrix) -> Result<MlpBackward> {
        if cache.inputs.len() != self.layers.len() || cache.fingerprint != self.fingerprint() {
            return Err(MmqError::StaleCache(
                "mlp cache was produced by different parameters".into(),
            ));
        }
        let batch = cache.inputs.first().map(|m| m.rows()).unwrap_or(0);
        if upstream.rows() != batch || upstream.cols() != self.d_out() {
            return Err(MmqError::dim(
                "mlp upstream gradient",
                format!("{}x{}", batch, self.d_out()),
                format!("{}x{}", upstream.rows(), upstream.cols()),
            ));
        }
        let mut grads = GradStore::new();
        let mut delta = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre_activations[i];
            if layer.activation != Activation::Identity {
                for (d, &p) in delta.data_mut().iter_mut().zip(pre.data()) {
                    *d *= layer.activation.derivative(p);
                }
            }
            grads.insert(format!("{i}.w"), cache.inputs[i].t_matmul(&delta));
            grads.insert(format!("{i}.b"), delta.sum_rows());
            delta = delta.matmul_t(&layer.weight);
        }
        Ok(MlpBackward {
            grads,
            input_grad: delta,
        })
    }
}

impl ParamSet for MlpParams {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("{i}.w"), &l.weight);
            f(&format!("{i}.b"), &l.bias);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("{i}.w"), &mut l.weight);
            f(&format!("{i}.b"), &mut l.bias);
        }
    }
}
