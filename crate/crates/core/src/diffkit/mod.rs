//! Small deterministic differentiable-computation kit: dense matrices, MLPs
//! with hand-written backward passes, AdamW, a finite-difference gradient
//! checker and the parameter checkpoint format.

mod checkpoint;
mod gradcheck;
mod matrix;
mod mlp;
mod optim;
mod params;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, restore_params, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions};
pub use matrix::{dot, norm, sq_dist, Matrix};
pub use mlp::{Activation, Layer, MlpBackward, MlpCache, MlpParams};
pub use optim::{AdamW, AdamWConfig};
pub use params::{GradStore, ParamSet, TensorMap};

/// Little-endian cursor over a byte slice.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.remaining() < n {
            return None;
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    pub(crate) fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let raw = self.take(n.checked_mul(8)?)?;
        Some(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
}
