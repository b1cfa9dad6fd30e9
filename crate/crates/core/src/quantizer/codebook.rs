use crate::diffkit::{sq_dist, Matrix};
use crate::error::{MmqError, Result};
use crate::rng::Rng;

/// One level of a residual codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub level: usize,
    /// `S × d` code embeddings.
    pub codes: Matrix,
    /// Assignments per code since the last [`Codebook::reset_usage`].
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn new(level: usize, codes: Matrix) -> Result<Self> {
        if codes.rows() < 2 {
            return Err(MmqError::InvalidArgument(format!(
                "codebook level {level} needs at least 2 codes, got {}",
                codes.rows()
            )));
        }
        if !codes.is_finite() {
            return Err(MmqError::NonFinite(format!("codebook level {level}")));
        }
        let usage = vec![0; codes.rows()];
        Ok(Codebook {
            level,
            codes,
            usage,
        })
    }

    pub fn size(&self) -> usize {
        self.codes.rows()
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    /// Index of the nearest code in squared Euclidean distance; ties go to
    /// the lowest index.
    pub fn nearest(&self, residual: &[f64]) -> Result<usize> {
        if self.codes.rows() == 0 {
            return Err(MmqError::InvalidArgument(format!(
                "codebook level {} is empty",
                self.level
            )));
        }
        if residual.len() != self.dim() {
            return Err(MmqError::dim(
                format!("quantize level {}", self.level),
                self.dim(),
                residual.len(),
            ));
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, code) in self.codes.row_iter().enumerate() {
            let d = sq_dist(residual, code);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        Ok(best)
    }
}

/// Picks the nearest code and returns it with the next residual.
pub fn quantize_level(residual: &[f64], codebook: &Codebook) -> Result<(usize, Vec<f64>)> {
    let sid = codebook.nearest(residual)?;
    let next = residual
        .iter()
        .zip(codebook.codes.row(sid))
        .map(|(r, c)| r - c)
        .collect();
    Ok((sid, next))
}

/// Greedy residual quantization of one vector through every level.
///
/// Returns the chosen ids and `ẑ`, accumulated level by level from zero.
pub fn residual_quantize(z: &[f64], codebooks: &[Codebook]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut residual = z.to_vec();
    let mut zhat = vec![0.0; z.len()];
    let mut sids = Vec::with_capacity(codebooks.len());
    for cb in codebooks {
        let (sid, next) = quantize_level(&residual, cb)?;
        for (acc, c) in zhat.iter_mut().zip(cb.codes.row(sid)) {
            *acc += c;
        }
        sids.push(sid);
        residual = next;
    }
    Ok((sids, zhat))
}

/// k-means++ seeding followed by `lloyd_iters` Lloyd refinements.
///
/// When there are fewer distinct points than `k`, the remaining centres are
/// copies of sampled points.
pub fn kmeans_pp(points: &Matrix, k: usize, lloyd_iters: usize, rng: &mut Rng) -> Result<Matrix> {
    let n = points.rows();
    if n == 0 || k == 0 {
        return Err(MmqError::InvalidArgument(format!(
            "kmeans_pp with {n} points and k={k}"
        )));
    }
    let d = points.cols();
    let mut centres = Matrix::zeros(k, d);
    centres.row_mut(0).copy_from_slice(points.row(rng.below(n)));
    let mut closest: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), centres.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in closest.iter().enumerate() {
                acc += w;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        centres.row_mut(c).copy_from_slice(points.row(pick));
        for (i, best) in closest.iter_mut().enumerate() {
            *best = best.min(sq_dist(points.row(i), centres.row(c)));
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..lloyd_iters {
        for (i, a) in assign.iter_mut().enumerate() {
            let p = points.row(i);
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dist = sq_dist(p, centres.row(c));
                if dist < best_d {
                    best_d = dist;
                    *a = c;
                }
            }
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, p) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
                *s += p;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centres.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }
    Ok(centres)
}
