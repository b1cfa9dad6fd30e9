use serde::{Deserialize, Serialize};

use crate::diffkit::{dot, Matrix};
use crate::error::{MmqError, Result};

/// Singular values sorted descending, plus `σ_i / σ_1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularSpectrum {
    pub values: Vec<f64>,
    pub normalized: Vec<f64>,
    pub source: String,
}

impl SingularSpectrum {
    pub fn from_values(mut values: Vec<f64>, source: impl Into<String>) -> Self {
        values.iter_mut().for_each(|v| *v = v.max(0.0));
        values.sort_by(|a, b| b.total_cmp(a));
        let top = values.first().copied().unwrap_or(0.0);
        let normalized = values
            .iter()
            .map(|v| if top > 0.0 { v / top } else { 0.0 })
            .collect();
        SingularSpectrum {
            values,
            normalized,
            source: source.into(),
        }
    }

    /// `(dimension index, log10 σ_i/σ_1)` rows, 1-based index.
    pub fn log10_curve(&self) -> Vec<(usize, f64)> {
        self.normalized
            .iter()
            .enumerate()
            .map(|(i, &v)| (i + 1, v.log10()))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dimension_index,log10_normalized_sigma\n");
        for (i, v) in self.log10_curve() {
            out.push_str(&format!("{i},{v}\n"));
        }
        out
    }

    /// Shannon entropy of `σ_i / Σσ`.
    pub fn spectral_entropy(&self) -> f64 {
        let total: f64 = self.values.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        -self
            .values
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|v| {
                let p = v / total;
                p * p.ln()
            })
            .sum::<f64>()
    }
}

/// Singular values of `m` by one-sided Jacobi rotations.
///
/// The rotations act on the columns of whichever of `m` or `mᵀ` has fewer
/// columns, so the implicit Gram matrix has the smaller dimension.
pub fn singular_spectrum(m: &Matrix, source: impl Into<String>) -> Result<SingularSpectrum> {
    if !m.is_finite() {
        return Err(MmqError::NonFinite("singular_spectrum input".into()));
    }
    let work = if m.cols() <= m.rows() {
        m.clone()
    } else {
        m.transpose()
    };
    Ok(SingularSpectrum::from_values(
        jacobi_singular_values(&work),
        source,
    ))
}

/// One-sided Jacobi on a tall matrix; returns `cols` singular values.
fn jacobi_singular_values(a: &Matrix) -> Vec<f64> {
    let (rows, cols) = a.shape();
    if cols == 0 {
        return Vec::new();
    }
    // Column-major copy so column pairs are contiguous.
    let mut col: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| a.get(i, j)).collect())
        .collect();
    let scale = col.iter().map(|c| dot(c, c)).fold(0.0f64, f64::max);
    if scale == 0.0 {
        return vec![0.0; cols];
    }
    let tol = 1e-15;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = dot(&col[p], &col[p]);
                let beta = dot(&col[q], &col[q]);
                let gamma = dot(&col[p], &col[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                // Negligible columns are numerically zero; rotating them only churns.
                if alpha.min(beta) <= scale * 1e-300 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = col.split_at_mut(q);
                let (cp, cq) = (&mut lo[p], &mut hi[0]);
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xp, xq) = (*x, *y);
                    *x = c * xp - s * xq;
                    *y = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    col.iter().map(|c| dot(c, c).sqrt()).collect()
}

/// Number of normalized singular values `≥ threshold`.
pub fn effective_rank(spec: &SingularSpectrum, threshold: f64) -> usize {
    spec.normalized
        .iter()
        .filter(|&&v| v > 0.0 && v >= threshold)
        .count()
}

/// Numeric rank at the absolute cut `tol·σ_1`.
pub fn numeric_rank(spec: &SingularSpectrum, tol: f64) -> usize {
    let top = spec.values.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    spec.values.iter().filter(|&&v| v > tol * top).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub spectrum: SingularSpectrum,
    pub threshold: f64,
    pub effective_rank: usize,
    pub spectral_entropy: f64,
    pub dimensions: usize,
}

pub fn collapse_report(
    m: &Matrix,
    threshold: f64,
    source: impl Into<String>,
) -> Result<CollapseReport> {
    let spectrum = singular_spectrum(m, source)?;
    Ok(CollapseReport {
        effective_rank: effective_rank(&spectrum, threshold),
        spectral_entropy: spectrum.spectral_entropy(),
        dimensions: m.cols(),
        threshold,
        spectrum,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankBoundReport {
    pub embedding_rank: usize,
    /// Numeric rank of the projected table `E·Wᵀ + 1·bᵀ`.
    pub lhs_rank: usize,
    /// `rank(E) + 1`.
    pub rhs_bound: usize,
    pub holds: bool,
}

/// Checks `rank(E·Wᵀ + 1·bᵀ) ≤ rank(E) + 1` numerically.
///
/// `e` is `items × D`, `w` is `D' × D`, `b` has length `D'`. Ranks count
/// singular values above `tol·σ_1` of the respective matrix.
pub fn rank_bound_check(e: &Matrix, w: &Matrix, b: &[f64], tol: f64) -> Result<RankBoundReport> {
    if w.cols() != e.cols() {
        return Err(MmqError::dim(
            "rank_bound_check W columns",
            e.cols(),
            w.cols(),
        ));
    }
    if b.len() != w.rows() {
        return Err(MmqError::dim("rank_bound_check bias", w.rows(), b.len()));
    }
    let mut projected = e.matmul_t(w);
    projected.add_row_broadcast(b);
    let embedding_rank = numeric_rank(&singular_spectrum(e, "E")?, tol);
    let lhs_rank = numeric_rank(&singular_spectrum(&projected, "W·E+b")?, tol);
    let rhs_bound = embedding_rank + 1;
    Ok(RankBoundReport {
        embedding_rank,
        lhs_rank,
        rhs_bound,
        holds: lhs_rank <= rhs_bound,
    })
}
