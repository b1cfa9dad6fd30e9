//! Embedding-collapse and forgetting diagnostics.

mod kendall;
mod profile;
mod spectrum;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use kendall::kendall_tau;
pub use profile::{
    distance_profile, forgetting_report, metric_registry, Cosine, DistanceMetric, DistanceProfile,
    DistanceRecord, Euclidean, ForgettingReport,
};
pub use spectrum::{
    collapse_report, effective_rank, numeric_rank, rank_bound_check, singular_spectrum,
    CollapseReport, RankBoundReport, SingularSpectrum,
};

use crate::error::{MmqError, Result};

pub const DEFAULT_RANK_THRESHOLD: f64 = 1e-3;

/// Serialized diagnostics: `{"spectrum", "effective_rank", "tau", "pairs"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub spectrum: Vec<f64>,
    pub effective_rank: usize,
    pub tau: Option<f64>,
    pub pairs: Option<usize>,
}

impl DiagnosticsReport {
    pub fn new(collapse: &CollapseReport, forgetting: Option<&ForgettingReport>) -> Self {
        DiagnosticsReport {
            spectrum: collapse.spectrum.values.clone(),
            effective_rank: collapse.effective_rank,
            tau: forgetting.map(|f| f.tau),
            pairs: forgetting.map(|f| f.pairs),
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| MmqError::io(path, e))
    }
}

pub fn save_spectrum_csv(spec: &SingularSpectrum, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, spec.to_csv()).map_err(|e| MmqError::io(path, e))
}
