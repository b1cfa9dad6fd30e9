use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kendall_tau;
use crate::dataio::SplitExample;
use crate::diffkit::{dot, norm, sq_dist, Matrix};
use crate::error::{MmqError, Result};
use crate::registry::Registry;

/// Distance between two item embeddings.
pub trait DistanceMetric: Send + Sync {
    fn name(&self) -> &'static str;
    fn distance(&self, a: &[f64], b: &[f64]) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Euclidean;

impl DistanceMetric for Euclidean {
    fn name(&self) -> &'static str {
        "euclidean"
    }

    fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        sq_dist(a, b).sqrt()
    }
}

/// `1 − cos(a, b)`; zero vectors are at distance 1 from everything.
#[derive(Debug, Clone, Copy, Default)]
pub struct Cosine;

impl DistanceMetric for Cosine {
    fn name(&self) -> &'static str {
        "cosine"
    }

    fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let denom = norm(a) * norm(b);
        if denom == 0.0 {
            return 1.0;
        }
        (1.0 - dot(a, b) / denom).max(0.0)
    }
}

pub fn metric_registry() -> Registry<dyn DistanceMetric> {
    let mut r: Registry<dyn DistanceMetric> = Registry::new("distance metric");
    r.register("euclidean", || Box::new(Euclidean));
    r.register("cosine", || Box::new(Cosine));
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRecord {
    pub user: u64,
    pub behavioral_item: usize,
    pub target_item: usize,
    pub distance: f64,
}

/// Behavioral-to-target distances, one record per history position per user.
///
/// Records follow the order of `examples` and then history position, so two
/// profiles built from the same examples are index-aligned. Repeated
/// `(item, item)` pairs are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceProfile {
    pub metric: String,
    pub records: Vec<DistanceRecord>,
}

impl DistanceProfile {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.distance).collect()
    }
}

/// Builds the profile from an item-embedding table (row `i` embeds item `i`).
pub fn distance_profile(
    embeddings: &Matrix,
    examples: &[SplitExample],
    metric: &dyn DistanceMetric,
) -> Result<DistanceProfile> {
    let n = embeddings.rows();
    let per_user: Vec<Vec<DistanceRecord>> = examples
        .par_iter()
        .map(|ex| {
            if ex.target >= n {
                return Err(MmqError::Missing(format!(
                    "embedding for item {}",
                    ex.target
                )));
            }
            let t = embeddings.row(ex.target);
            ex.history
                .iter()
                .map(|&h| {
                    if h >= n {
                        return Err(MmqError::Missing(format!("embedding for item {h}")));
                    }
                    Ok(DistanceRecord {
                        user: ex.user,
                        behavioral_item: h,
                        target_item: ex.target,
                        distance: metric.distance(embeddings.row(h), t),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(DistanceProfile {
        metric: metric.name().to_string(),
        records: per_user.into_iter().flatten().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub tau: f64,
    pub pairs: usize,
}

/// Kendall tau between the distance orderings of two aligned profiles.
pub fn forgetting_report(
    reference: &DistanceProfile,
    new: &DistanceProfile,
) -> Result<ForgettingReport> {
    if reference.len() != new.len() {
        return Err(MmqError::dim(
            "forgetting_report profiles",
            reference.len(),
            new.len(),
        ));
    }
    let aligned = reference.records.iter().zip(&new.records).all(|(a, b)| {
        a.user == b.user && a.behavioral_item == b.behavioral_item && a.target_item == b.target_item
    });
    if !aligned {
        return Err(MmqError::InvalidArgument(
            "forgetting_report: profiles are not index-aligned".into(),
        ));
    }
    Ok(ForgettingReport {
        tau: kendall_tau(&reference.distances(), &new.distances())?,
        pairs: reference.len(),
    })
}
