use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::Recommender;
use crate::dataio::SplitExample;
use crate::error::{MmqError, Result};

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];

/// Rank of the held-out target for one user (1 = best).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRank {
    pub user: u64,
    pub target: usize,
    pub rank: usize,
}

/// `{"HR": {"5": .., "10": .., "20": ..}, "nDCG": {..}, "users": n}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(rename = "HR")]
    pub hr: BTreeMap<String, f64>,
    #[serde(rename = "nDCG")]
    pub ndcg: BTreeMap<String, f64>,
    pub users: usize,
    #[serde(skip)]
    pub ranks: Vec<UserRank>,
}

impl EvalResult {
    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.hr.get(&k.to_string()).copied()
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ndcg.get(&k.to_string()).copied()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| MmqError::io(path, e))
    }
}

/// `1 + #{s > s_target} + #{s == s_target, id < target}`.
pub fn rank_of(scores: &[f64], target: usize) -> Result<usize> {
    let Some(&st) = scores.get(target) else {
        return Err(MmqError::Missing(format!("score for target item {target}")));
    };
    if !st.is_finite() {
        return Err(MmqError::NonFinite(format!(
            "score of target item {target}"
        )));
    }
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            return Err(MmqError::NonFinite(format!("score of item {i}")));
        }
        if s > st || (s == st && i < target) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// HR@k and nDCG@k from per-user ranks.
pub fn metrics_from_ranks(ranks: Vec<UserRank>, ks: &[usize]) -> Result<EvalResult> {
    if ranks.is_empty() {
        return Err(MmqError::InvalidArgument(
            "evaluation over an empty test set".into(),
        ));
    }
    if let Some(r) = ranks.iter().find(|r| r.rank == 0) {
        return Err(MmqError::InvalidArgument(format!(
            "rank 0 for user {}",
            r.user
        )));
    }
    let n = ranks.len() as f64;
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        let hits = ranks.iter().filter(|r| r.rank <= k).count() as f64;
        let gain: f64 = ranks
            .iter()
            .filter(|r| r.rank <= k)
            .map(|r| 1.0 / ((r.rank + 1) as f64).log2())
            .sum();
        hr.insert(k.to_string(), hits / n);
        ndcg.insert(k.to_string(), gain / n);
    }
    Ok(EvalResult {
        hr,
        ndcg,
        users: ranks.len(),
        ranks,
    })
}

/// Full-catalog ranking of each example's target after its history.
///
/// Users are scored in parallel; results keep the order of `examples`.
pub fn evaluate(
    model: &Recommender,
    examples: &[SplitExample],
    ks: &[usize],
) -> Result<EvalResult> {
    if examples.is_empty() {
        return Err(MmqError::InvalidArgument(
            "evaluation over an empty test set".into(),
        ));
    }
    let tables = model.inference_tables()?;
    let ranks = examples
        .par_iter()
        .map(|ex| {
            let scores = model.score_all(&tables, &ex.history)?;
            Ok(UserRank {
                user: ex.user,
                target: ex.target,
                rank: rank_of(&scores, ex.target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    metrics_from_ranks(ranks, ks)
}
