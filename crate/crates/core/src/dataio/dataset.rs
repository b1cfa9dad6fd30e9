use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MmqError, Result};

/// One line of the interaction file: `{"user": u64, "items": [u64, ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSequence {
    pub user: u64,
    pub items: Vec<u64>,
}

/// Ordered per-user item sequences over a catalog of `num_items` items.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    pub num_items: usize,
    pub sequences: Vec<UserSequence>,
}

/// One (history → target) example of the leave-last-out split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitExample {
    pub user: u64,
    pub history: Vec<usize>,
    pub target: usize,
}

/// Leave-last-out split.
///
/// Training examples take item `N−1` as target and the first `N−2` items as
/// history; test examples take item `N` as target and the first `N−1` items
/// as history. Item counts cover the first `N−1` items of each sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaveLastOut {
    pub num_items: usize,
    pub train: Vec<SplitExample>,
    pub test: Vec<SplitExample>,
    pub item_counts: Vec<u64>,
    /// Sequences shorter than three items, left out of both views.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_sequence_length: f64,
    /// `1 − interactions / (users · items)`.
    pub sparsity_one_minus_density: f64,
}

impl InteractionDataset {
    pub fn new(num_items: usize, sequences: Vec<UserSequence>) -> Result<Self> {
        for s in &sequences {
            if let Some(&bad) = s.items.iter().find(|&&i| i as usize >= num_items) {
                return Err(MmqError::InvalidArgument(format!(
                    "user {} references item {bad} outside a catalog of {num_items}",
                    s.user
                )));
            }
        }
        Ok(InteractionDataset {
            num_items,
            sequences,
        })
    }

    pub fn interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.items.len()).sum()
    }

    pub fn stats(&self) -> CorpusStats {
        let users = self.sequences.len();
        let interactions = self.interactions();
        let cells = (users * self.num_items).max(1) as f64;
        CorpusStats {
            users,
            items: self.num_items,
            interactions,
            avg_sequence_length: interactions as f64 / users.max(1) as f64,
            sparsity_one_minus_density: 1.0 - interactions as f64 / cells,
        }
    }

    pub fn split_leave_last_out(&self) -> LeaveLastOut {
        let mut train = Vec::with_capacity(self.sequences.len());
        let mut test = Vec::with_capacity(self.sequences.len());
        let mut item_counts = vec![0u64; self.num_items];
        let mut excluded = 0;
        for s in &self.sequences {
            let n = s.items.len();
            if n < 3 {
                excluded += 1;
                continue;
            }
            let items: Vec<usize> = s.items.iter().map(|&i| i as usize).collect();
            for &i in &items[..n - 1] {
                item_counts[i] += 1;
            }
            train.push(SplitExample {
                user: s.user,
                history: items[..n - 2].to_vec(),
                target: items[n - 2],
            });
            test.push(SplitExample {
                user: s.user,
                history: items[..n - 1].to_vec(),
                target: items[n - 1],
            });
        }
        if excluded > 0 {
            log::warn!("leave-last-out: excluded {excluded} sequences shorter than 3");
        }
        LeaveLastOut {
            num_items: self.num_items,
            train,
            test,
            item_counts,
            excluded,
        }
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| MmqError::io(path, e))?;
        let mut w = BufWriter::new(f);
        for s in &self.sequences {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n").map_err(|e| MmqError::io(path, e))?;
        }
        w.flush().map_err(|e| MmqError::io(path, e))
    }

    /// Reads JSON lines. The catalog size is the given `num_items`, or one past
    /// the largest item id when `None`.
    pub fn load_jsonl(path: impl AsRef<Path>, num_items: Option<usize>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| MmqError::io(path, e))?;
        let mut sequences = Vec::new();
        for (lineno, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| MmqError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let seq: UserSequence = serde_json::from_str(&line).map_err(|e| {
                MmqError::format(
                    path,
                    crate::error::FormatErrorKind::CorruptHeader(format!(
                        "line {}: {e}",
                        lineno + 1
                    )),
                )
            })?;
            sequences.push(seq);
        }
        let n = num_items.unwrap_or_else(|| {
            sequences
                .iter()
                .flat_map(|s| s.items.iter())
                .max()
                .map(|&m| m as usize + 1)
                .unwrap_or(0)
        });
        InteractionDataset::new(n, sequences)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(seqs: &[&[u64]]) -> InteractionDataset {
        InteractionDataset::new(
            10,
            seqs.iter()
                .enumerate()
                .map(|(u, s)| UserSequence {
                    user: u as u64,
                    items: s.to_vec(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn four_item_sequence() {
        let split = ds(&[&[0, 1, 2, 3]]).split_leave_last_out();
        assert_eq!(split.train[0].history, vec![0, 1]);
        assert_eq!(split.train[0].target, 2);
        assert_eq!(split.test[0].history, vec![0, 1, 2]);
        assert_eq!(split.test[0].target, 3);
    }

    #[test]
    fn three_item_sequence() {
        let split = ds(&[&[5, 6, 7]]).split_leave_last_out();
        assert_eq!(split.train[0].history, vec![5]);
        assert_eq!((split.train[0].target, split.test[0].target), (6, 7));
    }

    #[test]
    fn short_sequences_are_excluded() {
        let split = ds(&[&[1, 2], &[1, 2, 3]]).split_leave_last_out();
        assert_eq!(split.excluded, 1);
        assert_eq!(split.train.len(), 1);
    }

    #[test]
    fn counts_match_hand_tally_and_skip_test_targets() {
        // user 0: 1 2 1 9 → counts 1:2, 2:1 (9 is a test target)
        // user 1: 2 3 4   → counts 2:1, 3:1 (4 is a test target)
        let split = ds(&[&[1, 2, 1, 9], &[2, 3, 4]]).split_leave_last_out();
        let mut expected = vec![0u64; 10];
        expected[1] = 2;
        expected[2] = 2;
        expected[3] = 1;
        assert_eq!(split.item_counts, expected);
    }

    #[test]
    fn out_of_catalog_item_rejected() {
        let r = InteractionDataset::new(
            3,
            vec![UserSequence {
                user: 0,
                items: vec![0, 3],
            }],
        );
        assert!(r.is_err());
    }

    #[test]
    fn jsonl_roundtrip() {
        let d = ds(&[&[1, 2, 3], &[4, 5, 6, 7]]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.jsonl");
        d.save_jsonl(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"user":0,"items":[1,2,3]}"#
        );
        assert_eq!(InteractionDataset::load_jsonl(&p, Some(10)).unwrap(), d);
    }

    #[test]
    fn stats_sparsity() {
        let s = ds(&[&[1, 2, 3], &[4, 5, 6, 7]]).stats();
        assert_eq!(s.interactions, 7);
        assert!((s.sparsity_one_minus_density - (1.0 - 7.0 / 20.0)).abs() < 1e-15);
    }
}
