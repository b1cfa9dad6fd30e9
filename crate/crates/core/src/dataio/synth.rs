//! Synthetic multimodal corpus with planted latent structure.
//!
//! Each item has a latent factor `z ~ N(0, I_k)`. Modality tables are noisy
//! linear mixtures `E_j = z·A_jᵀ + noise_j`, so the three modalities correlate
//! through `z`. User sequences are Markov walks whose next item is drawn with
//! probability `∝ exp(−‖z_a − z_b‖ / T)` over all `b ≠ a`.

use serde::{Deserialize, Serialize};

use super::{EmbeddingTable, InteractionDataset, PerModality, TableTag, UserSequence};
use crate::diffkit::{sq_dist, Matrix};
use crate::error::{MmqError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub items: usize,
    pub users: usize,
    pub latent_dim: usize,
    pub dims: PerModality<usize>,
    pub noise: PerModality<f64>,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    /// `T` of the walk; `inf` gives a uniform walk.
    pub markov_temperature: f64,
    /// Use one mixing matrix for every modality (each takes its leading rows).
    pub shared_mixing: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            items: 1000,
            users: 2000,
            latent_dim: 8,
            dims: PerModality::new(16, 32, 32),
            noise: PerModality::new(0.1, 0.1, 0.1),
            seq_len_min: 5,
            seq_len_max: 20,
            markov_temperature: 0.25,
            shared_mixing: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub const MIN_ITEMS: usize = 50;
    pub const MIN_USERS: usize = 100;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MmqError::Config(m));
        if self.items < Self::MIN_ITEMS {
            return bad(format!(
                "synthetic corpus needs at least {} items, got {}",
                Self::MIN_ITEMS,
                self.items
            ));
        }
        if self.users < Self::MIN_USERS {
            return bad(format!(
                "synthetic corpus needs at least {} users, got {}",
                Self::MIN_USERS,
                self.users
            ));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if let Some((m, _)) = self.dims.iter().find(|(_, &d)| d == 0) {
            return bad(format!("dimension of modality {m} must be positive"));
        }
        if let Some((m, _)) = self
            .noise
            .iter()
            .find(|(_, &s)| !(s >= 0.0) || !s.is_finite())
        {
            return bad(format!("noise of modality {m} must be finite and >= 0"));
        }
        if self.seq_len_min < 3 || self.seq_len_min > self.seq_len_max {
            return bad(format!(
                "sequence length range [{}, {}] must satisfy 3 <= min <= max",
                self.seq_len_min, self.seq_len_max
            ));
        }
        if self.seq_len_max > self.items {
            return bad(format!(
                "sequence length {} exceeds the catalog of {} items",
                self.seq_len_max, self.items
            ));
        }
        if !(self.markov_temperature > 0.0) {
            return bad(format!(
                "markov_temperature must be > 0, got {}",
                self.markov_temperature
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub tables: PerModality<EmbeddingTable>,
    pub dataset: InteractionDataset,
    /// Planted item latents, `items × latent_dim`.
    pub latents: Matrix,
}

pub fn generate_synth(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let k = cfg.latent_dim;
    let mut latent_rng = Rng::derive(cfg.seed, "synth/latents");
    let latents = Matrix::randn(cfg.items, k, 1.0, &mut latent_rng);

    let mix_std = 1.0 / (k as f64).sqrt();
    let max_dim = cfg.dims.iter().map(|(_, &d)| d).max().unwrap_or(0);
    let shared = {
        let mut rng = Rng::derive(cfg.seed, "synth/mixing/shared");
        Matrix::randn(max_dim, k, mix_std, &mut rng)
    };
    let tables = PerModality::try_from_fn(|m| -> Result<EmbeddingTable> {
        let d = cfg.dims[m];
        let mixing = if cfg.shared_mixing {
            shared.select_rows(&(0..d).collect::<Vec<_>>())
        } else {
            let mut rng = Rng::derive(cfg.seed, &format!("synth/mixing/{m}"));
            Matrix::randn(d, k, mix_std, &mut rng)
        };
        let mut e = latents.matmul_t(&mixing);
        if cfg.noise[m] > 0.0 {
            let mut rng = Rng::derive(cfg.seed, &format!("synth/noise/{m}"));
            e.add_assign(&Matrix::randn(cfg.items, d, cfg.noise[m], &mut rng));
        }
        EmbeddingTable::new(
            TableTag::Modality(m),
            e,
            format!("synthetic seed={} modality={m}", cfg.seed),
        )
    })?;

    let walk = MarkovWalk::new(&latents, cfg.markov_temperature);
    let mut rng = Rng::derive(cfg.seed, "synth/walks");
    let sequences = (0..cfg.users)
        .map(|u| {
            let len = rng.inclusive(cfg.seq_len_min, cfg.seq_len_max);
            let mut items = Vec::with_capacity(len);
            let mut cur = rng.below(cfg.items);
            items.push(cur as u64);
            for _ in 1..len {
                cur = walk.next(cur, &mut rng);
                items.push(cur as u64);
            }
            UserSequence {
                user: u as u64,
                items,
            }
        })
        .collect();

    Ok(SynthCorpus {
        tables,
        dataset: InteractionDataset::new(cfg.items, sequences)?,
        latents,
    })
}

/// Row-wise cumulative transition probabilities of the latent-distance walk.
pub(crate) struct MarkovWalk {
    n: usize,
    cdf: Vec<f64>,
}

impl MarkovWalk {
    pub(crate) fn new(latents: &Matrix, temperature: f64) -> Self {
        let n = latents.rows();
        let mut cdf = vec![0.0; n * n];
        let mut logits = vec![0.0; n];
        for a in 0..n {
            for (b, l) in logits.iter_mut().enumerate() {
                *l = if a == b {
                    f64::NEG_INFINITY
                } else if temperature.is_infinite() {
                    0.0
                } else {
                    -sq_dist(latents.row(a), latents.row(b)).sqrt() / temperature
                };
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let row = &mut cdf[a * n..(a + 1) * n];
            let mut acc = 0.0;
            for (c, &l) in row.iter_mut().zip(&logits) {
                acc += (l - mx).exp();
                *c = acc;
            }
            row.iter_mut().for_each(|c| *c /= acc);
        }
        MarkovWalk { n, cdf }
    }

    pub(crate) fn next(&self, from: usize, rng: &mut Rng) -> usize {
        let row = &self.cdf[from * self.n..(from + 1) * self.n];
        let u = rng.uniform();
        let idx = row.partition_point(|&c| c <= u).min(self.n - 1);
        // Skip zero-probability cells (only the self-transition) landed on by rounding.
        if idx == from {
            if from + 1 < self.n {
                from + 1
            } else {
                from - 1
            }
        } else {
            idx
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Modality;

    fn small() -> SynthConfig {
        SynthConfig {
            items: 60,
            users: 120,
            ..Default::default()
        }
    }

    #[test]
    fn regeneration_is_bitwise_identical() {
        let a = generate_synth(&small()).unwrap();
        let b = generate_synth(&small()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        for m in Modality::ALL {
            assert_eq!(a.tables[m].data, b.tables[m].data);
        }
    }

    #[test]
    fn shared_mixing_without_noise_aligns_modalities() {
        let cfg = SynthConfig {
            shared_mixing: true,
            noise: PerModality::new(0.0, 0.0, 0.0),
            ..small()
        };
        let c = generate_synth(&cfg).unwrap();
        let (ec, et) = (&c.tables.c.data, &c.tables.t.data);
        for i in 0..cfg.items {
            assert_eq!(ec.row(i), &et.row(i)[..ec.cols()]);
        }
    }

    #[test]
    fn infeasible_lengths_rejected() {
        let cfg = SynthConfig {
            seq_len_max: 61,
            seq_len_min: 5,
            ..small()
        };
        assert!(generate_synth(&cfg).is_err());
        let cfg = SynthConfig {
            items: 10,
            ..small()
        };
        assert!(matches!(generate_synth(&cfg), Err(MmqError::Config(_))));
    }

    #[test]
    fn sequences_respect_length_range() {
        let c = generate_synth(&small()).unwrap();
        assert_eq!(c.dataset.sequences.len(), 120);
        assert!(c
            .dataset
            .sequences
            .iter()
            .all(|s| (5..=20).contains(&s.items.len())));
        // no immediate self-repeats
        assert!(c
            .dataset
            .sequences
            .iter()
            .all(|s| s.items.windows(2).all(|w| w[0] != w[1])));
    }

    #[test]
    fn infinite_temperature_walk_is_uniform() {
        // χ² over the 49 reachable items from a fixed start, 10⁵ draws.
        let mut rng = Rng::new(5);
        let latents = Matrix::randn(50, 4, 1.0, &mut rng);
        let walk = MarkovWalk::new(&latents, f64::INFINITY);
        let draws = 100_000;
        let mut counts = vec![0usize; 50];
        for _ in 0..draws {
            counts[walk.next(7, &mut rng)] += 1;
        }
        assert_eq!(counts[7], 0);
        let expected = draws as f64 / 49.0;
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != 7)
            .map(|(_, &c)| (c as f64 - expected).powi(2) / expected)
            .sum();
        let dof = 48.0;
        assert!(
            (chi2 - dof).abs() <= 3.0 * (2.0 * dof).sqrt(),
            "chi2 {chi2}"
        );
    }

    #[test]
    fn low_temperature_prefers_latent_neighbours() {
        let mut rng = Rng::new(6);
        let latents = Matrix::randn(80, 4, 1.0, &mut rng);
        let walk = MarkovWalk::new(&latents, 0.05);
        let nearest = (0..80)
            .filter(|&b| b != 3)
            .min_by(|&a, &b| {
                sq_dist(latents.row(3), latents.row(a))
                    .total_cmp(&sq_dist(latents.row(3), latents.row(b)))
            })
            .unwrap();
        let hits = (0..1000)
            .filter(|_| walk.next(3, &mut rng) == nearest)
            .count();
        assert!(hits > 300, "{hits}");
    }
}
