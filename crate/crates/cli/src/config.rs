use std::path::{Path, PathBuf};

use mmq_core::dataio::{PerModality, SynthConfig};
use mmq_core::diagnostics::{metric_registry, DEFAULT_RANK_THRESHOLD};
use mmq_core::quantizer::{recon_registry, QuantizerConfig};
use mmq_core::rng::Rng;
use mmq_core::seqrec::{sid_init_registry, SeqRecConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Externally encoded tables and interactions used instead of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusFiles {
    pub c: PathBuf,
    pub t: PathBuf,
    pub v: PathBuf,
    pub interactions: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub synthetic: SynthConfig,
    /// When set, replaces the synthetic corpus.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub files: Option<CorpusFiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Reconstruction losses trained by `train-quantizer`.
    pub recon_modes: Vec<String>,
    /// Semantic-ID initialisations trained by `train-rec`.
    pub init_modes: Vec<String>,
    pub rank_threshold: f64,
    /// Numeric-rank cut for the rank-bound check, relative to `σ_1`.
    pub rank_tol: f64,
    pub metric: String,
    pub eval_ks: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            recon_modes: vec!["mmd".into(), "mse".into()],
            init_modes: vec!["code-embeddings".into(), "random".into()],
            rank_threshold: DEFAULT_RANK_THRESHOLD,
            rank_tol: 1e-8,
            metric: "euclidean".into(),
            eval_ks: vec![5, 10, 20],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every stage seed is derived from it by stage name.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub quantizer: QuantizerConfig,
    pub recommender: SeqRecConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("mmq-run"),
            corpus: CorpusConfig::default(),
            quantizer: QuantizerConfig::default(),
            recommender: SeqRecConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Desk-scale corpus and models.
    Desk,
    /// Large codebooks, full-width embeddings and long warm-up.
    PaperScale,
}

impl Preset {
    pub fn config(self) -> RunConfig {
        let mut cfg = RunConfig::default();
        if self == Preset::PaperScale {
            cfg.corpus.synthetic.dims = PerModality::new(64, 1280, 1280);
            cfg.quantizer.codebook_size = PerModality::new(256, 256, 256);
            cfg.quantizer.levels = PerModality::new(4, 4, 4);
            cfg.quantizer.weights.alpha = 1.0;
            cfg.quantizer.weights.beta = 1e-3;
            cfg.quantizer.weights.gamma = 1.0;
            let rec = &mut cfg.recommender;
            rec.epochs = 3;
            rec.lr = 3e-4;
            rec.batch_users = 16;
            rec.backbone.lora_rank = 8;
            rec.backbone.lora_alpha = 16.0;
            rec.warmup_steps = 100;
        }
        cfg
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Preset values overlaid with the file at `path` (`.json` or TOML).
    /// Unknown keys are rejected.
    pub fn load(path: Option<&Path>, preset: Preset) -> CliResult<RunConfig> {
        let Some(path) = path else {
            return Ok(preset.config());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let over: toml::Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        };
        RunConfig::overlay(preset, over)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_toml_str(text: &str, preset: Preset) -> CliResult<RunConfig> {
        let over: toml::Value =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        RunConfig::overlay(preset, over).map_err(CliError::Config)
    }

    fn overlay(preset: Preset, over: toml::Value) -> Result<RunConfig, String> {
        let mut base = toml::Value::try_from(preset.config()).map_err(|e| e.to_string())?;
        merge(&mut base, over);
        base.try_into::<RunConfig>().map_err(|e| e.to_string())
    }

    /// Overwrites the stage seeds from the root seed and checks every section.
    /// Stage seeds keep 63 bits so the resolved config stays valid TOML.
    pub fn resolve(mut self) -> CliResult<RunConfig> {
        let stage = |name| Rng::sub_seed(self.seed, name) & i64::MAX as u64;
        self.corpus.synthetic.seed = stage("synth");
        self.quantizer.seed = stage("quantizer");
        self.recommender.seed = stage("recommender");
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.corpus.files.is_none() {
            self.corpus.synthetic.validate()?;
        }
        self.quantizer.validate()?;
        self.recommender.validate()?;
        let ex = &self.experiment;
        if ex.recon_modes.is_empty() || ex.init_modes.is_empty() {
            return Err(CliError::Config(
                "experiment recon_modes and init_modes must not be empty".into(),
            ));
        }
        let recon = recon_registry();
        for r in &ex.recon_modes {
            recon.create(r)?;
        }
        let init = sid_init_registry();
        for i in &ex.init_modes {
            init.create(i)?;
        }
        metric_registry().create(&ex.metric)?;
        if !(ex.rank_threshold > 0.0 && ex.rank_threshold < 1.0) {
            return Err(CliError::Config(format!(
                "rank_threshold must be in (0, 1), got {}",
                ex.rank_threshold
            )));
        }
        if !(ex.rank_tol > 0.0 && ex.rank_tol < 1.0) {
            return Err(CliError::Config(format!(
                "rank_tol must be in (0, 1), got {}",
                ex.rank_tol
            )));
        }
        if ex.eval_ks.is_empty() || ex.eval_ks.contains(&0) {
            return Err(CliError::Config(
                "eval_ks must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the configuration without the output directory.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out_dir");
        }
        hex(&Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_preset() {
        assert_eq!(
            RunConfig::from_toml_str("", Preset::Desk).unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn nested_override_keeps_siblings() {
        let cfg = RunConfig::from_toml_str(
            "[recommender.backbone]\nlora_rank = 4\n",
            Preset::PaperScale,
        )
        .unwrap();
        assert_eq!(cfg.recommender.backbone.lora_rank, 4);
        assert_eq!(cfg.recommender.warmup_steps, 100);
        assert_eq!(cfg.quantizer.levels, PerModality::new(4, 4, 4));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml_str("[quantizer]\nlevelz = 3\n", Preset::Desk).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("levelz"), "{err}");
    }

    #[test]
    fn unknown_strategy_fails_validation() {
        let mut cfg = RunConfig::default();
        cfg.experiment.recon_modes.push("l1".into());
        assert_eq!(cfg.resolve().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn stage_seeds_follow_the_root() {
        let a = RunConfig::default().resolve().unwrap();
        let b = RunConfig {
            seed: 1,
            ..RunConfig::default()
        }
        .resolve()
        .unwrap();
        assert_ne!(a.quantizer.seed, b.quantizer.seed);
        assert_ne!(a.quantizer.seed, a.recommender.seed);
        assert_eq!(a, RunConfig::default().resolve().unwrap());
    }

    #[test]
    fn hash_ignores_out_dir() {
        let a = RunConfig::default();
        let b = RunConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig {
            seed: 5,
            ..a.clone()
        };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = Preset::PaperScale.config();
        assert_eq!(
            RunConfig::from_toml_str(&cfg.to_toml().unwrap(), Preset::Desk).unwrap(),
            cfg
        );
        for seed in 0..20 {
            let resolved = RunConfig {
                seed,
                ..RunConfig::default()
            }
            .resolve()
            .unwrap();
            assert_eq!(
                RunConfig::from_toml_str(&resolved.to_toml().unwrap(), Preset::Desk).unwrap(),
                resolved
            );
        }
    }
}
