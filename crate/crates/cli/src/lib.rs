//! Command-line pipeline: corpus generation, quantizer training,
//! recommender training, diagnostics and a consolidated report, all driven
//! by one configuration file and one root seed.

pub mod config;
pub mod error;
pub mod layout;
pub mod manifest;
pub mod report;
pub mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{Preset, RunConfig};
pub use error::{CliError, CliResult};
pub use manifest::RunManifest;
pub use report::{report, RunReport};
pub use stages::{diagnose, gen_data, train_quantizer, train_rec, Selection};

#[derive(Debug, Parser)]
#[command(
    name = "mmq",
    version,
    about = "Multimodal residual quantization and sequential recommendation pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML or JSON config, overlaid on the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory (overrides the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Reconstruction loss to train, or whose artifacts to use.
    #[arg(long, global = true)]
    pub recon: Option<String>,
    /// Semantic-ID initialisation to train or diagnose.
    #[arg(long = "init-sids", global = true)]
    pub init_sids: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the corpus tables, interactions and statistics.
    GenData,
    /// Train the quantizer and export semantic ids and code tables.
    TrainQuantizer,
    /// Train and evaluate the recommender.
    TrainRec,
    /// Spectra, rank bound and distance-order taus.
    Diagnose,
    /// Collect every artifact into report.md and report.json.
    Report {
        /// Defaults to the configured run directory.
        run_dir: Option<PathBuf>,
    },
    /// Every stage in order.
    Pipeline,
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

impl Cli {
    pub fn resolve_config(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), self.preset)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.resolve()
    }

    pub fn selection(&self) -> Selection {
        Selection {
            recon: self.recon.clone(),
            init: self.init_sids.clone(),
        }
    }
}

fn print_data(s: &stages::DataSummary) {
    println!("{}", s.table());
}

fn print_quantizer(runs: &[stages::QuantizerSummary]) {
    for q in runs {
        match (q.first_epoch, q.last_epoch) {
            (Some(a), Some(b)) => println!(
                "quantizer {}: recon loss {:.5} (first epoch) -> {:.5} (epoch {})",
                q.recon, a.recon, b.recon, q.epochs
            ),
            _ => println!("quantizer {}: no training epochs", q.recon),
        }
    }
}

fn print_rec(runs: &[stages::RecSummary]) {
    for r in runs {
        let hr = r.eval.hr_at(10).unwrap_or(f64::NAN);
        let ndcg = r.eval.ndcg_at(10).unwrap_or(f64::NAN);
        let base = r.random_hr.get("10").copied().unwrap_or(f64::NAN);
        println!(
            "recommender {}: HR@10 {hr:.4} (random {base:.4}), nDCG@10 {ndcg:.4}, backbone trainable {:.2}%, base weights unchanged: {}",
            r.init,
            100.0 * r.backbone_trainable_fraction,
            r.base_unchanged
        );
    }
}

fn print_diagnose(d: &stages::DiagnoseSummary) {
    if let Some(c) = &d.collapse {
        println!(
            "effective rank: input tokens {} vs projection-only {} (rank bound {})",
            c.input_effective_rank,
            c.projection_effective_rank,
            if c.rank_bound.holds {
                "holds"
            } else {
                "violated"
            }
        );
    }
    for (k, t) in &d.quantized_tau {
        println!("tau quantized/{k}: {t:.4}");
    }
    for (k, t) in &d.sid_tau {
        println!("tau sid/{k}: {t:.4}");
    }
    for g in &d.gaps {
        println!("gap: {g}");
    }
}

fn print_report(dir: &std::path::Path, r: &RunReport) {
    println!("report written to {}", dir.join("report.md").display());
    for g in &r.gaps {
        println!("gap: {g}");
    }
    for w in &r.warnings {
        println!("warning: {w}");
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    cli.selection().validate()?;
    let cfg = cli.resolve_config()?;
    let sel = cli.selection();
    match &cli.command {
        Command::GenData => print_data(&gen_data(&cfg)?),
        Command::TrainQuantizer => print_quantizer(&train_quantizer(&cfg, &sel)?),
        Command::TrainRec => print_rec(&train_rec(&cfg, &sel)?),
        Command::Diagnose => print_diagnose(&diagnose(&cfg, &sel)?),
        Command::Report { run_dir } => {
            let dir = run_dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
            print_report(&dir, &report(&dir)?);
        }
        Command::Pipeline => {
            print_data(&gen_data(&cfg)?);
            print_quantizer(&train_quantizer(&cfg, &sel)?);
            print_rec(&train_rec(&cfg, &sel)?);
            print_diagnose(&diagnose(&cfg, &sel)?);
            print_report(&cfg.out_dir, &report(&cfg.out_dir)?);
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}
