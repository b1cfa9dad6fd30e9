//! The pipeline stages. Each reads its inputs from the run directory, writes
//! its artifacts there and records them in the manifest.

use std::collections::BTreeMap;
use std::path::PathBuf;

use mmq_core::dataio::{
    generate_synth, load_table, save_table, CorpusStats, EmbeddingTable, InteractionDataset,
    LeaveLastOut, Modality, PerModality, TableTag,
};
use mmq_core::diagnostics::{
    collapse_report, distance_profile, forgetting_report, metric_registry, rank_bound_check,
    save_spectrum_csv, CollapseReport, DiagnosticsReport, DistanceMetric, DistanceProfile,
    RankBoundReport,
};
use mmq_core::diffkit::{load_checkpoint, restore_params, save_checkpoint, Matrix};
use mmq_core::quantizer::{
    assign_ids, code_table_file_name, export_code_embeddings, load_assignments_jsonl,
    recon_registry, save_assignments_jsonl, sid_matrix, train_mm_rqvae, EpochLosses,
    SemanticIdAssignment,
};
use mmq_core::seqrec::{
    evaluate, sid_init_registry, train_recommender, EvalResult, ItemCatalog, ParameterReport,
    Recommender,
};
use mmq_core::MmqError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::error::CliResult;
use crate::layout::RunLayout;
use crate::manifest::{now_unix, RunManifest};

/// Flag-level choices that pick which artifacts a stage handles without
/// changing the configuration.
#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub recon: Option<String>,
    pub init: Option<String>,
}

impl Selection {
    pub fn validate(&self) -> CliResult<()> {
        if let Some(r) = &self.recon {
            recon_registry().create(r)?;
        }
        if let Some(i) = &self.init {
            sid_init_registry().create(i)?;
        }
        Ok(())
    }

    fn recon_modes(&self, cfg: &RunConfig) -> Vec<String> {
        self.recon
            .clone()
            .map_or_else(|| cfg.experiment.recon_modes.clone(), |r| vec![r])
    }

    fn init_modes(&self, cfg: &RunConfig) -> Vec<String> {
        self.init
            .clone()
            .map_or_else(|| cfg.experiment.init_modes.clone(), |i| vec![i])
    }
}

pub struct Corpus {
    pub tables: PerModality<EmbeddingTable>,
    pub dataset: InteractionDataset,
    pub split: LeaveLastOut,
}

pub fn load_corpus(layout: &RunLayout) -> CliResult<Corpus> {
    let require = |rel: PathBuf| {
        let p = layout.abs(&rel);
        if p.is_file() {
            Ok(p)
        } else {
            Err(MmqError::Missing(format!(
                "corpus file {}; run `mmq gen-data` first",
                p.display()
            )))
        }
    };
    let tables = PerModality::try_from_fn(|m| load_table(require(RunLayout::table(m))?))?;
    let dataset =
        InteractionDataset::load_jsonl(require(RunLayout::interactions())?, Some(tables.c.rows()))?;
    let split = dataset.split_leave_last_out();
    Ok(Corpus {
        tables,
        dataset,
        split,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub config_hash: String,
    pub source: String,
    pub dims: PerModality<usize>,
    pub stats: CorpusStats,
    pub train_examples: usize,
    pub test_examples: usize,
    pub excluded_sequences: usize,
}

impl DataSummary {
    /// Markdown table in the shape of the usual dataset-statistics table.
    pub fn table(&self) -> String {
        let s = &self.stats;
        format!(
            "| Users | Items | Interactions | Avg. length | Sparsity (1 - density) |\n\
             |---|---|---|---|---|\n\
             | {} | {} | {} | {:.2} | {:.4}% |\n",
            s.users,
            s.items,
            s.interactions,
            s.avg_sequence_length,
            100.0 * s.sparsity_one_minus_density
        )
    }
}

pub fn gen_data(cfg: &RunConfig) -> CliResult<DataSummary> {
    let started = now_unix();
    let layout = RunLayout::new(&cfg.out_dir);
    layout.ensure_dir("data")?;
    let (tables, dataset, source) = match &cfg.corpus.files {
        Some(f) => {
            let paths = PerModality::new(&f.c, &f.t, &f.v);
            let tables = PerModality::try_from_fn(|m| load_table(paths[m]))?;
            for (m, t) in tables.iter() {
                if t.rows() != tables.c.rows() {
                    return Err(MmqError::dim(
                        format!("rows of table {m}"),
                        tables.c.rows(),
                        t.rows(),
                    )
                    .into());
                }
            }
            let dataset = InteractionDataset::load_jsonl(&f.interactions, Some(tables.c.rows()))?;
            (tables, dataset, "files")
        }
        None => {
            let corpus = generate_synth(&cfg.corpus.synthetic)?;
            (corpus.tables, corpus.dataset, "synthetic")
        }
    };
    let mut artifacts = Vec::new();
    for m in Modality::ALL {
        let table = EmbeddingTable {
            tag: TableTag::Modality(m),
            ..tables[m].clone()
        };
        save_table(layout.abs(RunLayout::table(m)), &table)?;
        artifacts.push(RunLayout::table(m));
    }
    dataset.save_jsonl(layout.abs(RunLayout::interactions()))?;
    artifacts.push(RunLayout::interactions());
    let split = dataset.split_leave_last_out();
    if split.excluded > 0 {
        log::warn!(
            "{} sequences shorter than 3 items were excluded from the split",
            split.excluded
        );
    }
    let summary = DataSummary {
        config_hash: cfg.hash(),
        source: source.into(),
        dims: tables.map(|_, t| t.dim()),
        stats: dataset.stats(),
        train_examples: split.train.len(),
        test_examples: split.test.len(),
        excluded_sequences: split.excluded,
    };
    layout.write_json(RunLayout::stats(), &summary)?;
    artifacts.push(RunLayout::stats());
    RunManifest::record(
        &layout.root,
        "gen-data",
        &summary.config_hash,
        started,
        &artifacts,
    )?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSummary {
    pub config_hash: String,
    pub recon: String,
    pub epochs: usize,
    pub first_epoch: Option<EpochLosses>,
    pub last_epoch: Option<EpochLosses>,
    /// Distinct codes in use per level.
    pub codes_used: PerModality<Vec<usize>>,
}

fn codes_used(
    assignments: &[SemanticIdAssignment],
    items: usize,
    levels: &PerModality<usize>,
) -> CliResult<PerModality<Vec<usize>>> {
    Ok(PerModality::try_from_fn(|m| {
        let sids = sid_matrix(assignments, m, items)?;
        Ok::<_, MmqError>(
            (0..levels[m])
                .map(|l| {
                    let mut seen: Vec<usize> = sids.iter().map(|s| s[l]).collect();
                    seen.sort_unstable();
                    seen.dedup();
                    seen.len()
                })
                .collect(),
        )
    })?)
}

pub fn train_quantizer(cfg: &RunConfig, sel: &Selection) -> CliResult<Vec<QuantizerSummary>> {
    let layout = RunLayout::new(&cfg.out_dir);
    let corpus = load_corpus(&layout)?;
    let items = corpus.tables.c.rows();
    let mut out = Vec::new();
    for recon in sel.recon_modes(cfg) {
        let started = now_unix();
        let dir = RunLayout::quantizer_dir(&recon);
        layout.ensure_dir(&dir)?;
        let qcfg = mmq_core::quantizer::QuantizerConfig {
            recon: recon.clone(),
            ..cfg.quantizer.clone()
        };
        log::info!("training quantizer with {recon} reconstruction");
        let (model, trace) = train_mm_rqvae(&corpus.tables, &qcfg)?;
        let assignments = assign_ids(&model, &corpus.tables)?;
        let mut artifacts = vec![dir.join("model.mmqk"), dir.join("assignments.jsonl")];
        save_checkpoint(layout.abs(&artifacts[0]), &model)?;
        save_assignments_jsonl(layout.abs(&artifacts[1]), &assignments)?;
        for code in export_code_embeddings(&model) {
            let rel = dir.join(code_table_file_name(code.modality, code.level));
            save_table(layout.abs(&rel), &code.table)?;
            artifacts.push(rel);
        }
        let mut csv = String::from("epoch,recon,align,commitment,total,revived_codes\n");
        for (e, l) in trace.epochs.iter().enumerate() {
            csv += &format!(
                "{e},{},{},{},{},{}\n",
                l.recon, l.align, l.commitment, l.total, l.revived_codes
            );
        }
        let trace_path = dir.join("loss_trace.csv");
        layout.write(&trace_path, csv)?;
        artifacts.push(trace_path);
        let summary = QuantizerSummary {
            config_hash: cfg.hash(),
            recon: recon.clone(),
            epochs: trace.epochs.len(),
            first_epoch: trace.epochs.first().copied(),
            last_epoch: trace.epochs.last().copied(),
            codes_used: codes_used(&assignments, items, &qcfg.levels)?,
        };
        let summary_path = dir.join("summary.json");
        layout.write_json(&summary_path, &summary)?;
        artifacts.push(summary_path);
        RunManifest::record(
            &layout.root,
            &format!("train-quantizer/{recon}"),
            &summary.config_hash,
            started,
            &artifacts,
        )?;
        out.push(summary);
    }
    Ok(out)
}

/// Assignments and `codes[m][level]` written by `train-quantizer`.
fn load_quantizer(
    layout: &RunLayout,
    cfg: &RunConfig,
    recon: &str,
) -> CliResult<(Vec<SemanticIdAssignment>, PerModality<Vec<Matrix>>)> {
    let dir = layout.abs(RunLayout::quantizer_dir(recon));
    let assignments_path = dir.join("assignments.jsonl");
    if !assignments_path.is_file() {
        return Err(MmqError::Missing(format!(
            "quantizer artifacts in {}; run `mmq train-quantizer --recon {recon}` first",
            dir.display()
        ))
        .into());
    }
    let assignments = load_assignments_jsonl(assignments_path)?;
    let codes = PerModality::try_from_fn(|m| {
        (0..cfg.quantizer.levels[m])
            .map(|l| load_table(dir.join(code_table_file_name(m, l))).map(|t| t.data))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok((assignments, codes))
}

pub fn init_recommender(
    layout: &RunLayout,
    cfg: &RunConfig,
    corpus: &Corpus,
    recon: &str,
    init: &str,
) -> CliResult<Recommender> {
    let (assignments, codes) = load_quantizer(layout, cfg, recon)?;
    let catalog =
        ItemCatalog::from_artifacts(&corpus.tables, &assignments, &corpus.split.item_counts)?;
    let rcfg = mmq_core::seqrec::SeqRecConfig {
        init_sids: init.to_string(),
        ..cfg.recommender.clone()
    };
    Ok(Recommender::init(&rcfg, catalog, &codes)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecSummary {
    pub config_hash: String,
    pub init: String,
    pub recon: String,
    pub adapters: bool,
    pub params: ParameterReport,
    pub backbone_trainable_fraction: f64,
    pub model_trainable_fraction: f64,
    pub base_sha256_before: String,
    pub base_sha256_after: String,
    pub base_unchanged: bool,
    pub probe_initial: f64,
    pub probe_final: f64,
    pub epoch_losses: Vec<f64>,
    pub eval: EvalResult,
    /// `k / |I|`, the expected hit ratio of a uniformly random ranking.
    pub random_hr: BTreeMap<String, f64>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn train_rec(cfg: &RunConfig, sel: &Selection) -> CliResult<Vec<RecSummary>> {
    let layout = RunLayout::new(&cfg.out_dir);
    let corpus = load_corpus(&layout)?;
    let recon = sel
        .recon
        .clone()
        .unwrap_or_else(|| cfg.quantizer.recon.clone());
    let mut out = Vec::new();
    for init in sel.init_modes(cfg) {
        let started = now_unix();
        let dir = RunLayout::rec_dir(&init);
        layout.ensure_dir(&dir)?;
        let mut model = init_recommender(&layout, cfg, &corpus, &recon, &init)?;
        let rcfg = mmq_core::seqrec::SeqRecConfig {
            init_sids: init.clone(),
            ..cfg.recommender.clone()
        };
        let before = sha256_hex(&model.base_checkpoint_bytes()?);
        log::info!("training recommender with {init} semantic-ID init");
        let trace = train_recommender(&mut model, &corpus.split, &rcfg)?;
        let after = sha256_hex(&model.base_checkpoint_bytes()?);
        let eval = evaluate(&model, &corpus.split.test, &cfg.experiment.eval_ks)?;
        let params = model.parameter_report();
        let items = model.items() as f64;
        let mut artifacts = vec![
            dir.join("model.mmqk"),
            dir.join("eval.json"),
            dir.join("loss_trace.csv"),
        ];
        save_checkpoint(layout.abs(&artifacts[0]), &model)?;
        eval.save_json(layout.abs(&artifacts[1]))?;
        let mut csv = String::from("epoch,bce\n");
        for (e, l) in trace.epochs.iter().enumerate() {
            csv += &format!("{e},{l}\n");
        }
        layout.write(&artifacts[2], csv)?;
        let summary = RecSummary {
            config_hash: cfg.hash(),
            init: init.clone(),
            recon: recon.clone(),
            adapters: rcfg.backbone.lora_enabled(),
            params,
            backbone_trainable_fraction: params.backbone_fraction(),
            model_trainable_fraction: params.model_fraction(),
            base_unchanged: before == after,
            base_sha256_before: before,
            base_sha256_after: after,
            probe_initial: trace.probe_initial,
            probe_final: trace.probe_final,
            epoch_losses: trace.epochs.clone(),
            random_hr: cfg
                .experiment
                .eval_ks
                .iter()
                .map(|&k| (k.to_string(), (k as f64 / items).min(1.0)))
                .collect(),
            eval,
        };
        let summary_path = dir.join("summary.json");
        layout.write_json(&summary_path, &summary)?;
        artifacts.push(summary_path);
        RunManifest::record(
            &layout.root,
            &format!("train-rec/{init}"),
            &summary.config_hash,
            started,
            &artifacts,
        )?;
        out.push(summary);
    }
    Ok(out)
}

/// Reloads a trained recommender from its run directory.
pub fn load_recommender(
    layout: &RunLayout,
    cfg: &RunConfig,
    corpus: &Corpus,
    init: &str,
) -> CliResult<Recommender> {
    let dir = RunLayout::rec_dir(init);
    let summary: RecSummary = layout.read_json(dir.join("summary.json"))?;
    let mut model = init_recommender(layout, cfg, corpus, &summary.recon, init)?;
    restore_params(
        &mut model,
        &load_checkpoint(layout.abs(dir.join("model.mmqk")))?,
    )?;
    Ok(model)
}

/// Per-modality diagnostics of one embedding family against the modality tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauReport {
    pub label: String,
    pub mean_tau: f64,
    pub modalities: BTreeMap<Modality, DiagnosticsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseSummary {
    pub source_init: String,
    pub input_effective_rank: usize,
    pub projection_effective_rank: usize,
    pub dimensions: usize,
    pub rank_bound: RankBoundReport,
    pub input_exceeds_projection: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseSummary {
    pub config_hash: String,
    pub metric: String,
    pub rank_threshold: f64,
    pub collapse: Option<CollapseSummary>,
    /// Mean tau of quantized vs original distances, per reconstruction loss.
    pub quantized_tau: BTreeMap<String, f64>,
    /// Mean tau of trained semantic-ID vs original distances, per init.
    pub sid_tau: BTreeMap<String, f64>,
    pub gaps: Vec<String>,
}

struct Diagnoser<'a> {
    layout: &'a RunLayout,
    cfg: &'a RunConfig,
    corpus: &'a Corpus,
    metric: Box<dyn DistanceMetric>,
    reference: PerModality<DistanceProfile>,
    artifacts: Vec<PathBuf>,
}

impl Diagnoser<'_> {
    fn collapse(&self, m: &Matrix, source: &str) -> CliResult<CollapseReport> {
        Ok(collapse_report(
            m,
            self.cfg.experiment.rank_threshold,
            source,
        )?)
    }

    fn tau_report(
        &mut self,
        label: &str,
        embeddings: &PerModality<Matrix>,
        file: &str,
    ) -> CliResult<TauReport> {
        let mut modalities = BTreeMap::new();
        let mut sum = 0.0;
        for m in Modality::ALL {
            let profile = distance_profile(
                &embeddings[m],
                &self.corpus.split.train,
                self.metric.as_ref(),
            )?;
            let f = forgetting_report(&self.reference[m], &profile)?;
            sum += f.tau;
            let c = self.collapse(&embeddings[m], &format!("{label}/{m}"))?;
            modalities.insert(m, DiagnosticsReport::new(&c, Some(&f)));
        }
        let report = TauReport {
            label: label.to_string(),
            mean_tau: sum / 3.0,
            modalities,
        };
        self.save(file, &report)?;
        Ok(report)
    }

    fn save<T: Serialize>(&mut self, file: &str, value: &T) -> CliResult<()> {
        let rel = RunLayout::diagnostics_dir().join(file);
        self.layout.write_json(&rel, value)?;
        self.artifacts.push(rel);
        Ok(())
    }

    fn save_collapse(&mut self, stem: &str, c: &CollapseReport) -> CliResult<()> {
        self.save(&format!("{stem}.json"), &DiagnosticsReport::new(c, None))?;
        let rel = RunLayout::diagnostics_dir().join(format!("{stem}_spectrum.csv"));
        save_spectrum_csv(&c.spectrum, self.layout.abs(&rel))?;
        self.artifacts.push(rel);
        Ok(())
    }

    fn collapse_check(&mut self, init: &str, model: &Recommender) -> CliResult<CollapseSummary> {
        let tokens = model.inference_tables()?.tokens;
        let proj = &model.tokenizer.proj.c;
        let e_c = &self.corpus.tables.c.data;
        let projected = proj.apply(e_c)?;
        let input = self.collapse(&tokens, "multimodal+SID input tokens")?;
        let projection = self.collapse(&projected, "projection-only input")?;
        self.save_collapse("collapse_input_tokens", &input)?;
        self.save_collapse("collapse_projection_only", &projection)?;
        let layer = &proj.layers[0];
        let rank_bound = rank_bound_check(
            e_c,
            &layer.weight.transpose(),
            layer.bias.data(),
            self.cfg.experiment.rank_tol,
        )?;
        self.save("rank_bound.json", &rank_bound)?;
        Ok(CollapseSummary {
            source_init: init.to_string(),
            input_effective_rank: input.effective_rank,
            projection_effective_rank: projection.effective_rank,
            dimensions: input.dimensions,
            rank_bound,
            input_exceeds_projection: input.effective_rank > projection.effective_rank,
        })
    }
}

/// `ẑ` of every item: the sum of its selected code embeddings.
pub fn quantized_embeddings(
    assignments: &[SemanticIdAssignment],
    codes: &PerModality<Vec<Matrix>>,
    items: usize,
) -> CliResult<PerModality<Matrix>> {
    Ok(PerModality::try_from_fn(|m| {
        let sids = sid_matrix(assignments, m, items)?;
        let dim = codes[m].first().map_or(0, |c| c.cols());
        let mut z = Matrix::zeros(items, dim);
        for (i, path) in sids.iter().enumerate() {
            if path.len() != codes[m].len() {
                return Err(MmqError::dim(
                    format!("levels of item {i} in modality {m}"),
                    codes[m].len(),
                    path.len(),
                ));
            }
            let row = z.row_mut(i);
            for (table, &s) in codes[m].iter().zip(path) {
                if s >= table.rows() {
                    return Err(MmqError::Missing(format!("code {s} in modality {m}")));
                }
                row.iter_mut().zip(table.row(s)).for_each(|(a, b)| *a += b);
            }
        }
        Ok(z)
    })?)
}

pub fn diagnose(cfg: &RunConfig, sel: &Selection) -> CliResult<DiagnoseSummary> {
    let started = now_unix();
    let layout = RunLayout::new(&cfg.out_dir);
    let corpus = load_corpus(&layout)?;
    layout.ensure_dir(RunLayout::diagnostics_dir())?;
    let metric = metric_registry().create(&cfg.experiment.metric)?;
    let reference = PerModality::try_from_fn(|m| {
        distance_profile(&corpus.tables[m].data, &corpus.split.train, metric.as_ref())
    })?;
    let mut d = Diagnoser {
        layout: &layout,
        cfg,
        corpus: &corpus,
        metric,
        reference,
        artifacts: Vec::new(),
    };
    let items = corpus.tables.c.rows();
    let mut summary = DiagnoseSummary {
        config_hash: cfg.hash(),
        metric: cfg.experiment.metric.clone(),
        rank_threshold: cfg.experiment.rank_threshold,
        collapse: None,
        quantized_tau: BTreeMap::new(),
        sid_tau: BTreeMap::new(),
        gaps: Vec::new(),
    };
    for recon in sel.recon_modes(cfg) {
        match load_quantizer(&layout, cfg, &recon) {
            Ok((assignments, codes)) => {
                let z = quantized_embeddings(&assignments, &codes, items)?;
                let r = d.tau_report(
                    &format!("quantized/{recon}"),
                    &z,
                    &format!("tau_quantized_{recon}.json"),
                )?;
                summary.quantized_tau.insert(recon, r.mean_tau);
            }
            Err(crate::error::CliError::Core(MmqError::Missing(what))) => summary.gaps.push(what),
            Err(e) => return Err(e),
        }
    }
    for init in sel.init_modes(cfg) {
        if !layout
            .abs(RunLayout::rec_dir(&init).join("summary.json"))
            .is_file()
        {
            summary.gaps.push(format!(
                "recommender run `{init}`; run `mmq train-rec --init-sids {init}` first"
            ));
            continue;
        }
        let model = load_recommender(&layout, cfg, &corpus, &init)?;
        if summary.collapse.is_none() {
            summary.collapse = Some(d.collapse_check(&init, &model)?);
        }
        let sid = PerModality::try_from_fn(|m| model.sid_embeddings(m))?;
        let r = d.tau_report(
            &format!("sid/{init}"),
            &sid,
            &format!("tau_sid_{init}.json"),
        )?;
        summary.sid_tau.insert(init, r.mean_tau);
    }
    if summary.quantized_tau.is_empty() && summary.sid_tau.is_empty() {
        return Err(MmqError::Missing(format!(
            "trained artifacts to diagnose: {}",
            summary.gaps.join("; ")
        ))
        .into());
    }
    d.save("summary.json", &summary)?;
    let artifacts = std::mem::take(&mut d.artifacts);
    RunManifest::record(
        &layout.root,
        "diagnose",
        &summary.config_hash,
        started,
        &artifacts,
    )?;
    Ok(summary)
}
