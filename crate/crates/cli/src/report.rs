use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mmq_core::MmqError;
use serde::{Deserialize, Serialize};

use crate::error::CliResult;
use crate::layout::RunLayout;
use crate::manifest::{now_unix, RunManifest};
use crate::stages::{DataSummary, DiagnoseSummary, QuantizerSummary, RecSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: Option<String>,
    pub corpus: Option<DataSummary>,
    pub quantizer: BTreeMap<String, QuantizerSummary>,
    pub recommender: BTreeMap<String, RecSummary>,
    pub diagnostics: Option<DiagnoseSummary>,
    pub gaps: Vec<String>,
    pub warnings: Vec<String>,
}

fn optional<T: serde::de::DeserializeOwned>(
    layout: &RunLayout,
    rel: PathBuf,
    gaps: &mut Vec<String>,
) -> CliResult<Option<T>> {
    if !layout.abs(&rel).is_file() {
        gaps.push(format!("{} is missing", rel.display()));
        return Ok(None);
    }
    layout.read_json(rel).map(Some)
}

fn hash_warnings(report: &RunReport, manifest: Option<&RunManifest>) -> Vec<String> {
    let mut seen: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut note =
        |hash: &str, source: String| seen.entry(hash.to_string()).or_default().push(source);
    if let Some(c) = &report.corpus {
        note(&c.config_hash, "data/stats.json".into());
    }
    for (k, q) in &report.quantizer {
        note(&q.config_hash, format!("quantizer/{k}"));
    }
    for (k, r) in &report.recommender {
        note(&r.config_hash, format!("rec/{k}"));
    }
    if let Some(d) = &report.diagnostics {
        note(&d.config_hash, "diagnostics".into());
    }
    if let Some(m) = manifest {
        for (stage, rec) in &m.stages {
            if stage != "report" {
                note(&rec.config_hash, format!("manifest stage {stage}"));
            }
        }
    }
    if seen.len() <= 1 {
        return Vec::new();
    }
    let groups: Vec<String> = seen
        .iter()
        .map(|(h, sources)| format!("{} in {}", &h[..h.len().min(12)], sources.join(", ")))
        .collect();
    vec![format!(
        "config hash mismatch across artifacts: {}",
        groups.join("; ")
    )]
}

/// Collects every stage summary under `run_dir` into `report.md` and
/// `report.json`. Missing artifacts become gaps rather than errors.
pub fn report(run_dir: &Path) -> CliResult<RunReport> {
    let started = now_unix();
    if !run_dir.is_dir() {
        return Err(MmqError::Missing(format!("run directory {}", run_dir.display())).into());
    }
    let layout = RunLayout::new(run_dir);
    let manifest = RunManifest::load(run_dir)?;
    let mut gaps = Vec::new();
    if manifest.is_none() {
        gaps.push("manifest.json is missing".into());
    }
    let corpus = optional(&layout, RunLayout::stats(), &mut gaps)?;
    let mut quantizer = BTreeMap::new();
    for name in layout.subdirs("quantizer") {
        if let Some(s) = optional(
            &layout,
            RunLayout::quantizer_dir(&name).join("summary.json"),
            &mut gaps,
        )? {
            quantizer.insert(name, s);
        }
    }
    if quantizer.is_empty() {
        gaps.push("no quantizer runs".into());
    }
    let mut recommender = BTreeMap::new();
    for name in layout.subdirs("rec") {
        if let Some(s) = optional(
            &layout,
            RunLayout::rec_dir(&name).join("summary.json"),
            &mut gaps,
        )? {
            recommender.insert(name, s);
        }
    }
    if recommender.is_empty() {
        gaps.push("no recommender runs".into());
    }
    let diagnostics: Option<DiagnoseSummary> = optional(
        &layout,
        RunLayout::diagnostics_dir().join("summary.json"),
        &mut gaps,
    )?;
    if let Some(d) = &diagnostics {
        gaps.extend(d.gaps.iter().map(|g| format!("diagnostics: {g}")));
    }
    if let Some(m) = &manifest {
        for p in m.missing_artifacts(run_dir) {
            gaps.push(format!(
                "{} is listed in the manifest but missing",
                p.display()
            ));
        }
    }
    let mut report = RunReport {
        config_hash: manifest.as_ref().map(|m| m.config_hash.clone()),
        corpus,
        quantizer,
        recommender,
        diagnostics,
        gaps,
        warnings: Vec::new(),
    };
    report.warnings = hash_warnings(&report, manifest.as_ref());
    for w in &report.warnings {
        log::warn!("{w}");
    }
    layout.write("report.md", render(&report))?;
    layout.write_json("report.json", &report)?;
    let hash = report.config_hash.clone().unwrap_or_default();
    RunManifest::record(
        run_dir,
        "report",
        &hash,
        started,
        &["report.md".into(), "report.json".into()],
    )?;
    Ok(report)
}

fn render(r: &RunReport) -> String {
    let mut s = String::from("# mmq run report\n\n");
    if let Some(h) = &r.config_hash {
        let _ = writeln!(s, "Config hash: `{h}`\n");
    }
    if let Some(c) = &r.corpus {
        let _ = writeln!(s, "## Corpus ({})\n\n{}", c.source, c.table());
    }
    if !r.quantizer.is_empty() {
        s += "## Quantizer\n\n| Recon | Epochs | Recon loss (first epoch) | Recon loss (last epoch) | Codes used per level |\n|---|---|---|---|---|\n";
        for (k, q) in &r.quantizer {
            let first = q
                .first_epoch
                .map_or("-".into(), |e| format!("{:.5}", e.recon));
            let last = q
                .last_epoch
                .map_or("-".into(), |e| format!("{:.5}", e.recon));
            let used = q
                .codes_used
                .iter()
                .map(|(m, u)| format!("{m}: {u:?}"))
                .collect::<Vec<_>>()
                .join(", ");
            let _ = writeln!(s, "| {k} | {} | {first} | {last} | {used} |", q.epochs);
        }
        s.push('\n');
    }
    if !r.recommender.is_empty() {
        s += "## Recommender\n\n| SID init | HR@5 | HR@10 | HR@20 | nDCG@5 | nDCG@10 | nDCG@20 | Random HR@10 | Base unchanged | Backbone trainable | Model trainable |\n|---|---|---|---|---|---|---|---|---|---|---|\n";
        let fmt = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.4}"));
        for (k, rec) in &r.recommender {
            let e = &rec.eval;
            let _ = writeln!(
                s,
                "| {k} | {} | {} | {} | {} | {} | {} | {} | {} | {:.2}% | {:.2}% |",
                fmt(e.hr_at(5)),
                fmt(e.hr_at(10)),
                fmt(e.hr_at(20)),
                fmt(e.ndcg_at(5)),
                fmt(e.ndcg_at(10)),
                fmt(e.ndcg_at(20)),
                fmt(rec.random_hr.get("10").copied()),
                rec.base_unchanged,
                100.0 * rec.backbone_trainable_fraction,
                100.0 * rec.model_trainable_fraction,
            );
        }
        s.push('\n');
    }
    if let Some(d) = &r.diagnostics {
        s += "## Diagnostics\n\n";
        if let Some(c) = &d.collapse {
            let _ = writeln!(
                s,
                "Embedding collapse (effective rank at {}, from the `{}` run): multimodal+SID input tokens {} of {}, projection-only input {}. \
                 Rank bound: rank(E_c·W+b) = {} against rank(E_c)+1 = {} ({}).\n",
                d.rank_threshold,
                c.source_init,
                c.input_effective_rank,
                c.dimensions,
                c.projection_effective_rank,
                c.rank_bound.lhs_rank,
                c.rank_bound.rhs_bound,
                if c.rank_bound.holds { "holds" } else { "violated" }
            );
        }
        if !d.quantized_tau.is_empty() {
            let _ = writeln!(
                s,
                "Kendall tau of {} distances, quantized vs original:\n",
                d.metric
            );
            for (k, t) in &d.quantized_tau {
                let _ = writeln!(s, "- {k}: {t:.4}");
            }
            s.push('\n');
        }
        if !d.sid_tau.is_empty() {
            let _ = writeln!(
                s,
                "Kendall tau of {} distances, trained semantic-ID embeddings vs original:\n",
                d.metric
            );
            for (k, t) in &d.sid_tau {
                let _ = writeln!(s, "- {k}: {t:.4}");
            }
            s.push('\n');
        }
    }
    for (title, items) in [("Gaps", &r.gaps), ("Warnings", &r.warnings)] {
        if !items.is_empty() {
            let _ = writeln!(s, "## {title}\n");
            for g in items {
                let _ = writeln!(s, "- {g}");
            }
            s.push('\n');
        }
    }
    s
}
