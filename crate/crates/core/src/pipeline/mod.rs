//! End-to-end runs: data → JET flags → isolation forest → stats → prompts →
//! gateway → evaluation, with every artifact written under one run directory.

mod config;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::eval::{compare, evaluate_verdicts, round2, Averaging, Comparison, ConfusionCounts, EvalError, EvalReport};
use crate::gateway::{
    build_backend, infer_batch, replay_key, write_replay_fixtures, Backend, BatchError, GatewayError, ModelVerdict,
    ReplayRecord,
};
use crate::iforest::{fit_score, write_result, IForestError, IForestResult};
use crate::jet::{flag_all, pseudo_label, write_flags_csv, JetError, JetFlags};
use crate::ledger::{
    load_dataset, read_labels, write_dataset, write_labels, write_report, DataFormat, Dataset, LabelProvenance,
    LabelRow, LedgerError, ParseMode,
};
use crate::prompt::{build_prompt, Instance, PromptBundle, PromptError, PromptInputs, PromptVariant, VariantKind};
use crate::stats::{compute_stats, DatasetStats, StatsError};
use crate::synthgen::{generate, SynthError};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("ledger: {0}")]
    Ledger(#[from] LedgerError),
    #[error("synthgen: {0}")]
    Synth(#[from] SynthError),
    #[error("jet: {0}")]
    Jet(#[from] JetError),
    #[error("iforest: {0}")]
    IForest(#[from] IForestError),
    #[error("stats: {0}")]
    Stats(#[from] StatsError),
    #[error("prompt: posting `{posting_id}`: {source}")]
    Prompt {
        posting_id: String,
        #[source]
        source: PromptError,
    },
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("gateway: {0}")]
    Batch(#[from] BatchError),
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
    #[error("io: {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loaded or generated data together with every model-free stage output.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Dataset at the configured granularity.
    pub dataset: Dataset,
    pub labels: Option<BTreeMap<String, u8>>,
    pub label_provenance: LabelProvenance,
    pub flags: BTreeMap<String, JetFlags>,
    pub iforest: IForestResult,
    pub stats: DatasetStats,
}

/// Produces the dataset (generated or loaded), its labels and the JET,
/// isolation-forest and statistics stages.
pub fn prepare(config: &RunConfig) -> Result<(Dataset, Vec<LabelRow>, Prepared), PipelineError> {
    config.validate()?;
    let (source, label_rows) = if let Some(gen) = config.effective_gen() {
        let data = generate(&gen)?;
        let rows = data.label_rows();
        (data.dataset, rows)
    } else {
        let path = config.dataset_path.as_deref().expect("validated");
        let mode = if config.strict {
            ParseMode::Strict
        } else {
            ParseMode::Lenient
        };
        let mut ds = load_dataset(path, config.data_format(), mode)?;
        if let Some(lp) = &config.labels_path {
            ds = ds.with_labels(read_labels(lp)?, LabelProvenance::GroundTruth)?;
        } else if config.pseudo_label {
            ds = pseudo_label(&ds, &config.jet);
        }
        let rows = ds
            .labels()
            .map(|labels| {
                labels
                    .iter()
                    .map(|(id, &label)| LabelRow {
                        posting_id: id.clone(),
                        label,
                        archetypes: String::new(),
                    })
                    .collect()
            })
            .unwrap_or_default();
        (ds, rows)
    };
    if source.is_empty() {
        return Err(StatsError::EmptyDataset.into());
    }
    let dataset = source.at_granularity(config.granularity);
    let flags = flag_all(&dataset, &config.jet);
    let iforest = fit_score(&dataset, &config.iforest)?;
    for w in &iforest.warnings {
        log::warn!("iforest: {w}");
    }
    let stats = compute_stats(&dataset, Some(&iforest))?;
    let prepared = Prepared {
        labels: dataset.labels().cloned(),
        label_provenance: dataset.label_provenance(),
        dataset,
        flags,
        iforest,
        stats,
    };
    Ok((source, label_rows, prepared))
}

pub fn build_prompts(prepared: &Prepared, variant: &PromptVariant) -> Result<Vec<PromptBundle>, PipelineError> {
    prepared
        .dataset
        .groups()
        .values()
        .map(|g| {
            let inputs = PromptInputs {
                stats: Some(&prepared.stats),
                iforest: Some(&prepared.iforest),
                flags: prepared.flags.get(&g.posting_id),
            };
            build_prompt(Instance::Group(g), inputs, variant).map_err(|source| PipelineError::Prompt {
                posting_id: g.posting_id.clone(),
                source,
            })
        })
        .collect()
}

/// Creates `<output_dir>/run-<UTC timestamp>`, suffixed when the name is taken.
pub fn create_run_dir(output_dir: &Path) -> Result<PathBuf, PipelineError> {
    fs::create_dir_all(output_dir).map_err(io_err(output_dir))?;
    let stamp = chrono::Utc::now().format("run-%Y%m%dT%H%M%S%.3fZ").to_string();
    let mut candidate = output_dir.join(&stamp);
    let mut n = 1;
    loop {
        match fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                n += 1;
                candidate = output_dir.join(format!("{stamp}-{n}"));
            }
            Err(e) => return Err(io_err(&candidate)(e)),
        }
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), PipelineError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| io_err(path)(e.into()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_shared(
    run_dir: &Path,
    config: &RunConfig,
    source: &Dataset,
    label_rows: &[LabelRow],
    prepared: &Prepared,
) -> Result<(), PipelineError> {
    write_report(config, &run_dir.join("config.json"))?;
    write_dataset(source, &run_dir.join("dataset.csv"), DataFormat::Csv)?;
    if !label_rows.is_empty() {
        write_labels(label_rows, &run_dir.join("labels.csv"))?;
    }
    write_flags_csv(&prepared.flags, &run_dir.join("jet_flags.csv"))?;
    write_result(
        &prepared.iforest,
        &config.iforest,
        &run_dir.join("iforest.csv"),
        &run_dir.join("iforest.json"),
    )?;
    write_report(&prepared.stats, &run_dir.join("stats.json"))?;
    Ok(())
}

fn run_metadata(config: &RunConfig, variant: &str, prepared: &Prepared) -> serde_json::Value {
    json!({
        "variant": variant,
        "template_version": config.variant.template_version,
        "backend": config.backend.kind,
        "model_name": config.backend.model_name,
        "temperature": config.backend.temperature,
        "strict_json": config.backend.strict_json,
        "granularity": config.granularity,
        "label_provenance": prepared.label_provenance,
        "iforest_seed": config.iforest.seed,
        "gen_seed": config.gen.as_ref().map(|g| g.seed),
        "dataset": config.dataset_path.as_ref().map(|p| p.display().to_string()),
        "instances": prepared.dataset.groups().len(),
    })
}

#[derive(Serialize)]
struct FailureRecord<'a> {
    posting_id: &'a str,
    parse_error: &'a str,
    raw_response: &'a str,
}

#[derive(Serialize)]
struct TimingRecord<'a> {
    posting_id: &'a str,
    latency_ms: u64,
}

/// Output of one prompt variant.
#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: PromptVariant,
    pub verdicts: Vec<ModelVerdict>,
    pub report: Option<EvalReport>,
}

fn run_variant(
    config: &RunConfig,
    prepared: &Prepared,
    variant: &PromptVariant,
    backend: &dyn Backend,
    dir: &Path,
) -> Result<VariantRun, PipelineError> {
    let bundles = build_prompts(prepared, variant)?;
    write_jsonl(&dir.join("prompts.jsonl"), &bundles)?;
    let verdicts = match infer_batch(&bundles, backend, &config.backend) {
        Ok(v) => v,
        Err(e) => {
            write_text(&dir.join("failure.txt"), &format!("{e}\n"))?;
            return Err(e.into());
        }
    };
    let replay: Vec<ReplayRecord> = bundles
        .iter()
        .zip(&verdicts)
        .map(|(b, v)| ReplayRecord {
            key: replay_key(b, &config.backend.model_name),
            raw_response: v.raw_response.clone(),
        })
        .collect();
    let replay_path = dir.join("replay.jsonl");
    write_replay_fixtures(&replay_path, &replay).map_err(io_err(&replay_path))?;
    write_jsonl(&dir.join("verdicts.jsonl"), &verdicts)?;
    write_jsonl(
        &dir.join("errors.jsonl"),
        verdicts.iter().filter(|v| v.is_failed()).map(|v| FailureRecord {
            posting_id: &v.posting_id,
            parse_error: v.parse_error.as_deref().unwrap_or(""),
            raw_response: &v.raw_response,
        }),
    )?;
    write_jsonl(
        &dir.join("timings.jsonl"),
        verdicts.iter().map(|v| TimingRecord {
            posting_id: &v.posting_id,
            latency_ms: v.latency_ms,
        }),
    )?;
    let failed = verdicts.iter().filter(|v| v.is_failed()).count();
    if failed > 0 {
        log::warn!(
            "{}: {failed} response(s) failed to parse; see errors.jsonl",
            variant.kind.name()
        );
    }

    let report = match &prepared.labels {
        Some(labels) => {
            let meta = run_metadata(config, variant.kind.name(), prepared);
            let report = evaluate_verdicts(
                &config.backend.model_name,
                variant.kind.name(),
                &verdicts,
                labels,
                config.strict,
                meta,
            )?;
            write_report(&report, &dir.join("report.json"))?;
            Some(report)
        }
        None => {
            log::warn!("no labels available; skipping evaluation");
            None
        }
    };
    Ok(VariantRun {
        variant: variant.clone(),
        verdicts,
        report,
    })
}

/// Reports for the two model-free detectors, scored like any model.
pub fn baseline_reports(config: &RunConfig, prepared: &Prepared) -> Result<Vec<EvalReport>, PipelineError> {
    let Some(labels) = &prepared.labels else {
        return Ok(Vec::new());
    };
    let jet: BTreeMap<String, u8> = prepared.flags.iter().map(|(k, f)| (k.clone(), f.verdict)).collect();
    let forest: BTreeMap<String, u8> = prepared
        .iforest
        .decisions
        .keys()
        .map(|k| (k.clone(), u8::from(prepared.iforest.is_anomaly(k) == Some(true))))
        .collect();
    let mut out = Vec::new();
    for (name, preds) in [("jet", jet), ("isolation_forest", forest)] {
        let counts: ConfusionCounts = crate::eval::confusion(&preds, labels, config.strict)?;
        let meta = run_metadata(config, name, prepared);
        out.push(EvalReport::from_counts(name, name, counts, labels, meta));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DetectOutcome {
    pub run_dir: PathBuf,
    pub run: VariantRun,
    pub baselines: Vec<EvalReport>,
}

/// One detection run with the configured prompt variant.
pub fn detect(config: &RunConfig) -> Result<DetectOutcome, PipelineError> {
    let (source, label_rows, prepared) = prepare(config)?;
    let backend = build_backend(&config.backend)?;
    let run_dir = create_run_dir(&config.output_dir)?;
    log::info!("run directory {}", run_dir.display());
    write_shared(&run_dir, config, &source, &label_rows, &prepared)?;
    let run = run_variant(config, &prepared, &config.variant, backend.as_ref(), &run_dir)?;
    let baselines = baseline_reports(config, &prepared)?;
    if !baselines.is_empty() {
        write_report(&baselines, &run_dir.join("baselines.json"))?;
    }
    Ok(DetectOutcome {
        run_dir,
        run,
        baselines,
    })
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub run_dir: PathBuf,
    pub runs: Vec<VariantRun>,
    /// Prompt variants only; model-free detectors are reported in `baselines`.
    pub comparison: Option<Comparison>,
    pub baselines: Vec<EvalReport>,
}

/// Runs each of `config.ablation_variants` over the same data and backend
/// and compares them against the first variant.
pub fn ablate(config: &RunConfig) -> Result<AblationOutcome, PipelineError> {
    let (source, label_rows, prepared) = prepare(config)?;
    let backend = build_backend(&config.backend)?;
    let run_dir = create_run_dir(&config.output_dir)?;
    log::info!("run directory {}", run_dir.display());
    write_shared(&run_dir, config, &source, &label_rows, &prepared)?;

    let mut runs = Vec::new();
    let mut fixtures = Vec::new();
    for &kind in &config.ablation_variants {
        let variant = PromptVariant {
            kind,
            template_version: config.variant.template_version.clone(),
        };
        let dir = run_dir.join("variants").join(kind.name());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let run = run_variant(config, &prepared, &variant, backend.as_ref(), &dir)?;
        let replay = dir.join("replay.jsonl");
        fixtures.push(fs::read_to_string(&replay).map_err(io_err(&replay))?);
        runs.push(run);
    }
    write_text(&run_dir.join("replay.jsonl"), &fixtures.concat())?;

    let baselines = baseline_reports(config, &prepared)?;
    let comparison = if prepared.labels.is_some() {
        let reports: Vec<EvalReport> = runs.iter().filter_map(|r| r.report.clone()).collect();
        write_report(&reports, &run_dir.join("reports.json"))?;
        write_report(&baselines, &run_dir.join("baselines.json"))?;
        let baseline = config.ablation_variants.first().map(|k| k.name());
        let comparison = compare(&reports, config.metric_averaging, baseline)?;
        write_report(&comparison, &run_dir.join("comparison.json"))?;
        let text = comparison.render_text() + &render_baselines(&baselines, config.metric_averaging);
        write_text(&run_dir.join("comparison.txt"), &text)?;
        Some(comparison)
    } else {
        None
    };
    Ok(AblationOutcome {
        run_dir,
        runs,
        comparison,
        baselines,
    })
}

/// Plain-text block listing the model-free detectors under `averaging`.
pub fn render_baselines(baselines: &[EvalReport], averaging: Averaging) -> String {
    let mut out = String::from("\nmodel-free baselines\n");
    for r in baselines {
        let m = r.metrics(averaging);
        let c = r.counts;
        out.push_str(&format!(
            "{:<16}  P {:.2}  R {:.2}  F1 {:.2}  TP {}  FP {}  FN {}  TN {}\n",
            r.variant,
            round2(m.precision),
            round2(m.recall),
            round2(m.f1),
            c.tp,
            c.fp,
            c.fn_,
            c.tn
        ));
    }
    out
}

/// Variant names accepted on the command line.
pub fn parse_variant(name: &str) -> Result<VariantKind, PipelineError> {
    VariantKind::parse(name).ok_or_else(|| {
        PipelineError::Config(format!(
            "unknown variant `{name}` (expected audit_copilot, no_if, no_stats_no_if or synthetic_flags)"
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::GenConfig;

    fn small(dir: &Path) -> RunConfig {
        RunConfig {
            gen: Some(GenConfig {
                n_postings: 300,
                anomaly_rate: 0.02,
                ..GenConfig::default()
            }),
            variant: PromptVariant::new(VariantKind::SyntheticFlags),
            output_dir: dir.to_path_buf(),
            ..RunConfig::default()
        }
    }

    #[test]
    fn detect_writes_every_artifact() {
        let tmp = tempfile::tempdir().unwrap();
        let out = detect(&small(tmp.path())).unwrap();
        for f in [
            "config.json",
            "dataset.csv",
            "labels.csv",
            "jet_flags.csv",
            "iforest.csv",
            "iforest.json",
            "stats.json",
            "prompts.jsonl",
            "replay.jsonl",
            "verdicts.jsonl",
            "errors.jsonl",
            "timings.jsonl",
            "report.json",
            "baselines.json",
        ] {
            assert!(out.run_dir.join(f).is_file(), "missing {f}");
        }
        let report = out.run.report.unwrap();
        assert_eq!(report.counts, ConfusionCounts::new(6, 0, 0, 294));
    }

    #[test]
    fn run_dirs_do_not_collide() {
        let tmp = tempfile::tempdir().unwrap();
        let a = create_run_dir(tmp.path()).unwrap();
        let b = create_run_dir(tmp.path()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn transaction_granularity_scores_lines() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small(tmp.path());
        cfg.granularity = crate::ledger::Granularity::Transaction;
        cfg.variant = PromptVariant::new(VariantKind::AuditCopilot);
        let out = detect(&cfg).unwrap();
        let report = out.run.report.unwrap();
        assert!(report.counts.total() > 300);
        assert_eq!(report.run_metadata["granularity"], "transaction");
    }
}
