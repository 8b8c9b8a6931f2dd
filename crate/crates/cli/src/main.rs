//! `auditlens`: journal-entry anomaly detection from the command line.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use auditlens_core::eval::{compare, evaluate_verdicts, Averaging, EvalReport};
use auditlens_core::gateway::{BackendKind, ModelVerdict};
use auditlens_core::iforest::write_result;
use auditlens_core::jet::{write_flags, write_flags_csv};
use auditlens_core::ledger::{read_labels, write_dataset, write_labels, write_report, DataFormat, Granularity};
use auditlens_core::pipeline::{self, ablate, build_prompts, detect, parse_variant, prepare, RunConfig};
use auditlens_core::prompt::PromptVariant;
use auditlens_core::synthgen::{describe, generate, GenConfig};

#[derive(Parser, Debug)]
#[command(
    name = "auditlens",
    version,
    about = "Journal-entry anomaly detection with rules, isolation forests and LLM verdicts"
)]
struct Cli {
    /// Run configuration (JSON); flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving run directories.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Strict ledger parsing and label matching.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic ledger with injected anomalies.
    Generate {
        /// Ledger output path (.csv or .jsonl).
        #[arg(long)]
        out: PathBuf,
        /// Label sidecar path; defaults to `<out stem>.labels.csv`.
        #[arg(long)]
        labels_out: Option<PathBuf>,
        #[arg(long)]
        n_postings: Option<usize>,
        #[arg(long)]
        anomaly_rate: Option<f64>,
    },
    /// Print dataset statistics as JSON.
    Stats {
        #[command(flatten)]
        data: DataArgs,
        /// Include isolation-forest counts.
        #[arg(long)]
        with_iforest: bool,
    },
    /// Write per-posting JET flags as CSV.
    Jet {
        #[command(flatten)]
        data: DataArgs,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score postings with the isolation forest.
    Iforest {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Metadata JSON; defaults to `<out>.json`.
        #[arg(long)]
        meta_out: Option<PathBuf>,
    },
    /// Render prompts for one posting or all of them.
    Prompt {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        variant: Option<String>,
        /// Only this posting.
        #[arg(long)]
        posting: Option<String>,
        /// Emit prompt bundles as JSON lines instead of text.
        #[arg(long)]
        jsonl: bool,
    },
    /// Run the full pipeline with one prompt variant.
    Detect {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Score verdict files against labels and compare them.
    Evaluate {
        /// verdicts.jsonl files; several produce a comparison.
        #[arg(long, required = true)]
        verdicts: Vec<PathBuf>,
        #[arg(long)]
        labels: PathBuf,
        /// positive or macro.
        #[arg(long, default_value = "positive")]
        averaging: Averaging,
        /// Write the report (or comparison) JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several prompt variants over the same data and compare them.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        backend: BackendArgs,
        /// Comma-separated variants; default audit_copilot,no_if,no_stats_no_if.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// positive or macro.
        #[arg(long)]
        averaging: Option<Averaging>,
    },
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Ledger file (.csv or .jsonl).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Ground-truth label sidecar.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Generate a synthetic ledger instead of reading one.
    #[arg(long, conflicts_with = "dataset")]
    synthetic: bool,
    #[arg(long)]
    n_postings: Option<usize>,
    #[arg(long)]
    anomaly_rate: Option<f64>,
    /// Label an unlabeled ledger with JET verdicts.
    #[arg(long)]
    pseudo_label: bool,
    /// posting or transaction.
    #[arg(long, value_parser = parse_granularity)]
    granularity: Option<Granularity>,
}

#[derive(Args, Debug, Default)]
struct BackendArgs {
    /// http, mock or replay.
    #[arg(long)]
    backend: Option<BackendKind>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    /// Fail any response that is not a bare verdict object.
    #[arg(long)]
    strict_json: bool,
    /// Replay fixture file (JSONL).
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    auth_env: Option<String>,
    /// Abort on the first unparseable response.
    #[arg(long)]
    fail_fast: bool,
}

fn parse_granularity(s: &str) -> Result<Granularity, String> {
    match s {
        "posting" => Ok(Granularity::Posting),
        "transaction" => Ok(Granularity::Transaction),
        other => Err(format!(
            "unknown granularity `{other}` (expected posting or transaction)"
        )),
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &cli.output_dir {
        config.output_dir = dir.clone();
    }
    if cli.strict {
        config.strict = true;
    }
    Ok(config)
}

fn apply_data(config: &mut RunConfig, data: &DataArgs) {
    if let Some(path) = &data.dataset {
        config.dataset_path = Some(path.clone());
        config.format = None;
        config.gen = None;
    }
    if data.synthetic && config.gen.is_none() {
        config.gen = Some(GenConfig::default());
    }
    if let Some(gen) = &mut config.gen {
        if let Some(n) = data.n_postings {
            gen.n_postings = n;
        }
        if let Some(r) = data.anomaly_rate {
            gen.anomaly_rate = r;
        }
    }
    if let Some(path) = &data.labels {
        config.labels_path = Some(path.clone());
    }
    if data.pseudo_label {
        config.pseudo_label = true;
    }
    if let Some(g) = data.granularity {
        config.granularity = g;
    }
}

fn apply_backend(config: &mut RunConfig, args: &BackendArgs) {
    let b = &mut config.backend;
    if let Some(kind) = args.backend {
        b.kind = kind;
    }
    if let Some(e) = &args.endpoint {
        b.endpoint_url = Some(e.clone());
    }
    if let Some(m) = &args.model {
        b.model_name = m.clone();
    }
    if let Some(n) = args.max_in_flight {
        b.max_in_flight = n;
    }
    if args.strict_json {
        b.strict_json = true;
    }
    if let Some(p) = &args.replay {
        b.replay_path = Some(p.clone());
    }
    if let Some(v) = &args.auth_env {
        b.auth_token_env_var = Some(v.clone());
    }
    if args.fail_fast {
        b.fail_fast = true;
    }
}

fn apply_variant(config: &mut RunConfig, variant: &Option<String>) -> Result<()> {
    if let Some(name) = variant {
        config.variant = PromptVariant {
            kind: parse_variant(name)?,
            template_version: config.variant.template_version.clone(),
        };
    }
    Ok(())
}

fn finish(config: &mut RunConfig, seed: Option<u64>) {
    if let Some(seed) = seed {
        config.apply_seed(seed);
    }
}

fn print_json<T: serde::Serialize + ?Sized>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn read_verdicts(path: &Path) -> Result<Vec<ModelVerdict>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: ModelVerdict =
            serde_json::from_str(&line).with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        out.push(v);
    }
    Ok(out)
}

fn print_report(report: &EvalReport, averaging: Averaging) {
    let m = report.metrics(averaging);
    let c = report.counts;
    println!(
        "{} [{}]: precision {:.2} recall {:.2} f1 {:.2} | tp {} fp {} fn {} tn {} | excluded {}",
        report.method_name,
        report.variant,
        auditlens_core::eval::round2(m.precision),
        auditlens_core::eval::round2(m.recall),
        auditlens_core::eval::round2(m.f1),
        c.tp,
        c.fp,
        c.fn_,
        c.tn,
        report.excluded
    );
}

fn run(cli: Cli) -> Result<()> {
    let mut config = base_config(&cli)?;
    match &cli.command {
        Command::Generate {
            out,
            labels_out,
            n_postings,
            anomaly_rate,
        } => {
            let mut gen = config.gen.clone().unwrap_or_default();
            if let Some(n) = n_postings {
                gen.n_postings = *n;
            }
            if let Some(r) = anomaly_rate {
                gen.anomaly_rate = *r;
            }
            if let Some(seed) = cli.seed {
                gen.seed = seed;
            }
            config.gen = Some(gen);
            let data = generate(&config.effective_gen().expect("gen is set"))?;
            write_dataset(&data.dataset, out, DataFormat::from_path(out))?;
            let labels_path = labels_out.clone().unwrap_or_else(|| {
                let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("ledger");
                out.with_file_name(format!("{stem}.labels.csv"))
            });
            write_labels(&data.label_rows(), &labels_path)?;
            print_json(&describe(&data))?;
        }
        Command::Stats { data, with_iforest } => {
            apply_data(&mut config, data);
            finish(&mut config, cli.seed);
            let (_, _, prepared) = prepare(&config)?;
            if *with_iforest {
                print_json(&prepared.stats)?;
            } else {
                let stats = auditlens_core::stats::compute_stats(&prepared.dataset, None)?;
                print_json(&stats)?;
            }
        }
        Command::Jet { data, out } => {
            apply_data(&mut config, data);
            finish(&mut config, cli.seed);
            let (_, _, prepared) = prepare(&config)?;
            match out {
                Some(path) => write_flags_csv(&prepared.flags, path)?,
                None => write_flags(&prepared.flags, io::stdout().lock())?,
            }
        }
        Command::Iforest { data, out, meta_out } => {
            apply_data(&mut config, data);
            finish(&mut config, cli.seed);
            let (_, _, prepared) = prepare(&config)?;
            let meta = meta_out.clone().unwrap_or_else(|| out.with_extension("json"));
            write_result(&prepared.iforest, &config.iforest, out, &meta)?;
            eprintln!(
                "{} of {} postings flagged (threshold {:.4})",
                prepared.iforest.anomaly_count(),
                prepared.iforest.scores.len(),
                prepared.iforest.threshold_used
            );
        }
        Command::Prompt {
            data,
            variant,
            posting,
            jsonl,
        } => {
            apply_data(&mut config, data);
            apply_variant(&mut config, variant)?;
            finish(&mut config, cli.seed);
            let (_, _, prepared) = prepare(&config)?;
            let mut bundles = build_prompts(&prepared, &config.variant)?;
            if let Some(id) = posting {
                bundles.retain(|b| &b.posting_id == id);
                if bundles.is_empty() {
                    bail!("no posting `{id}` in the dataset");
                }
            }
            let mut out = io::stdout().lock();
            for b in &bundles {
                if *jsonl {
                    serde_json::to_writer(&mut out, b)?;
                    writeln!(out)?;
                } else {
                    writeln!(out, "{}\n", b.full_text())?;
                }
            }
        }
        Command::Detect { data, backend, variant } => {
            apply_data(&mut config, data);
            apply_backend(&mut config, backend);
            apply_variant(&mut config, variant)?;
            finish(&mut config, cli.seed);
            let outcome = detect(&config)?;
            println!("run directory: {}", outcome.run_dir.display());
            if let Some(report) = &outcome.run.report {
                for b in &outcome.baselines {
                    print_report(b, config.metric_averaging);
                }
                print_report(report, config.metric_averaging);
            }
        }
        Command::Evaluate {
            verdicts,
            labels,
            averaging,
            out,
        } => {
            let labels = read_labels(labels)?;
            let mut reports = Vec::new();
            for path in verdicts {
                let vs = read_verdicts(path)?;
                let name = path
                    .parent()
                    .and_then(|p| p.file_name())
                    .and_then(|s| s.to_str())
                    .unwrap_or("verdicts")
                    .to_string();
                let meta = serde_json::json!({ "verdicts": path.display().to_string() });
                reports.push(evaluate_verdicts(&name, &name, &vs, &labels, config.strict, meta)?);
            }
            if reports.len() == 1 {
                print_report(&reports[0], *averaging);
                if let Some(path) = out {
                    write_report(&reports[0], path)?;
                }
            } else {
                let cmp = compare(&reports, *averaging, None)?;
                print!("{}", cmp.render_text());
                if let Some(path) = out {
                    write_report(&cmp, path)?;
                }
            }
        }
        Command::Ablate {
            data,
            backend,
            variants,
            averaging,
        } => {
            apply_data(&mut config, data);
            apply_backend(&mut config, backend);
            if !variants.is_empty() {
                config.ablation_variants = variants
                    .iter()
                    .map(|v| parse_variant(v.trim()))
                    .collect::<Result<_, pipeline::PipelineError>>()?;
            }
            if let Some(a) = averaging {
                config.metric_averaging = *a;
            }
            finish(&mut config, cli.seed);
            let outcome = ablate(&config)?;
            println!("run directory: {}", outcome.run_dir.display());
            if let Some(cmp) = &outcome.comparison {
                print!("{}", cmp.render_text());
                print!(
                    "{}",
                    pipeline::render_baselines(&outcome.baselines, config.metric_averaging)
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut message = e.to_string();
            for cause in e.chain().skip(1) {
                let text = cause.to_string();
                if !message.contains(&text) {
                    message = format!("{message}: {text}");
                }
            }
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
