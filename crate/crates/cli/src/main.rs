use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use imkws_core::experiment::{
    evaluate_stream, load_checkpoint, pretrain_source, run_sweep, save_checkpoint, templates_for, RunResult,
    SweepConfig, Variant,
};
use imkws_core::gradcheck::run_gradcheck;
use imkws_core::model::TrainLog;
use imkws_core::stream::{batches_from_rows, generate_stream, load_feature_csv, NoiseKind};
use imkws_core::{EvalReport, Error, NormPoolClassifier, StreamConfig};

/// Imbalance-aware test-time adaptation experiments on synthetic or
/// ingested feature streams.
#[derive(Debug, Parser)]
#[command(name = "imkws", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a source model and write a checkpoint.
    Pretrain(PretrainArgs),
    /// Adapt one model over one stream and score it.
    Adapt(AdaptArgs),
    /// Run a method x ratio x SNR x seed grid.
    Sweep(SweepArgs),
    /// Finite-difference checks of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Validate a feature CSV and summarize it.
    Ingest(IngestArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Args)]
struct Output {
    /// Directory for result files.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

/// Keys of the `stream` table.
#[derive(Debug, Args)]
struct StreamFlags {
    #[arg(long)]
    n_classes: Option<usize>,
    /// Non-keyword samples per keyword sample.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    snr_db: Option<f64>,
    #[arg(long)]
    n_batches: Option<usize>,
    #[arg(short = 'T', long = "frames")]
    frames: Option<usize>,
    #[arg(short = 'F', long = "bins")]
    bins: Option<usize>,
    #[arg(long)]
    template_seed: Option<u64>,
    #[arg(long)]
    within_class_std: Option<f64>,
    #[arg(long, value_parser = parse_noise)]
    noise: Option<NoiseKind>,
    #[arg(long)]
    noise_floor: Option<f64>,
}

/// Keys of the `adapt` table.
#[derive(Debug, Args)]
struct AdaptFlags {
    /// Method, optionally with ablations: `imkws-no-dem-no-selection`.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    tau_dem: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    tau_pkc: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    refresh_running_stats: Option<bool>,
    #[arg(long)]
    n_time_masks: Option<usize>,
    #[arg(long)]
    max_time_len: Option<usize>,
    #[arg(long)]
    n_freq_masks: Option<usize>,
    #[arg(long)]
    max_freq_len: Option<usize>,
}

/// Keys of the `source` table.
#[derive(Debug, Args)]
struct SourceFlags {
    /// Source examples per keyword class.
    #[arg(long)]
    n_per_class: Option<usize>,
    /// Source non-keyword examples per keyword-class example.
    #[arg(long)]
    nonkeyword_factor: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Source noise level in dB; `clean` for noise-free source data.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_source_snr)]
    source_snr_db: Option<SourceSnr>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct SourceSnr(Option<f64>);

fn parse_source_snr(s: &str) -> Result<SourceSnr, String> {
    if s == "clean" {
        return Ok(SourceSnr(None));
    }
    s.parse().map(|v| SourceSnr(Some(v))).map_err(|e| format!("{e}"))
}

fn parse_noise(s: &str) -> Result<NoiseKind, String> {
    match s {
        "structured" => Ok(NoiseKind::Structured),
        "white" => Ok(NoiseKind::White),
        other => Err(format!("unknown noise kind `{other}` (structured, white)")),
    }
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// Experiment TOML; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Source seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    stream: StreamFlags,
    #[command(flatten)]
    source: SourceFlags,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of the synthetic stream and the augmentation views.
    #[arg(long)]
    seed: Option<u64>,
    /// Start from this checkpoint instead of pretraining.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Adapt over an ingested feature CSV instead of a synthetic stream.
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    stream: StreamFlags,
    #[command(flatten)]
    adapt: AdaptFlags,
    #[command(flatten)]
    source: SourceFlags,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snrs: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[command(flatten)]
    stream: StreamFlags,
    #[command(flatten)]
    adapt: AdaptFlags,
    #[command(flatten)]
    source: SourceFlags,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random cases per loss-level suite.
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Also write the report here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Feature CSV: `label,T,F,v0,...` per row, label -1 for unlabeled.
    path: PathBuf,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl StreamFlags {
    fn apply(self, s: &mut StreamConfig) {
        set(&mut s.n_classes, self.n_classes);
        set(&mut s.ratio, self.ratio);
        set(&mut s.snr_db, self.snr_db);
        set(&mut s.n_batches, self.n_batches);
        set(&mut s.frames, self.frames);
        set(&mut s.bins, self.bins);
        set(&mut s.template_seed, self.template_seed);
        set(&mut s.within_class_std, self.within_class_std);
        set(&mut s.noise, self.noise);
        set(&mut s.noise_floor, self.noise_floor);
    }
}

impl AdaptFlags {
    fn apply(self, cfg: &mut SweepConfig) -> anyhow::Result<Option<Variant>> {
        let a = &mut cfg.adapt;
        if self.tau.is_some() || self.alpha.is_some() {
            a.dem = imkws_core::DemParams::new(self.tau.unwrap_or(a.dem.tau()), self.alpha.unwrap_or(a.dem.alpha()))?;
        }
        set(&mut a.weights.sigma, self.sigma);
        set(&mut a.weights.lambda, self.lambda);
        set(&mut a.thresholds.tau_dem, self.tau_dem);
        set(&mut a.thresholds.tau_pkc, self.tau_pkc);
        set(&mut a.lr, self.lr);
        set(&mut a.batch_size, self.batch_size);
        set(&mut a.refresh_running_stats, self.refresh_running_stats);
        set(&mut a.mask_policy.n_time_masks, self.n_time_masks);
        set(&mut a.mask_policy.max_time_len, self.max_time_len);
        set(&mut a.mask_policy.n_freq_masks, self.n_freq_masks);
        set(&mut a.mask_policy.max_freq_len, self.max_freq_len);
        let variant = self.method.as_deref().map(str::parse::<Variant>).transpose()?;
        if let Some(v) = &variant {
            a.method = v.method;
            a.ablation = v.ablation;
        }
        Ok(variant)
    }
}

impl SourceFlags {
    fn apply(self, cfg: &mut SweepConfig) {
        let s = &mut cfg.source;
        set(&mut s.n_per_class, self.n_per_class);
        set(&mut s.nonkeyword_factor, self.nonkeyword_factor);
        set(&mut s.hidden, self.hidden);
        if let Some(SourceSnr(v)) = self.source_snr_db {
            s.snr_db = v;
        }
        set(&mut s.train.epochs, self.epochs);
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<SweepConfig> {
    match path {
        Some(p) => SweepConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(SweepConfig::default()),
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_train_log<W: Write>(log: &TrainLog, format: Format, mut out: W) -> anyhow::Result<()> {
    match format {
        Format::Json => serde_json::to_writer_pretty(&mut out, log)?,
        Format::Csv => {
            writeln!(out, "epoch,loss")?;
            for (i, l) in log.epoch_loss.iter().enumerate() {
                writeln!(out, "{i},{l:.6}")?;
            }
        }
    }
    Ok(())
}

fn write_report<W: Write>(report: &EvalReport, format: Format, mut out: W) -> anyhow::Result<()> {
    match format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, report)?;
            writeln!(out)?;
        }
        Format::Csv => {
            let per_class: Vec<String> = (0..report.per_class_f1.len()).map(|c| format!("f1_class{c}")).collect();
            writeln!(out, "n_samples,macro_f1,micro_f1,keyword_f1,nonkeyword_f1,{}", per_class.join(","))?;
            let values: Vec<String> = report.per_class_f1.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{}",
                report.n_samples,
                report.macro_f1,
                report.micro_f1,
                report.keyword_f1,
                report.nonkeyword_f1,
                values.join(",")
            )?;
        }
    }
    Ok(())
}

fn pretrain_cmd(args: PretrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    args.stream.apply(&mut cfg.stream);
    args.source.apply(&mut cfg);
    set(&mut cfg.source.seed, args.seed);
    cfg.validate()?;
    let templates = templates_for(&cfg.stream)?;
    let (model, log) = pretrain_source(&cfg.source, &cfg.stream, &templates)?;
    let out = &args.output;
    let ckpt = out.out_dir.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;
    let log_path = out.out_dir.join(format!("train_log.{}", out.format.ext()));
    write_file(&log_path, |w| write_train_log(&log, out.format, w))?;
    println!(
        "checkpoint {} (train accuracy {:.4}, validation macro F1 {:.4})",
        ckpt.display(),
        log.train_accuracy,
        log.val_macro_f1
    );
    Ok(())
}

fn source_model(cfg: &SweepConfig, checkpoint: Option<&Path>) -> anyhow::Result<NormPoolClassifier> {
    match checkpoint {
        Some(p) => load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display())),
        None => {
            let templates = templates_for(&cfg.stream)?;
            Ok(pretrain_source(&cfg.source, &cfg.stream, &templates)?.0)
        }
    }
}

fn adapt_cmd(args: AdaptArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    args.stream.apply(&mut cfg.stream);
    args.adapt.apply(&mut cfg)?;
    args.source.apply(&mut cfg);
    set(&mut cfg.adapt.seed, args.seed);
    cfg.validate()?;
    cfg.adapt.validate()?;
    let model = source_model(&cfg, args.checkpoint.as_deref())?;
    let classes = model.dims().classes;

    let run: RunResult = match &args.input {
        Some(path) => {
            let rows = load_feature_csv(path).with_context(|| format!("reading {}", path.display()))?;
            if rows.is_empty() {
                bail!("{}: no rows", path.display());
            }
            let batches = batches_from_rows(rows, cfg.adapt.batch_size)?;
            evaluate_stream(&model, batches, &cfg.adapt, classes)?.1
        }
        None => {
            let stream = StreamConfig {
                batch_size: cfg.adapt.batch_size,
                seed: cfg.adapt.seed,
                ..cfg.stream.clone()
            };
            let templates = templates_for(&stream)?;
            evaluate_stream(&model, generate_stream(&stream, &templates)?, &cfg.adapt, classes)?.1
        }
    };

    let out = &args.output;
    let ext = out.format.ext();
    write_file(&out.out_dir.join(format!("trace.{ext}")), |w| {
        match out.format {
            Format::Csv => run.trace.write_csv(w)?,
            Format::Json => run.trace.write_json(w)?,
        }
        Ok(())
    })?;
    write_file(&out.out_dir.join("predictions.csv"), |w| Ok(run.write_predictions(w)?))?;
    let labeled = run.labels.iter().any(Option::is_some);
    if labeled {
        write_file(&out.out_dir.join(format!("report.{ext}")), |w| write_report(&run.report, out.format, w))?;
        write_report(&run.report, out.format, io::stdout().lock())?;
    } else {
        println!("{} unlabeled samples adapted; no scores", run.predictions.len());
    }
    Ok(())
}

fn sweep_cmd(args: SweepArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    args.stream.apply(&mut cfg.stream);
    if args.adapt.method.is_some() {
        bail!("sweep takes --methods, not --method");
    }
    args.adapt.apply(&mut cfg)?;
    args.source.apply(&mut cfg);
    set(&mut cfg.methods, args.methods);
    set(&mut cfg.ratios, args.ratios);
    set(&mut cfg.snrs, args.snrs);
    set(&mut cfg.seeds, args.seeds);
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(p) = args.checkpoint {
        cfg.checkpoint = Some(p);
        cfg.pretrain = false;
    }
    cfg.validate()?;
    let (_, result) = run_sweep(&cfg)?;
    let out = &args.output;
    result.write_all(&out.out_dir, cfg.write_runs)?;
    if out.format == Format::Json {
        let reports: Vec<serde_json::Value> = result
            .runs
            .iter()
            .map(|(cell, run)| {
                serde_json::json!({
                    "method": cell.variant.name(),
                    "ratio": cell.ratio,
                    "snr_db": cell.snr_db,
                    "seed": cell.seed,
                    "report": run.report,
                })
            })
            .collect();
        write_file(&out.out_dir.join("runs.json"), |w| {
            serde_json::to_writer_pretty(&mut *w, &reports)?;
            writeln!(w)?;
            Ok(())
        })?;
    }
    result.write_aggregate_csv(io::stdout().lock())?;
    Ok(())
}

/// Returns whether every suite passed.
fn gradcheck_cmd(args: GradcheckArgs) -> anyhow::Result<bool> {
    let report = run_gradcheck(args.seed, args.trials)?;
    let emit = |w: &mut dyn Write| -> anyhow::Result<()> {
        match args.format {
            Format::Csv => report.write_csv(w)?,
            Format::Json => {
                report.write_json(&mut *w)?;
                writeln!(w)?;
            }
        }
        Ok(())
    };
    if let Some(dir) = &args.out_dir {
        write_file(&dir.join(format!("gradcheck.{}", args.format.ext())), |w| emit(w))?;
    }
    emit(&mut io::stdout().lock())?;
    Ok(report.passed())
}

fn ingest_cmd(args: IngestArgs) -> anyhow::Result<()> {
    let rows = load_feature_csv(&args.path).with_context(|| format!("reading {}", args.path.display()))?;
    let Some((first, _)) = rows.first() else {
        bail!("{}: no rows", args.path.display());
    };
    let (frames, bins) = (first.frames(), first.bins());
    let mut counts: Vec<usize> = Vec::new();
    let mut unlabeled = 0;
    for (_, y) in &rows {
        match y {
            Some(c) => {
                if *c >= counts.len() {
                    counts.resize(c + 1, 0);
                }
                counts[*c] += 1;
            }
            None => unlabeled += 1,
        }
    }
    let n = rows.len();
    let batches = batches_from_rows(rows, args.batch_size)?.len();
    let mut out = io::stdout().lock();
    match args.format {
        Format::Json => {
            let v = serde_json::json!({
                "rows": n,
                "T": frames,
                "F": bins,
                "batches": batches,
                "unlabeled": unlabeled,
                "class_counts": counts,
            });
            serde_json::to_writer_pretty(&mut out, &v)?;
            writeln!(out)?;
        }
        Format::Csv => {
            writeln!(out, "rows,T,F,batches,unlabeled,class_counts")?;
            let counts: Vec<String> = counts.iter().map(usize::to_string).collect();
            writeln!(out, "{n},{frames},{bins},{batches},{unlabeled},{}", counts.join(";"))?;
        }
    }
    Ok(())
}

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;

/// Numerical breakdowns map to the numerical-check exit status; everything
/// else is a usage or input problem.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidLogits(_) | Error::InvalidProbs(_) | Error::Degenerate(_)) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Gradcheck(a) => match gradcheck_cmd(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("gradient check failed");
                return ExitCode::from(EXIT_NUMERICAL);
            }
            Err(e) => Err(e),
        },
        Command::Ingest(a) => ingest_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
