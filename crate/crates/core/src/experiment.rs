//! Experiment orchestration: source pretraining, labeled evaluation of one
//! adaptation run, and method × ratio × SNR × seed sweeps.
//!
//! Labels never reach the adaptation loop. [`evaluate_stream`] splits each
//! batch and keeps the labels on its own side.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_stream, Ablation, AdaptConfig, AdaptTrace, Method};
use crate::augment::FeatureGrid;
use crate::error::{param, Error, Result};
use crate::eval::{ConfusionMatrix, EvalReport};
use crate::model::{pretrain, read_checkpoint, write_checkpoint, ModelDims, NormPoolClassifier, PretrainConfig, TrainLog};
use crate::rng::SeedStream;
use crate::stream::{generate_stream, labeled_set, make_class_templates, NoiseKind, StreamBatch, StreamConfig, TemplateShape, Templates};

/// A method plus ablation switches, named as in result files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub method: Method,
    pub ablation: Ablation,
}

impl Variant {
    pub const NAMES: [&'static str; 8] = [
        "unadapted",
        "tbn",
        "tent",
        "imkws",
        "imkws-no-dem",
        "imkws-no-consistency",
        "imkws-no-selection",
        "imkws-no-weighting",
    ];

    pub fn new(method: Method) -> Self {
        Self {
            method,
            ablation: Ablation::default(),
        }
    }

    pub fn name(&self) -> String {
        let base = self.method.name().to_string();
        if self.method != Method::Imkws {
            return base;
        }
        let ab = &self.ablation;
        let off: Vec<&str> = [
            (ab.use_dem, "dem"),
            (ab.use_consistency, "consistency"),
            (ab.use_selection, "selection"),
            (ab.use_weighting, "weighting"),
        ]
        .iter()
        .filter(|(on, _)| !on)
        .map(|(_, n)| *n)
        .collect();
        if off.is_empty() {
            base
        } else {
            format!("{base}-no-{}", off.join("-no-"))
        }
    }

    /// `base` with this variant's method, ablation and seed.
    pub fn config(&self, base: &AdaptConfig, seed: u64) -> AdaptConfig {
        AdaptConfig {
            method: self.method,
            ablation: self.ablation,
            seed,
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split("-no-");
        let method: Method = parts.next().unwrap_or_default().parse()?;
        let mut ablation = Ablation::default();
        for part in parts {
            if method != Method::Imkws {
                return Err(param("method", format!("`{s}`: only imkws has ablations")));
            }
            match part {
                "dem" => ablation.use_dem = false,
                "consistency" => ablation.use_consistency = false,
                "selection" => ablation.use_selection = false,
                "weighting" => ablation.use_weighting = false,
                other => return Err(param("method", format!("unknown ablation `{other}` in `{s}`"))),
            }
        }
        Ok(Self { method, ablation })
    }
}

/// How the source model is trained: labeled data drawn from the same
/// templates as the stream, optionally noisy.
///
/// The source keeps the natural class prior of a command vocabulary, in
/// which every non-keyword word is about as common as each keyword and the
/// non-keyword class merges many of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    /// Examples per keyword class.
    pub n_per_class: usize,
    /// Non-keyword examples per keyword-class example.
    pub nonkeyword_factor: usize,
    pub hidden: usize,
    /// Source noise level; absent means clean source data.
    pub snr_db: Option<f64>,
    pub noise: NoiseKind,
    pub seed: u64,
    pub train: PretrainConfig,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            nonkeyword_factor: 9,
            hidden: 32,
            snr_db: Some(5.0),
            noise: NoiseKind::Structured,
            seed: 0,
            train: PretrainConfig::default(),
        }
    }
}

/// Class templates for `stream` (shared by source and target).
pub fn templates_for(stream: &StreamConfig) -> Result<Templates> {
    make_class_templates(
        stream.n_classes,
        stream.frames,
        stream.bins,
        stream.template_seed,
        &TemplateShape::default(),
    )
}

/// Train a fresh classifier on source data.
pub fn pretrain_source(
    source: &SourceConfig,
    stream: &StreamConfig,
    templates: &[Vec<FeatureGrid>],
) -> Result<(NormPoolClassifier, TrainLog)> {
    if source.n_per_class == 0 || source.nonkeyword_factor == 0 {
        return Err(param("source", "every class needs at least one example"));
    }
    let root = SeedStream::new(source.seed);
    let mut counts = vec![source.n_per_class; stream.n_classes];
    counts[stream.n_classes - 1] = source.n_per_class * source.nonkeyword_factor;
    let data = labeled_set(
        templates,
        &counts,
        stream.within_class_std,
        source.snr_db.map(|snr| (source.noise, snr)),
        root.derive_named("data").key(),
    )?;
    let dims = ModelDims {
        features: stream.bins,
        hidden: source.hidden,
        classes: stream.n_classes,
    };
    let mut model = NormPoolClassifier::init(dims, root.derive_named("init"));
    let train = PretrainConfig {
        seed: root.derive_named("train").key(),
        ..source.train
    };
    let log = pretrain(&mut model, &data, &train)?;
    Ok((model, log))
}

/// Labeled outcome of one adaptation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub report: EvalReport,
    pub trace: AdaptTrace,
    pub predictions: Vec<usize>,
    pub labels: Vec<Option<usize>>,
}

impl RunResult {
    /// CSV `index,pred,label`; unlabeled rows leave `label` empty.
    pub fn write_predictions<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "index,pred,label")?;
        for (i, (p, y)) in self.predictions.iter().zip(&self.labels).enumerate() {
            match y {
                Some(y) => writeln!(out, "{i},{p},{y}")?,
                None => writeln!(out, "{i},{p},")?,
            }
        }
        Ok(())
    }
}

/// Adapt a copy of `model` over `batches` and score the predictions against
/// the labels, which are split off before the adaptation loop sees a batch.
pub fn evaluate_stream<I>(
    model: &NormPoolClassifier,
    batches: I,
    config: &AdaptConfig,
    classes: usize,
) -> Result<(NormPoolClassifier, RunResult)>
where
    I: IntoIterator<Item = StreamBatch>,
{
    let mut model = model.clone();
    let mut labels = Vec::new();
    let unlabeled = batches.into_iter().map(|b| {
        let (batch, y) = b.into_parts();
        labels.extend(y);
        batch
    });
    let outcome = adapt_stream(&mut model, unlabeled, config)?;

    let mut cm = ConfusionMatrix::new(classes);
    for (&p, y) in outcome.predictions.iter().zip(&labels) {
        if let Some(y) = *y {
            if y >= classes || p >= classes {
                return Err(Error::Dimension(format!("label {y} or prediction {p} out of range")));
            }
            cm.record(y, p);
        }
    }
    let report = EvalReport::from_confusion(&cm, config.seed)?;
    Ok((
        model,
        RunResult {
            report,
            trace: outcome.trace,
            predictions: outcome.predictions,
            labels,
        },
    ))
}

/// One synthetic run: stream from `stream` (with `stream.seed` taken from
/// `seed`), adaptation under `adapt`.
pub fn run_synthetic(
    model: &NormPoolClassifier,
    templates: &[Vec<FeatureGrid>],
    stream: &StreamConfig,
    adapt: &AdaptConfig,
) -> Result<RunResult> {
    let stream = StreamConfig {
        batch_size: adapt.batch_size,
        seed: adapt.seed,
        ..stream.clone()
    };
    let batches = generate_stream(&stream, templates)?;
    Ok(evaluate_stream(model, batches, adapt, stream.n_classes)?.1)
}

/// A full sweep. `stream` and `adapt` are the base configurations; each cell
/// overrides the ratio, SNR, method and seed. The test-time batch size is
/// `adapt.batch_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub methods: Vec<String>,
    pub ratios: Vec<f64>,
    pub snrs: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Train the source model instead of loading `checkpoint`.
    pub pretrain: bool,
    pub checkpoint: Option<PathBuf>,
    /// Write a trace and a predictions file per run.
    pub write_runs: bool,
    pub stream: StreamConfig,
    pub adapt: AdaptConfig,
    pub source: SourceConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: ["unadapted", "tbn", "tent", "imkws"].map(String::from).to_vec(),
            ratios: vec![4.0, 8.0],
            snrs: vec![-10.0],
            seeds: vec![0, 1, 2],
            pretrain: true,
            checkpoint: None,
            write_runs: true,
            stream: StreamConfig::default(),
            adapt: AdaptConfig::default(),
            source: SourceConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn variants(&self) -> Result<Vec<Variant>> {
        self.methods.iter().map(|m| m.parse()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.variants()?;
        for (name, empty) in [
            ("methods", self.methods.is_empty()),
            ("ratios", self.ratios.is_empty()),
            ("snrs", self.snrs.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                return Err(param(name, "must list at least one value"));
            }
        }
        for &ratio in &self.ratios {
            StreamConfig { ratio, ..self.stream.clone() }.validate()?;
        }
        for &snr_db in &self.snrs {
            StreamConfig { snr_db, ..self.stream.clone() }.validate()?;
        }
        self.adapt.validate()?;
        if !self.pretrain && self.checkpoint.is_none() {
            return Err(param("checkpoint", "required unless pretrain = true"));
        }
        Ok(())
    }

    /// Cells in output order: method, then ratio, then SNR, then seed.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let mut out = Vec::new();
        for variant in self.variants()? {
            for &ratio in &self.ratios {
                for &snr_db in &self.snrs {
                    for &seed in &self.seeds {
                        out.push(Cell { variant, ratio, snr_db, seed });
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub variant: Variant,
    pub ratio: f64,
    pub snr_db: f64,
    pub seed: u64,
}

impl Cell {
    /// File-name stem for per-run artifacts.
    pub fn tag(&self) -> String {
        format!("{}_r{}_snr{}_s{}", self.variant, self.ratio, self.snr_db, self.seed)
    }
}

/// Per-cell results, in [`SweepConfig::cells`] order.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub runs: Vec<(Cell, RunResult)>,
    pub source_log: Option<TrainLog>,
}

/// Mean and sample standard deviation (`n - 1`; zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (mean, (ss / (n - 1.0)).sqrt())
}

fn source_model(cfg: &SweepConfig, templates: &[Vec<FeatureGrid>]) -> Result<(NormPoolClassifier, Option<TrainLog>)> {
    if cfg.pretrain {
        let (model, log) = pretrain_source(&cfg.source, &cfg.stream, templates)?;
        return Ok((model, Some(log)));
    }
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| param("checkpoint", "required unless pretrain = true"))?;
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} does not exist", path.display())));
    }
    let model = read_checkpoint(std::io::BufReader::new(File::open(path)?))?;
    let dims = model.dims();
    if dims.features != cfg.stream.bins || dims.classes != cfg.stream.n_classes {
        return Err(Error::Dimension(format!(
            "checkpoint expects {} bins and {} classes, stream has {} and {}",
            dims.features, dims.classes, cfg.stream.bins, cfg.stream.n_classes
        )));
    }
    Ok((model, None))
}

/// Run every cell (in parallel; each cell owns a model copy and its own
/// seeded substreams) and return results in cell order.
pub fn run_sweep(cfg: &SweepConfig) -> Result<(NormPoolClassifier, SweepResult)> {
    cfg.validate()?;
    let templates = templates_for(&cfg.stream)?;
    let (model, source_log) = source_model(cfg, &templates)?;
    let cells = cfg.cells()?;
    let runs = cells
        .par_iter()
        .map(|cell| {
            let stream = StreamConfig {
                ratio: cell.ratio,
                snr_db: cell.snr_db,
                ..cfg.stream.clone()
            };
            let adapt = cell.variant.config(&cfg.adapt, cell.seed);
            run_synthetic(&model, &templates, &stream, &adapt).map(|r| (*cell, r))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((model, SweepResult { runs, source_log }))
}

const METRICS: [&str; 4] = ["macro_f1", "micro_f1", "keyword_f1", "nonkeyword_f1"];

fn metrics(r: &EvalReport) -> [f64; 4] {
    [r.macro_f1, r.micro_f1, r.keyword_f1, r.nonkeyword_f1]
}

impl SweepResult {
    /// One row per run.
    pub fn write_runs_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "method,ratio,snr_db,seed,n_samples,{}", METRICS.join(","))?;
        for (cell, run) in &self.runs {
            let m = metrics(&run.report);
            writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                cell.variant, cell.ratio, cell.snr_db, cell.seed, run.report.n_samples, m[0], m[1], m[2], m[3]
            )?;
        }
        Ok(())
    }

    /// Mean and sample std across seeds for each (method, ratio, SNR).
    pub fn write_aggregate_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let cols: Vec<String> = METRICS
            .iter()
            .flat_map(|m| [format!("{m}_mean"), format!("{m}_std")])
            .collect();
        writeln!(out, "method,ratio,snr_db,n_seeds,{}", cols.join(","))?;
        for group in self.groups() {
            let (cell, _) = group[0];
            write!(out, "{},{},{},{}", cell.variant, cell.ratio, cell.snr_db, group.len())?;
            for k in 0..METRICS.len() {
                let values: Vec<f64> = group.iter().map(|(_, r)| metrics(&r.report)[k]).collect();
                let (mean, std) = mean_std(&values);
                write!(out, ",{mean:.6},{std:.6}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// One row per run and class.
    pub fn write_per_class_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "method,ratio,snr_db,seed,class,f1")?;
        for (cell, run) in &self.runs {
            for (c, f1) in run.report.per_class_f1.iter().enumerate() {
                writeln!(out, "{},{},{},{},{c},{f1:.6}", cell.variant, cell.ratio, cell.snr_db, cell.seed)?;
            }
        }
        Ok(())
    }

    /// Runs grouped by (method, ratio, SNR), preserving cell order.
    pub fn groups(&self) -> Vec<Vec<&(Cell, RunResult)>> {
        let mut groups: Vec<Vec<&(Cell, RunResult)>> = Vec::new();
        for entry in &self.runs {
            let same = |g: &Vec<&(Cell, RunResult)>| {
                let c = &g[0].0;
                c.variant == entry.0.variant && c.ratio == entry.0.ratio && c.snr_db == entry.0.snr_db
            };
            match groups.iter_mut().find(|g| same(g)) {
                Some(g) => g.push(entry),
                None => groups.push(vec![entry]),
            }
        }
        groups
    }

    /// Write all result files under `dir`; returns the paths written.
    pub fn write_all(&self, dir: &Path, per_run: bool) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut emit = |path: PathBuf, f: &dyn Fn(&mut BufWriter<File>) -> Result<()>| -> Result<()> {
            let mut w = BufWriter::new(File::create(&path)?);
            f(&mut w)?;
            w.flush()?;
            written.push(path);
            Ok(())
        };
        emit(dir.join("runs.csv"), &|w| self.write_runs_csv(w))?;
        emit(dir.join("aggregate.csv"), &|w| self.write_aggregate_csv(w))?;
        emit(dir.join("per_class.csv"), &|w| self.write_per_class_csv(w))?;
        if per_run {
            fs::create_dir_all(dir.join("traces"))?;
            fs::create_dir_all(dir.join("predictions"))?;
            for (cell, run) in &self.runs {
                let tag = cell.tag();
                emit(dir.join("traces").join(format!("{tag}.csv")), &|w| run.trace.write_csv(w))?;
                emit(dir.join("predictions").join(format!("{tag}.csv")), &|w| run.write_predictions(w))?;
            }
        }
        Ok(written)
    }
}

/// Save `model` as a checkpoint file.
pub fn save_checkpoint(model: &NormPoolClassifier, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NormPoolClassifier> {
    read_checkpoint(std::io::BufReader::new(File::open(path)?))
}
