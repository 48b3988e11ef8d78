//! Synthetic class-imbalanced, noise-corrupted test streams and ingestion of
//! externally computed feature grids.
//!
//! Classes `0..n-1` are keywords and class `n-1` is the non-keyword class. A
//! keyword-to-non-keyword ratio of `1:r` puts probability `r / (1 + r)` on the
//! non-keyword class and splits `1 / (1 + r)` evenly across keywords.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::FeatureGrid;
use crate::error::{param, Error, Result};
use crate::rng::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Sum of rank-one products of smoothed random time and frequency profiles.
    Structured,
    White,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub n_classes: usize,
    /// Non-keyword samples per keyword sample.
    pub ratio: f64,
    pub snr_db: f64,
    pub n_batches: usize,
    pub batch_size: usize,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "F")]
    pub bins: usize,
    pub seed: u64,
    /// Seed of the class templates; must match the one used for pretraining.
    pub template_seed: u64,
    pub within_class_std: f64,
    pub noise: NoiseKind,
    /// Weight of the stationary spectral floor in each noise grid, relative
    /// to the unit-power fluctuating part. Zero gives zero-mean noise.
    pub noise_floor: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            ratio: 8.0,
            snr_db: -10.0,
            n_batches: 50,
            batch_size: 128,
            frames: 100,
            bins: 40,
            seed: 0,
            template_seed: 0,
            within_class_std: 1.0,
            noise: NoiseKind::Structured,
            noise_floor: 3.0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(param("n_classes", "must be >= 2"));
        }
        if !(self.ratio >= 1.0 && self.ratio.is_finite()) {
            return Err(param("ratio", format!("must be >= 1, got {}", self.ratio)));
        }
        if !self.snr_db.is_finite() {
            return Err(param("snr_db", "must be finite"));
        }
        if self.batch_size == 0 {
            return Err(param("batch_size", "must be >= 1"));
        }
        if self.frames == 0 || self.bins == 0 {
            return Err(param("T/F", "grid dimensions must be >= 1"));
        }
        if self.within_class_std.is_nan() || self.within_class_std < 0.0 {
            return Err(param("within_class_std", "must be >= 0"));
        }
        if !(self.noise_floor >= 0.0 && self.noise_floor.is_finite()) {
            return Err(param("noise_floor", "must be >= 0"));
        }
        Ok(())
    }

    /// Class probabilities implied by the ratio.
    pub fn class_probabilities(&self) -> Vec<f64> {
        let keywords = self.n_classes - 1;
        let kw = 1.0 / ((1.0 + self.ratio) * keywords as f64);
        let mut p = vec![kw; keywords];
        p.push(self.ratio / (1.0 + self.ratio));
        p
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Shape of the synthetic class prototypes.
///
/// Every keyword is one short event: a contiguous run of frames, each a
/// signed vector of a random orthonormal spectral basis, on a silent
/// background. The non-keyword class is a bank of filler events (other
/// words) and silences, so that "no keyword present" is what the class
/// means. The default bank mirrors a command vocabulary in which several
/// non-target words, an "unknown" bucket and silence share one label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemplateShape {
    /// Fraction of frames covered by an event.
    pub event_fraction: f64,
    /// RMS per cell inside an event.
    pub event_amplitude: f64,
    /// Filler-event prototypes in the non-keyword bank.
    pub fillers: usize,
    /// All-zero prototypes in the non-keyword bank.
    pub silences: usize,
    /// Minimum Frobenius distance between prototypes of different classes,
    /// as a multiple of `√(T·F)`.
    pub margin: f64,
}

impl Default for TemplateShape {
    fn default() -> Self {
        Self {
            event_fraction: 0.2,
            event_amplitude: 4.0,
            fillers: 8,
            silences: 1,
            margin: 1.0,
        }
    }
}

/// Prototype banks indexed by class; a sample draws one prototype uniformly.
pub type Templates = Vec<Vec<FeatureGrid>>;

const TEMPLATE_RETRIES: usize = 100;

fn frobenius(a: &FeatureGrid, b: &FeatureGrid) -> f64 {
    (a.data() - b.data()).iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn gaussian_grid<R: Rng + ?Sized>(rng: &mut R, frames: usize, bins: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((frames, bins), |_| std * rng.sample::<f64, _>(StandardNormal))
}

/// Gram-Schmidt on Gaussian draws; rows are orthonormal.
fn orthonormal_basis<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Array2<f64> {
    let mut basis = Array2::<f64>::zeros((dim, dim));
    let mut k = 0;
    while k < dim {
        let mut v: Array1<f64> = Array1::from_shape_fn(dim, |_| rng.sample(StandardNormal));
        for j in 0..k {
            let b = basis.row(j);
            let d = v.dot(&b);
            v.scaled_add(-d, &b);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            basis.row_mut(k).assign(&(v / norm));
            k += 1;
        }
    }
    basis
}

fn event_grid<R: Rng + ?Sized>(rng: &mut R, frames: usize, bins: usize, shape: &TemplateShape) -> FeatureGrid {
    let basis = orthonormal_basis(rng, bins);
    let len = ((frames as f64 * shape.event_fraction).round() as usize).clamp(1, frames);
    let start = rng.random_range(0..=frames - len);
    let scale = shape.event_amplitude * (bins as f64).sqrt();
    let mut data = Array2::<f64>::zeros((frames, bins));
    for t in start..start + len {
        let atom = basis.row(rng.random_range(0..bins));
        let sign = if rng.random::<bool>() { scale } else { -scale };
        data.row_mut(t).assign(&(&atom * sign));
    }
    FeatureGrid::from_array_unchecked(data)
}

fn separated(templates: &[Vec<FeatureGrid>], threshold: f64) -> bool {
    let n = templates.len();
    (0..n).all(|i| {
        (i + 1..n).all(|j| {
            templates[i]
                .iter()
                .all(|a| templates[j].iter().all(|b| frobenius(a, b) >= threshold))
        })
    })
}

/// One event prototype per keyword and the filler/silence bank for the
/// non-keyword class (the last one). Prototypes of different classes are
/// at least `margin · √(T·F)` apart in Frobenius norm.
pub fn make_class_templates(
    n_classes: usize,
    frames: usize,
    bins: usize,
    seed: u64,
    shape: &TemplateShape,
) -> Result<Templates> {
    if n_classes < 2 || frames == 0 || bins == 0 {
        return Err(param("templates", "need >= 2 classes and non-empty grids"));
    }
    if shape.fillers + shape.silences == 0 {
        return Err(param("templates", "non-keyword bank is empty"));
    }
    if !(shape.event_fraction > 0.0 && shape.event_fraction <= 1.0) {
        return Err(param("event_fraction", "must be in (0, 1]"));
    }
    let threshold = shape.margin * ((frames * bins) as f64).sqrt();
    let root = SeedStream::new(seed).derive_named("templates");
    for attempt in 0..TEMPLATE_RETRIES {
        let mut rng = root.derive(attempt as u64).rng();
        let mut templates: Templates = (0..n_classes - 1)
            .map(|_| vec![event_grid(&mut rng, frames, bins, shape)])
            .collect();
        let mut bank: Vec<FeatureGrid> = (0..shape.fillers)
            .map(|_| event_grid(&mut rng, frames, bins, shape))
            .collect();
        bank.extend((0..shape.silences).map(|_| FeatureGrid::zeros(frames, bins)));
        templates.push(bank);
        if separated(&templates, threshold) {
            return Ok(templates);
        }
    }
    Err(Error::Degenerate(format!(
        "no templates {threshold:.3} apart after {TEMPLATE_RETRIES} attempts"
    )))
}

/// A uniformly chosen prototype of `class` plus i.i.d. Gaussian perturbation.
pub fn sample_example<R: Rng + ?Sized>(
    templates: &[Vec<FeatureGrid>],
    class: usize,
    within_class_std: f64,
    rng: &mut R,
) -> Result<FeatureGrid> {
    let bank = templates
        .get(class)
        .filter(|b| !b.is_empty())
        .ok_or_else(|| param("class", format!("{class} out of range")))?;
    let t = if bank.len() == 1 {
        &bank[0]
    } else {
        &bank[rng.random_range(0..bank.len())]
    };
    if within_class_std == 0.0 {
        return Ok(t.clone());
    }
    let noise = gaussian_grid(rng, t.frames(), t.bins(), within_class_std);
    Ok(FeatureGrid::from_array_unchecked(t.data() + &noise))
}

/// Scale `k` such that `10 log10(P_signal / (k² P_noise)) = snr_db`.
pub fn noise_scale_for_snr(signal_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// `x + k · noise`, with `k` chosen to hit `snr_db` (powers are mean squares).
pub fn mix_noise_at_snr(x: &FeatureGrid, noise: &FeatureGrid, snr_db: f64) -> Result<FeatureGrid> {
    if x.data().dim() != noise.data().dim() {
        return Err(Error::Dimension("signal and noise grids differ in shape".into()));
    }
    let pn = noise.power();
    if pn == 0.0 {
        return Err(param("noise", "zero-power noise cannot set an SNR"));
    }
    let k = noise_scale_for_snr(x.power(), pn, snr_db);
    Ok(FeatureGrid::from_array_unchecked(x.data() + &(noise.data() * k)))
}

const NOISE_RANK: usize = 2;
const SMOOTH_WINDOW: usize = 5;

fn smoothed_profile<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Array1<f64> {
    let raw: Vec<f64> = (0..len + SMOOTH_WINDOW - 1)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Array1::from_shape_fn(len, |i| raw[i..i + SMOOTH_WINDOW].iter().sum::<f64>() / SMOOTH_WINDOW as f64)
}

/// A fresh noise grid of the requested kind (unit scale; the SNR mixer rescales).
pub fn draw_noise<R: Rng + ?Sized>(rng: &mut R, frames: usize, bins: usize, kind: NoiseKind) -> FeatureGrid {
    let data = match kind {
        NoiseKind::White => gaussian_grid(rng, frames, bins, 1.0),
        NoiseKind::Structured => {
            let mut acc = Array2::<f64>::zeros((frames, bins));
            for _ in 0..NOISE_RANK {
                let u = smoothed_profile(rng, frames);
                let v = smoothed_profile(rng, bins);
                acc += &u
                    .view()
                    .insert_axis(ndarray::Axis(1))
                    .dot(&v.view().insert_axis(ndarray::Axis(0)));
            }
            acc
        }
    };
    let grid = FeatureGrid::from_array_unchecked(data);
    if grid.power() == 0.0 {
        // Measure-zero event; fall back to white noise so mixing stays defined.
        return FeatureGrid::from_array_unchecked(gaussian_grid(rng, frames, bins, 1.0));
    }
    grid
}

/// Per-bin level of a recording environment's stationary noise floor:
/// a positive, smoothly coloured spectrum with unit mean square.
pub fn floor_profile(stream: SeedStream, bins: usize) -> Array1<f64> {
    let raw = smoothed_profile(&mut stream.rng(), bins).mapv(|v| 1.0 + v);
    let ms = raw.iter().map(|v| v * v).sum::<f64>() / bins as f64;
    raw / ms.sqrt()
}

/// Unit-power fluctuating noise of `kind` plus `weight` times the floor
/// profile repeated over every frame.
pub fn environment_noise<R: Rng + ?Sized>(
    rng: &mut R,
    frames: usize,
    kind: NoiseKind,
    floor: &Array1<f64>,
    weight: f64,
) -> FeatureGrid {
    let fluct = draw_noise(rng, frames, floor.len(), kind);
    let mut data = fluct.data() / fluct.power().sqrt();
    if weight != 0.0 {
        data += &(floor * weight);
    }
    FeatureGrid::from_array_unchecked(data)
}

/// Grids the adaptation engine may see. Carries no labels.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledBatch {
    pub batch_index: usize,
    pub grids: Vec<FeatureGrid>,
}

/// A test batch together with its withheld labels.
///
/// The only way to reach the grids is [`StreamBatch::into_parts`], which
/// separates them from the labels; adaptation entry points accept
/// [`UnlabeledBatch`] only.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    batch: UnlabeledBatch,
    labels: Vec<Option<usize>>,
}

impl StreamBatch {
    pub fn new(batch_index: usize, grids: Vec<FeatureGrid>, labels: Vec<Option<usize>>) -> Result<Self> {
        if grids.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} grids but {} labels",
                grids.len(),
                labels.len()
            )));
        }
        Ok(Self {
            batch: UnlabeledBatch { batch_index, grids },
            labels,
        })
    }

    pub fn batch_index(&self) -> usize {
        self.batch.batch_index
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn into_parts(self) -> (UnlabeledBatch, Vec<Option<usize>>) {
        (self.batch, self.labels)
    }
}

/// Lazily generated synthetic test stream.
pub struct StreamIter {
    config: StreamConfig,
    templates: Templates,
    cumulative: Vec<f64>,
    floor: Array1<f64>,
    root: SeedStream,
    next: usize,
}

impl StreamIter {
    fn sample_at(&self, batch: usize, pos: usize) -> Result<(FeatureGrid, usize)> {
        let s = self.root.derive(batch as u64).derive(pos as u64);
        let u: f64 = s.derive_named("class").rng().random();
        let class = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.config.n_classes - 1);
        let clean = sample_example(
            &self.templates,
            class,
            self.config.within_class_std,
            &mut s.derive_named("example").rng(),
        )?;
        let noise = environment_noise(
            &mut s.derive_named("noise").rng(),
            self.config.frames,
            self.config.noise,
            &self.floor,
            self.config.noise_floor,
        );
        Ok((mix_noise_at_snr(&clean, &noise, self.config.snr_db)?, class))
    }
}

impl Iterator for StreamIter {
    type Item = StreamBatch;

    fn next(&mut self) -> Option<StreamBatch> {
        if self.next >= self.config.n_batches {
            return None;
        }
        let b = self.next;
        self.next += 1;
        let (grids, labels) = (0..self.config.batch_size)
            .map(|i| {
                let (x, y) = self.sample_at(b, i).expect("validated stream config");
                (x, Some(y))
            })
            .unzip();
        Some(StreamBatch::new(b, grids, labels).expect("equal lengths"))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.config.n_batches - self.next;
        (left, Some(left))
    }
}

/// Batches of i.i.d. samples: class from the imbalance distribution, then
/// prototype plus within-class noise, then environmental noise at `snr_db`.
/// All samples of one stream share the environment's noise floor.
pub fn generate_stream(config: &StreamConfig, templates: &[Vec<FeatureGrid>]) -> Result<StreamIter> {
    config.validate()?;
    if templates.len() != config.n_classes {
        return Err(Error::Dimension(format!(
            "{} templates for {} classes",
            templates.len(),
            config.n_classes
        )));
    }
    if templates
        .iter()
        .flatten()
        .any(|t| t.frames() != config.frames || t.bins() != config.bins)
    {
        return Err(Error::Dimension("template shape differs from T x F".into()));
    }
    let mut acc = 0.0;
    let cumulative = config
        .class_probabilities()
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect();
    Ok(StreamIter {
        config: config.clone(),
        templates: templates.to_vec(),
        cumulative,
        floor: floor_profile(SeedStream::new(config.seed).derive_named("environment"), config.bins),
        root: SeedStream::new(config.seed).derive_named("stream"),
        next: 0,
    })
}

/// Labeled examples, `counts[c]` of class `c`, optionally mixed with noise
/// at `snr_db`.
pub fn labeled_set(
    templates: &[Vec<FeatureGrid>],
    counts: &[usize],
    within_class_std: f64,
    noise: Option<(NoiseKind, f64)>,
    seed: u64,
) -> Result<Vec<(FeatureGrid, usize)>> {
    if counts.len() != templates.len() {
        return Err(Error::Dimension(format!(
            "{} class counts for {} classes",
            counts.len(),
            templates.len()
        )));
    }
    let root = SeedStream::new(seed).derive_named("labeled");
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (class, &n) in counts.iter().enumerate() {
        for i in 0..n {
            let s = root.derive(class as u64).derive(i as u64);
            let mut x = sample_example(templates, class, within_class_std, &mut s.derive_named("example").rng())?;
            if let Some((kind, snr)) = noise {
                let n = draw_noise(&mut s.derive_named("noise").rng(), x.frames(), x.bins(), kind);
                x = mix_noise_at_snr(&x, &n, snr)?;
            }
            out.push((x, class));
        }
    }
    Ok(out)
}

/// One parsed row of a feature CSV.
pub type LabeledGrid = (FeatureGrid, Option<usize>);

/// Rows are `label,T,F,v0,...` with `T·F` row-major values; label `-1`
/// means unlabeled. An optional header line starting with `label` is skipped.
pub fn load_feature_csv(path: &Path) -> Result<Vec<LabeledGrid>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        if record.get(0) == Some("label") {
            continue;
        }
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        if record.len() < 3 {
            return Err(err(format!("expected label,T,F,values; got {} fields", record.len())));
        }
        let label: i64 = record[0]
            .parse()
            .map_err(|_| err(format!("bad label `{}`", &record[0])))?;
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(err(format!("label {l} must be >= 0 or -1"))),
        };
        let frames: usize = record[1].parse().map_err(|_| err(format!("bad T `{}`", &record[1])))?;
        let bins: usize = record[2].parse().map_err(|_| err(format!("bad F `{}`", &record[2])))?;
        match shape {
            None => shape = Some((frames, bins)),
            Some(s) if s != (frames, bins) => {
                return Err(err(format!(
                    "grid is {frames}x{bins} but earlier rows are {}x{}",
                    s.0, s.1
                )))
            }
            Some(_) => {}
        }
        let values = record
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>().map_err(|_| err(format!("bad value `{v}`"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != frames * bins {
            return Err(err(format!(
                "expected {} values for {frames}x{bins}, got {}",
                frames * bins,
                values.len()
            )));
        }
        let grid = FeatureGrid::from_vec(frames, bins, values).map_err(|e| err(e.to_string()))?;
        out.push((grid, label));
    }
    Ok(out)
}

/// Writes rows in the [`load_feature_csv`] format with 17 significant digits.
pub fn write_feature_csv(path: &Path, rows: &[LabeledGrid]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    if let Some((first, _)) = rows.first() {
        write!(out, "label,T,F")?;
        for i in 0..first.frames() * first.bins() {
            write!(out, ",v{i}")?;
        }
        writeln!(out)?;
    }
    for (grid, label) in rows {
        let label = label.map_or(-1, |l| l as i64);
        write!(out, "{label},{},{}", grid.frames(), grid.bins())?;
        for v in grid.data().iter() {
            write!(out, ",{v:.16e}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Chunks ingested rows into stream batches, preserving order.
pub fn batches_from_rows(rows: Vec<LabeledGrid>, batch_size: usize) -> Result<Vec<StreamBatch>> {
    if batch_size == 0 {
        return Err(param("batch_size", "must be >= 1"));
    }
    let mut batches = Vec::new();
    let mut grids = Vec::new();
    let mut labels = Vec::new();
    for (g, l) in rows {
        grids.push(g);
        labels.push(l);
        if grids.len() == batch_size {
            batches.push(StreamBatch::new(batches.len(), std::mem::take(&mut grids), std::mem::take(&mut labels))?);
        }
    }
    if !grids.is_empty() {
        batches.push(StreamBatch::new(batches.len(), grids, labels)?);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests;
