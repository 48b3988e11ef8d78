//! Feature grids and time/frequency masking.
//!
//! A mask zeroes a contiguous band along one axis. Band length is uniform on
//! `0..=max_len` and the start is uniform on `0..=axis - len`.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::rng::SeedStream;

/// A `T × F` patch of spectro-temporal features (rows are frames).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    data: Array2<f64>,
}

impl FeatureGrid {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (t, f) = data.dim();
        if t == 0 || f == 0 {
            return Err(Error::Dimension(format!("grid must be non-empty, got {t}x{f}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(param("grid", "has non-finite entries"));
        }
        Ok(Self { data })
    }

    pub fn from_vec(frames: usize, bins: usize, values: Vec<f64>) -> Result<Self> {
        let data = Array2::from_shape_vec((frames, bins), values)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(data)
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            data: Array2::zeros((frames, bins)),
        }
    }

    pub(crate) fn from_array_unchecked(data: Array2<f64>) -> Self {
        Self { data }
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// Mean-square value over all cells.
    pub fn power(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }

    /// Zero `len` consecutive frames starting at `start`.
    pub fn zero_time_band(&mut self, start: usize, len: usize) {
        self.data.slice_mut(s![start..start + len, ..]).fill(0.0);
    }

    /// Zero `len` consecutive bins starting at `start`.
    pub fn zero_freq_band(&mut self, start: usize, len: usize) {
        self.data.slice_mut(s![.., start..start + len]).fill(0.0);
    }
}

/// Number and maximum width of the time and frequency masks applied per view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub n_time_masks: usize,
    pub max_time_len: usize,
    pub n_freq_masks: usize,
    pub max_freq_len: usize,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            n_time_masks: 2,
            max_time_len: 20,
            n_freq_masks: 2,
            max_freq_len: 5,
        }
    }
}

impl MaskPolicy {
    /// A policy that leaves grids untouched.
    pub fn none() -> Self {
        Self {
            n_time_masks: 0,
            max_time_len: 1,
            n_freq_masks: 0,
            max_freq_len: 1,
        }
    }

    pub fn validate(&self, frames: usize, bins: usize) -> Result<()> {
        if self.max_time_len == 0 || self.max_time_len > frames {
            return Err(param(
                "max_time_len",
                format!("must lie in 1..={frames}, got {}", self.max_time_len),
            ));
        }
        if self.max_freq_len == 0 || self.max_freq_len > bins {
            return Err(param(
                "max_freq_len",
                format!("must lie in 1..={bins}, got {}", self.max_freq_len),
            ));
        }
        Ok(())
    }
}

fn draw_band<R: Rng + ?Sized>(rng: &mut R, axis_len: usize, max_len: usize) -> (usize, usize) {
    let len = rng.random_range(0..=max_len);
    let start = rng.random_range(0..=axis_len - len);
    (start, len)
}

fn mask_along<R: Rng + ?Sized>(
    x: &FeatureGrid,
    axis: Axis,
    max_len: usize,
    n: usize,
    rng: &mut R,
) -> Result<FeatureGrid> {
    let axis_len = x.data.len_of(axis);
    if max_len > axis_len {
        let name = if axis == Axis(0) { "max_time_len" } else { "max_freq_len" };
        return Err(param(name, format!("{max_len} exceeds axis length {axis_len}")));
    }
    let mut out = x.clone();
    for _ in 0..n {
        let (start, len) = draw_band(rng, axis_len, max_len);
        if axis == Axis(0) {
            out.zero_time_band(start, len);
        } else {
            out.zero_freq_band(start, len);
        }
    }
    Ok(out)
}

/// Copy of `x` with `n` random time bands zeroed.
pub fn time_mask<R: Rng + ?Sized>(
    x: &FeatureGrid,
    max_len: usize,
    n: usize,
    rng: &mut R,
) -> Result<FeatureGrid> {
    mask_along(x, Axis(0), max_len, n, rng)
}

/// Copy of `x` with `n` random frequency bands zeroed.
pub fn freq_mask<R: Rng + ?Sized>(
    x: &FeatureGrid,
    max_len: usize,
    n: usize,
    rng: &mut R,
) -> Result<FeatureGrid> {
    mask_along(x, Axis(1), max_len, n, rng)
}

/// Full policy: time masks, then frequency masks.
pub fn apply_policy<R: Rng + ?Sized>(
    x: &FeatureGrid,
    policy: &MaskPolicy,
    rng: &mut R,
) -> Result<FeatureGrid> {
    let t = time_mask(x, policy.max_time_len, policy.n_time_masks, rng)?;
    freq_mask(&t, policy.max_freq_len, policy.n_freq_masks, rng)
}

/// Two consistency views and the PKC transform of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Views {
    pub tilde: FeatureGrid,
    pub hat: FeatureGrid,
    pub prime: FeatureGrid,
}

/// Three independent draws of `policy`, each from its own substream of `stream`.
pub fn make_views(x: &FeatureGrid, policy: &MaskPolicy, stream: SeedStream) -> Result<Views> {
    policy.validate(x.frames(), x.bins())?;
    let view = |label| apply_policy(x, policy, &mut stream.derive(label).rng());
    Ok(Views {
        tilde: view(0)?,
        hat: view(1)?,
        prime: view(2)?,
    })
}
