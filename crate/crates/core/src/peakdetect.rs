//! Entropy-based peak detection and a parabolic baseline picker.
//!
//! Each sample is scored by how much it changes the kernel-density entropy of
//! its local context. Samples whose score lies above the mean and more than
//! `h` standard deviations away from it are peaks; adjacent qualifying samples
//! collapse to their best-scoring member.
//!
//! The density of a context `a` of size `M` at `a_i` uses the per-point
//! bandwidth `|a_i - a_{(i+w) mod M}|`. A zero bandwidth leaves the density
//! undefined, so that term is dropped from the entropy and counted in the
//! `degenerate` field of the result.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::SpectrumFrame;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Fraction of the maximum intensity that delimits the reflection band
/// searched by [`peak_wavelength`].
pub const BAND_FRACTION: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum PeakError {
    #[error("invalid KDE parameters: {0}")]
    InvalidParams(&'static str),
    #[error("signal of length {len} is too short, need more than {min}")]
    TooShort { len: usize, min: usize },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("no peak detected")]
    NoPeak,
    #[error("spectrum is flat")]
    FlatSpectrum,
    #[error("empty input")]
    EmptyInput,
    #[error("grid has {grid} bins but intensity has {intensity}")]
    LengthMismatch { grid: usize, intensity: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdeParams {
    /// Half-width of the local context, samples.
    pub k: usize,
    /// Offset of the bandwidth partner, samples.
    pub w: usize,
    /// Deviation threshold in score standard deviations.
    pub h: f64,
}

impl Default for KdeParams {
    fn default() -> Self {
        Self { k: 5, w: 1, h: 1.5 }
    }
}

impl KdeParams {
    /// Settings used on reflection spectra by [`peak_wavelength`] callers.
    pub fn spectral() -> Self {
        Self { k: 5, w: 2, h: 1.0 }
    }

    pub fn validate(&self) -> Result<(), PeakError> {
        if self.k < 1 {
            return Err(PeakError::InvalidParams("k must be at least 1"));
        }
        if self.w < 1 {
            return Err(PeakError::InvalidParams("w must be at least 1"));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(PeakError::InvalidParams("h must be positive"));
        }
        Ok(())
    }

    /// Signals must be strictly longer than this.
    pub fn min_len(&self) -> usize {
        2 * self.k + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub scores: Vec<f64>,
    /// Entropy terms skipped because their bandwidth was zero.
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Ascending peak indices, one per run of qualifying samples.
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub degenerate: usize,
}

/// Kernel-density entropy of `a`; returns the entropy and skipped terms.
fn entropy(a: &[f64], w: usize) -> (f64, usize) {
    let m = a.len();
    let mut h = 0.0;
    let mut skipped = 0;
    for (i, &ai) in a.iter().enumerate() {
        let bw = (ai - a[(i + w) % m]).abs();
        if bw == 0.0 {
            skipped += 1;
            continue;
        }
        let s: f64 = a
            .iter()
            .map(|&aj| {
                let u = (ai - aj) / bw;
                (-0.5 * u * u).exp()
            })
            .sum();
        let p = INV_SQRT_2PI * s / (m as f64 * bw);
        h -= p * p.ln();
    }
    (h, skipped)
}

fn check_signal(signal: &[f64], params: &KdeParams) -> Result<(), PeakError> {
    params.validate()?;
    if signal.len() <= params.min_len() {
        return Err(PeakError::TooShort { len: signal.len(), min: params.min_len() });
    }
    if let Some(i) = signal.iter().position(|v| !v.is_finite()) {
        return Err(PeakError::NonFinite(i));
    }
    Ok(())
}

/// Entropy gained by adding each sample to its neighbourhood of `k` samples
/// on either side; contexts are truncated at the signal ends.
pub fn kde_score(signal: &[f64], params: &KdeParams) -> Result<Scores, PeakError> {
    check_signal(signal, params)?;
    let n = signal.len();
    let k = params.k;
    let mut degenerate = 0;
    let mut without = Vec::with_capacity(2 * k);
    let scores = (0..n)
        .map(|i| {
            let (lo, hi) = (i.saturating_sub(k), (i + k + 1).min(n));
            let with = &signal[lo..hi];
            without.clear();
            without.extend_from_slice(&signal[lo..i]);
            without.extend_from_slice(&signal[i + 1..hi]);
            let (h_with, d1) = entropy(with, params.w);
            let (h_without, d2) = entropy(&without, params.w);
            degenerate += d1 + d2;
            h_with - h_without
        })
        .collect();
    Ok(Scores { scores, degenerate })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Indices whose score exceeds the mean by more than `h` sample standard
/// deviations, reduced to the best index of each contiguous run.
pub fn detect_peaks(signal: &[f64], params: &KdeParams) -> Result<Detection, PeakError> {
    let Scores { scores, degenerate } = kde_score(signal, params)?;
    let (mean, std) = mean_std(&scores);
    let qualifies = |s: f64| s > mean && (s - mean).abs() > params.h * std;
    let mut indices = Vec::new();
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if qualifies(s) {
            if best.is_none_or(|b| s > scores[b]) {
                best = Some(i);
            }
        } else if let Some(b) = best.take() {
            indices.push(b);
        }
    }
    indices.extend(best);
    Ok(Detection { indices, scores, degenerate })
}

fn check_frame(spec: &SpectrumFrame) -> Result<(), PeakError> {
    if spec.grid.len() != spec.intensity.len() {
        return Err(PeakError::LengthMismatch { grid: spec.grid.len(), intensity: spec.intensity.len() });
    }
    if spec.intensity.is_empty() {
        return Err(PeakError::EmptyInput);
    }
    if let Some(i) = spec.intensity.iter().position(|v| !v.is_finite()) {
        return Err(PeakError::NonFinite(i));
    }
    Ok(())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Contiguous bins around the maximum whose intensity stays at or above
/// `BAND_FRACTION` of it, widened to at least `min_len` bins when possible.
fn reflection_band(intensity: &[f64], min_len: usize) -> (usize, usize) {
    let j = argmax(intensity);
    let cut = BAND_FRACTION * intensity[j];
    let n = intensity.len();
    let mut lo = j;
    while lo > 0 && intensity[lo - 1] >= cut {
        lo -= 1;
    }
    let mut hi = j + 1;
    while hi < n && intensity[hi] >= cut {
        hi += 1;
    }
    while hi - lo < min_len && (lo > 0 || hi < n) {
        lo = lo.saturating_sub(1);
        hi = (hi + 1).min(n);
    }
    (lo, hi)
}

/// Grid wavelength of the best-scoring KDE peak inside the reflection band.
pub fn peak_wavelength(spec: &SpectrumFrame, params: &KdeParams) -> Result<f64, PeakError> {
    check_frame(spec)?;
    params.validate()?;
    let (lo, hi) = reflection_band(&spec.intensity, params.min_len() + 1);
    let det = match detect_peaks(&spec.intensity[lo..hi], params) {
        Err(PeakError::TooShort { .. }) => return Err(PeakError::NoPeak),
        r => r?,
    };
    det.indices
        .iter()
        .copied()
        .reduce(|a, b| if det.scores[b] > det.scores[a] { b } else { a })
        .map(|i| spec.grid[lo + i])
        .ok_or(PeakError::NoPeak)
}

/// Vertex of the parabola through the maximum bin and its two neighbours.
/// A maximum on the first or last bin returns that bin's wavelength.
pub fn baseline_peak(spec: &SpectrumFrame) -> Result<f64, PeakError> {
    check_frame(spec)?;
    let v = &spec.intensity;
    if v.iter().all(|&x| x == v[0]) {
        return Err(PeakError::FlatSpectrum);
    }
    let j = argmax(v);
    if j == 0 || j + 1 == v.len() {
        return Ok(spec.grid[j]);
    }
    let (a, b, c) = (v[j - 1], v[j], v[j + 1]);
    let den = a - 2.0 * b + c;
    if den == 0.0 {
        return Ok(spec.grid[j]);
    }
    let step = 0.5 * (spec.grid[j + 1] - spec.grid[j - 1]);
    Ok(spec.grid[j] + 0.5 * (a - c) / den * step)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakStats {
    pub mean_a: f64,
    pub std_a: f64,
    pub mean_b: f64,
    pub std_b: f64,
}

/// Sample means and standard deviations (n - 1 denominator; 0 for one value).
pub fn compare_stats(peaks_a: &[f64], peaks_b: &[f64]) -> Result<PeakStats, PeakError> {
    if peaks_a.is_empty() || peaks_b.is_empty() {
        return Err(PeakError::EmptyInput);
    }
    let (mean_a, std_a) = mean_std(peaks_a);
    let (mean_b, std_b) = mean_std(peaks_b);
    Ok(PeakStats { mean_a, std_a, mean_b, std_b })
}
