//! Shared domain types: timestamped series, FBG physics constants, episodes,
//! spectra and windowed training examples.
//!
//! Units are fixed across the crate: wavelengths in nm, forces in grams,
//! timestamps in seconds from episode start.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of FBG sensors around the catheter lumen.
pub const SENSORS: usize = 3;
/// Interrogator samples per force label (0.1 s at 1000 Hz).
pub const WINDOW_LEN: usize = 100;
/// Bending strain per unit axial strain the default calibration assumes.
pub const NOMINAL_BEND_GAIN: f64 = 300.0;

#[derive(Debug, Error, PartialEq)]
pub enum ShapeError {
    #[error("value buffer holds {values} numbers, expected {rows} rows x {channels} channels")]
    Buffer { rows: usize, channels: usize, values: usize },
    #[error("row {row} has {got} channels, expected {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("series must have at least one channel")]
    NoChannels,
}

/// Timestamped multi-channel samples, possibly irregularly spaced.
///
/// Values are stored row-major: row `i` holds the `channels` readings taken at
/// `timestamps[i]`. The rectangular shape is enforced at construction; time
/// ordering and finiteness are checked by [`validate_series`].
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    timestamps: Vec<f64>,
    channels: usize,
    values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(timestamps: Vec<f64>, channels: usize, values: Vec<f64>) -> Result<Self, ShapeError> {
        if channels == 0 {
            return Err(ShapeError::NoChannels);
        }
        if values.len() != timestamps.len() * channels {
            return Err(ShapeError::Buffer { rows: timestamps.len(), channels, values: values.len() });
        }
        Ok(Self { timestamps, channels, values })
    }

    pub fn from_rows(timestamps: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self, ShapeError> {
        let channels = rows.first().map_or(1, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * channels);
        for (row, r) in rows.iter().enumerate() {
            if r.len() != channels {
                return Err(ShapeError::Ragged { row, got: r.len(), expected: channels });
            }
            values.extend_from_slice(r);
        }
        Self::new(timestamps, channels, values)
    }

    /// Single-channel series.
    pub fn scalar(timestamps: Vec<f64>, values: Vec<f64>) -> Result<Self, ShapeError> {
        Self::new(timestamps, 1, values)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.channels)
    }

    /// Copy of one channel as a contiguous vector.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.rows().map(|r| r[c]).collect()
    }

    pub fn first_time(&self) -> Option<f64> {
        self.timestamps.first().copied()
    }

    pub fn last_time(&self) -> Option<f64> {
        self.timestamps.last().copied()
    }

    pub fn into_parts(self) -> (Vec<f64>, usize, Vec<f64>) {
        (self.timestamps, self.channels, self.values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    NonIncreasingTimestamp,
    NonFiniteTimestamp,
    NonFiniteValue,
}

/// A broken series invariant and the first row that breaks it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub rule: Rule,
    pub index: usize,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.rule {
            Rule::NonIncreasingTimestamp => "non-increasing timestamp",
            Rule::NonFiniteTimestamp => "non-finite timestamp",
            Rule::NonFiniteValue => "non-finite value",
        };
        write!(f, "{name} @{}", self.index)
    }
}

/// Check the ordering and finiteness invariants of a series.
///
/// Returns one violation per broken rule, each pointing at the first offending
/// row. An empty list means the series is well formed.
pub fn validate_series(series: &TimeSeries) -> Vec<Violation> {
    let mut out = Vec::new();
    let ts = series.timestamps();
    if let Some(i) = ts.iter().position(|t| !t.is_finite()) {
        out.push(Violation { rule: Rule::NonFiniteTimestamp, index: i });
    }
    // NaN comparisons are false, so non-finite stamps are left to the rule above.
    if let Some(i) = (1..ts.len()).find(|&i| ts[i] <= ts[i - 1]) {
        out.push(Violation { rule: Rule::NonIncreasingTimestamp, index: i });
    }
    if let Some(i) = series.rows().position(|r| r.iter().any(|v| !v.is_finite())) {
        out.push(Violation { rule: Rule::NonFiniteValue, index: i });
    }
    out
}

#[derive(Debug, Error, PartialEq)]
pub enum PhysicsError {
    #[error("reference Bragg wavelength must be positive, got {0}")]
    Wavelength(f64),
    #[error("strain-optic constant must lie in (0, 1), got {0}")]
    StrainOptic(f64),
    #[error("sensitivity must be positive, got {0}")]
    Sensitivity(f64),
}

/// Forward constants for the strain-only Bragg shift
/// `Δλ/λ_B = (1 − p_e)·ε`, with axial strain `ε = force / sensitivity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FbgPhysics {
    /// Reference Bragg wavelength per sensor, nm.
    pub lambda_b: [f64; SENSORS],
    /// Effective strain-optic constant.
    pub p_e: f64,
    /// Grams per unit axial strain.
    pub sensitivity: f64,
}

impl FbgPhysics {
    pub fn new(lambda_b: [f64; SENSORS], p_e: f64, sensitivity: f64) -> Result<Self, PhysicsError> {
        if let Some(&l) = lambda_b.iter().find(|l| !(**l > 0.0)) {
            return Err(PhysicsError::Wavelength(l));
        }
        if !(p_e > 0.0 && p_e < 1.0) {
            return Err(PhysicsError::StrainOptic(p_e));
        }
        if !(sensitivity > 0.0) {
            return Err(PhysicsError::Sensitivity(sensitivity));
        }
        Ok(Self { lambda_b, p_e, sensitivity })
    }

    /// Wavelength shift in nm of sensor `i` under axial strain `strain`.
    pub fn shift(&self, i: usize, strain: f64) -> f64 {
        self.lambda_b[i] * (1.0 - self.p_e) * strain
    }

    /// Axial shift in nm produced by `grams` of load on sensor `i`.
    pub fn force_shift(&self, i: usize, grams: f64) -> f64 {
        self.shift(i, grams / self.sensitivity)
    }
}

impl Default for FbgPhysics {
    /// Three gratings near 1540 nm. A 50 g poke bent with the nominal gain of
    /// [`NOMINAL_BEND_GAIN`] swings each sensor by up to 0.3 nm.
    fn default() -> Self {
        let p_e = 0.22;
        let lambda_b = [1539.7, 1539.7, 1539.5];
        let sensitivity = 50.0 * NOMINAL_BEND_GAIN * lambda_b[0] * (1.0 - p_e) / 0.3;
        Self { lambda_b, p_e, sensitivity }
    }
}

/// A persistent step in one sensor's zero-force wavelength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SorEvent {
    /// Activation time, s.
    pub time: f64,
    pub sensor: usize,
    /// Step size, nm.
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub seed: u64,
    pub duration: f64,
    /// Hash of the generator configuration, when the episode is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// One poke session: raw interrogator wavelengths, raw scale readings and the
/// ground-truth reference shifts injected during the session.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Three channels, nm.
    pub interrogator: TimeSeries,
    /// One channel, grams.
    pub scale: TimeSeries,
    pub sor_events: Vec<SorEvent>,
    pub meta: EpisodeMeta,
}

#[derive(Debug, Error, PartialEq)]
pub enum EpisodeError {
    #[error("interrogator has {0} channels, expected 3")]
    InterrogatorChannels(usize),
    #[error("scale has {0} channels, expected 1")]
    ScaleChannels(usize),
    #[error("{stream} series is empty")]
    Empty { stream: &'static str },
    #[error("{stream} series: {violation}")]
    Invalid { stream: &'static str, violation: Violation },
}

impl Episode {
    /// Check channel counts and series invariants.
    pub fn check(&self) -> Result<(), EpisodeError> {
        if self.interrogator.channels() != SENSORS {
            return Err(EpisodeError::InterrogatorChannels(self.interrogator.channels()));
        }
        if self.scale.channels() != 1 {
            return Err(EpisodeError::ScaleChannels(self.scale.channels()));
        }
        for (stream, s) in [("interrogator", &self.interrogator), ("scale", &self.scale)] {
            if s.is_empty() {
                return Err(EpisodeError::Empty { stream });
            }
            if let Some(&violation) = validate_series(s).first() {
                return Err(EpisodeError::Invalid { stream, violation });
            }
        }
        Ok(())
    }
}

/// Reflected intensity against wavelength for one sensor at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumFrame {
    /// Wavelength bins, nm, strictly increasing.
    pub grid: Vec<f64>,
    pub intensity: Vec<f64>,
}

/// One model input: `WINDOW_LEN` rows of tri-axial shifts (nm) and the force
/// label in grams read at the end of the window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedExample {
    /// Row-major `WINDOW_LEN x SENSORS`.
    pub x: Vec<f64>,
    pub y: f64,
    pub t: usize,
}

impl WindowedExample {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * SENSORS..(i + 1) * SENSORS]
    }
}
