//! Resampling, reference subtraction, stream alignment and windowing.
//!
//! Raw interrogator and scale streams arrive at jittered rates. They are
//! resampled with not-a-knot cubic splines onto a 1000 Hz and a 10 Hz grid
//! sharing the start of their overlap, converted to wavelength shifts, and cut
//! into 100-sample windows each labelled with the force read at the window's
//! last sample.

use std::collections::VecDeque;

use thiserror::Error;

use crate::spline::{SplineBasis, SplineError};
use crate::types::{ShapeError, TimeSeries, WindowedExample, SENSORS, WINDOW_LEN};

pub const INTERROGATOR_HZ: f64 = 1000.0;
pub const SCALE_HZ: f64 = 10.0;
/// Lead-in span used to estimate per-sensor reference wavelengths, s.
pub const REFERENCE_SPAN: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("resampling needs at least 4 samples, got {0}")]
    TooFewSamples(usize),
    #[error("timestamps not strictly increasing at index {0}")]
    NonMonotonic(usize),
    #[error("series has {series} channels but reference has {reference}")]
    ChannelMismatch { series: usize, reference: usize },
    #[error("streams do not overlap in time")]
    NoOverlap,
    #[error("no samples inside the reference span")]
    EmptyReference,
    #[error("non-finite value at sample {0}")]
    NonFinite(usize),
    #[error("expected {expected} channels, got {got}")]
    RowWidth { expected: usize, got: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

impl From<SplineError> for PreprocessError {
    fn from(e: SplineError) -> Self {
        match e {
            SplineError::TooFewSamples(n) => Self::TooFewSamples(n),
            SplineError::NonMonotonic(i) => Self::NonMonotonic(i),
            SplineError::LengthMismatch { .. } => unreachable!("channels sliced from the series"),
        }
    }
}

/// Shift and force streams on a common clock, `shifts.len() == 100 * forces.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    /// Three channels of Δλ in nm at exactly 1000 Hz.
    pub shifts: TimeSeries,
    /// Grams at exactly 10 Hz; sample `t` is read at the last shift row of window `t`.
    pub forces: TimeSeries,
    pub reference: Vec<f64>,
}

/// Grid `start + k / hz` for every integer `k ≥ 0` that stays within `end`.
fn grid(start: f64, end: f64, hz: f64) -> Vec<f64> {
    if end < start {
        return Vec::new();
    }
    let n = ((end - start) * hz).floor() as usize;
    let mut out: Vec<f64> = (0..=n + 1).map(|k| start + k as f64 / hz).collect();
    while out.last().is_some_and(|&t| t > end) {
        out.pop();
    }
    out
}

/// Evaluate every channel of `series` at the sorted points `times`.
pub fn resample_at(series: &TimeSeries, times: &[f64]) -> Result<TimeSeries, PreprocessError> {
    let basis = SplineBasis::new(series.timestamps())?;
    let c = series.channels();
    let mut values = vec![0.0; times.len() * c];
    for ch in 0..c {
        let y = series.channel(ch);
        let mo = basis.moments(&y)?;
        for (k, v) in basis.eval_sorted(&y, &mo, times).into_iter().enumerate() {
            values[k * c + ch] = v;
        }
    }
    Ok(TimeSeries::new(times.to_vec(), c, values)?)
}

/// Resample onto `t = k / target_hz` for all `k` with `t` in `[t_first, t_last]`.
pub fn resample_cubic(series: &TimeSeries, target_hz: f64) -> Result<TimeSeries, PreprocessError> {
    if series.len() < 4 {
        return Err(PreprocessError::TooFewSamples(series.len()));
    }
    let (t0, t1) = (series.timestamps()[0], series.timestamps()[series.len() - 1]);
    let k0 = (t0 * target_hz).ceil() as i64;
    let times: Vec<f64> =
        (k0..).map(|k| k as f64 / target_hz).skip_while(|&t| t < t0).take_while(|&t| t <= t1).collect();
    resample_at(series, &times)
}

/// Subtract a per-channel reference wavelength.
pub fn compute_shift(series: &TimeSeries, reference: &[f64]) -> Result<TimeSeries, PreprocessError> {
    if reference.len() != series.channels() {
        return Err(PreprocessError::ChannelMismatch { series: series.channels(), reference: reference.len() });
    }
    let values = series.rows().flat_map(|r| r.iter().zip(reference).map(|(v, r)| v - r)).collect();
    Ok(TimeSeries::new(series.timestamps().to_vec(), series.channels(), values)?)
}

/// Per-channel median over the first `span` seconds of the series.
pub fn estimate_reference(series: &TimeSeries, span: f64) -> Result<Vec<f64>, PreprocessError> {
    let t0 = series.first_time().ok_or(PreprocessError::EmptyReference)?;
    let n = series.timestamps().iter().take_while(|&&t| t <= t0 + span).count();
    if n == 0 {
        return Err(PreprocessError::EmptyReference);
    }
    Ok((0..series.channels())
        .map(|c| {
            let mut v: Vec<f64> = series.rows().take(n).map(|r| r[c]).collect();
            median(&mut v)
        })
        .collect())
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Resample both streams onto the start of their overlap and pair them.
///
/// Shifts sit on `t0 + k / 1000`; force `t` is read at `t0 + (100 t + 99) / 1000`,
/// the last sample of window `t`, so every label only depends on samples at or
/// before its own time.
pub fn align(interrogator: &TimeSeries, scale: &TimeSeries, reference: &[f64]) -> Result<AlignedPair, PreprocessError> {
    if reference.len() != interrogator.channels() {
        return Err(PreprocessError::ChannelMismatch { series: interrogator.channels(), reference: reference.len() });
    }
    let (a0, a1) = interrogator.first_time().zip(interrogator.last_time()).ok_or(PreprocessError::NoOverlap)?;
    let (b0, b1) = scale.first_time().zip(scale.last_time()).ok_or(PreprocessError::NoOverlap)?;
    let (start, end) = (a0.max(b0), a1.min(b1));
    if !(end > start) {
        return Err(PreprocessError::NoOverlap);
    }
    let shift_times = grid(start, end, INTERROGATOR_HZ);
    let windows = shift_times.len() / WINDOW_LEN;
    let shift_times = &shift_times[..windows * WINDOW_LEN];
    let force_times: Vec<f64> = (0..windows).map(|t| shift_times[t * WINDOW_LEN + WINDOW_LEN - 1]).collect();
    let wavelengths = resample_at(interrogator, shift_times)?;
    let shifts = compute_shift(&wavelengths, reference)?;
    let forces = resample_at(scale, &force_times)?;
    Ok(AlignedPair { shifts, forces, reference: reference.to_vec() })
}

/// Cut an aligned pair into consecutive, non-overlapping windows.
pub fn window(pair: &AlignedPair) -> Vec<WindowedExample> {
    let per = WINDOW_LEN * SENSORS;
    pair.shifts
        .values()
        .chunks_exact(per)
        .zip(pair.forces.values())
        .enumerate()
        .map(|(t, (x, &y))| WindowedExample { x: x.to_vec(), y, t })
        .collect()
}

/// One window produced by [`StreamPreprocessor`].
#[derive(Debug, Clone, PartialEq)]
pub struct StreamWindow {
    pub t: usize,
    /// Time of the window's last sample, s.
    pub time: f64,
    /// `100 x 3` shifts, row-major.
    pub x: Vec<f64>,
}

/// Causal resampling and windowing of an unlabelled interrogator stream.
///
/// Grid points `t0 + k / 1000` are interpolated by the cubic through the four
/// raw samples around them, so a point is ready once two raw samples past it
/// have arrived; only those four samples are kept. The reference is the
/// per-channel median over the first [`REFERENCE_SPAN`] seconds, as in
/// [`estimate_reference`]; windows completed before it is known are held
/// back and released together.
#[derive(Debug, Clone, Default)]
pub struct StreamPreprocessor {
    raw: VecDeque<(f64, [f64; SENSORS])>,
    seen: usize,
    t0: Option<f64>,
    next_k: usize,
    lead_in: Vec<[f64; SENSORS]>,
    reference: Option<[f64; SENSORS]>,
    pending: Vec<(f64, [f64; SENSORS])>,
    emitted: usize,
}

fn lagrange(nodes: &[(f64, [f64; SENSORS])], tau: f64) -> [f64; SENSORS] {
    let mut out = [0.0; SENSORS];
    for (i, (ti, yi)) in nodes.iter().enumerate() {
        let mut w = 1.0;
        for (j, (tj, _)) in nodes.iter().enumerate() {
            if i != j {
                w *= (tau - tj) / (ti - tj);
            }
        }
        for (o, y) in out.iter_mut().zip(yi) {
            *o += w * y;
        }
    }
    out
}

impl StreamPreprocessor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reference(&self) -> Option<[f64; SENSORS]> {
        self.reference
    }

    /// Raw samples consumed so far.
    pub fn samples(&self) -> usize {
        self.seen
    }

    /// Feeds one raw sample and returns the windows it completes.
    pub fn push(&mut self, time: f64, row: &[f64]) -> Result<Vec<StreamWindow>, PreprocessError> {
        let row: [f64; SENSORS] =
            row.try_into().map_err(|_| PreprocessError::RowWidth { expected: SENSORS, got: row.len() })?;
        if !time.is_finite() || row.iter().any(|v| !v.is_finite()) {
            return Err(PreprocessError::NonFinite(self.seen));
        }
        if self.raw.back().is_some_and(|&(t, _)| time <= t) {
            return Err(PreprocessError::NonMonotonic(self.seen));
        }
        let t0 = *self.t0.get_or_insert(time);
        if self.reference.is_none() {
            if time <= t0 + REFERENCE_SPAN {
                self.lead_in.push(row);
            } else {
                self.fix_reference()?;
            }
        }
        self.raw.push_back((time, row));
        self.seen += 1;
        self.resample(false);
        Ok(self.cut())
    }

    /// Resolves the grid up to the last raw sample and returns the remaining
    /// complete windows.
    pub fn finish(&mut self) -> Result<Vec<StreamWindow>, PreprocessError> {
        if self.seen == 0 {
            return Ok(Vec::new());
        }
        if self.reference.is_none() {
            self.fix_reference()?;
        }
        if self.seen >= 4 {
            self.resample(true);
        }
        Ok(self.cut())
    }

    fn fix_reference(&mut self) -> Result<(), PreprocessError> {
        if self.lead_in.is_empty() {
            return Err(PreprocessError::EmptyReference);
        }
        let mut r = [0.0; SENSORS];
        for (c, v) in r.iter_mut().enumerate() {
            let mut col: Vec<f64> = self.lead_in.iter().map(|row| row[c]).collect();
            *v = median(&mut col);
        }
        self.reference = Some(r);
        self.lead_in = Vec::new();
        Ok(())
    }

    fn resample(&mut self, at_end: bool) {
        let Some(t0) = self.t0 else { return };
        loop {
            let tau = t0 + self.next_k as f64 / INTERROGATOR_HZ;
            let Some(&(last, _)) = self.raw.back() else { return };
            if tau > last {
                return;
            }
            // Last raw sample at or before tau.
            let p = self.raw.iter().rposition(|&(t, _)| t <= tau).expect("front sample precedes the grid");
            let mut start = p.saturating_sub(1);
            if start + 3 >= self.raw.len() {
                if !at_end {
                    return;
                }
                start = self.raw.len().saturating_sub(4);
            }
            let nodes: Vec<_> = self.raw.range(start..start + 4).copied().collect();
            self.pending.push((tau, lagrange(&nodes, tau)));
            self.next_k += 1;
            if !at_end {
                self.raw.drain(..start);
            }
        }
    }

    fn cut(&mut self) -> Vec<StreamWindow> {
        let Some(reference) = self.reference else { return Vec::new() };
        let full = self.pending.len() / WINDOW_LEN * WINDOW_LEN;
        let out: Vec<StreamWindow> = self.pending[..full]
            .chunks_exact(WINDOW_LEN)
            .enumerate()
            .map(|(i, rows)| StreamWindow {
                t: self.emitted + i,
                time: rows[WINDOW_LEN - 1].0,
                x: rows.iter().flat_map(|(_, v)| v.iter().zip(&reference).map(|(a, r)| a - r)).collect(),
            })
            .collect();
        self.pending.drain(..full);
        self.emitted += out.len();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn irregular(n: usize, span: f64) -> Vec<f64> {
        // Deterministic irregular spacing.
        let mut t = vec![0.0];
        for i in 1..n {
            let step = 1.0 + 0.6 * ((i as f64 * 1.7).sin());
            t.push(t[i - 1] + step);
        }
        let scale = span / t[n - 1];
        t.iter().map(|v| v * scale).collect()
    }

    #[test]
    fn cubic_reproduced_on_irregular_grid() {
        let f = |t: f64| 2.0 * t * t * t - t + 1.0;
        let ts = irregular(37, 3.0);
        let s = TimeSeries::scalar(ts.clone(), ts.iter().map(|&t| f(t)).collect()).unwrap();
        let out = resample_cubic(&s, 10.0).unwrap();
        assert_eq!(out.len(), 31);
        for (t, v) in out.timestamps().iter().zip(out.values()) {
            assert!((v - f(*t)).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_stays_constant() {
        let ts = irregular(50, 2.0);
        let s = TimeSeries::new(ts.clone(), 2, vec![3.25; 100]).unwrap();
        let out = resample_cubic(&s, 100.0).unwrap();
        assert!(out.values().iter().all(|v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn three_samples_too_few() {
        let s = TimeSeries::scalar(vec![0.0, 1.0, 2.0], vec![0.0; 3]).unwrap();
        assert_eq!(resample_cubic(&s, 10.0).unwrap_err(), PreprocessError::TooFewSamples(3));
    }

    #[test]
    fn shift_arithmetic() {
        let s = TimeSeries::new(vec![0.0, 1.0], 3, vec![1540.1, 1540.0, 1539.9, 1540.0, 1540.0, 1540.0]).unwrap();
        let d = compute_shift(&s, &[1540.0, 1540.0, 1540.0]).unwrap();
        assert!((d.row(0)[0] - 0.1).abs() < 1e-9);
        assert!(d.row(1).iter().all(|v| *v == 0.0));
        assert!(matches!(
            compute_shift(&s, &[1540.0]),
            Err(PreprocessError::ChannelMismatch { series: 3, reference: 1 })
        ));
    }

    #[test]
    fn disjoint_spans_do_not_align() {
        let a = TimeSeries::new((0..10).map(|i| i as f64).collect(), 3, vec![0.0; 30]).unwrap();
        let b = TimeSeries::scalar((20..30).map(|i| i as f64).collect(), vec![0.0; 10]).unwrap();
        assert_eq!(align(&a, &b, &[0.0; 3]).unwrap_err(), PreprocessError::NoOverlap);
    }

    #[test]
    fn windows_partition_the_shifts() {
        let ts: Vec<f64> = (0..=2000).map(|k| k as f64 / 1000.0).collect();
        let vals: Vec<f64> = ts.iter().flat_map(|t| [t.sin(), t.cos(), *t]).collect();
        let a = TimeSeries::new(ts.clone(), 3, vals).unwrap();
        let st: Vec<f64> = (0..=20).map(|k| k as f64 / 10.0).collect();
        let b = TimeSeries::scalar(st.clone(), st.iter().map(|t| t * 10.0).collect()).unwrap();
        let pair = align(&a, &b, &[0.0; 3]).unwrap();
        assert_eq!(pair.forces.len(), 20);
        assert_eq!(pair.shifts.len(), 2000);
        let w = window(&pair);
        assert_eq!(w.len(), 20);
        assert_eq!(w[0].row(0), pair.shifts.row(0));
        let joined: Vec<f64> = w.iter().flat_map(|e| e.x.iter().copied()).collect();
        assert_eq!(joined, pair.shifts.values());
        // Label read at the window's last sample: t = 0.099 s -> 0.99 g.
        assert!((w[0].y - 0.99).abs() < 1e-9);
        assert_eq!(pair.forces.timestamps()[0], pair.shifts.timestamps()[99]);
    }

    fn feed(s: &mut StreamPreprocessor, ts: &[f64], rows: &[[f64; 3]]) -> Vec<StreamWindow> {
        let mut out = Vec::new();
        for (t, r) in ts.iter().zip(rows) {
            out.extend(s.push(*t, r).unwrap());
        }
        out
    }

    #[test]
    fn stream_reproduces_cubics_and_subtracts_reference() {
        let f = |t: f64| [t * t * t - t, 0.5 * t * t, 2.0 - t];
        let ts: Vec<f64> = irregular(2400, 2.05).iter().map(|t| t + 0.0003).collect();
        let rows: Vec<[f64; 3]> = ts.iter().map(|&t| f(t)).collect();
        let mut s = StreamPreprocessor::new();
        let mut w = feed(&mut s, &ts, &rows);
        w.extend(s.finish().unwrap());
        let whole = TimeSeries::new(ts.clone(), 3, rows.iter().flatten().copied().collect()).unwrap();
        let reference = estimate_reference(&whole, REFERENCE_SPAN).unwrap();
        assert_eq!(s.reference().unwrap().to_vec(), reference);
        assert_eq!(w.len(), 20);
        for win in &w {
            assert_eq!(win.time, ts[0] + (100 * win.t + 99) as f64 / 1000.0);
            for (k, row) in win.x.chunks(3).enumerate() {
                let tau = ts[0] + (100 * win.t + k) as f64 / 1000.0;
                for c in 0..3 {
                    assert!((row[c] + reference[c] - f(tau)[c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn stream_emits_two_samples_after_each_window() {
        let ts: Vec<f64> = (0..1500).map(|k| k as f64 / 1000.0).collect();
        let rows: Vec<[f64; 3]> = ts.iter().map(|t| [t.sin(), t.cos(), 1.0]).collect();
        let mut s = StreamPreprocessor::new();
        let mut counts = Vec::new();
        for (t, r) in ts.iter().zip(&rows) {
            counts.push(s.push(*t, r).unwrap().len());
        }
        // The reference is fixed by the first sample past 0.5 s (index 501);
        // five windows are waiting by then.
        assert_eq!(counts.iter().position(|&c| c > 0), Some(501));
        assert_eq!(counts[501], 5);
        // Window 5 ends at sample 599 and is ready once sample 601 arrives.
        assert_eq!(counts[601], 1);
        assert_eq!(counts.iter().sum::<usize>(), 14);
        assert!(s.raw.len() <= 4);
    }

    #[test]
    fn stream_matches_spline_pipeline_on_episode() {
        use crate::simulate::{gen_episode, SimConfig};
        let cfg = SimConfig { duration: 6.0, ..Default::default() };
        let ep = gen_episode(&cfg, 0).0;
        let reference = estimate_reference(&ep.interrogator, REFERENCE_SPAN).unwrap();
        let batch = window(&align(&ep.interrogator, &ep.scale, &reference).unwrap());
        let mut s = StreamPreprocessor::new();
        let mut w = Vec::new();
        for (t, r) in ep.interrogator.timestamps().iter().zip(ep.interrogator.rows()) {
            w.extend(s.push(*t, r).unwrap());
        }
        w.extend(s.finish().unwrap());
        assert_eq!(w.len(), batch.len());
        let worst = w
            .iter()
            .zip(&batch)
            .flat_map(|(a, b)| a.x.iter().zip(&b.x).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max);
        // Both interpolants pass through the raw samples; the grid sits within
        // the timestamp jitter of them.
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn stream_rejects_bad_rows() {
        let mut s = StreamPreprocessor::new();
        s.push(0.0, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(s.push(0.0, &[1.0, 1.0, 1.0]).unwrap_err(), PreprocessError::NonMonotonic(1));
        assert_eq!(s.push(0.1, &[1.0, f64::NAN, 1.0]).unwrap_err(), PreprocessError::NonFinite(1));
        assert!(matches!(s.push(0.1, &[1.0]), Err(PreprocessError::RowWidth { .. })));
        assert!(StreamPreprocessor::new().finish().unwrap().is_empty());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
