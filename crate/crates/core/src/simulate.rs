//! Synthetic poke sessions: contact-force profiles, tri-axial Bragg wavelength
//! responses with shift-of-reference (SoR) drift, and reflection spectra.
//!
//! Every generator is a pure function of its configuration and seed. Each
//! episode draws from its own ChaCha stream derived from `(seed, index)`, so
//! episodes can be generated in any order or in parallel with identical output.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::{Episode, EpisodeMeta, FbgPhysics, SorEvent, SpectrumFrame, TimeSeries, SENSORS};

/// Dense grid rate of the internal force profile.
pub const FORCE_GRID_HZ: f64 = 1000.0;
/// Zero-force lead-in before the first poke, s. Covers the reference span.
pub const LEAD_IN: f64 = 1.0;
/// Zero-force tail after the last poke, s.
pub const TAIL: f64 = 1.5;
/// Minimum rest between consecutive pokes, s.
pub const MIN_GAP: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("Bragg wavelength {bragg} nm is closer than 2 FWHM to the grid edge [{lo}, {hi}]")]
    Edge { bragg: f64, lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub episodes: usize,
    /// Session length, s.
    pub duration: f64,
    /// Pokes per minute.
    pub contact_rate: f64,
    /// Peak force per poke, grams.
    pub force_peak_range: (f64, f64),
    /// Raised-cosine poke width, s.
    pub poke_width_range: (f64, f64),
    /// Probability that a poke lands with a tilted (bent) tip.
    pub bend_prob: f64,
    /// Bending strain per unit axial strain for bent pokes.
    pub bend_gain_range: (f64, f64),
    /// Per-poke probability of a persistent reference shift on one sensor.
    pub sor_prob: f64,
    /// Magnitude of a reference shift, nm; the sign is drawn uniformly.
    pub sor_offset_range: (f64, f64),
    /// Interrogator wavelength noise, nm.
    pub noise_sigma: f64,
    pub interrogator_hz: f64,
    /// Relative timestamp jitter, fraction of one period.
    pub interrogator_jitter: f64,
    pub scale_hz: f64,
    pub scale_jitter: f64,
    /// Scale read-out noise, grams.
    pub scale_noise: f64,
    pub physics: FbgPhysics,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            episodes: 20,
            duration: 60.0,
            contact_rate: 8.0,
            force_peak_range: (5.0, 50.0),
            poke_width_range: (0.5, 3.0),
            bend_prob: 1.0,
            bend_gain_range: (280.0, 320.0),
            sor_prob: 0.2,
            sor_offset_range: (0.02, 0.10),
            noise_sigma: 8e-3,
            interrogator_hz: 1000.0,
            interrogator_jitter: 0.02,
            scale_hz: 10.0,
            scale_jitter: 0.05,
            scale_noise: 0.0,
            physics: FbgPhysics::default(),
            seed: 0,
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64), min: f64) -> Result<(), SimError> {
    if !(lo.is_finite() && hi.is_finite() && lo >= min && hi > lo) {
        return Err(SimError::Config(format!("{name} must satisfy {min} <= lo < hi, got ({lo}, {hi})")));
    }
    Ok(())
}

fn check_prob(name: &str, p: f64) -> Result<(), SimError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(SimError::Config(format!("{name} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        check_prob("bend_prob", self.bend_prob)?;
        check_prob("sor_prob", self.sor_prob)?;
        check_range("force_peak_range", self.force_peak_range, 0.0)?;
        check_range("poke_width_range", self.poke_width_range, 1e-3)?;
        check_range("bend_gain_range", self.bend_gain_range, 2.0)?;
        check_range("sor_offset_range", self.sor_offset_range, 0.0)?;
        if !(self.noise_sigma > 0.0) {
            return Err(SimError::Config(format!("noise_sigma must be positive, got {}", self.noise_sigma)));
        }
        for (name, hz) in [("interrogator_hz", self.interrogator_hz), ("scale_hz", self.scale_hz)] {
            if !(hz > 0.0 && hz.is_finite()) {
                return Err(SimError::Config(format!("{name} must be positive, got {hz}")));
            }
        }
        for (name, j) in [("interrogator_jitter", self.interrogator_jitter), ("scale_jitter", self.scale_jitter)] {
            if !(0.0..0.5).contains(&j) {
                return Err(SimError::Config(format!("{name} must lie in [0, 0.5), got {j}")));
            }
        }
        if !(self.scale_noise >= 0.0) {
            return Err(SimError::Config("scale_noise must be non-negative".into()));
        }
        if !(self.contact_rate >= 0.0 && self.contact_rate.is_finite()) {
            return Err(SimError::Config(format!("contact_rate must be non-negative, got {}", self.contact_rate)));
        }
        if !(self.duration > LEAD_IN + TAIL) {
            return Err(SimError::Config(format!("duration must exceed {} s", LEAD_IN + TAIL)));
        }
        let pokes = self.pokes_per_episode();
        if pokes > 0 {
            let slot = (self.duration - LEAD_IN - TAIL) / pokes as f64;
            if slot < self.poke_width_range.0 + MIN_GAP {
                return Err(SimError::Config(format!(
                    "contact_rate {} leaves {slot:.3} s per poke, below the minimum width plus rest",
                    self.contact_rate
                )));
            }
        }
        FbgPhysics::new(self.physics.lambda_b, self.physics.p_e, self.physics.sensitivity)
            .map_err(|e| SimError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn pokes_per_episode(&self) -> usize {
        (self.contact_rate * self.duration / 60.0).round() as usize
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of episode `index` under master seed `seed`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    splitmix(splitmix(seed) ^ index as u64)
}

/// Independent generator streams of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Force = 0,
    Response = 1,
    Scale = 2,
}

pub fn episode_rng(seed: u64, index: usize, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, index));
    rng.set_stream(stream as u64);
    rng
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..hi)
}

/// Contact force of one episode on a 1 kHz grid over `[0, duration]`.
///
/// Pokes are raised-cosine bumps, one per equal slot between the lead-in and
/// the tail, separated by at least `MIN_GAP` s of exact zero force.
pub fn gen_force_profile(cfg: &SimConfig, episode_index: usize) -> TimeSeries {
    let mut rng = episode_rng(cfg.seed, episode_index, Stream::Force);
    let n = (cfg.duration * FORCE_GRID_HZ).round() as usize + 1;
    let times: Vec<f64> = (0..n).map(|k| k as f64 / FORCE_GRID_HZ).collect();
    let mut force = vec![0.0; n];
    let pokes = cfg.pokes_per_episode();
    if pokes > 0 {
        let slot = (cfg.duration - LEAD_IN - TAIL) / pokes as f64;
        for j in 0..pokes {
            let slot_start = LEAD_IN + j as f64 * slot;
            let max_width = cfg.poke_width_range.1.min(slot - MIN_GAP);
            let width = uniform(&mut rng, (cfg.poke_width_range.0, max_width.max(cfg.poke_width_range.0 + 1e-9)));
            let free = (slot - MIN_GAP - width).max(0.0);
            let start = slot_start + MIN_GAP / 2.0 + rng.random::<f64>() * free;
            let peak = uniform(&mut rng, cfg.force_peak_range);
            let k0 = (start * FORCE_GRID_HZ).ceil() as usize;
            for k in k0..n {
                let u = (times[k] - start) / width;
                if u >= 1.0 {
                    break;
                }
                force[k] = peak * 0.5 * (1.0 - (TAU * u).cos());
            }
        }
    }
    TimeSeries::scalar(times, force).expect("one value per timestamp")
}

/// Ground truth for one detected poke.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PokeRecord {
    pub start: f64,
    /// First zero-force instant after contact; SoR steps activate here.
    pub end: f64,
    pub peak_time: f64,
    pub peak: f64,
    /// Rotation of the contact direction, rad.
    pub theta: f64,
    /// Bending strain per unit axial strain; 0 for straight pokes.
    pub bend_gain: f64,
}

impl PokeRecord {
    pub fn is_bent(&self) -> bool {
        self.bend_gain > 0.0
    }

    /// Noise- and drift-free shift of sensor `i` under `force` grams.
    pub fn shift(&self, phys: &FbgPhysics, i: usize, force: f64) -> f64 {
        let axial = force / phys.sensitivity;
        let bend = self.bend_gain * axial * (self.theta + TAU * i as f64 / SENSORS as f64).cos();
        phys.shift(i, axial + bend)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorResponse {
    /// Three channels of absolute Bragg wavelength, nm.
    pub wavelengths: TimeSeries,
    pub sor_events: Vec<SorEvent>,
    pub pokes: Vec<PokeRecord>,
}

/// Contiguous runs of positive force as `(first, last)` sample indices.
fn contact_runs(force: &[f64]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < force.len() {
        if force[i] > 0.0 {
            let s = i;
            while i + 1 < force.len() && force[i + 1] > 0.0 {
                i += 1;
            }
            runs.push((s, i));
        }
        i += 1;
    }
    runs
}

/// Jittered sample times at nominal rate `hz` spanning exactly `[0, duration]`.
fn jittered_times<R: Rng + ?Sized>(rng: &mut R, duration: f64, hz: f64, jitter: f64) -> Vec<f64> {
    let n = (duration * hz).floor() as usize;
    let mut times: Vec<f64> = (0..=n)
        .map(|k| {
            let j = if k == 0 { 0.0 } else { rng.random_range(-jitter..=jitter) };
            (k as f64 + j) / hz
        })
        .collect();
    if let Some(last) = times.last_mut() {
        *last = duration;
    }
    // A final sample jittered past `duration`, or a period too close to it, is dropped.
    if times.len() > 1 && times[times.len() - 2] >= duration - 0.5 / hz {
        let l = times.len();
        times.remove(l - 2);
    }
    times
}

/// Linear interpolation on a uniform grid starting at 0.
fn interp_uniform(values: &[f64], hz: f64, t: f64) -> f64 {
    let x = t * hz;
    let i = (x.floor() as usize).min(values.len() - 1);
    if i + 1 >= values.len() {
        return values[values.len() - 1];
    }
    let f = x - i as f64;
    values[i] * (1.0 - f) + values[i + 1] * f
}

/// Tri-axial Bragg wavelengths for a force profile from [`gen_force_profile`].
///
/// Per sensor `i`:
/// `λ_i = λ_B,i (1 + (1 − p_e)(ε_ax + ε_bend cos(θ + 2πi/3))) + sor_i(t) + noise`,
/// with `ε_ax = force / sensitivity` and `ε_bend = gain · ε_ax` on bent pokes.
/// Because `gain > 2`, one sensor of a bent poke always shifts against the
/// other two. An SoR step becomes active when its poke returns to zero force
/// and persists to the end of the episode; steps on one sensor accumulate.
pub fn gen_sensor_response<R: Rng + ?Sized>(
    force: &TimeSeries,
    phys: &FbgPhysics,
    cfg: &SimConfig,
    rng: &mut R,
) -> SensorResponse {
    let f = force.values();
    let ft = force.timestamps();
    let grid_hz = if ft.len() > 1 { 1.0 / (ft[1] - ft[0]) } else { FORCE_GRID_HZ };
    let mut pokes = Vec::new();
    let mut sor_events = Vec::new();
    for (s, e) in contact_runs(f) {
        let peak_idx = (s..=e).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap_or(s);
        let theta = rng.random_range(0.0..TAU);
        let bent = rng.random::<f64>() < cfg.bend_prob;
        let bend_gain = if bent { uniform(rng, cfg.bend_gain_range) } else { 0.0 };
        let end = ft.get(e + 1).copied().unwrap_or(ft[e]);
        pokes.push(PokeRecord { start: ft[s], end, peak_time: ft[peak_idx], peak: f[peak_idx], theta, bend_gain });
        if rng.random::<f64>() < cfg.sor_prob {
            let sensor = rng.random_range(0..SENSORS);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sor_events.push(SorEvent { time: end, sensor, offset: sign * uniform(rng, cfg.sor_offset_range) });
        }
    }

    let duration = ft.last().copied().unwrap_or(0.0);
    let times = jittered_times(rng, duration, cfg.interrogator_hz, cfg.interrogator_jitter);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let mut values = Vec::with_capacity(times.len() * SENSORS);
    let mut poke = 0;
    let mut sor = [0.0; SENSORS];
    let mut next_sor = 0;
    for &t in &times {
        while next_sor < sor_events.len() && sor_events[next_sor].time <= t {
            let ev = sor_events[next_sor];
            sor[ev.sensor] += ev.offset;
            next_sor += 1;
        }
        while poke < pokes.len() && pokes[poke].end <= t {
            poke += 1;
        }
        let active = pokes.get(poke).filter(|p| t >= p.start - 1.0 / grid_hz);
        let load = if active.is_some() { interp_uniform(f, grid_hz, t) } else { 0.0 };
        for (i, offset) in sor.iter().enumerate() {
            let strain_shift = active.map_or(0.0, |p| p.shift(phys, i, load));
            values.push(phys.lambda_b[i] + strain_shift + offset + noise.sample(rng));
        }
    }
    let wavelengths = TimeSeries::new(times, SENSORS, values).expect("three values per timestamp");
    SensorResponse { wavelengths, sor_events, pokes }
}

/// Scale readings of a force profile at jittered ~`scale_hz` instants.
pub fn gen_scale<R: Rng + ?Sized>(force: &TimeSeries, cfg: &SimConfig, rng: &mut R) -> TimeSeries {
    let ft = force.timestamps();
    let grid_hz = if ft.len() > 1 { 1.0 / (ft[1] - ft[0]) } else { FORCE_GRID_HZ };
    let duration = ft.last().copied().unwrap_or(0.0);
    let times = jittered_times(rng, duration, cfg.scale_hz, cfg.scale_jitter);
    let values = times
        .iter()
        .map(|&t| {
            let v = interp_uniform(force.values(), grid_hz, t);
            if cfg.scale_noise > 0.0 {
                v + cfg.scale_noise * rng.sample::<f64, _>(StandardNormal)
            } else {
                v
            }
        })
        .collect();
    TimeSeries::scalar(times, values).expect("one value per timestamp")
}

/// Episode `index` together with its poke ground truth.
pub fn gen_episode(cfg: &SimConfig, index: usize) -> (Episode, Vec<PokeRecord>) {
    let force = gen_force_profile(cfg, index);
    let mut rng = episode_rng(cfg.seed, index, Stream::Response);
    let resp = gen_sensor_response(&force, &cfg.physics, cfg, &mut rng);
    let mut scale_rng = episode_rng(cfg.seed, index, Stream::Scale);
    let scale = gen_scale(&force, cfg, &mut scale_rng);
    let episode = Episode {
        interrogator: resp.wavelengths,
        scale,
        sor_events: resp.sor_events,
        meta: EpisodeMeta {
            seed: episode_seed(cfg.seed, index),
            duration: cfg.duration,
            config_hash: Some(cfg.hash()),
        },
    };
    (episode, resp.pokes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub index: usize,
    pub id: String,
    pub seed: u64,
    pub sor_events: Vec<SorEvent>,
}

/// Reproduction record of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: u32,
    pub config: SimConfig,
    pub config_hash: String,
    /// Repeated SoR steps on one sensor add up.
    pub sor_accumulates: bool,
    pub episodes: Vec<EpisodeEntry>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

pub fn episode_id(index: usize) -> String {
    format!("episode_{index:04}")
}

/// Generate `cfg.episodes` episodes and their manifest.
pub fn gen_dataset(cfg: &SimConfig) -> Result<(Vec<Episode>, DatasetManifest), SimError> {
    cfg.validate()?;
    let episodes: Vec<Episode> = (0..cfg.episodes).into_par_iter().map(|i| gen_episode(cfg, i).0).collect();
    let entries = episodes
        .iter()
        .enumerate()
        .map(|(index, ep)| EpisodeEntry {
            index,
            id: episode_id(index),
            seed: ep.meta.seed,
            sor_events: ep.sor_events.clone(),
        })
        .collect();
    let manifest = DatasetManifest {
        format: 1,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        sor_accumulates: true,
        episodes: entries,
    };
    Ok((episodes, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumConfig {
    pub grid_start: f64,
    pub grid_end: f64,
    pub grid_step: f64,
    /// Full width at half maximum of the reflection peak, nm.
    pub fwhm: f64,
    /// Peak height over the standard deviation of additive white noise.
    /// `f64::INFINITY` gives noiseless frames.
    pub snr: f64,
    pub seed: u64,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self { grid_start: 1535.0, grid_end: 1545.0, grid_step: 0.005, fwhm: 0.5, snr: 500.0, seed: 0 }
    }
}

impl SpectrumConfig {
    pub fn grid(&self) -> Vec<f64> {
        let n = ((self.grid_end - self.grid_start) / self.grid_step).round() as usize;
        (0..=n).map(|j| self.grid_start + j as f64 * self.grid_step).collect()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.grid_step > 0.0 && self.grid_end > self.grid_start) {
            return Err(SimError::Config("spectrum grid must be strictly increasing".into()));
        }
        if !(self.fwhm > 0.0) {
            return Err(SimError::Config(format!("fwhm must be positive, got {}", self.fwhm)));
        }
        if !(self.snr > 0.0) {
            return Err(SimError::Config(format!("snr must be positive, got {}", self.snr)));
        }
        Ok(())
    }
}

/// Gaussian reflection peak centred on `bragg` plus white noise of standard
/// deviation `1 / snr`.
pub fn gen_spectrum<R: Rng + ?Sized>(bragg: f64, cfg: &SpectrumConfig, rng: &mut R) -> Result<SpectrumFrame, SimError> {
    cfg.validate()?;
    let grid = cfg.grid();
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    if bragg - lo < 2.0 * cfg.fwhm || hi - bragg < 2.0 * cfg.fwhm {
        return Err(SimError::Edge { bragg, lo, hi });
    }
    let c = 4.0 * 2f64.ln() / (cfg.fwhm * cfg.fwhm);
    let sigma = 1.0 / cfg.snr;
    let intensity = grid
        .iter()
        .map(|&x| {
            let clean = (-c * (x - bragg) * (x - bragg)).exp();
            if sigma > 0.0 {
                clean + sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                clean
            }
        })
        .collect();
    Ok(SpectrumFrame { grid, intensity })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn local_maxima(v: &[f64]) -> Vec<usize> {
        (1..v.len() - 1).filter(|&i| v[i] > 0.0 && v[i] >= v[i - 1] && v[i] > v[i + 1]).collect()
    }

    #[test]
    fn no_pokes_means_zero_force() {
        let cfg = SimConfig { contact_rate: 0.0, ..SimConfig::default() };
        let f = gen_force_profile(&cfg, 0);
        assert!(f.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_grid_has_one_sample_per_ms() {
        let f = gen_force_profile(&SimConfig::default(), 0);
        assert!((f.len() as i64 - 60_000).abs() <= 1);
        assert_eq!(f.last_time(), Some(60.0));
    }

    #[test]
    fn poke_peaks_stay_in_range_and_return_to_zero() {
        let cfg = SimConfig::default();
        for e in 0..100 {
            let f = gen_force_profile(&cfg, e);
            let v = f.values();
            assert!(v.iter().all(|&x| x >= 0.0));
            let runs = contact_runs(v);
            assert_eq!(runs.len(), cfg.pokes_per_episode());
            for (s, e) in runs {
                assert_eq!(v[s - 1], 0.0);
                assert_eq!(v[e + 1], 0.0);
            }
            for i in local_maxima(v) {
                assert!((4.99..=50.0).contains(&v[i]), "episode {e}: max {}", v[i]);
            }
        }
    }

    #[test]
    fn zero_force_quiet_sensors_read_reference() {
        let cfg = SimConfig { contact_rate: 0.0, noise_sigma: 1e-300, sor_prob: 0.0, ..SimConfig::default() };
        let force = gen_force_profile(&cfg, 0);
        let mut rng = episode_rng(1, 0, Stream::Response);
        let r = gen_sensor_response(&force, &cfg.physics, &cfg, &mut rng);
        for row in r.wavelengths.rows() {
            for (v, l) in row.iter().zip(cfg.physics.lambda_b) {
                assert_eq!(*v, l);
            }
        }
    }

    #[test]
    fn straight_pokes_shift_all_sensors_together() {
        let cfg = SimConfig { bend_prob: 0.0, noise_sigma: 1e-12, sor_prob: 0.0, ..SimConfig::default() };
        for e in 0..5 {
            let force = gen_force_profile(&cfg, e);
            let mut rng = episode_rng(cfg.seed, e, Stream::Response);
            let r = gen_sensor_response(&force, &cfg.physics, &cfg, &mut rng);
            let ts = r.wavelengths.timestamps();
            for p in &r.pokes {
                assert!(!p.is_bent());
                let k = ts.partition_point(|&t| t < p.peak_time);
                let row = r.wavelengths.row(k);
                assert!(row.iter().zip(cfg.physics.lambda_b).all(|(v, l)| v - l > 0.0));
            }
        }
    }

    #[test]
    fn timestamps_are_jittered_and_span_the_episode() {
        let (ep, _) = gen_episode(&SimConfig::default(), 3);
        let ts = ep.interrogator.timestamps();
        assert_eq!(ts[0], 0.0);
        assert_eq!(*ts.last().unwrap(), 60.0);
        let steps: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(steps.iter().all(|&d| d > 0.0 && d < 1.05e-3));
        assert!(steps.iter().any(|&d| (d - 1e-3).abs() > 1e-6));
        let st = ep.scale.timestamps();
        assert_eq!((st[0], *st.last().unwrap()), (0.0, 60.0));
        assert!(ep.check().is_ok());
    }

    #[test]
    fn sor_step_persists_after_single_poke() {
        // Trailing-second mean vs injected step, in units of its standard error.
        let cfg = SimConfig { contact_rate: 1.0, sor_prob: 1.0, ..SimConfig::default() };
        let n = 200;
        let mut within = 0;
        let mut z_sum = 0.0;
        for e in 0..n {
            let (ep, pokes) = gen_episode(&cfg, e);
            assert_eq!(pokes.len(), 1);
            assert_eq!(ep.sor_events.len(), 1);
            let ev = ep.sor_events[0];
            assert!(ev.time >= pokes[0].end - 1e-12);
            let ts = ep.interrogator.timestamps();
            let from = ts.partition_point(|&t| t < 59.0);
            let tail: Vec<f64> =
                (from..ts.len()).map(|k| ep.interrogator.row(k)[ev.sensor] - cfg.physics.lambda_b[ev.sensor]).collect();
            let mean = tail.iter().sum::<f64>() / tail.len() as f64;
            let z = (mean - ev.offset) / (cfg.noise_sigma / (tail.len() as f64).sqrt());
            within += usize::from(z.abs() < 3.0);
            z_sum += z;
        }
        // 99.73 % expected inside 3 sigma.
        assert!(within as f64 >= 0.98 * n as f64, "{within}/{n}");
        assert!((z_sum / n as f64).abs() < 0.25);
    }

    #[test]
    fn dataset_is_deterministic_and_counts_episodes() {
        let cfg = SimConfig { episodes: 20, seed: 11, ..SimConfig::default() };
        let (eps, m1) = gen_dataset(&cfg).unwrap();
        let (_, m2) = gen_dataset(&cfg).unwrap();
        assert_eq!(eps.len(), 20);
        assert_eq!(m1.to_json(), m2.to_json());
        let none = SimConfig { sor_prob: 0.0, ..cfg };
        let (eps, m) = gen_dataset(&none).unwrap();
        assert!(eps.iter().all(|e| e.sor_events.is_empty()));
        assert!(m.episodes.iter().all(|e| e.sor_events.is_empty()));
    }

    #[test]
    fn episode_generation_is_order_independent() {
        let cfg = SimConfig { episodes: 4, seed: 5, ..SimConfig::default() };
        let (eps, _) = gen_dataset(&cfg).unwrap();
        assert_eq!(gen_episode(&cfg, 2).0, eps[2]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            SimConfig { sor_prob: 1.5, ..SimConfig::default() },
            SimConfig { noise_sigma: 0.0, ..SimConfig::default() },
            SimConfig { force_peak_range: (5.0, 5.0), ..SimConfig::default() },
            SimConfig { contact_rate: 100.0, ..SimConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn noiseless_spectrum_peaks_on_nearest_bin() {
        let cfg = SpectrumConfig { snr: f64::INFINITY, ..SpectrumConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for bragg in [1540.0, 1540.0012, 1538.3337] {
            let s = gen_spectrum(bragg, &cfg, &mut rng).unwrap();
            let arg = (0..s.grid.len()).max_by(|&a, &b| s.intensity[a].total_cmp(&s.intensity[b])).unwrap();
            let nearest = (0..s.grid.len())
                .min_by(|&a, &b| (s.grid[a] - bragg).abs().total_cmp(&(s.grid[b] - bragg).abs()))
                .unwrap();
            assert_eq!(arg, nearest);
        }
    }

    #[test]
    fn spectrum_near_edge_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = gen_spectrum(1535.1, &SpectrumConfig::default(), &mut rng).unwrap_err();
        assert!(matches!(err, SimError::Edge { .. }));
    }

    #[test]
    fn snr_20_argmax_within_fwhm() {
        let cfg = SpectrumConfig { snr: 20.0, ..SpectrumConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut hits = 0;
        for _ in 0..1000 {
            let s = gen_spectrum(1540.0, &cfg, &mut rng).unwrap();
            let arg = (0..s.grid.len()).max_by(|&a, &b| s.intensity[a].total_cmp(&s.intensity[b])).unwrap();
            hits += usize::from((s.grid[arg] - 1540.0).abs() <= cfg.fwhm);
        }
        assert!(hits >= 999, "{hits}");
    }
}
