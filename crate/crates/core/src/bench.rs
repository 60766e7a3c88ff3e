//! Experiment drivers: the two-phase architecture sweep, inference latency,
//! the shift-of-reference ablation and the spectral peak-picking comparison.
//!
//! Result tables render as CSV (no timing columns, so reruns hash equal) and
//! as aligned text.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{
    build_model, evaluate_mae, prepare_episode, split_episodes, train, ModelError, ModelKind, ModelParams, ModelSpec,
    Sequence, StreamState, TrainConfig, INPUT_DIM,
};
use crate::peakdetect::{baseline_peak, compare_stats, peak_wavelength, KdeParams, PeakError, PeakStats};
use crate::simulate::{episode_id, episode_seed, gen_dataset, gen_spectrum, SimConfig, SimError, SpectrumConfig};
use crate::types::{Episode, SENSORS};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("latency run needs at least one window and one repetition")]
    EmptyRun,
    #[error("peak comparison needs at least {min} frames, got {got}")]
    TooFewFrames { got: usize, min: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Peak(#[from] PeakError),
}

/// Episodes prepared into windowed sequences and split by episode.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub train: Vec<Sequence>,
    pub val: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

impl SplitData {
    pub fn from_episodes(episodes: &[Episode], cfg: &TrainConfig) -> Result<Self, ModelError> {
        let seqs = episodes
            .iter()
            .enumerate()
            .map(|(i, e)| prepare_episode(&episode_id(i), e))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_sequences(seqs, cfg))
    }

    pub fn from_sequences(seqs: Vec<Sequence>, cfg: &TrainConfig) -> Self {
        let split = split_episodes(seqs.len(), cfg.train_frac, cfg.val_frac, cfg.split_seed);
        let mut slots: Vec<Option<Sequence>> = seqs.into_iter().map(Some).collect();
        let mut take = |ix: &[usize]| ix.iter().filter_map(|&i| slots[i].take()).collect::<Vec<_>>();
        Self { train: take(&split.train), val: take(&split.val), test: take(&split.test) }
    }
}

/// Builds, trains and tests one spec; returns the test MAE (validation MAE
/// when the test split is empty).
pub fn fit_and_score(spec: ModelSpec, data: &SplitData, cfg: &TrainConfig, seed: u64) -> Result<f64, ModelError> {
    let model = build_model(spec, seed)?;
    let cfg = TrainConfig { seed, ..*cfg };
    let (model, hist) = train(model, &data.train, &data.val, &cfg)?;
    if data.test.iter().all(Sequence::is_empty) {
        return Ok(hist.best_val_mae);
    }
    evaluate_mae(&model, &data.test)
}

fn median(v: &[f64]) -> Option<f64> {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if s.is_empty() {
        return None;
    }
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.prec$}"))
}

/// Left-aligned first column, right-aligned rest.
fn text_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        for (i, (c, w)) in cells.iter().zip(&width).enumerate() {
            if i == 0 {
                let _ = write!(out, "{c:<w$}");
            } else {
                let _ = write!(out, "  {c:>w$}");
            }
        }
        out.push('\n');
    };
    line(&mut out, header);
    let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
    line(&mut out, &rule);
    for r in rows {
        line(&mut out, r);
    }
    out
}

fn csv_string(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub kinds: Vec<ModelKind>,
    pub layers: Vec<usize>,
    pub hidden: Vec<usize>,
    /// Width used while sweeping depth.
    pub phase1_hidden: usize,
    /// Attention heads; `None` picks the default for each width.
    pub heads: Option<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            kinds: ModelKind::ALL.to_vec(),
            layers: vec![1, 2, 4, 8],
            hidden: vec![64, 128, 256, 512, 1024],
            phase1_hidden: 256,
            heads: None,
            seeds: vec![0],
        }
    }
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty() || self.layers.is_empty() || self.hidden.is_empty() || self.seeds.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub phase: u8,
    pub kind: ModelKind,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub seed: u64,
    pub test_mae: Option<f64>,
    pub train_secs: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Depth with the lowest median phase-1 MAE, per kind; phase 2 runs at it.
    pub best_layers: BTreeMap<ModelKind, usize>,
}

pub const SWEEP_CSV_HEADER: [&str; 8] = ["phase", "kind", "layers", "hidden", "heads", "seed", "test_mae", "error"];

impl SweepResult {
    pub fn to_csv(&self) -> String {
        csv_string(
            &SWEEP_CSV_HEADER,
            self.rows.iter().map(|r| {
                vec![
                    r.phase.to_string(),
                    r.kind.name().into(),
                    r.layers.to_string(),
                    r.hidden.to_string(),
                    r.heads.to_string(),
                    r.seed.to_string(),
                    r.test_mae.map_or_else(String::new, |v| v.to_string()),
                    r.error.clone().unwrap_or_default(),
                ]
            }),
        )
    }

    pub fn to_table(&self) -> String {
        let header: Vec<String> =
            ["phase", "model", "layers", "hidden", "heads", "seed", "MAE (g)", "train (s)"].map(String::from).to_vec();
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.phase.to_string(),
                    r.kind.name().into(),
                    r.layers.to_string(),
                    r.hidden.to_string(),
                    r.heads.to_string(),
                    r.seed.to_string(),
                    r.error.as_ref().map_or_else(|| fmt_opt(r.test_mae, 3), |_| "failed".into()),
                    format!("{:.1}", r.train_secs),
                ]
            })
            .collect();
        text_table(&header, &rows)
    }
}

fn sweep_cell(phase: u8, spec: ModelSpec, seed: u64, data: &SplitData, cfg: &TrainConfig) -> SweepRow {
    let t0 = Instant::now();
    let res = spec.validate().and_then(|()| fit_and_score(spec, data, cfg, seed));
    let (test_mae, error) = match res {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(e.to_string())),
    };
    SweepRow {
        phase,
        kind: spec.kind,
        layers: spec.layers,
        hidden: spec.hidden,
        heads: spec.heads,
        seed,
        test_mae,
        train_secs: t0.elapsed().as_secs_f64(),
        error,
    }
}

fn spec_for(grid: &SweepGrid, kind: ModelKind, layers: usize, hidden: usize) -> ModelSpec {
    let s = ModelSpec::new(kind, layers, hidden);
    match grid.heads {
        Some(h) if kind == ModelKind::Transformer => s.with_heads(h),
        _ => s,
    }
}

/// Depth first at `phase1_hidden`, then width at each kind's best depth.
///
/// Cells run in parallel; a failing cell is recorded and the sweep goes on.
/// Phase 2 reuses the phase-1 cell at `phase1_hidden` and is skipped when
/// the width grid holds nothing else.
pub fn run_sweep(grid: &SweepGrid, data: &SplitData, cfg: &TrainConfig) -> SweepResult {
    let mut result = SweepResult { rows: Vec::new(), best_layers: BTreeMap::new() };
    if grid.is_empty() {
        return result;
    }
    let cells: Vec<(ModelKind, usize, u64)> = grid
        .kinds
        .iter()
        .flat_map(|&k| grid.layers.iter().flat_map(move |&l| grid.seeds.iter().map(move |&s| (k, l, s))))
        .collect();
    let phase1: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(k, l, s)| sweep_cell(1, spec_for(grid, k, l, grid.phase1_hidden), s, data, cfg))
        .collect();

    for &kind in &grid.kinds {
        let best = grid
            .layers
            .iter()
            .filter_map(|&l| {
                let maes: Vec<f64> =
                    phase1.iter().filter(|r| r.kind == kind && r.layers == l).filter_map(|r| r.test_mae).collect();
                median(&maes).map(|m| (l, m))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((l, _)) = best {
            result.best_layers.insert(kind, l);
        }
    }

    let widths: Vec<usize> = grid.hidden.iter().copied().filter(|&h| h != grid.phase1_hidden).collect();
    let mut phase2 = Vec::new();
    if !widths.is_empty() {
        let cells: Vec<(ModelKind, usize, u64)> = grid
            .kinds
            .iter()
            .flat_map(|&k| grid.hidden.iter().flat_map(move |&h| grid.seeds.iter().map(move |&s| (k, h, s))))
            .collect();
        phase2 = cells
            .par_iter()
            .map(|&(k, h, s)| match result.best_layers.get(&k) {
                None => {
                    let spec = spec_for(grid, k, grid.layers[0], h);
                    SweepRow {
                        phase: 2,
                        kind: k,
                        layers: 0,
                        hidden: h,
                        heads: spec.heads,
                        seed: s,
                        test_mae: None,
                        train_secs: 0.0,
                        error: Some("every phase-1 cell failed".into()),
                    }
                }
                Some(&l) if h == grid.phase1_hidden => {
                    let prev = phase1.iter().find(|r| r.kind == k && r.layers == l && r.seed == s);
                    SweepRow { phase: 2, ..prev.expect("phase-1 cell exists").clone() }
                }
                Some(&l) => sweep_cell(2, spec_for(grid, k, l, h), s, data, cfg),
            })
            .collect();
    }
    result.rows = phase1;
    result.rows.extend(phase2);
    result
}

// -------------------------------------------------------------- latency

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostInfo {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub cpu_model: Option<String>,
}

impl HostInfo {
    pub fn detect() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        });
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            cpu_model,
        }
    }
}

impl std::fmt::Display for HostInfo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}, {} cpu", self.os, self.arch, self.cpus)?;
        if let Some(m) = &self.cpu_model {
            write!(f, ", {m}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub model: String,
    pub n_windows: usize,
    pub repetitions: usize,
    /// Timed windows after warm-up.
    pub samples: usize,
    pub mean_ms: f64,
    pub p99_ms: f64,
    pub host: HostInfo,
}

/// Per-window wall-clock inference on the calling thread.
///
/// Each repetition streams `n_windows` windows of a fixed pseudo-random
/// input through a fresh [`StreamState`] and times every push. The first 10%
/// of repetitions are warm-up and dropped.
pub fn measure_latency(model: &ModelParams, n_windows: usize, repetitions: usize) -> Result<LatencyReport, BenchError> {
    if n_windows == 0 || repetitions == 0 {
        return Err(BenchError::EmptyRun);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let xs: Vec<f64> = (0..n_windows * INPUT_DIM)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.05 * z
        })
        .collect();
    let warmup = repetitions / 10;
    let mut times = Vec::with_capacity((repetitions - warmup) * n_windows);
    for rep in 0..repetitions {
        let mut stream = StreamState::new(model);
        for w in xs.chunks(INPUT_DIM) {
            let t0 = Instant::now();
            std::hint::black_box(stream.push(std::hint::black_box(w))?);
            if rep >= warmup {
                times.push(t0.elapsed().as_secs_f64() * 1e3);
            }
        }
    }
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    let p99_ms = times[((times.len() as f64 * 0.99).ceil() as usize).clamp(1, times.len()) - 1];
    Ok(LatencyReport {
        model: model.spec.label(),
        n_windows,
        repetitions,
        samples: times.len(),
        mean_ms,
        p99_ms,
        host: HostInfo::detect(),
    })
}

pub fn latency_table(reports: &[LatencyReport]) -> String {
    let header = ["model", "windows", "reps", "mean (ms)", "p99 (ms)"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.n_windows.to_string(),
                r.repetitions.to_string(),
                format!("{:.4}", r.mean_ms),
                format!("{:.4}", r.p99_ms),
            ]
        })
        .collect();
    let mut out = text_table(&header, &rows);
    if let Some(r) = reports.first() {
        let _ = writeln!(out, "host: {}", r.host);
    }
    out
}

// ------------------------------------------------------------- ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Simulator settings shared by both datasets; its `sor_prob` is ignored.
    pub sim: SimConfig,
    pub sor_prob: f64,
    pub specs: Vec<ModelSpec>,
    /// Each seed drives the simulator, the split, the initialisation and the
    /// shuffling.
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            sor_prob: 0.7,
            specs: vec![ModelSpec::new(ModelKind::Fcn, 2, 64), ModelSpec::new(ModelKind::Rnn, 4, 64)],
            seeds: vec![0, 1, 2],
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub spec: ModelSpec,
    /// Per-seed MAE on the drift-free data; `NaN` marks a failed run.
    pub mae_free: Vec<f64>,
    pub mae_heavy: Vec<f64>,
    pub median_free: Option<f64>,
    pub median_heavy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub sor_prob: f64,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub errors: Vec<String>,
}

/// Median MAE of the GRU minus that of the FCN, and their ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub diff: f64,
    pub ratio: f64,
}

impl AblationResult {
    fn first(&self, kind: ModelKind) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.spec.kind == kind)
    }

    fn gap(&self, pick: impl Fn(&AblationRow) -> Option<f64>) -> Option<Gap> {
        let g = pick(self.first(ModelKind::Rnn)?)?;
        let f = pick(self.first(ModelKind::Fcn)?)?;
        Some(Gap { diff: g - f, ratio: g / f })
    }

    /// GRU-vs-FCN gap on the drift-free data.
    pub fn gap_free(&self) -> Option<Gap> {
        self.gap(|r| r.median_free)
    }

    /// GRU-vs-FCN gap on the drift-heavy data.
    pub fn gap_heavy(&self) -> Option<Gap> {
        self.gap(|r| r.median_heavy)
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: f64| if v.is_finite() { v.to_string() } else { String::new() };
        csv_string(
            &["model", "seed", "mae_sor_free", "mae_sor_heavy"],
            self.rows.iter().flat_map(|r| {
                self.seeds
                    .iter()
                    .enumerate()
                    .map(move |(i, s)| vec![r.spec.label(), s.to_string(), cell(r.mae_free[i]), cell(r.mae_heavy[i])])
            }),
        )
    }

    pub fn to_table(&self) -> String {
        let header =
            ["model", "sor-free MAE (g)", format!("sor={} MAE (g)", self.sor_prob).as_str()].map(String::from).to_vec();
        let mut rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| vec![r.spec.label(), fmt_opt(r.median_free, 3), fmt_opt(r.median_heavy, 3)])
            .collect();
        let (gf, gh) = (self.gap_free(), self.gap_heavy());
        rows.push(vec!["GRU - FCN".into(), fmt_opt(gf.map(|g| g.diff), 3), fmt_opt(gh.map(|g| g.diff), 3)]);
        rows.push(vec!["GRU / FCN".into(), fmt_opt(gf.map(|g| g.ratio), 3), fmt_opt(gh.map(|g| g.ratio), 3)]);
        let mut out = text_table(&header, &rows);
        let _ = writeln!(out, "medians over seeds {:?}", self.seeds);
        out
    }
}

/// Trains every spec on drift-free and drift-heavy data generated from the
/// same seeds and reports per-seed and median test MAE.
pub fn sor_ablation(cfg: &AblationConfig) -> Result<AblationResult, BenchError> {
    cfg.train.validate()?;
    for s in &cfg.specs {
        s.validate()?;
    }
    let datasets: Vec<(SplitData, SplitData)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let make = |sor_prob: f64| -> Result<SplitData, BenchError> {
                let sim = SimConfig { sor_prob, seed, ..cfg.sim.clone() };
                let (eps, _) = gen_dataset(&sim)?;
                let tc = TrainConfig { split_seed: seed, ..cfg.train };
                Ok(SplitData::from_episodes(&eps, &tc)?)
            };
            Ok((make(0.0)?, make(cfg.sor_prob)?))
        })
        .collect::<Result<_, BenchError>>()?;

    let jobs: Vec<(usize, usize, bool)> = (0..cfg.specs.len())
        .flat_map(|s| (0..cfg.seeds.len()).flat_map(move |i| [(s, i, false), (s, i, true)]))
        .collect();
    let scores: Vec<Result<f64, String>> = jobs
        .par_iter()
        .map(|&(s, i, heavy)| {
            let data = if heavy { &datasets[i].1 } else { &datasets[i].0 };
            fit_and_score(cfg.specs[s], data, &cfg.train, cfg.seeds[i]).map_err(|e| {
                format!("{} seed {} {}: {e}", cfg.specs[s].label(), cfg.seeds[i], if heavy { "sor" } else { "free" })
            })
        })
        .collect();

    let n = cfg.seeds.len();
    let mut errors = Vec::new();
    let mut rows: Vec<AblationRow> = cfg
        .specs
        .iter()
        .map(|&spec| AblationRow {
            spec,
            mae_free: vec![f64::NAN; n],
            mae_heavy: vec![f64::NAN; n],
            median_free: None,
            median_heavy: None,
        })
        .collect();
    for (&(s, i, heavy), score) in jobs.iter().zip(scores) {
        match score {
            Ok(v) if heavy => rows[s].mae_heavy[i] = v,
            Ok(v) => rows[s].mae_free[i] = v,
            Err(e) => errors.push(e),
        }
    }
    for r in &mut rows {
        r.median_free = median(&r.mae_free);
        r.median_heavy = median(&r.mae_heavy);
    }
    Ok(AblationResult { sor_prob: cfg.sor_prob, seeds: cfg.seeds.clone(), rows, errors })
}

// ---------------------------------------------------------- peak picking

pub const MIN_PEAK_FRAMES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorPeaks {
    pub bragg: f64,
    pub frames: usize,
    /// `a` is the KDE picker, `b` the parabolic baseline. `None` when one
    /// picker found nothing in every frame.
    pub stats: Option<PeakStats>,
    pub kde_misses: usize,
    pub baseline_misses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakComparison {
    pub snr: f64,
    pub kde: KdeParams,
    pub sensors: Vec<SensorPeaks>,
}

impl PeakComparison {
    fn columns(&self) -> Vec<String> {
        (0..self.sensors.len()).flat_map(|i| [format!("s{i}_kde"), format!("s{i}_baseline")]).collect()
    }

    fn stat_rows(&self) -> Vec<(&'static str, Vec<Option<f64>>)> {
        let pick = |f: fn(&PeakStats) -> (f64, f64)| -> Vec<Option<f64>> {
            self.sensors
                .iter()
                .flat_map(|s| match &s.stats {
                    Some(st) => {
                        let (a, b) = f(st);
                        [Some(a), Some(b)]
                    }
                    None => [None, None],
                })
                .collect()
        };
        let misses: Vec<Option<f64>> =
            self.sensors.iter().flat_map(|s| [Some(s.kde_misses as f64), Some(s.baseline_misses as f64)]).collect();
        vec![("mean", pick(|s| (s.mean_a, s.mean_b))), ("std", pick(|s| (s.std_a, s.std_b))), ("misses", misses)]
    }

    pub fn to_csv(&self) -> String {
        let cols = self.columns();
        let header: Vec<&str> = std::iter::once("stat").chain(cols.iter().map(String::as_str)).collect();
        csv_string(
            &header,
            self.stat_rows().into_iter().map(|(name, vals)| {
                std::iter::once(name.to_string())
                    .chain(vals.iter().map(|v| v.map_or_else(String::new, |x| x.to_string())))
                    .collect()
            }),
        )
    }

    pub fn to_table(&self) -> String {
        let header: Vec<String> = std::iter::once("".to_string()).chain(self.columns()).collect();
        let rows: Vec<Vec<String>> = self
            .stat_rows()
            .into_iter()
            .map(|(name, vals)| {
                let prec = if name == "misses" { 0 } else { 6 };
                std::iter::once(name.to_string()).chain(vals.iter().map(|v| fmt_opt(*v, prec))).collect()
            })
            .collect();
        let mut out = text_table(&header, &rows);
        let truth: Vec<String> = self.sensors.iter().map(|s| s.bragg.to_string()).collect();
        let _ = writeln!(out, "true Bragg wavelengths (nm): {}; snr {}", truth.join(", "), self.snr);
        out
    }
}

/// Zero-force spectra per sensor, peak-picked by KDE and by the parabolic
/// baseline. Frame `j` of sensor `i` draws its noise from a generator seeded
/// by `(spec.seed, i)`, so results do not depend on thread count.
pub fn peak_comparison(
    n_frames: usize,
    spec: &SpectrumConfig,
    kde: &KdeParams,
    braggs: &[f64; SENSORS],
) -> Result<PeakComparison, BenchError> {
    if n_frames < MIN_PEAK_FRAMES {
        return Err(BenchError::TooFewFrames { got: n_frames, min: MIN_PEAK_FRAMES });
    }
    spec.validate()?;
    kde.validate()?;
    let sensors = braggs
        .par_iter()
        .enumerate()
        .map(|(i, &bragg)| -> Result<SensorPeaks, BenchError> {
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(spec.seed, i));
            let frames = (0..n_frames).map(|_| gen_spectrum(bragg, spec, &mut rng)).collect::<Result<Vec<_>, _>>()?;
            let picked: Vec<(Option<f64>, Option<f64>)> =
                frames.par_iter().map(|f| (peak_wavelength(f, kde).ok(), baseline_peak(f).ok())).collect();
            let a: Vec<f64> = picked.iter().filter_map(|p| p.0).collect();
            let b: Vec<f64> = picked.iter().filter_map(|p| p.1).collect();
            Ok(SensorPeaks {
                bragg,
                frames: n_frames,
                stats: compare_stats(&a, &b).ok(),
                kde_misses: n_frames - a.len(),
                baseline_misses: n_frames - b.len(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PeakComparison { snr: spec.snr, kde: *kde, sensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_data() -> SplitData {
        let sim = SimConfig { episodes: 5, duration: 12.0, ..Default::default() };
        let (eps, _) = gen_dataset(&sim).unwrap();
        SplitData::from_episodes(&eps, &TrainConfig::default()).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig { max_epochs: 2, batch: 64, tbptt: 20, ..Default::default() }
    }

    #[test]
    fn split_data_partitions_episodes() {
        let d = tiny_data();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (3, 1, 1));
        assert!(d.train.iter().all(|s| s.len() == 120));
    }

    #[test]
    fn empty_grid_gives_empty_result() {
        let grid = SweepGrid { kinds: vec![], ..Default::default() };
        let r = run_sweep(&grid, &tiny_data(), &quick());
        assert!(r.rows.is_empty() && r.best_layers.is_empty());
        assert_eq!(r.to_csv().lines().count(), 1);
    }

    #[test]
    fn single_cell_grid_gives_one_row() {
        let grid = SweepGrid {
            kinds: vec![ModelKind::Fcn],
            layers: vec![1],
            hidden: vec![8],
            phase1_hidden: 8,
            ..Default::default()
        };
        let r = run_sweep(&grid, &tiny_data(), &quick());
        assert_eq!(r.rows.len(), 1);
        assert!(r.rows[0].test_mae.is_some());
        assert_eq!(r.best_layers[&ModelKind::Fcn], 1);
    }

    #[test]
    fn two_phase_structure_and_failures() {
        let grid = SweepGrid {
            kinds: vec![ModelKind::Fcn, ModelKind::Transformer],
            layers: vec![1, 2],
            hidden: vec![4, 8, 10],
            phase1_hidden: 8,
            heads: Some(4),
            seeds: vec![0],
        };
        let data = tiny_data();
        let r = run_sweep(&grid, &data, &quick());
        // 2 kinds x (2 depths + 3 widths).
        assert_eq!(r.rows.len(), 10);
        for k in grid.kinds.iter() {
            let l = r.best_layers[k];
            let p2: Vec<_> = r.rows.iter().filter(|x| x.phase == 2 && x.kind == *k).collect();
            assert_eq!(p2.len(), 3);
            assert!(p2.iter().all(|x| x.layers == l));
        }
        // Width 10 is not divisible by 4 heads.
        let bad = r.rows.iter().find(|x| x.kind == ModelKind::Transformer && x.hidden == 10).unwrap();
        assert!(bad.error.as_deref().unwrap().contains("divisible"));
        assert!(bad.test_mae.is_none());
        assert_eq!(r.rows.iter().filter(|x| x.error.is_some()).count(), 1);
        let again = run_sweep(&grid, &data, &quick());
        assert_eq!(again.to_csv(), r.to_csv());
        assert!(r.to_table().contains("failed"));
    }

    #[test]
    fn latency_reports() {
        assert!(matches!(
            measure_latency(&build_model(ModelSpec::new(ModelKind::Fcn, 2, 64), 0).unwrap(), 0, 5),
            Err(BenchError::EmptyRun)
        ));
        for spec in [ModelSpec::new(ModelKind::Fcn, 2, 64), ModelSpec::new(ModelKind::Rnn, 4, 64)] {
            let m = build_model(spec, 0).unwrap();
            let r = measure_latency(&m, 20, 10).unwrap();
            assert_eq!(r.samples, 20 * 9);
            assert!(r.mean_ms > 0.0 && r.mean_ms < 100.0 && r.p99_ms >= 0.0);
        }
    }

    #[test]
    fn ablation_identical_datasets_have_equal_columns() {
        let cfg = AblationConfig {
            sim: SimConfig { episodes: 5, duration: 12.0, ..Default::default() },
            sor_prob: 0.0,
            specs: vec![ModelSpec::new(ModelKind::Fcn, 1, 8), ModelSpec::new(ModelKind::Rnn, 1, 8)],
            seeds: vec![0, 1, 2],
            train: quick(),
        };
        let r = sor_ablation(&cfg).unwrap();
        assert!(r.errors.is_empty());
        for row in &r.rows {
            assert_eq!(row.mae_free, row.mae_heavy);
        }
        let (f, h) = (r.gap_free().unwrap(), r.gap_heavy().unwrap());
        assert_eq!(f, h);
        assert_eq!(r.to_csv().lines().count(), 1 + 2 * 3);
        assert!(r.to_table().contains("GRU / FCN"));
    }

    #[test]
    fn ablation_requires_valid_specs() {
        let cfg = AblationConfig { specs: vec![ModelSpec::new(ModelKind::Fcn, 0, 8)], ..Default::default() };
        assert!(matches!(sor_ablation(&cfg), Err(BenchError::Model(_))));
    }

    #[test]
    fn peak_comparison_layout_and_noiseless() {
        let spec = SpectrumConfig { snr: f64::INFINITY, ..Default::default() };
        assert!(matches!(
            peak_comparison(10, &spec, &KdeParams::spectral(), &[1540.0; 3]),
            Err(BenchError::TooFewFrames { got: 10, .. })
        ));
        let r = peak_comparison(100, &spec, &KdeParams::spectral(), &[1540.0, 1540.0, 1540.0]).unwrap();
        assert_eq!(r.sensors.len(), 3);
        for s in &r.sensors {
            let st = s.stats.unwrap();
            assert_eq!((st.std_a, st.std_b), (0.0, 0.0));
            assert!((st.mean_a - 1540.0).abs() <= spec.grid_step);
            assert!((st.mean_b - 1540.0).abs() <= spec.grid_step);
        }
        let csv = r.to_csv();
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 7);
        assert_eq!(csv.lines().count(), 4);
    }
}
