//! CSV and binary persistence.
//!
//! An episode directory holds `interrogator.csv` (`time,s0,s1,s2`),
//! `scale.csv` (`time,force`) and an `episode.json` sidecar with the seed,
//! duration, configuration hash and injected reference shifts. Numbers are
//! written in the shortest form that parses back to the same f64, so a write
//! followed by a read is bit-exact. Every file is written to a temporary name
//! in the target directory and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::models::{ModelError, ModelParams, Sequence, INPUT_DIM};
use crate::simulate::hex;
use crate::types::{validate_series, Episode, EpisodeMeta, SorEvent, SpectrumFrame, TimeSeries, SENSORS, WINDOW_LEN};

pub const INTERROGATOR_FILE: &str = "interrogator.csv";
pub const SCALE_FILE: &str = "scale.csv";
pub const SIDECAR_FILE: &str = "episode.json";
pub const INTERROGATOR_HEADER: [&str; 4] = ["time", "s0", "s1", "s2"];
pub const SCALE_HEADER: [&str; 2] = ["time", "force"];
pub const PREDICTION_HEADER: [&str; 3] = ["time", "real", "pred"];
pub const SPECTRUM_HEADER: [&str; 3] = ["frame", "wavelength", "intensity"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
    #[error("episode has no samples")]
    EmptyEpisode,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("{path}: {source}")]
    Model { path: PathBuf, source: ModelError },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Write `bytes` to a sibling temporary file, flush it and rename it over
/// `path`, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res.map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::Io { path: path.to_path_buf(), source: e }
        }
    })
}

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> Result<String, DataError> {
    Ok(hex(&Sha256::digest(read_file(path)?)))
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn num(v: f64) -> String {
    // Shortest decimal that round-trips; exponent form for tiny and huge values.
    format!("{v:?}")
}

fn read_numeric_csv(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>, DataError> {
    parse_numeric_csv(&read_file(path)?, path, header)
}

/// Parses a CSV with an exact header and numeric cells; `path` only labels
/// errors.
fn parse_numeric_csv(bytes: &[u8], path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>, DataError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(bytes);
    let parse_err = |line: u64, msg: String| DataError::Parse { path: path.to_path_buf(), line, msg };
    let got = r.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if got.iter().ne(header.iter().copied()) {
        return Err(parse_err(
            1,
            format!("expected header `{}`, found `{}`", header.join(","), got.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let row = rec
            .iter()
            .zip(header)
            .map(|(cell, col)| {
                cell.parse::<f64>().map_err(|_| parse_err(line, format!("column `{col}`: invalid number `{cell}`")))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn series_bytes(header: &[&str], s: &TimeSeries) -> Vec<u8> {
    csv_bytes(
        header,
        s.timestamps()
            .iter()
            .zip(s.rows())
            .map(|(t, r)| std::iter::once(*t).chain(r.iter().copied()).map(num).collect()),
    )
}

/// Reads a `time,<channels...>` CSV and validates it as a time series.
pub fn read_series_csv(path: &Path, header: &[&str]) -> Result<TimeSeries, DataError> {
    parse_series_csv(&read_file(path)?, path, header)
}

/// [`read_series_csv`] on in-memory bytes; `path` only labels errors.
pub fn parse_series_csv(bytes: &[u8], path: &Path, header: &[&str]) -> Result<TimeSeries, DataError> {
    let rows = parse_numeric_csv(bytes, path, header)?;
    let channels = header.len() - 1;
    let times = rows.iter().map(|r| r[0]).collect();
    let values = rows.iter().flat_map(|r| r[1..].iter().copied()).collect();
    let s = TimeSeries::new(times, channels, values)
        .map_err(|e| DataError::Invalid { path: path.to_path_buf(), msg: e.to_string() })?;
    if let Some(v) = validate_series(&s).first() {
        return Err(DataError::Invalid { path: path.to_path_buf(), msg: v.to_string() });
    }
    Ok(s)
}

pub fn write_series_csv(path: &Path, header: &[&str], s: &TimeSeries) -> Result<(), DataError> {
    if header.len() != s.channels() + 1 {
        return Err(DataError::LengthMismatch(format!(
            "{} header columns for {} channels",
            header.len(),
            s.channels()
        )));
    }
    write_atomic(path, &series_bytes(header, s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    #[serde(flatten)]
    meta: EpisodeMeta,
    sor_events: Vec<SorEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeFileSet {
    pub interrogator: PathBuf,
    pub scale: PathBuf,
    pub sidecar: PathBuf,
}

impl EpisodeFileSet {
    pub fn in_dir(dir: &Path) -> Self {
        Self { interrogator: dir.join(INTERROGATOR_FILE), scale: dir.join(SCALE_FILE), sidecar: dir.join(SIDECAR_FILE) }
    }
}

/// Writes the three files of an episode into `dir`, creating it if needed.
pub fn write_episode(ep: &Episode, dir: &Path) -> Result<EpisodeFileSet, DataError> {
    if ep.interrogator.is_empty() || ep.scale.is_empty() {
        return Err(DataError::EmptyEpisode);
    }
    ep.check().map_err(|e| DataError::Invalid { path: dir.to_path_buf(), msg: e.to_string() })?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files = EpisodeFileSet::in_dir(dir);
    write_series_csv(&files.interrogator, &INTERROGATOR_HEADER, &ep.interrogator)?;
    write_series_csv(&files.scale, &SCALE_HEADER, &ep.scale)?;
    let side = Sidecar { meta: ep.meta.clone(), sor_events: ep.sor_events.clone() };
    let mut json = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    json.push('\n');
    write_atomic(&files.sidecar, json.as_bytes())?;
    Ok(files)
}

/// Reads an episode directory. Without a sidecar the SoR log is empty, the
/// seed 0 and the duration the last interrogator timestamp.
pub fn read_episode(dir: &Path) -> Result<Episode, DataError> {
    let files = EpisodeFileSet::in_dir(dir);
    let interrogator = read_series_csv(&files.interrogator, &INTERROGATOR_HEADER)?;
    let scale = read_series_csv(&files.scale, &SCALE_HEADER)?;
    let side = if files.sidecar.exists() {
        let bytes = read_file(&files.sidecar)?;
        serde_json::from_slice::<Sidecar>(&bytes).map_err(|e| DataError::Parse {
            path: files.sidecar.clone(),
            line: e.line() as u64,
            msg: e.to_string(),
        })?
    } else {
        Sidecar {
            meta: EpisodeMeta { seed: 0, duration: interrogator.last_time().unwrap_or(0.0), config_hash: None },
            sor_events: Vec::new(),
        }
    };
    if let Some(e) = side.sor_events.iter().find(|e| e.sensor >= SENSORS) {
        return Err(DataError::Invalid { path: files.sidecar, msg: format!("SoR event on sensor {}", e.sensor) });
    }
    Ok(Episode { interrogator, scale, sor_events: side.sor_events, meta: side.meta })
}

/// Reads every subdirectory of `dir` holding an interrogator file, in name
/// order, as `(directory name, episode)`.
pub fn read_dataset(dir: &Path) -> Result<Vec<(String, Episode)>, DataError> {
    if !dir.is_dir() {
        return Err(DataError::MissingFile(dir.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(INTERROGATOR_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.iter()
        .map(|d| {
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, read_episode(d)?))
        })
        .collect()
}

/// Writes `time,real,pred` rows.
pub fn write_predictions(times: &[f64], real: &[f64], pred: &[f64], path: &Path) -> Result<(), DataError> {
    if times.len() != real.len() || times.len() != pred.len() {
        return Err(DataError::LengthMismatch(format!(
            "{} times, {} real, {} predicted",
            times.len(),
            real.len(),
            pred.len()
        )));
    }
    let rows = (0..times.len()).map(|i| vec![num(times[i]), num(real[i]), num(pred[i])]);
    write_atomic(path, &csv_bytes(&PREDICTION_HEADER, rows))
}

/// Columns of a `time,real,pred` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub time: Vec<f64>,
    pub real: Vec<f64>,
    pub pred: Vec<f64>,
}

pub fn read_predictions(path: &Path) -> Result<Predictions, DataError> {
    let rows = read_numeric_csv(path, &PREDICTION_HEADER)?;
    let col = |c: usize| rows.iter().map(|r| r[c]).collect();
    Ok(Predictions { time: col(0), real: col(1), pred: col(2) })
}

/// Writes frames as long-format `frame,wavelength,intensity` rows.
pub fn write_spectra(frames: &[SpectrumFrame], path: &Path) -> Result<(), DataError> {
    if let Some(i) = frames.iter().position(|f| f.grid.len() != f.intensity.len()) {
        return Err(DataError::LengthMismatch(format!("frame {i}: grid and intensity lengths differ")));
    }
    let rows = frames
        .iter()
        .enumerate()
        .flat_map(|(i, f)| f.grid.iter().zip(&f.intensity).map(move |(w, v)| vec![i.to_string(), num(*w), num(*v)]));
    write_atomic(path, &csv_bytes(&SPECTRUM_HEADER, rows))
}

/// Reads frames; rows of one frame must be contiguous with increasing
/// wavelength.
pub fn read_spectra(path: &Path) -> Result<Vec<SpectrumFrame>, DataError> {
    let rows = read_numeric_csv(path, &SPECTRUM_HEADER)?;
    let mut frames: Vec<SpectrumFrame> = Vec::new();
    let mut last_id = None;
    for (k, r) in rows.iter().enumerate() {
        let line = k as u64 + 2;
        let bad = |msg: String| DataError::Parse { path: path.to_path_buf(), line, msg };
        if r[0] < 0.0 || r[0].fract() != 0.0 {
            return Err(bad(format!("frame index `{}` is not a non-negative integer", r[0])));
        }
        let id = r[0] as u64;
        if last_id != Some(id) {
            if last_id.is_some_and(|l| id < l) {
                return Err(bad(format!("frame {id} after frame {}", last_id.unwrap_or(0))));
            }
            frames.push(SpectrumFrame { grid: Vec::new(), intensity: Vec::new() });
            last_id = Some(id);
        }
        let f = frames.last_mut().expect("pushed above");
        if f.grid.last().is_some_and(|&w| !(r[1] > w)) {
            return Err(bad("wavelengths not strictly increasing".into()));
        }
        f.grid.push(r[1]);
        f.intensity.push(r[2]);
    }
    Ok(frames)
}

/// Header of a windowed-dataset CSV: `t,time,force` then `s<c>_<r>` for
/// row `r` and sensor `c` of the window, row-major.
pub fn windows_header() -> Vec<String> {
    let mut h: Vec<String> = ["t", "time", "force"].map(String::from).to_vec();
    h.extend((0..WINDOW_LEN).flat_map(|r| (0..SENSORS).map(move |c| format!("s{c}_{r}"))));
    h
}

pub fn write_windows(seq: &Sequence, path: &Path) -> Result<(), DataError> {
    if seq.x.len() != seq.len() * INPUT_DIM || seq.times.len() != seq.len() {
        return Err(DataError::LengthMismatch(format!("sequence {} is inconsistent", seq.id)));
    }
    let header = windows_header();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..seq.len()).map(|t| {
        [t.to_string(), num(seq.times[t]), num(seq.y[t])]
            .into_iter()
            .chain(seq.window(t).iter().map(|v| num(*v)))
            .collect()
    });
    write_atomic(path, &csv_bytes(&header, rows))
}

pub fn read_windows(path: &Path, id: &str) -> Result<Sequence, DataError> {
    let header = windows_header();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = read_numeric_csv(path, &header)?;
    let mut seq = Sequence { id: id.to_string(), x: Vec::new(), y: Vec::new(), times: Vec::new() };
    for (t, r) in rows.iter().enumerate() {
        if r[0] != t as f64 {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: t as u64 + 2,
                msg: format!("window index {} out of sequence", r[0]),
            });
        }
        seq.times.push(r[1]);
        seq.y.push(r[2]);
        seq.x.extend_from_slice(&r[3..]);
    }
    Ok(seq)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), DataError> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| DataError::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        msg: e.to_string(),
    })
}

pub fn write_checkpoint(path: &Path, model: &ModelParams, extra: &serde_json::Value) -> Result<(), DataError> {
    write_atomic(path, &model.to_bytes(extra))
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelParams, serde_json::Value), DataError> {
    let bytes = read_file(path)?;
    ModelParams::from_bytes(&bytes).map_err(|source| DataError::Model { path: path.to_path_buf(), source })
}
