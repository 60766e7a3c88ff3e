use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fbg_core::bench::{
    latency_table, measure_latency, peak_comparison, run_sweep, sor_ablation, AblationConfig, BenchError, SplitData,
};
use fbg_core::dataio::{
    file_sha256, read_checkpoint, read_dataset, read_spectra, write_atomic, write_checkpoint, write_episode,
    write_json, write_predictions, write_windows,
};
use fbg_core::models::{
    build_model, evaluate_mae, predict_windows, prepare_episode, train_with, ModelError, ModelSpec, Sequence,
    TrainConfig,
};
use fbg_core::peakdetect::{baseline_peak, peak_wavelength};
use fbg_core::simulate::{episode_id, gen_dataset, SimError};
use fbg_core::Episode;
use serde::Serialize;
use serde_json::json;

use crate::config::Config;
use crate::{usage, BenchCommand, Cli, Command, ModelArgs, TrainFlags};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to rerun a command, plus hashes of what it wrote.
#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a Config,
    outputs: BTreeMap<String, String>,
    result: T,
}

fn write_manifest<T: Serialize>(out: &Path, command: &str, cfg: &Config, files: &[PathBuf], result: T) -> Result<()> {
    let mut outputs = BTreeMap::new();
    for f in files {
        let rel = f.strip_prefix(out).unwrap_or(f).to_string_lossy().replace('\\', "/");
        outputs.insert(rel, file_sha256(f)?);
    }
    let m = Manifest { tool: "fbgcf", version: env!("CARGO_PKG_VERSION"), command, config: cfg, outputs, result };
    write_json(&out.join(MANIFEST_FILE), &m)?;
    Ok(())
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn spec_error(e: ModelError) -> anyhow::Error {
    match e {
        ModelError::InvalidSpec(_) | ModelError::InvalidConfig(_) => usage(e.to_string()),
        e => e.into(),
    }
}

fn sim_error(e: SimError) -> anyhow::Error {
    usage(e.to_string())
}

fn apply_model(cfg: &mut Config, a: &ModelArgs) {
    if let Some(k) = a.model {
        cfg.model.kind = k;
    }
    if let Some(l) = a.layers {
        cfg.model.layers = l;
    }
    if let Some(h) = a.hidden {
        cfg.model.hidden = h;
    }
    if a.heads.is_some() {
        cfg.model.heads = a.heads;
    }
}

fn apply_train(t: &mut TrainConfig, f: &TrainFlags) {
    if f.lr.is_some() {
        t.lr = f.lr;
    }
    if let Some(e) = f.epochs {
        t.max_epochs = e;
    }
    if let Some(b) = f.batch {
        t.batch = b;
    }
    if let Some(p) = f.patience {
        t.patience = p;
    }
}

fn parse_specs(labels: &[String]) -> Result<Vec<ModelSpec>> {
    labels
        .iter()
        .map(|l| {
            let s: ModelSpec = l.parse().map_err(spec_error)?;
            s.validate().map_err(spec_error)?;
            Ok(s)
        })
        .collect()
}

fn load_episodes(dir: &Path) -> Result<Vec<(String, Episode)>> {
    let eps = read_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if eps.is_empty() {
        bail!("no episode directories in {}", dir.display());
    }
    Ok(eps)
}

fn prepare_all(eps: &[(String, Episode)]) -> Result<Vec<Sequence>> {
    eps.iter().map(|(id, e)| prepare_episode(id, e).with_context(|| format!("preparing {id}"))).collect()
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = Config::load(cli.config.as_deref(), cli.seed)?;
    let out = cli.out;
    match cli.command {
        Command::Generate(a) => {
            if let Some(n) = a.episodes {
                cfg.sim.episodes = n;
            }
            if let Some(d) = a.duration {
                cfg.sim.duration = d;
            }
            if let Some(p) = a.sor_prob {
                cfg.sim.sor_prob = p;
            }
            if cfg.sim.episodes == 0 {
                return Err(usage("episodes must be at least 1"));
            }
            cfg.sim.validate().map_err(sim_error)?;
            generate(&cfg, &out)
        }
        Command::Peaks(a) => {
            if let Some(s) = a.snr {
                cfg.spectrum.snr = s;
            }
            cfg.kde.validate().map_err(|e| usage(e.to_string()))?;
            match a.input {
                Some(p) => pick_file(&cfg, &p),
                None => {
                    let braggs = match a.bragg {
                        Some(b) => [b[0], b[1], b[2]],
                        None => cfg.sim.physics.lambda_b,
                    };
                    peaks(&cfg, a.frames, &braggs, &out)
                }
            }
        }
        Command::Preprocess(a) => preprocess(&cfg, &a.data, &out),
        Command::Train(a) => {
            apply_model(&mut cfg, &a.model);
            apply_train(&mut cfg.train, &a.train);
            cfg.model.spec().validate().map_err(spec_error)?;
            cfg.train.validate().map_err(spec_error)?;
            train(&cfg, &a.data, &out)
        }
        Command::Eval(a) => eval(&cfg, &a.model, &a.data, &out),
        Command::Bench(BenchCommand::Sweep(a)) => {
            let g = &mut cfg.sweep;
            if let Some(v) = a.kinds {
                g.kinds = v;
            }
            if let Some(v) = a.layers {
                g.layers = v;
            }
            if let Some(v) = a.hidden {
                g.hidden = v;
            }
            if let Some(v) = a.phase1_hidden {
                g.phase1_hidden = v;
            }
            if a.heads.is_some() {
                g.heads = a.heads;
            }
            if let Some(v) = a.seeds {
                g.seeds = v;
            }
            apply_train(&mut cfg.train, &a.train);
            cfg.train.validate().map_err(spec_error)?;
            sweep(&cfg, &a.data, &out)
        }
        Command::Bench(BenchCommand::Latency(a)) => {
            if a.windows == 0 || a.reps == 0 {
                return Err(usage(BenchError::EmptyRun.to_string()));
            }
            let models = match (a.model, a.spec) {
                (Some(p), _) => vec![read_checkpoint(&p)?.0],
                (None, specs) => {
                    let labels = specs.unwrap_or_else(|| vec![cfg.model.spec().label()]);
                    parse_specs(&labels)?
                        .into_iter()
                        .map(|s| build_model(s, cfg.seed))
                        .collect::<Result<Vec<_>, _>>()?
                }
            };
            latency(&models, a.windows, a.reps, &out)
        }
        Command::Bench(BenchCommand::Ablation(a)) => {
            if let Some(n) = a.episodes {
                cfg.sim.episodes = n;
            }
            if let Some(d) = a.duration {
                cfg.sim.duration = d;
            }
            if let Some(p) = a.sor_prob {
                cfg.ablation.sor_prob = p;
            }
            if let Some(s) = a.specs {
                cfg.ablation.specs = s;
            }
            if let Some(s) = a.seeds {
                cfg.ablation.seeds = s;
            }
            apply_train(&mut cfg.train, &a.train);
            cfg.train.validate().map_err(spec_error)?;
            cfg.sim.validate().map_err(sim_error)?;
            ablation(&cfg, &out)
        }
        Command::Infer(a) => crate::infer::run(&a.model, &a.input, a.stream),
    }
}

fn generate(cfg: &Config, out: &Path) -> Result<()> {
    create_out(out)?;
    let (eps, manifest) = gen_dataset(&cfg.sim).map_err(sim_error)?;
    let mut files = Vec::new();
    for (i, ep) in eps.iter().enumerate() {
        let set = write_episode(ep, &out.join(episode_id(i)))?;
        files.extend([set.interrogator, set.scale, set.sidecar]);
    }
    write_manifest(out, "generate", cfg, &files, &manifest)?;
    println!("wrote {} episodes to {}", eps.len(), out.display());
    Ok(())
}

fn pick_file(cfg: &Config, path: &Path) -> Result<()> {
    let frames = read_spectra(path)?;
    println!("frame,kde,baseline");
    let cell = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for (i, f) in frames.iter().enumerate() {
        println!("{i},{},{}", cell(peak_wavelength(f, &cfg.kde).ok()), cell(baseline_peak(f).ok()));
    }
    Ok(())
}

fn peaks(cfg: &Config, frames: usize, braggs: &[f64; 3], out: &Path) -> Result<()> {
    let res = peak_comparison(frames, &cfg.spectrum, &cfg.kde, braggs).map_err(|e| match e {
        BenchError::TooFewFrames { .. } | BenchError::Sim(_) | BenchError::Peak(_) => usage(e.to_string()),
        e => e.into(),
    })?;
    create_out(out)?;
    let (csv, txt) = (out.join("peaks.csv"), out.join("peaks.txt"));
    write_atomic(&csv, res.to_csv().as_bytes())?;
    write_atomic(&txt, res.to_table().as_bytes())?;
    write_manifest(out, "peaks", cfg, &[csv, txt], &res)?;
    print!("{}", res.to_table());
    Ok(())
}

fn preprocess(cfg: &Config, data: &Path, out: &Path) -> Result<()> {
    let eps = load_episodes(data)?;
    let seqs = prepare_all(&eps)?;
    create_out(out)?;
    let mut files = Vec::new();
    for s in &seqs {
        let dir = out.join(&s.id);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let p = dir.join("windows.csv");
        write_windows(s, &p)?;
        files.push(p);
    }
    let counts: BTreeMap<&str, usize> = seqs.iter().map(|s| (s.id.as_str(), s.len())).collect();
    write_manifest(out, "preprocess", cfg, &files, json!({ "data": data, "windows": counts }))?;
    println!("wrote {} windows from {} episodes", seqs.iter().map(Sequence::len).sum::<usize>(), seqs.len());
    Ok(())
}

fn ids(seqs: &[Sequence]) -> Vec<&str> {
    seqs.iter().map(|s| s.id.as_str()).collect()
}

fn train(cfg: &Config, data: &Path, out: &Path) -> Result<()> {
    let eps = load_episodes(data)?;
    let split = SplitData::from_sequences(prepare_all(&eps)?, &cfg.train);
    let spec = cfg.model.spec();
    let model = build_model(spec, cfg.seed).map_err(spec_error)?;
    eprintln!("training {} ({} parameters) on {} episodes", spec.label(), spec.param_count(), split.train.len());
    let (model, hist) = train_with(model, &split.train, &split.val, &cfg.train, |r| {
        eprintln!("epoch {:>4}  loss {:.5}  val MAE {:.4} g", r.epoch, r.train_loss, r.val_mae);
    })
    .map_err(spec_error)?;
    let test_mae = if split.test.is_empty() { None } else { Some(evaluate_mae(&model, &split.test)?) };
    let result = json!({
        "model": spec.label(),
        "best_epoch": hist.best_epoch,
        "val_mae": hist.best_val_mae,
        "test_mae": test_mae,
        "lr": hist.lr,
        "split": { "train": ids(&split.train), "val": ids(&split.val), "test": ids(&split.test) },
    });
    create_out(out)?;
    let (ckpt, history) = (out.join("model.ckpt"), out.join("history.json"));
    write_checkpoint(&ckpt, &model, &json!({ "config": cfg, "result": result }))?;
    write_json(&history, &hist)?;
    write_manifest(out, "train", cfg, &[ckpt, history], &result)?;
    println!("val MAE {:.4} g", hist.best_val_mae);
    if let Some(t) = test_mae {
        println!("test MAE {t:.4} g");
    }
    Ok(())
}

fn eval(cfg: &Config, ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let (model, _) = read_checkpoint(ckpt)?;
    let eps = load_episodes(data)?;
    let seqs = prepare_all(&eps)?;
    let pred_dir = out.join("predictions");
    fs::create_dir_all(&pred_dir).with_context(|| format!("creating {}", pred_dir.display()))?;
    let mut files = Vec::new();
    let mut per_episode = BTreeMap::new();
    let (mut sum, mut n) = (0.0, 0usize);
    for s in seqs.iter().filter(|s| !s.is_empty()) {
        let pred = predict_windows(&model, &s.x)?;
        let err: f64 = pred.iter().zip(&s.y).map(|(p, y)| (p - y).abs()).sum();
        per_episode.insert(s.id.clone(), err / s.len() as f64);
        sum += err;
        n += s.len();
        let p = pred_dir.join(format!("{}.csv", s.id));
        write_predictions(&s.times, &s.y, &pred, &p)?;
        files.push(p);
    }
    if n == 0 {
        bail!("no complete windows in {}", data.display());
    }
    let mae = sum / n as f64;
    for (id, m) in &per_episode {
        println!("{id}  MAE {m:.4} g");
    }
    println!("overall MAE {mae:.4} g over {n} windows");
    write_manifest(
        out,
        "eval",
        cfg,
        &files,
        json!({ "checkpoint": ckpt, "model": model.spec.label(), "mae": mae, "episodes": per_episode }),
    )
}

fn sweep(cfg: &Config, data: &Path, out: &Path) -> Result<()> {
    let eps = load_episodes(data)?;
    let split = SplitData::from_sequences(prepare_all(&eps)?, &cfg.train);
    let res = run_sweep(&cfg.sweep, &split, &cfg.train);
    create_out(out)?;
    let (csv, txt) = (out.join("sweep.csv"), out.join("sweep.txt"));
    write_atomic(&csv, res.to_csv().as_bytes())?;
    write_atomic(&txt, res.to_table().as_bytes())?;
    let failed = res.rows.iter().filter(|r| r.error.is_some()).count();
    write_manifest(
        out,
        "bench sweep",
        cfg,
        &[csv],
        json!({ "best_layers": res.best_layers, "rows": res.rows.len(), "failed": failed }),
    )?;
    print!("{}", res.to_table());
    for r in res.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("warning: {} {}-{} failed: {}", r.kind, r.layers, r.hidden, r.error.as_deref().unwrap_or(""));
    }
    Ok(())
}

fn latency(models: &[fbg_core::models::ModelParams], windows: usize, reps: usize, out: &Path) -> Result<()> {
    let reports = models.iter().map(|m| measure_latency(m, windows, reps)).collect::<Result<Vec<_>, _>>()?;
    create_out(out)?;
    write_json(&out.join("latency.json"), &reports)?;
    print!("{}", latency_table(&reports));
    Ok(())
}

fn ablation(cfg: &Config, out: &Path) -> Result<()> {
    let ab = AblationConfig {
        sim: cfg.sim.clone(),
        sor_prob: cfg.ablation.sor_prob,
        specs: parse_specs(&cfg.ablation.specs)?,
        seeds: cfg.ablation.seeds.clone(),
        train: cfg.train,
    };
    let res = sor_ablation(&ab)?;
    create_out(out)?;
    let (csv, txt) = (out.join("ablation.csv"), out.join("ablation.txt"));
    write_atomic(&csv, res.to_csv().as_bytes())?;
    write_atomic(&txt, res.to_table().as_bytes())?;
    write_manifest(out, "bench ablation", cfg, &[csv, txt], &res)?;
    print!("{}", res.to_table());
    for e in &res.errors {
        eprintln!("warning: {e}");
    }
    Ok(())
}
