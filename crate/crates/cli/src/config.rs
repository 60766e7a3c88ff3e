//! Layered run configuration: built-in defaults, then an optional TOML file,
//! then command-line flags. The resolved value is echoed into every manifest.

use std::path::Path;

use anyhow::Context;
use fbg_core::bench::SweepGrid;
use fbg_core::models::{ModelKind, ModelSpec, TrainConfig};
use fbg_core::peakdetect::KdeParams;
use fbg_core::simulate::{SimConfig, SpectrumConfig};
use serde::{Deserialize, Serialize};

use crate::usage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub layers: usize,
    pub hidden: usize,
    pub heads: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { kind: ModelKind::Fcn, layers: 2, hidden: 64, heads: None }
    }
}

impl ModelSection {
    pub fn spec(&self) -> ModelSpec {
        let s = ModelSpec::new(self.kind, self.layers, self.hidden);
        match self.heads {
            Some(h) => s.with_heads(h),
            None => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub sor_prob: f64,
    /// Spec labels such as `fcn-2-64`.
    pub specs: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { sor_prob: 0.7, specs: vec!["fcn-2-64".into(), "rnn-4-64".into()], seeds: vec![0, 1, 2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Master seed; copied into every seeded section on resolution.
    pub seed: u64,
    pub sim: SimConfig,
    pub spectrum: SpectrumConfig,
    pub kde: KdeParams,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sweep: SweepGrid,
    pub ablation: AblationSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            sim: SimConfig::default(),
            spectrum: SpectrumConfig::default(),
            kde: KdeParams::spectral(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            sweep: SweepGrid::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))?
            }
            None => Config::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.sim.seed = cfg.seed;
        cfg.spectrum.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.train.split_seed = cfg.seed;
        Ok(cfg)
    }
}
