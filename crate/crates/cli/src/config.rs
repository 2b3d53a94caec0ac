//! TOML run configuration and command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use entrokv::harness::{Layout, WorkloadSpec};
use entrokv::{CompressionConfig, Error, ModelConfig, ScoreScale, Strategy};
use serde::Deserialize;

/// Question tokens appended after the image block when `--prompt-len` is set.
const QUESTION_TOKENS: usize = 8;

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub seed: u64,
    pub score_scale: ScoreScale,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            layers: 8,
            heads: 4,
            dim: 64,
            seed: 0,
            score_scale: ScoreScale::HeadDim,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub decode_steps: usize,
    pub timing: bool,
    /// Ratios swept by `compare`.
    pub rhos: Vec<f64>,
    /// Number of consecutive workload seeds used by `compare`.
    pub workloads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            decode_steps: entrokv::harness::pipeline::DEFAULT_DECODE_STEPS,
            timing: false,
            rhos: (1..=8).map(|i| f64::from(i) / 10.0).collect(),
            workloads: 1,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub workload: WorkloadSpec,
    pub compression: CompressionConfig,
    pub run: RunSection,
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
    }

    pub fn model_config(&self) -> entrokv::Result<ModelConfig> {
        let mut cfg = ModelConfig::new(self.model.layers, self.model.heads, self.model.dim, self.model.seed)?;
        cfg.score_scale = self.model.score_scale;
        Ok(cfg)
    }
}

/// Flags shared by every verb; each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML configuration file
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Fraction of the prompt cache to keep, in (0, 1]
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long, value_parser = ["meda", "uniform", "pyramid"])]
    pub strategy: Option<String>,
    /// Evict dropped tokens instead of merging them
    #[arg(long)]
    pub no_merge: bool,
    /// Score text tokens without the max-score lift
    #[arg(long)]
    pub no_text_boost: bool,
    /// Share of each layer budget reserved for recent tokens
    #[arg(long)]
    pub recent_ratio: Option<f64>,
    /// Seed for both the model weights and the workload
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Prompt length; the layout becomes an image block followed by a short question
    #[arg(long)]
    pub prompt_len: Option<usize>,
    /// Input trace (binary, or JSON lines for `.jsonl`)
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
    /// Output file (or directory for `run`); stdout when omitted
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn resolve(&self) -> anyhow::Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        let c = &mut cfg.compression;
        if let Some(r) = self.rho {
            c.rho = r;
        }
        if let Some(s) = &self.strategy {
            c.strategy = s.parse::<Strategy>()?;
        }
        if self.no_merge {
            c.merge_enabled = false;
        }
        if self.no_text_boost {
            c.text_boost_enabled = false;
        }
        if let Some(r) = self.recent_ratio {
            c.recent_ratio = r;
        }
        c.validate()?;

        let m = &mut cfg.model;
        if let Some(s) = self.seed {
            m.seed = s;
            cfg.workload.seed = s;
        }
        if let Some(l) = self.layers {
            m.layers = l;
        }
        if let Some(h) = self.heads {
            m.heads = h;
        }
        if let Some(d) = self.dim {
            m.dim = d;
        }
        if let Some(n) = self.prompt_len {
            let question = QUESTION_TOKENS.min(n / 2);
            cfg.workload.layout = Layout::question_after_image(n, 0, question)?;
        }
        Ok(cfg)
    }
}
