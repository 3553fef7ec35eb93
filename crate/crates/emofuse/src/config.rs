//! TOML run configurations and command-line overrides on top of them.

use std::path::{Path, PathBuf};

use clap::Args;
use emofuse_core::labels::LabelScheme;
use emofuse_core::model::FusionKind;
use emofuse_core::train::RunConfig;

use crate::error::{Error, Result};

pub fn parse_config(text: &str, origin: &Path) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

pub fn write_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    let text = toml::to_string(cfg).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Flags shared by every command that builds a run. Each one overrides the
/// matching field of `--config` (or of the built-in defaults).
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scheme: Option<LabelScheme>,
    /// transformer, concat, eeg_only or face_only.
    #[arg(long)]
    pub fusion: Option<FusionKind>,
    /// Pretrain the frame encoder.
    #[arg(long)]
    pub ft: Option<bool>,
    /// Select frames by attention score (off: first frame only).
    #[arg(long)]
    pub mil: Option<bool>,
    /// Compress visual tokens with cross-attention.
    #[arg(long)]
    pub ca: Option<bool>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    /// Evaluate on the test split every this many epochs.
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Frames per bag (q).
    #[arg(long)]
    pub frames: Option<usize>,
    /// Informative frames per bag in generated data.
    #[arg(long)]
    pub informative: Option<usize>,
    /// Frames kept per bag (K).
    #[arg(long)]
    pub k: Option<usize>,
    /// Visual tokens after compression (N).
    #[arg(long)]
    pub n: Option<usize>,
    /// Token width shared by the frame encoder and fusion (D).
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub encoder_depth: Option<usize>,
    #[arg(long)]
    pub fusion_depth: Option<usize>,
    /// Sets the data, init and shuffle seeds to N, N+1 and N+2.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
}

impl RunArgs {
    /// Loads `--config` (or defaults), applies the flags and validates.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => read_config(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        let (m, d, t, s) = (&mut cfg.model, &mut cfg.data, &mut cfg.train, &mut cfg.seeds);
        if let Some(v) = self.scheme {
            m.scheme = v;
        }
        if let Some(v) = self.fusion {
            m.kind = v;
        }
        if let Some(v) = self.ft {
            m.ablation.ft = v;
        }
        if let Some(v) = self.mil {
            m.ablation.mil = v;
        }
        if let Some(v) = self.ca {
            m.ablation.ca = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr_max {
            t.lr_max = v;
        }
        if let Some(v) = self.lr_min {
            t.lr_min = v;
        }
        if let Some(v) = self.pretrain_epochs {
            t.pretrain_epochs = v;
        }
        if let Some(v) = self.eval_every {
            t.eval_every = v;
        }
        if let Some(v) = self.trials {
            d.trials = v;
        }
        if let Some(v) = self.subjects {
            d.subjects = v;
        }
        if let Some(v) = self.frames {
            d.frames = v;
            m.frames = v;
        }
        if let Some(v) = self.informative {
            d.informative = v;
        }
        if let Some(v) = self.k {
            m.mil.k = v;
        }
        if let Some(v) = self.n {
            m.compressor.queries = v;
        }
        if let Some(v) = self.dim {
            m.encoder.embed_dim = v;
            m.fusion.dim = v;
        }
        if let Some(v) = self.encoder_depth {
            m.encoder.depth = v;
        }
        if let Some(v) = self.fusion_depth {
            m.fusion.depth = v;
        }
        if let Some(v) = self.seed {
            s.data = v;
            s.init = v.wrapping_add(1);
            s.shuffle = v.wrapping_add(2);
        }
        if let Some(v) = self.data_seed {
            s.data = v;
        }
        if let Some(v) = self.init_seed {
            s.init = v;
        }
        if let Some(v) = self.shuffle_seed {
            s.shuffle = v;
        }
    }
}
