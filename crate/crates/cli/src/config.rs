//! Run configuration: a TOML file with `[codec]`, `[quant]` and `[run]`
//! sections, overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pgsvc::quant::QuantParams;
use pgsvc::splat::ScalabilityMode;
use pgsvc::CodecConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub codec: CodecConfig,
    pub quant: QuantParams,
    pub run: RunSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: u64,
    pub threads: Option<usize>,
    /// Maximum number of input frames to read.
    pub frames: Option<usize>,
    /// Per-iteration training log (CSV).
    pub train_log: Option<PathBuf>,
    /// `error`, `warn`, `info`, `debug` or `trace`.
    pub log_level: Option<String>,
}

/// Flags that override config-file values.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainArgs {
    /// TOML config file.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Total splat budget across layers.
    #[arg(long, short = 'n')]
    pub budget: Option<usize>,
    /// Number of layers; resets the budget split to equal shares.
    #[arg(long)]
    pub layers: Option<usize>,
    /// `quality` or `resolution`.
    #[arg(long)]
    pub mode: Option<ScalabilityMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Iteration cap for I-frames and P-frames.
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Quantization-aware fine-tuning iterations per frame (0 disables).
    #[arg(long)]
    pub finetune_iters: Option<usize>,
    /// Raw YUV 4:2:0 frame size, `WxH`.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
    /// Maximum number of input frames.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Per-iteration training log (CSV).
    #[arg(long)]
    pub train_log: Option<PathBuf>,
}

pub fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in `{s}`"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in `{s}`"))?;
    if w == 0 || h == 0 {
        return Err(format!("size must be positive, got `{s}`"));
    }
    Ok((w, h))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Loads the optional file, applies overrides and validates.
    pub fn resolve(args: &TrainArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply(args);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, args: &TrainArgs) {
        let c = &mut self.codec;
        if let Some(n) = args.budget {
            c.total_budget = n;
        }
        if let Some(l) = args.layers {
            let shape = CodecConfig::with_layers(l, c.total_budget);
            c.num_layers = l;
            c.budget_split = shape.budget_split;
            c.aug_prune_ratios = shape.aug_prune_ratios;
        }
        if let Some(m) = args.mode {
            c.scalability_mode = m;
        }
        if let Some(lr) = args.lr {
            c.lr0 = lr;
        }
        if let Some(it) = args.max_iters {
            c.max_iters_iframe = it;
            c.max_iters_pframe = it;
        }
        if let Some(it) = args.finetune_iters {
            self.quant.finetune_iters = it;
        }
        if let Some(s) = args.seed {
            self.run.seed = s;
        }
        if let Some(f) = args.frames {
            self.run.frames = Some(f);
        }
        if let Some(p) = &args.train_log {
            self.run.train_log = Some(p.clone());
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.quant.validate()?;
        if self.run.threads == Some(0) {
            bail!("threads must be positive");
        }
        if self.run.frames == Some(0) {
            bail!("frame limit must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_parse() {
        let cfg = RunConfig::from_toml(
            "[codec]\ntotal_budget = 900\nscalability_mode = \"resolution\"\n\
             [codec.gsp_iframe]\ninterval = 10\nspan = 100\n\
             [quant]\nfinetune_iters = 0\n[run]\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.codec.total_budget, 900);
        assert_eq!(cfg.codec.scalability_mode, ScalabilityMode::Resolution);
        assert_eq!(cfg.codec.gsp_iframe.span, 100);
        assert_eq!(cfg.quant.finetune_iters, 0);
        assert_eq!(cfg.run.seed, 7);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[codec]\nbudget = 3\n").is_err());
        assert!(RunConfig::from_toml("[extra]\n").is_err());
        assert!(RunConfig::from_toml("[run]\nthreadz = 1\n").is_err());
    }

    #[test]
    fn flags_override_file() {
        let mut cfg = RunConfig::from_toml("[codec]\ntotal_budget = 900\n").unwrap();
        cfg.apply(&TrainArgs {
            budget: Some(300),
            layers: Some(2),
            seed: Some(3),
            ..Default::default()
        });
        assert_eq!(cfg.codec.total_budget, 300);
        assert_eq!(cfg.codec.num_layers, 2);
        assert_eq!(cfg.codec.budget_split.len(), 2);
        assert_eq!(cfg.run.seed, 3);
        cfg.validate().unwrap();
    }

    #[test]
    fn sizes() {
        assert_eq!(parse_size("64x48"), Ok((64, 48)));
        assert!(parse_size("64").is_err());
        assert!(parse_size("0x4").is_err());
    }
}
