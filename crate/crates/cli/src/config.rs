//! TOML run configuration and command-line overrides.

use std::path::Path;

use anyhow::Context;
use clap::Args;
use magread::eval::EvalConfig;
use magread::model::InputMode;
use magread::synth::SynthConfig;
use magread::train::{FreezeMode, Stage, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::Usage;

/// Everything a run can be configured with. Every section and field is
/// optional; omitted values take the library defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    /// Classification stage (supervised training and fine-tuning).
    pub train: TrainConfig,
    /// Pretext stage.
    pub pretrain: PretrainSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PretrainSection(pub TrainConfig);

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection(TrainConfig {
            stage: Stage::Pretext,
            ..TrainConfig::default()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seed: u64,
    pub jobs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { seed: 0, jobs: 1 }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = toml::from_str(&text)
            .map_err(|e| Usage(format!("config {}: {e}", path.display())))
            .with_context(|| format!("loading {}", path.display()))?;
        Ok(cfg)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            seed: self.eval.seed,
            train: self.train.clone(),
            pretrain: self.pretrain.0.clone(),
            jobs: self.eval.jobs,
        }
    }
}

fn parse_input_mode(s: &str) -> Result<InputMode, String> {
    InputMode::parse(s).ok_or_else(|| {
        let names: Vec<&str> = InputMode::ALL.iter().map(|m| m.as_str()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn parse_freeze(s: &str) -> Result<FreezeMode, String> {
    match s {
        "full" => Ok(FreezeMode::Full),
        "partial" => Ok(FreezeMode::Partial),
        _ => Err("expected full or partial".into()),
    }
}

/// Training flags; each overrides the matching config-file value.
#[derive(Args, Clone, Debug, Default)]
pub struct TrainOverrides {
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Adam learning rate [default: 3e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decoupled weight decay [default: 0.01]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Mini-batch size [default: 256]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Maximum number of epochs [default: 50]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs without validation improvement before stopping [default: 5]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Window stride in samples [default: 6]
    #[arg(long)]
    pub stride: Option<usize>,
    /// Share of labeled training windows kept, stratified by class [default: 1.0]
    #[arg(long)]
    pub label_fraction: Option<f64>,
    /// gaze_plus_comp, gaze_only, comp_only, mouse_only or mouse_gaze_comp [default: gaze_plus_comp]
    #[arg(long, value_parser = parse_input_mode)]
    pub input_mode: Option<InputMode>,
    /// full or partial [default: full]
    #[arg(long, value_parser = parse_freeze)]
    pub freeze: Option<FreezeMode>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.stride {
            cfg.stride = v;
        }
        if let Some(v) = self.label_fraction {
            cfg.label_fraction = v;
        }
        if let Some(v) = self.input_mode {
            cfg.input_mode = v;
        }
        if let Some(v) = self.freeze {
            cfg.freeze = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.pretrain.0.stage, Stage::Pretext);
    }

    #[test]
    fn sections_parse_and_unknown_keys_fail() {
        let cfg: RunConfig = toml::from_str(
            "[synth]\nmagnification = 3.0\n[train]\nlr = 0.001\ninput_mode = \"gaze_only\"\n[pretrain]\nmax_epochs = 4\n[eval]\njobs = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.synth.magnification, 3.0);
        assert_eq!(cfg.train.input_mode, InputMode::GazeOnly);
        assert_eq!(cfg.pretrain.0.max_epochs, 4);
        assert_eq!(cfg.eval.jobs, 2);
        assert!(toml::from_str::<RunConfig>("[train]\nlearning_rate = 1.0\n").is_err());
    }

    #[test]
    fn overrides_win() {
        let mut cfg = TrainConfig::default();
        TrainOverrides {
            epochs: Some(3),
            freeze: Some(FreezeMode::Partial),
            ..Default::default()
        }
        .apply(&mut cfg);
        assert_eq!(cfg.max_epochs, 3);
        assert_eq!(cfg.freeze, FreezeMode::Partial);
        assert_eq!(cfg.lr, 3e-4);
    }
}
