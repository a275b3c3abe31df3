//! Flat `key = value` configuration with named profiles and overrides.
//!
//! Resolution order: profile defaults, then the file, then `--set` pairs.
//! `#` starts a comment. Lists are comma separated.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::discriminator::DiscConfig;
use crate::error::{PenError, Result};
use crate::features::{FeatureConfig, PretrainedMode};
use crate::losses::LossWeights;
use crate::metrics::{Connectivity, MetricSettings};
use crate::network::{NetConfig, SIZE_DIVISOR};
use crate::synthgen::{StrokeThreshold, SynthOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    StrokeInit,
    Stage1,
    Stage2,
    Stage3,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::StrokeInit,
        Stage::Stage1,
        Stage::Stage2,
        Stage::Stage3,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Stage::StrokeInit => "stroke_init",
            Stage::Stage1 => "stage1_gan_init",
            Stage::Stage2 => "stage2_selfsup",
            Stage::Stage3 => "stage3_finetune",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.tag() == tag)
    }

    /// Stages whose finished checkpoint may start this one.
    pub fn predecessors(self) -> &'static [Stage] {
        match self {
            Stage::StrokeInit => &[],
            Stage::Stage1 => &[Stage::StrokeInit],
            Stage::Stage2 => &[Stage::Stage1, Stage::StrokeInit],
            Stage::Stage3 => &[Stage::Stage2, Stage::Stage1],
        }
    }

    /// Index used when deriving per-step seeds.
    pub fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Stage {
    type Err = PenError;

    /// Accepts the CLI spellings `stroke-init`, `1`, `2`, `3` and the tags.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stroke-init" | "stroke_init" | "0" => Ok(Stage::StrokeInit),
            "1" => Ok(Stage::Stage1),
            "2" => Ok(Stage::Stage2),
            "3" => Ok(Stage::Stage3),
            other => Stage::from_tag(other)
                .ok_or_else(|| PenError::Config(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub lr_gen: f64,
    pub betas_gen: (f64, f64),
    pub lr_disc: f64,
    pub betas_disc: (f64, f64),
    pub batch_size: usize,
    pub steps: usize,
    pub steps_per_stage: BTreeMap<Stage, usize>,
    pub input_size: usize,
    /// Write a resumable checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Random flips and rotations of training pairs.
    pub geometric_augment: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lr_gen: 1e-4,
            betas_gen: (0.5, 0.9),
            lr_disc: 1e-5,
            betas_disc: (0.0, 0.9),
            batch_size: 2,
            steps: 1000,
            steps_per_stage: BTreeMap::new(),
            input_size: 64,
            checkpoint_every: 0,
            geometric_augment: true,
        }
    }
}

/// Everything a training stage needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr_gen: f64,
    pub betas_gen: (f64, f64),
    pub lr_disc: f64,
    pub betas_disc: (f64, f64),
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub input_size: usize,
    pub weights: LossWeights,
    pub net: NetConfig,
    pub disc: DiscConfig,
    pub features: FeatureConfig,
    pub augment: AugmentConfig,
    pub geometric_augment: bool,
    pub tau: StrokeThreshold,
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("train.lr_gen", self.lr_gen),
            ("train.lr_disc", self.lr_disc),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(PenError::Config(format!("{name} must be positive")));
            }
        }
        if self.steps == 0 {
            return Err(PenError::Config("train.steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(PenError::Config(
                "train.batch_size must be at least 1".into(),
            ));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(SIZE_DIVISOR) {
            return Err(PenError::Config(format!(
                "train.input_size must be a positive multiple of {SIZE_DIVISOR}"
            )));
        }
        self.weights.validate()?;
        self.net.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenConfig {
    pub profile: String,
    pub seed: u64,
    pub deterministic: bool,
    pub net: NetConfig,
    pub disc: DiscConfig,
    pub loss: LossWeights,
    pub features: FeatureConfig,
    pub train: TrainSettings,
    pub augment: AugmentConfig,
    pub synth: SynthOptions,
    pub metrics: MetricSettings,
}

pub const PROFILES: [&str; 3] = ["desk", "paper", "toy"];

impl PenConfig {
    /// Built-in defaults for a named profile.
    ///
    /// `desk` runs at 64×64 on a workstation, `paper` uses 512×512 inputs and
    /// wider networks, `toy` is small enough for CPU tests.
    pub fn profile(name: &str) -> Result<Self> {
        let mut cfg = Self {
            profile: name.to_string(),
            seed: 0,
            deterministic: false,
            net: NetConfig::default(),
            disc: DiscConfig::default(),
            loss: LossWeights::default(),
            features: FeatureConfig::default(),
            train: TrainSettings::default(),
            augment: AugmentConfig::default(),
            synth: SynthOptions::default(),
            metrics: MetricSettings::default(),
        };
        match name {
            "desk" => {}
            "paper" => {
                cfg.net.base_channels = 64;
                cfg.train.input_size = 512;
                cfg.train.batch_size = 4;
                cfg.train.steps = 100_000;
                cfg.synth.size = 512;
                cfg.synth.min_size_px = 24;
                cfg.synth.max_size_px = 96;
                cfg.synth.max_texts = 4;
                cfg.features.pretrained = PretrainedMode::Required;
            }
            "toy" => {
                cfg.net.base_channels = 8;
                cfg.net.stroke_blocks = 1;
                cfg.disc.base_channels = 8;
                cfg.features.pretrained = PretrainedMode::Random;
                cfg.features.width_div = 8;
                cfg.train.lr_gen = 2e-3;
                cfg.train.lr_disc = 2e-4;
                cfg.train.batch_size = 4;
                cfg.train.steps = 200;
                cfg.train.geometric_augment = false;
            }
            other => {
                return Err(PenError::Config(format!(
                    "unknown profile `{other}` (expected one of {PROFILES:?})"
                )))
            }
        }
        Ok(cfg)
    }

    /// Reads `path` (if given) and applies `overrides` on top.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let file_pairs = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| PenError::Config(format!("cannot read {}: {e}", p.display())))?;
                parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        Self::from_pairs(&file_pairs, overrides)
    }

    pub fn from_pairs(
        file_pairs: &[(String, String)],
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let profile = file_pairs
            .iter()
            .chain(overrides)
            .rfind(|(k, _)| k == "profile")
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| "desk".to_string());
        let mut cfg = Self::profile(&profile)?;
        for (k, v) in file_pairs.iter().chain(overrides) {
            if k != "profile" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        if self.train.input_size == 0 || !self.train.input_size.is_multiple_of(SIZE_DIVISOR) {
            return Err(PenError::Config(format!(
                "train.input_size must be a positive multiple of {SIZE_DIVISOR}"
            )));
        }
        if !(self.augment.factor_min > 0.0 && self.augment.factor_min <= self.augment.factor_max) {
            return Err(PenError::Config(
                "augment.factor_min must be in (0, factor_max]".into(),
            ));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "deterministic" => self.deterministic = num(key, v)?,
            "net.base_channels" => self.net.base_channels = num(key, v)?,
            "net.iterations" => self.net.iterations = num(key, v)?,
            "net.dilation_rates" => self.net.dilation_rates = list(key, v)?,
            "net.stroke_blocks" => self.net.stroke_blocks = num(key, v)?,
            "net.repredict_stroke" => self.net.repredict_stroke = num(key, v)?,
            "disc.base_channels" => self.disc.base_channels = num(key, v)?,
            "disc.layers" => self.disc.layers = num(key, v)?,
            "disc.power_iterations" => self.disc.power_iterations = num(key, v)?,
            "loss.lambda_r1" => self.loss.lambda_r1 = num(key, v)?,
            "loss.lambda_r2" => self.loss.lambda_r2 = num(key, v)?,
            "loss.lambda_c" => self.loss.lambda_c = num(key, v)?,
            "loss.lambda_s" => self.loss.lambda_s = num(key, v)?,
            "loss.lambda_a" => self.loss.lambda_a = num(key, v)?,
            "loss.lambda_stroke" => self.loss.lambda_stroke = num(key, v)?,
            "features.pretrained" => self.features.pretrained = v.parse()?,
            "features.layers" => self.features.layers = list(key, v)?,
            "features.width_div" => self.features.width_div = num(key, v)?,
            "features.weights" => self.features.weights = (!v.is_empty()).then(|| PathBuf::from(v)),
            "features.seed" => self.features.seed = num(key, v)?,
            "train.lr_gen" => self.train.lr_gen = num(key, v)?,
            "train.betas_gen" => self.train.betas_gen = pair(key, v)?,
            "train.lr_disc" => self.train.lr_disc = num(key, v)?,
            "train.betas_disc" => self.train.betas_disc = pair(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.steps" => self.train.steps = num(key, v)?,
            "train.input_size" => self.train.input_size = num(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = num(key, v)?,
            "train.geometric_augment" => self.train.geometric_augment = num(key, v)?,
            "augment.factor_min" => self.augment.factor_min = num(key, v)?,
            "augment.factor_max" => self.augment.factor_max = num(key, v)?,
            "augment.rotation_deg" => self.augment.rotation_deg = num(key, v)?,
            "augment.flip_prob" => self.augment.flip_prob = num(key, v)?,
            "synth.size" => self.synth.size = num(key, v)?,
            "synth.tau" => self.synth.tau = StrokeThreshold::new(num(key, v)?)?,
            "synth.max_texts" => self.synth.max_texts = num(key, v)?,
            "synth.min_size_px" => self.synth.min_size_px = num(key, v)?,
            "synth.max_size_px" => self.synth.max_size_px = num(key, v)?,
            "synth.max_rotation_deg" => self.synth.max_rotation_deg = num(key, v)?,
            "synth.min_contrast" => self.synth.min_contrast = num(key, v)?,
            "metrics.error_threshold" => self.metrics.error_threshold = num(key, v)?,
            "metrics.connectivity" => {
                self.metrics.connectivity = Connectivity::from_count(num(key, v)?)?
            }
            _ => {
                if let Some(stage) = key.strip_prefix("train.steps.") {
                    let stage: Stage = stage.parse()?;
                    self.train.steps_per_stage.insert(stage, num(key, v)?);
                } else {
                    return Err(PenError::Config(format!("unknown config key `{key}`")));
                }
            }
        }
        Ok(())
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            lr_gen: self.train.lr_gen,
            betas_gen: self.train.betas_gen,
            lr_disc: self.train.lr_disc,
            betas_disc: self.train.betas_disc,
            batch_size: self.train.batch_size,
            steps: self
                .train
                .steps_per_stage
                .get(&stage)
                .copied()
                .unwrap_or(self.train.steps),
            seed: self.seed,
            input_size: self.train.input_size,
            weights: self.loss,
            net: self.net.clone(),
            disc: self.disc.clone(),
            features: self.features.clone(),
            augment: self.augment,
            geometric_augment: self.train.geometric_augment,
            tau: self.synth.tau,
            checkpoint_every: self.train.checkpoint_every,
            checkpoint_dir: None,
        }
    }
}

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| PenError::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| PenError::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse()
        .map_err(|e| PenError::Config(format!("{key}: cannot parse `{v}`: {e}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn pair(key: &str, v: &str) -> Result<(f64, f64)> {
    match list::<f64>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(PenError::Config(format!(
            "{key}: expected two comma-separated numbers"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults() {
        let cfg = PenConfig::from_pairs(&[], &[]).unwrap();
        assert_eq!(cfg.profile, "desk");
        assert_eq!(cfg.train.lr_gen, 1e-4);
        assert_eq!(cfg.train.betas_gen, (0.5, 0.9));
        assert_eq!(cfg.train.lr_disc, 1e-5);
        assert_eq!(cfg.train.betas_disc, (0.0, 0.9));
        assert_eq!(cfg.train.input_size, 64);
        assert_eq!(cfg.net.base_channels, 32);
        assert_eq!(cfg.net.dilation_rates, vec![2, 4, 8, 16]);
    }

    #[test]
    fn overrides_win() {
        let file =
            parse_pairs("profile = toy\nnet.iterations = 2 # two passes\ntrain.steps.3 = 7\n")
                .unwrap();
        let cfg =
            PenConfig::from_pairs(&file, &[parse_override("net.iterations=4").unwrap()]).unwrap();
        assert_eq!(cfg.profile, "toy");
        assert_eq!(cfg.net.iterations, 4);
        assert_eq!(cfg.train_config(Stage::Stage3).steps, 7);
        assert_eq!(cfg.train_config(Stage::Stage1).steps, cfg.train.steps);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(PenConfig::from_pairs(&[], &[("train.input_size".into(), "60".into())]).is_err());
        assert!(PenConfig::from_pairs(&[], &[("nope".into(), "1".into())]).is_err());
        assert!(PenConfig::from_pairs(&[], &[("profile".into(), "huge".into())]).is_err());
        assert!(parse_pairs("just text").is_err());
    }

    #[test]
    fn stage_spellings() {
        assert_eq!("stroke-init".parse::<Stage>().unwrap(), Stage::StrokeInit);
        assert_eq!("2".parse::<Stage>().unwrap(), Stage::Stage2);
        assert_eq!(Stage::from_tag("stage3_finetune"), Some(Stage::Stage3));
    }
}
