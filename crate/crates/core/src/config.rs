//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Lists are comma separated.
//! Unknown keys and malformed values are errors that name the line.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, StageConfig};
use crate::error::{PctError, Result};
use crate::losses::{LossWeights, MarginConfig, MarginVariant};
use crate::optim::OptimizerConfig;
use crate::synth::DatasetSpec;

/// Types that can be populated from `key = value` pairs.
pub trait KeyValue: Default {
    /// Applies one setting; `Err` carries a message for the offending line.
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String>;

    /// Every setting in a canonical order, suitable for [`KeyValue::set`].
    fn entries(&self) -> Vec<(&'static str, String)>;

    fn validate(&self) -> Result<()>;

    fn parse_text(text: &str, origin: &str) -> Result<Self> {
        let mut out = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |msg: String| PctError::Parse {
                path: origin.to_string(),
                line: n + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail(format!("expected key = value, got {line:?}")))?;
            out.set(key.trim(), value.trim()).map_err(fail)?;
        }
        out.validate()?;
        Ok(out)
    }

    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PctError::io(path, e))?;
        Self::parse_text(&text, &path.display().to_string())
    }

    fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for {key}"))
}

fn list<T: FromStr>(key: &str, value: &str) -> std::result::Result<Vec<T>, String> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn join<T: Display>(values: &[T]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn flag(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        _ => Err(format!("invalid boolean {value:?} for {key}")),
    }
}

impl KeyValue for DatasetSpec {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "num_groups" => self.num_groups = num(key, value)?,
            "ids_per_group" => self.ids_per_group = num(key, value)?,
            "images_per_id" => self.images_per_id = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "test_ids_per_group" => self.test_ids_per_group = num(key, value)?,
            "pairs_per_group" => self.pairs_per_group = num(key, value)?,
            "template_amplitude" => self.template_amplitude = num(key, value)?,
            "template_block" => self.template_block = num(key, value)?,
            "texture_order" => self.texture_order = num(key, value)?,
            "group_gains" => self.group_gains = list(key, value)?,
            "group_sigmas" => self.group_sigmas = list(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num_groups", self.num_groups.to_string()),
            ("ids_per_group", self.ids_per_group.to_string()),
            ("images_per_id", self.images_per_id.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("test_ids_per_group", self.test_ids_per_group.to_string()),
            ("pairs_per_group", self.pairs_per_group.to_string()),
            ("template_amplitude", self.template_amplitude.to_string()),
            ("template_block", self.template_block.to_string()),
            ("texture_order", self.texture_order.to_string()),
            ("group_gains", join(&self.group_gains)),
            ("group_sigmas", join(&self.group_sigmas)),
        ]
    }

    fn validate(&self) -> Result<()> {
        DatasetSpec::validate(self)
    }
}

/// Everything that determines a training run besides the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub stem_width: usize,
    pub stem_stride: usize,
    pub stage_widths: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub ct_stages: Vec<bool>,
    pub embed_dim: usize,
    pub heads: usize,
    pub max_rel_offset: usize,
    pub margin: MarginVariant,
    pub scale: f64,
    pub margin_value: f64,
    pub alpha: f64,
    pub lr_face: f64,
    pub lr_race: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Joint gradient-norm cap per parameter group; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        Self {
            seed: 0,
            stem_width: bb.stem_width,
            stem_stride: bb.stem_stride,
            stage_widths: bb.stages.iter().map(|s| s.width).collect(),
            stage_strides: bb.stages.iter().map(|s| s.stride).collect(),
            ct_stages: vec![true; bb.stages.len()],
            embed_dim: bb.embed_dim,
            heads: bb.heads,
            max_rel_offset: bb.max_rel_offset,
            margin: MarginVariant::Arc,
            scale: 64.0,
            margin_value: 0.35,
            alpha: 1.0,
            lr_face: 0.05,
            lr_race: 0.005,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_epochs: vec![16, 24, 28],
            decay_factor: 0.1,
            epochs: 32,
            batch_size: 32,
            grad_clip: 1.0,
        }
    }
}

impl RunConfig {
    /// Network configuration for images of the given size.
    pub fn backbone(&self, in_channels: usize, height: usize, width: usize) -> BackboneConfig {
        BackboneConfig {
            in_channels,
            height,
            width,
            stem_width: self.stem_width,
            stem_stride: self.stem_stride,
            stages: self
                .stage_widths
                .iter()
                .zip(&self.stage_strides)
                .zip(&self.ct_stages)
                .map(|((&width, &stride), &ct_enabled)| StageConfig {
                    width,
                    stride,
                    ct_enabled,
                })
                .collect(),
            embed_dim: self.embed_dim,
            heads: self.heads,
            max_rel_offset: self.max_rel_offset,
        }
    }

    pub fn margin_config(&self, num_classes: usize) -> MarginConfig {
        MarginConfig {
            variant: self.margin,
            s: self.scale,
            m: self.margin_value,
            num_classes,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha }
    }

    fn optimizer(&self, lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            schedule: self.decay_epochs.iter().map(|&e| (e, self.decay_factor)).collect(),
        }
    }

    /// Optimizer for the identity branch, the CT modules and the face head.
    pub fn face_optimizer(&self) -> OptimizerConfig {
        self.optimizer(self.lr_face)
    }

    /// Optimizer for the race branch and the race head.
    pub fn race_optimizer(&self) -> OptimizerConfig {
        self.optimizer(self.lr_race)
    }

    pub fn ct_count(&self) -> usize {
        self.ct_stages.iter().filter(|&&c| c).count()
    }
}

impl KeyValue for RunConfig {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = num(key, value)?,
            "stem_width" => self.stem_width = num(key, value)?,
            "stem_stride" => self.stem_stride = num(key, value)?,
            "stage_widths" => self.stage_widths = list(key, value)?,
            "stage_strides" => self.stage_strides = list(key, value)?,
            "ct_stages" => {
                self.ct_stages = match value {
                    "all" => vec![true; self.stage_widths.len()],
                    "none" => vec![false; self.stage_widths.len()],
                    _ => value.split(',').map(|v| flag(key, v.trim())).collect::<std::result::Result<_, _>>()?,
                }
            }
            "embed_dim" => self.embed_dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "max_rel_offset" => self.max_rel_offset = num(key, value)?,
            "margin" => self.margin = value.parse().map_err(|e: PctError| e.to_string())?,
            "scale" => self.scale = num(key, value)?,
            "margin_value" => self.margin_value = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "lr_face" => self.lr_face = num(key, value)?,
            "lr_race" => self.lr_race = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "decay_epochs" => self.decay_epochs = list(key, value)?,
            "decay_factor" => self.decay_factor = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let flags: Vec<u8> = self.ct_stages.iter().map(|&c| u8::from(c)).collect();
        vec![
            ("seed", self.seed.to_string()),
            ("stem_width", self.stem_width.to_string()),
            ("stem_stride", self.stem_stride.to_string()),
            ("stage_widths", join(&self.stage_widths)),
            ("stage_strides", join(&self.stage_strides)),
            ("ct_stages", join(&flags)),
            ("embed_dim", self.embed_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("max_rel_offset", self.max_rel_offset.to_string()),
            ("margin", self.margin.to_string()),
            ("scale", self.scale.to_string()),
            ("margin_value", self.margin_value.to_string()),
            ("alpha", self.alpha.to_string()),
            ("lr_face", self.lr_face.to_string()),
            ("lr_race", self.lr_race.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("decay_epochs", join(&self.decay_epochs)),
            ("decay_factor", self.decay_factor.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        let n = self.stage_widths.len();
        if self.stage_strides.len() != n || self.ct_stages.len() != n {
            return Err(PctError::Config(format!(
                "{} stage widths, {} strides and {} CT flags",
                n,
                self.stage_strides.len(),
                self.ct_stages.len()
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(PctError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(PctError::Config("grad_clip must be nonnegative".into()));
        }
        if !(self.lr_race > 0.0) || !(self.decay_factor > 0.0) {
            return Err(PctError::Config("race rate and decay factor must be positive".into()));
        }
        self.face_optimizer().validate()?;
        self.margin_config(2).validate()?;
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(PctError::Config("alpha must be finite and nonnegative".into()));
        }
        self.backbone(1, 16, 16).validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::parse_text(&cfg.to_text(), "echo").unwrap();
        assert_eq!(back, cfg);
        let spec = DatasetSpec::default();
        assert_eq!(DatasetSpec::parse_text(&spec.to_text(), "echo").unwrap(), spec);
    }

    #[test]
    fn defaults_follow_the_desk_schedule() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.heads, 2);
        assert_eq!((cfg.scale, cfg.margin_value, cfg.alpha), (64.0, 0.35, 1.0));
        let f = cfg.face_optimizer();
        assert!((f.lr_at(0) - 0.05).abs() < 1e-15);
        assert!((f.lr_at(16) - 0.005).abs() < 1e-15);
        assert!((cfg.race_optimizer().lr_at(31) - 0.005e-3).abs() < 1e-15);
    }

    #[test]
    fn parse_with_comments_and_lists() {
        let text = "# run\nseed = 7\nct_stages = none  # ablation\nstage_widths = 8, 16\nstage_strides = 1,2\nct_stages = 0,1\nmargin = cosface\n";
        let cfg = RunConfig::parse_text(text, "t").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.stage_widths, vec![8, 16]);
        assert_eq!(cfg.ct_stages, vec![false, true]);
        assert_eq!(cfg.margin, MarginVariant::Cos);
    }

    #[test]
    fn errors_name_the_line() {
        for (text, line) in [
            ("seed = 1\nbogus = 2\n", 2),
            ("seed = 1\n\nepochs = ten\n", 3),
            ("seed 1\n", 1),
            ("ct_stages = 1,maybe,1,1\n", 1),
        ] {
            match RunConfig::parse_text(text, "cfg") {
                Err(PctError::Parse { line: l, path, .. }) => {
                    assert_eq!((l, path.as_str()), (line, "cfg"), "{text:?}")
                }
                other => panic!("{text:?}: {other:?}"),
            }
        }
        assert!(matches!(
            DatasetSpec::parse_text("ids_per_group = 1\n", "d"),
            Err(PctError::Config(_))
        ));
    }

    #[test]
    fn mismatched_stage_lists_are_rejected() {
        assert!(RunConfig::parse_text("stage_widths = 8,16,16\n", "c").is_err());
        assert!(RunConfig::parse_text("heads = 3\n", "c").is_err());
    }
}
