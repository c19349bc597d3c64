//! Staged training: projection-only warm-up, re-alignment, per-task
//! fine-tuning, the freeze policy, the schedule and checkpoint selection.

mod optim;
mod presets;
mod run;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::LoraConfig;
use crate::error::{Error, Result};
use crate::model::{component_of, Component, VisionLanguageModel};

pub use optim::AdamW;
pub use presets::{ablation_preset, ablation_presets, AblationPreset, FinetuneRecipe, FinetuneTask, RunPlan};
pub use run::{
    average_over_seeds, finetune, realign, run_plan, run_stage, select_checkpoint, EnglishValScores, SeedAverage,
    StageOutcome, StepMetrics,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Realign,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Realign => "realign",
            Stage::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(Stage::Warmup),
            "realign" => Ok(Stage::Realign),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::UnknownStage(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Effective batch size, split into `grad_accum` micro-batches.
    pub batch_size: usize,
    pub grad_accum: usize,
    pub weight_decay: f64,
    pub max_target_len: usize,
    pub lora: LoraConfig,
    pub seed: u64,
    /// Write a checkpoint every this many steps (and always at the end).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.total_steps == 0 {
            return fail("total_steps must be > 0".into());
        }
        if self.warmup_steps > self.total_steps {
            return fail(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || !self.batch_size.is_multiple_of(self.grad_accum) {
            return fail(format!(
                "batch_size {} must be a positive multiple of grad_accum {}",
                self.batch_size, self.grad_accum
            ));
        }
        if !self.lr.is_finite() || self.lr < 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail("lr and weight_decay must be finite and non-negative".into());
        }
        if self.checkpoint_every == Some(0) {
            return fail("checkpoint_every must be > 0".into());
        }
        self.lora.validate()
    }

    pub fn micro_batch(&self) -> usize {
        self.batch_size / self.grad_accum
    }

    /// Shrinks the step counts by `factor` (at least one step, warm-up kept
    /// within the total). Used to run the recipes at desk scale.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.total_steps = ((self.total_steps as f64 * factor).round() as usize).max(1);
        self.warmup_steps = ((self.warmup_steps as f64 * factor).round() as usize).min(self.total_steps);
        self
    }
}

/// Linear warm-up from 0 to `lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, cfg: &StageConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::InvalidInput(format!(
            "step {step} outside the schedule of {} steps",
            cfg.total_steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.lr * step as f64 / cfg.warmup_steps as f64);
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    if span == 0 {
        return Ok(cfg.lr);
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    Ok(cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Names of the parameters a stage may update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeSet {
    pub trainable: BTreeSet<String>,
}

impl FreezeSet {
    pub fn contains(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }
}

/// Warm-up trains only the projection; the later stages train the Q-Former
/// (queries included), the projection and any attached adapters. Vision
/// encoder and base LM weights are never trainable.
pub fn freeze_policy(model: &VisionLanguageModel, stage: Stage) -> FreezeSet {
    let trainable = model
        .params()
        .names()
        .filter(|n| match stage {
            Stage::Warmup => component_of(n) == Component::Projection,
            Stage::Realign | Stage::Finetune => matches!(
                component_of(n),
                Component::QFormer | Component::Projection | Component::Adapter
            ),
        })
        .cloned()
        .collect();
    FreezeSet { trainable }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::attach_lora;
    use crate::model::ModelConfig;

    fn cfg(lr: f64, warmup: usize, total: usize) -> StageConfig {
        StageConfig {
            lr,
            warmup_steps: warmup,
            total_steps: total,
            ..StageConfig::realign()
        }
    }

    #[test]
    fn schedule_landmarks() {
        let c = StageConfig::realign();
        assert_eq!(lr_schedule(1000, &c).unwrap(), 5e-5);
        assert_eq!(lr_schedule(c.total_steps, &c).unwrap(), 0.0);
        assert_eq!(lr_schedule(0, &c).unwrap(), 0.0);
        let mid = 1000 + (c.total_steps - 1000) / 2;
        assert!((lr_schedule(mid, &c).unwrap() - 2.5e-5).abs() < 1e-18);
        assert!(lr_schedule(c.total_steps + 1, &c).is_err());
        let small = cfg(1.0, 4, 12);
        assert_eq!(lr_schedule(2, &small).unwrap(), 0.5);
        assert_eq!(lr_schedule(8, &small).unwrap(), 0.5);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let c = cfg(1e-3, 10, 100);
        let v: Vec<f64> = (0..=100).map(|s| lr_schedule(s, &c).unwrap()).collect();
        assert!(v[..=10].windows(2).all(|w| w[0] <= w[1]));
        assert!(v[10..].windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn config_validation() {
        assert!(StageConfig::realign().validate().is_ok());
        assert!(StageConfig {
            grad_accum: 3,
            ..StageConfig::realign()
        }
        .validate()
        .is_err());
        assert!(cfg(1.0, 20, 10).validate().is_err());
        assert!("pretrain".parse::<Stage>().is_err());
        assert_eq!("warmup".parse::<Stage>().unwrap(), Stage::Warmup);
    }

    #[test]
    fn freeze_sets() {
        let mut model = VisionLanguageModel::new(ModelConfig::default()).unwrap();
        let warm = freeze_policy(&model, Stage::Warmup);
        assert_eq!(
            warm.trainable,
            ["proj.bias".to_string(), "proj.weight".to_string()].into()
        );
        attach_lora(&mut model, LoraConfig::default(), 0).unwrap();
        let re = freeze_policy(&model, Stage::Realign);
        assert!(re.contains("qformer.query_tokens"));
        assert!(re.contains("qformer.layers.1.cross_attn.k.weight"));
        assert!(re.contains("proj.weight"));
        assert!(re.contains("lora.lm.layers.0.mlp.down.weight.a"));
        let adapters = re.trainable.iter().filter(|n| n.starts_with("lora.")).count();
        assert_eq!(adapters, 24);
        for n in &re.trainable {
            assert!(!n.starts_with("vit.") && !n.starts_with("lm."), "{n}");
        }
        let expected = model
            .params()
            .names()
            .filter(|n| n.starts_with("qformer.") || n.starts_with("proj.") || n.starts_with("lora."))
            .count();
        assert_eq!(re.trainable.len(), expected);
    }

    #[test]
    fn scaling_keeps_warmup_within_total() {
        let c = StageConfig::realign().scaled(0.001);
        assert_eq!((c.warmup_steps, c.total_steps), (1, 60));
        let tiny = StageConfig::warmup().scaled(1e-6);
        assert_eq!((tiny.warmup_steps, tiny.total_steps), (0, 1));
    }
}
