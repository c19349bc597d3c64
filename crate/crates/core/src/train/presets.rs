use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Stage, StageConfig};
use crate::adapters::{LoraConfig, LoraTarget};
use crate::error::{Error, Result};

impl StageConfig {
    /// Projection-only warm-up: 8k steps at 5e-3, batch 128.
    pub fn warmup() -> Self {
        Self {
            stage: Stage::Warmup,
            lr: 5e-3,
            warmup_steps: 1000,
            total_steps: 8000,
            batch_size: 128,
            grad_accum: 4,
            weight_decay: 0.1,
            max_target_len: 128,
            lora: LoraConfig {
                target: LoraTarget::None,
                ..LoraConfig::default()
            },
            seed: 0,
            checkpoint_every: None,
        }
    }

    /// Re-alignment on the instruction mix: 60k steps at 5e-5, batch 128,
    /// LoRA r = 8, alpha = 16, dropout 0.05 on all LM matrices.
    pub fn realign() -> Self {
        Self {
            stage: Stage::Realign,
            lr: 5e-5,
            warmup_steps: 1000,
            total_steps: 60_000,
            batch_size: 128,
            grad_accum: 4,
            weight_decay: 0.1,
            max_target_len: 128,
            lora: LoraConfig::default(),
            seed: 0,
            checkpoint_every: None,
        }
    }

    /// Fine-tuning for `task` over `n_examples` training examples.
    pub fn finetune(task: FinetuneTask, n_examples: usize) -> Self {
        let r = task.recipe();
        let total = (r.epochs * n_examples).div_ceil(r.batch_size).max(1);
        Self {
            stage: Stage::Finetune,
            lr: r.lr,
            warmup_steps: 1000.min(total),
            total_steps: total,
            batch_size: r.batch_size,
            grad_accum: r.batch_size / 32,
            ..Self::realign()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneTask {
    Xgqa,
    Xvnli,
    Marvl,
}

impl FinetuneTask {
    pub const ALL: [FinetuneTask; 3] = [FinetuneTask::Xgqa, FinetuneTask::Xvnli, FinetuneTask::Marvl];

    pub fn recipe(self) -> FinetuneRecipe {
        match self {
            FinetuneTask::Xgqa => FinetuneRecipe {
                epochs: 5,
                lr: 5e-5,
                batch_size: 256,
            },
            FinetuneTask::Xvnli => FinetuneRecipe {
                epochs: 10,
                lr: 1e-5,
                batch_size: 128,
            },
            FinetuneTask::Marvl => FinetuneRecipe {
                epochs: 20,
                lr: 5e-5,
                batch_size: 128,
            },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FinetuneTask::Xgqa => "xgqa",
            FinetuneTask::Xvnli => "xvnli",
            FinetuneTask::Marvl => "marvl",
        }
    }
}

impl fmt::Display for FinetuneTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FinetuneTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FinetuneTask::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fine-tuning task `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecipe {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

/// One row of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AblationPreset {
    pub name: &'static str,
    /// Full instruction mix, or the web caption subset alone.
    pub instruction_mix: bool,
    pub lora_target: LoraTarget,
    /// Run the projection-only stage first.
    pub warm_start: bool,
}

/// Every ablation run lasts this many re-alignment steps before scaling.
pub const ABLATION_STEPS: usize = 30_000;

pub fn ablation_presets() -> [AblationPreset; 6] {
    use LoraTarget::*;
    let row = |name, instruction_mix, lora_target, warm_start| AblationPreset {
        name,
        instruction_mix,
        lora_target,
        warm_start,
    };
    [
        row("captions-only", false, None, true),
        row("captions-lora", false, AllLmMatrices, true),
        row("mix-no-lora", true, None, true),
        row("mix-lora-qv", true, QueryValue, true),
        row("mix-lora-all-no-warmstart", true, AllLmMatrices, false),
        row("full", true, AllLmMatrices, true),
    ]
}

pub fn ablation_preset(name: &str) -> Result<AblationPreset> {
    ablation_presets().into_iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<&str> = ablation_presets().iter().map(|p| p.name).collect();
        Error::Config(format!("unknown preset `{name}`; expected one of {}", names.join(", ")))
    })
}

/// Stages to run for one training job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub warmup: Option<StageConfig>,
    pub realign: StageConfig,
    /// Restrict the training stream to web captions.
    pub captions_only: bool,
}

impl AblationPreset {
    /// Stage configs for this row; `scale` shrinks step counts.
    pub fn plan(&self, scale: f64, seed: u64) -> RunPlan {
        let warmup = self.warm_start.then(|| {
            StageConfig {
                seed,
                ..StageConfig::warmup()
            }
            .scaled(scale)
        });
        let realign = StageConfig {
            total_steps: ABLATION_STEPS,
            lora: LoraConfig {
                target: self.lora_target,
                ..LoraConfig::default()
            },
            seed,
            ..StageConfig::realign()
        }
        .scaled(scale);
        RunPlan {
            warmup,
            realign,
            captions_only: !self.instruction_mix,
        }
    }
}
