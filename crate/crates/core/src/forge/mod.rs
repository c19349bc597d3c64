//! Builds the multilingual instruction mix: caption subsampling, task
//! derivation, per-example language assignment, translation through a
//! pluggable MT client, template rendering and a deterministic shuffle.

pub mod capfilt;
pub mod languages;
pub mod localize;
pub mod mix;
pub mod mt;
pub mod records;
pub mod templates;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use capfilt::{sample_capfilt, HeuristicNounPhrases, NounPhraseExtractor};
pub use languages::{assign_languages, language_name, AssignMode, LanguageDistribution};
pub use localize::localize;
pub use mix::{build_mix, forge, ForgeConfig, ForgeOutput, Manifest, SourceSpec};
pub use mt::{CachingMt, HttpMt, MockMt, MtClient, SpyMt};
pub use records::{derive_task_examples, DerivedItem, Payload, RawRecord, Turn};
pub use templates::{fill, render_template};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    Capfilt,
    Mscoco,
    Vqav2,
    Aokvqa,
    LlavaDetail,
    LlavaConv,
}

impl Dataset {
    pub const ALL: [Dataset; 6] = [
        Dataset::Capfilt,
        Dataset::Mscoco,
        Dataset::Vqav2,
        Dataset::Aokvqa,
        Dataset::LlavaDetail,
        Dataset::LlavaConv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::Capfilt => "capfilt",
            Dataset::Mscoco => "mscoco",
            Dataset::Vqav2 => "vqav2",
            Dataset::Aokvqa => "aokvqa",
            Dataset::LlavaDetail => "llava_detail",
            Dataset::LlavaConv => "llava_conv",
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Dataset::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::UnknownDataset(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Caption,
    CaptionDetail,
    Vqa,
    Vqg,
    VqaRationale,
    RationaleGen,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Caption => "caption",
            TaskKind::CaptionDetail => "caption_detail",
            TaskKind::Vqa => "vqa",
            TaskKind::Vqg => "vqg",
            TaskKind::VqaRationale => "vqa_rationale",
            TaskKind::RationaleGen => "rationale_gen",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where an example came from: dataset, record index in its input file and
/// item index among the items derived from that record.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SourceRef {
    pub dataset: String,
    pub record: usize,
    pub item: usize,
}

/// One rendered training or evaluation example. Field order is the JSONL key
/// order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub task: TaskKind,
    pub language: String,
    pub prompt: String,
    pub target: String,
    pub image_ids: Vec<String>,
    pub source: SourceRef,
}
