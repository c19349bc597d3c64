//! Raw corpus records and the task items derived from them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, SourceRef, TaskKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Caption {
        caption: String,
    },
    Vqa {
        question: String,
        answers: Vec<String>,
    },
    Rationale {
        question: String,
        answer: String,
        rationales: Vec<String>,
    },
    Dialog {
        turns: Vec<Turn>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub dataset: Dataset,
    pub image_id: String,
    pub payload: Payload,
}

fn non_empty(field: &str, value: &str, image_id: &str) -> Result<()> {
    if value.trim().is_empty() {
        return Err(Error::InvalidInput(format!(
            "record for image `{image_id}` has an empty {field}"
        )));
    }
    Ok(())
}

impl RawRecord {
    pub fn validate(&self) -> Result<()> {
        non_empty("image_id", &self.image_id, "?")?;
        let id = &self.image_id;
        let kind_ok = matches!(
            (self.dataset, &self.payload),
            (
                Dataset::Capfilt | Dataset::Mscoco | Dataset::LlavaDetail,
                Payload::Caption { .. }
            ) | (Dataset::Vqav2, Payload::Vqa { .. })
                | (Dataset::Aokvqa, Payload::Rationale { .. })
                | (Dataset::LlavaConv, Payload::Dialog { .. })
        );
        if !kind_ok {
            return Err(Error::InvalidInput(format!(
                "{} record for `{id}` carries the wrong payload kind",
                self.dataset
            )));
        }
        match &self.payload {
            Payload::Caption { caption } => non_empty("caption", caption, id),
            Payload::Vqa { question, answers } => {
                non_empty("question", question, id)?;
                match answers.first() {
                    Some(a) => non_empty("answer", a, id),
                    None => Err(Error::InvalidInput(format!("VQA record for `{id}` has no answer"))),
                }
            }
            Payload::Rationale {
                question,
                answer,
                rationales,
            } => {
                non_empty("question", question, id)?;
                non_empty("answer", answer, id)?;
                rationales.iter().try_for_each(|r| non_empty("rationale", r, id))
            }
            Payload::Dialog { turns } => turns.iter().try_for_each(|t| {
                non_empty("question", &t.question, id)?;
                non_empty("answer", &t.answer, id)
            }),
        }
    }
}

impl RawRecord {
    /// The corpus line this record parses from.
    pub fn to_line(&self) -> Result<String> {
        let id = &self.image_id;
        let v = match &self.payload {
            Payload::Caption { caption } => serde_json::json!({"image_id": id, "caption": caption}),
            Payload::Vqa { question, answers } => {
                serde_json::json!({"image_id": id, "question": question, "answers": answers})
            }
            Payload::Rationale {
                question,
                answer,
                rationales,
            } => serde_json::json!({
                "image_id": id, "question": question, "answer": answer, "rationales": rationales
            }),
            Payload::Dialog { turns } => serde_json::json!({"image_id": id, "turns": turns}),
        };
        Ok(serde_json::to_string(&v)?)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionLine {
    image_id: String,
    caption: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VqaLine {
    image_id: String,
    question: String,
    #[serde(default)]
    answer: Option<String>,
    #[serde(default)]
    answers: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RationaleLine {
    image_id: String,
    question: String,
    answer: String,
    rationales: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DialogLine {
    image_id: String,
    turns: Vec<Turn>,
}

/// Parses one input line of the given dataset's JSONL format.
pub fn parse_line(dataset: Dataset, line: &str) -> Result<RawRecord> {
    let (image_id, payload) = match dataset {
        Dataset::Capfilt | Dataset::Mscoco | Dataset::LlavaDetail => {
            let l: CaptionLine = serde_json::from_str(line)?;
            (l.image_id, Payload::Caption { caption: l.caption })
        }
        Dataset::Vqav2 => {
            let l: VqaLine = serde_json::from_str(line)?;
            let mut answers = Vec::new();
            answers.extend(l.answer);
            answers.extend(l.answers);
            (
                l.image_id,
                Payload::Vqa {
                    question: l.question,
                    answers,
                },
            )
        }
        Dataset::Aokvqa => {
            let l: RationaleLine = serde_json::from_str(line)?;
            (
                l.image_id,
                Payload::Rationale {
                    question: l.question,
                    answer: l.answer,
                    rationales: l.rationales,
                },
            )
        }
        Dataset::LlavaConv => {
            let l: DialogLine = serde_json::from_str(line)?;
            (l.image_id, Payload::Dialog { turns: l.turns })
        }
    };
    let rec = RawRecord {
        dataset,
        image_id,
        payload,
    };
    rec.validate()?;
    Ok(rec)
}

pub fn read_records(path: &Path, dataset: Dataset) -> Result<Vec<RawRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_line(dataset, l).map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// A task instance in English, before language assignment and templating.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerivedItem {
    pub task: TaskKind,
    pub dataset: Dataset,
    pub image_ids: Vec<String>,
    pub caption: Option<String>,
    pub question: Option<String>,
    pub answer: Option<String>,
    pub rationale: Option<String>,
    pub source: SourceRef,
}

impl DerivedItem {
    fn new(task: TaskKind, rec: &RawRecord, record: usize, item: usize) -> Self {
        Self {
            task,
            dataset: rec.dataset,
            image_ids: vec![rec.image_id.clone()],
            caption: None,
            question: None,
            answer: None,
            rationale: None,
            source: SourceRef {
                dataset: rec.dataset.to_string(),
                record,
                item,
            },
        }
    }
}

/// Sentences in `text`, split after `.`, `!` or `?` runs.
pub fn count_sentences(text: &str) -> usize {
    text.split(['.', '!', '?'])
        .filter(|s| s.chars().any(char::is_alphanumeric))
        .count()
}

pub const MAX_DIALOG_ANSWER_SENTENCES: usize = 3;

/// Task items for one record; `record_index` is its position in the input.
pub fn derive_task_examples(rec: &RawRecord, record_index: usize) -> Result<Vec<DerivedItem>> {
    rec.validate()?;
    let mut out = Vec::new();
    let mut push = |mut item: DerivedItem| {
        item.source.item = out.len();
        out.push(item);
    };
    let base = |task| DerivedItem::new(task, rec, record_index, 0);
    match &rec.payload {
        Payload::Caption { caption } => {
            let task = if rec.dataset == Dataset::LlavaDetail {
                TaskKind::CaptionDetail
            } else {
                TaskKind::Caption
            };
            push(DerivedItem {
                caption: Some(caption.clone()),
                ..base(task)
            });
        }
        Payload::Vqa { question, answers } => {
            for task in [TaskKind::Vqa, TaskKind::Vqg] {
                push(DerivedItem {
                    question: Some(question.clone()),
                    answer: Some(answers[0].clone()),
                    ..base(task)
                });
            }
        }
        Payload::Rationale {
            question,
            answer,
            rationales,
        } => {
            for r in rationales {
                for task in [TaskKind::VqaRationale, TaskKind::RationaleGen] {
                    push(DerivedItem {
                        question: Some(question.clone()),
                        answer: Some(answer.clone()),
                        rationale: Some(r.clone()),
                        ..base(task)
                    });
                }
            }
        }
        Payload::Dialog { turns } => {
            for t in turns {
                if count_sentences(&t.answer) <= MAX_DIALOG_ANSWER_SENTENCES {
                    push(DerivedItem {
                        question: Some(t.question.clone()),
                        answer: Some(t.answer.clone()),
                        ..base(TaskKind::Vqa)
                    });
                }
            }
        }
    }
    Ok(out)
}
