//! Multilingual evaluation: prompts, metrics and per-language reports.

pub mod cider;
pub mod exact;
pub mod plot;
pub mod segment;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cider::{cider, CiderScore};
pub use exact::{exact_match, normalize, remap_labels, Normalization};
pub use segment::{DefaultSegmenter, Segmenter};

use crate::error::{Error, Result};
use crate::forge::language_name;
use crate::forge::templates::{fill, EVAL_CAPTION, EVAL_MARVL, EVAL_VQA, EVAL_XVNLI};
use crate::generation::GenConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTask {
    Xm3600,
    Xflickrco,
    Xgqa,
    Maxm,
    Xvnli,
    Marvl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cider,
    Accuracy,
}

impl EvalTask {
    pub const ALL: [EvalTask; 6] = [
        EvalTask::Xm3600,
        EvalTask::Xflickrco,
        EvalTask::Xgqa,
        EvalTask::Maxm,
        EvalTask::Xvnli,
        EvalTask::Marvl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalTask::Xm3600 => "xm3600",
            EvalTask::Xflickrco => "xflickrco",
            EvalTask::Xgqa => "xgqa",
            EvalTask::Maxm => "maxm",
            EvalTask::Xvnli => "xvnli",
            EvalTask::Marvl => "marvl",
        }
    }

    pub fn metric(self) -> Metric {
        match self {
            EvalTask::Xm3600 | EvalTask::Xflickrco => Metric::Cider,
            _ => Metric::Accuracy,
        }
    }

    pub fn images_per_example(self) -> usize {
        if self == EvalTask::Marvl {
            2
        } else {
            1
        }
    }

    /// Decoding defaults: short answers for classification-style tasks.
    pub fn gen_config(self) -> GenConfig {
        match self.metric() {
            Metric::Cider => GenConfig::default(),
            Metric::Accuracy => GenConfig::classification(),
        }
    }
}

impl fmt::Display for EvalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown eval task `{s}`")))
    }
}

/// One line of a gold file. Which optional fields are required depends on
/// the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldExample {
    pub example_id: String,
    pub language: String,
    pub image_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub statement: Option<String>,
    /// Reference captions.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<String>,
    /// Accepted answers; any one of them counts as correct.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl GoldExample {
    fn need<'a>(&self, field: &'a Option<String>, name: &str, task: EvalTask) -> Result<&'a str> {
        field
            .as_deref()
            .ok_or_else(|| Error::InvalidInput(format!("{task} example `{}` lacks `{name}`", self.example_id)))
    }

    pub fn validate(&self, task: EvalTask) -> Result<()> {
        if self.image_ids.len() != task.images_per_example() {
            return Err(Error::InvalidInput(format!(
                "{task} example `{}` has {} image(s), expected {}",
                self.example_id,
                self.image_ids.len(),
                task.images_per_example()
            )));
        }
        self.gold_answers(task).map(|_| ())?;
        self.prompt(task).map(|_| ())
    }

    /// The eval prompt for this example.
    pub fn prompt(&self, task: EvalTask) -> Result<String> {
        let mut slots = BTreeMap::new();
        let template = match task {
            EvalTask::Xm3600 | EvalTask::Xflickrco => {
                slots.insert("LANGUAGE", language_name(&self.language));
                EVAL_CAPTION
            }
            EvalTask::Xgqa | EvalTask::Maxm => {
                // xGQA answers are English; MaXM answers follow the question.
                let answer_lang = if task == EvalTask::Xgqa { "en" } else { &self.language };
                slots.insert("QUESTION", self.need(&self.question, "question", task)?);
                slots.insert("LANGUAGE", language_name(answer_lang));
                EVAL_VQA
            }
            EvalTask::Xvnli => {
                slots.insert("HYPOTHESIS", self.need(&self.hypothesis, "hypothesis", task)?);
                EVAL_XVNLI
            }
            EvalTask::Marvl => {
                slots.insert("STATEMENT", self.need(&self.statement, "statement", task)?);
                EVAL_MARVL
            }
        };
        fill(template, &slots)
    }

    /// Reference texts for captioning, answer candidates otherwise.
    pub fn gold_answers(&self, task: EvalTask) -> Result<Vec<String>> {
        let empty = |what: &str| Error::InvalidInput(format!("{task} example `{}` has no {what}", self.example_id));
        match task {
            EvalTask::Xm3600 | EvalTask::Xflickrco if self.references.is_empty() => Err(empty("references")),
            EvalTask::Xm3600 | EvalTask::Xflickrco => Ok(self.references.clone()),
            EvalTask::Xgqa | EvalTask::Maxm if self.answers.is_empty() => Err(empty("answers")),
            EvalTask::Xgqa | EvalTask::Maxm => Ok(self.answers.clone()),
            EvalTask::Xvnli | EvalTask::Marvl => {
                let label = self.need(&self.label, "label", task)?;
                Ok(vec![remap_labels(task.as_str(), label)?.to_string()])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub example_id: String,
    pub language: String,
    pub prediction: String,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn read_gold(path: &Path) -> Result<Vec<GoldExample>> {
    read_jsonl(path)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    read_jsonl(path)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: EvalTask,
    pub metric: Metric,
    pub per_language: BTreeMap<String, f64>,
    pub n_examples: BTreeMap<String, usize>,
    pub english: Option<f64>,
    /// Mean over the non-English languages; absent when there are none.
    pub average_non_english: Option<f64>,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOptions {
    pub normalization: Normalization,
    /// Extra settings folded into the config hash, such as the decoding setup.
    pub context: serde_json::Value,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            normalization: Normalization::Minimal,
            context: serde_json::Value::Null,
        }
    }
}

/// Scores predictions against gold, per language.
pub fn evaluate_task(
    predictions: &[Prediction],
    gold: &[GoldExample],
    task: EvalTask,
    options: &EvalOptions,
    segmenter: &dyn Segmenter,
) -> Result<EvalReport> {
    let by_id: BTreeMap<&str, &Prediction> = predictions.iter().map(|p| (p.example_id.as_str(), p)).collect();
    let missing: Vec<String> = gold
        .iter()
        .filter(|g| !by_id.contains_key(g.example_id.as_str()))
        .map(|g| g.example_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    let mut ids = BTreeSet::new();
    let mut groups: BTreeMap<&str, Vec<&GoldExample>> = BTreeMap::new();
    for g in gold {
        if !ids.insert(g.example_id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate gold id `{}`", g.example_id)));
        }
        g.validate(task)?;
        groups.entry(g.language.as_str()).or_default().push(g);
    }
    let mut per_language = BTreeMap::new();
    let mut n_examples = BTreeMap::new();
    for (lang, examples) in groups {
        let score = match task.metric() {
            Metric::Cider => {
                let cands = examples
                    .iter()
                    .map(|g| (g.example_id.clone(), by_id[g.example_id.as_str()].prediction.clone()))
                    .collect();
                let refs = examples
                    .iter()
                    .map(|g| Ok((g.example_id.clone(), g.gold_answers(task)?)))
                    .collect::<Result<_>>()?;
                cider(&cands, &refs, segmenter, lang)?.mean
            }
            Metric::Accuracy => {
                let mut correct = 0usize;
                for g in &examples {
                    let pred = &by_id[g.example_id.as_str()].prediction;
                    if exact_match(pred, &g.gold_answers(task)?, options.normalization) {
                        correct += 1;
                    }
                }
                correct as f64 / examples.len() as f64
            }
        };
        per_language.insert(lang.to_string(), score);
        n_examples.insert(lang.to_string(), examples.len());
    }
    let non_en: Vec<f64> = per_language
        .iter()
        .filter(|(l, _)| l.as_str() != "en")
        .map(|(_, s)| *s)
        .collect();
    let average_non_english = (!non_en.is_empty()).then(|| non_en.iter().sum::<f64>() / non_en.len() as f64);
    let hashed = serde_json::json!({
        "task": task,
        "metric": task.metric(),
        "options": options,
    });
    let config_hash = hex::encode(Sha256::digest(serde_json::to_vec(&hashed)?));
    Ok(EvalReport {
        task,
        metric: task.metric(),
        english: per_language.get("en").copied(),
        per_language,
        n_examples,
        average_non_english,
        config_hash,
    })
}

impl EvalReport {
    /// Fixed-width table: one column per language, then the non-English mean.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", v * 100.0));
        let mut cols: Vec<(String, String)> = Vec::new();
        if let Some(en) = self.english {
            cols.push(("en".into(), fmt(Some(en))));
        }
        for (l, s) in &self.per_language {
            if l != "en" {
                cols.push((l.clone(), fmt(Some(*s))));
            }
        }
        cols.push(("avg".into(), fmt(self.average_non_english)));
        let width = cols.iter().map(|(h, v)| h.len().max(v.len())).max().unwrap_or(4) + 2;
        let mut out = format!("{} ({:?} x100)\n", self.task, self.metric);
        for (h, _) in &cols {
            let _ = write!(out, "{h:>width$}");
        }
        out.push('\n');
        for (_, v) in &cols {
            let _ = write!(out, "{v:>width$}");
        }
        out.push('\n');
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{}-report.json", self.task));
        let mut body = serde_json::to_string_pretty(self)?;
        body.push('\n');
        fs::write(&json, body).map_err(|e| Error::io(&json, e))?;
        let table = dir.join(format!("{}-report.txt", self.task));
        fs::write(&table, self.to_table()).map_err(|e| Error::io(&table, e))
    }
}
