//! Exact-match accuracy and label remapping for classification tasks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Case-fold, trim whitespace and terminal punctuation.
    #[default]
    Minimal,
    /// Raw string equality.
    Strict,
}

fn is_terminal_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '。' | '！' | '？' | '，' | '、' | '؟' | '।' | '…')
}

pub fn normalize(text: &str, mode: Normalization) -> String {
    match mode {
        Normalization::Strict => text.to_string(),
        Normalization::Minimal => text
            .trim()
            .trim_matches(|c: char| is_terminal_punct(c) || c.is_whitespace())
            .to_lowercase(),
    }
}

/// True iff the prediction matches any gold candidate.
pub fn exact_match<S: AsRef<str>>(prediction: &str, gold: &[S], mode: Normalization) -> bool {
    let p = normalize(prediction, mode);
    gold.iter().any(|g| normalize(g.as_ref(), mode) == p)
}

/// Maps a dataset label onto the answer word the model is asked to produce.
pub fn remap_labels(task: &str, label: &str) -> Result<&'static str> {
    let unknown = || Error::UnknownLabel {
        task: task.to_string(),
        label: label.to_string(),
    };
    let l = label.trim().to_lowercase();
    match task {
        "xvnli" => match l.as_str() {
            "entailment" => Ok("yes"),
            "contradiction" => Ok("no"),
            "neutral" => Ok("maybe"),
            _ => Err(unknown()),
        },
        "marvl" => match l.as_str() {
            "true" => Ok("yes"),
            "false" => Ok("no"),
            _ => Err(unknown()),
        },
        _ => Err(unknown()),
    }
}
