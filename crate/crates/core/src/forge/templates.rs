//! Instruction templates for training and evaluation prompts.
//!
//! Placeholders are `$NAME` tokens in upper case. The literal `{}` in one
//! rationale template stands for the question.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;

use super::TaskKind;
use crate::error::{Error, Result};

/// Caption templates naming the output language.
pub const CAPTION_WITH_LANGUAGE: [&str; 6] = [
    "Caption the image in $LANGUAGE.",
    "Short $LANGUAGE image caption:",
    "Image caption (in $LANGUAGE):",
    "Briefly describe the image in $LANGUAGE.",
    "Write a short $LANGUAGE image description.",
    "Summarize the image in $LANGUAGE.",
];

/// Caption templates without placeholders; these are machine translated into
/// the example language.
pub const CAPTION_TRANSLATABLE: [&str; 5] = [
    "Caption the image.",
    "Short image caption:",
    "Briefly describe the image.",
    "Write a short image description.",
    "Summarize the image.",
];

pub const VQA: [&str; 5] = [
    "$QUESTION. Short English answer:",
    "Question: $QUESTION. Brief answer (in English):",
    "Give a short answer in English to the following question. $QUESTION",
    "Answer the provided question in English with three words or less. $QUESTION",
    "What is the English answer to this question? $QUESTION",
];

pub const VQG: [&str; 3] = [
    "Given the image, generate a question in $LANGUAGE whose answer is: $ANSWER. Question:",
    "Based on the image, create a question (in $LANGUAGE) for which the answer is \"$ANSWER\".",
    "From the image provided, come up with a $LANGUAGE question that leads to the reply: $ANSWER. Question:",
];

pub const RATIONALE_INSTRUCTION: [&str; 3] = [
    "Reason the answer to the following question. $QUESTION",
    "Use reasoning to come to an answer for this question. $QUESTION",
    "Think step-by-step to answer this question. $QUESTION",
];

pub const RATIONALE_LABEL: [&str; 3] = [
    "$ANSWER. So the answer is $RATIONAL",
    "$ANSWER so  $RATIONAL",
    "$RATIONAL. This means the answer is  $ANSWER",
];

pub const RATIONALE_GENERATION: [&str; 5] = [
    "Question: $QUESTION Answer: $ANSWER. Explanation:",
    "Question: {}: Answer: $ANSWER. The reason is because",
    "The answer to the question \"$QUESTION\" is \"$ANSWER\". Why?",
    "Why is the answer to the question \"$QUESTION\"  \"$ANSWER\"?",
    "Explain why the answer to the question \"$QUESTION\" is \"$ANSWER\"",
];

/// Detailed-description instructions in the style of the LLaVA detail
/// subset. Translated like the caption templates.
pub const DETAIL_TRANSLATABLE: [&str; 5] = [
    "Describe the following image in detail.",
    "Provide a detailed description of the given image.",
    "Give an elaborate explanation of the image you see.",
    "Share a comprehensive rundown of the presented image.",
    "Offer a thorough analysis of the image.",
];

pub const EVAL_CAPTION: &str = "Caption in $LANGUAGE:";
pub const EVAL_VQA: &str = "Question: $QUESTION Short answer in $LANGUAGE:";
pub const EVAL_XVNLI: &str = "Is it guaranteed true that \"$HYPOTHESIS\"? Yes, no, or maybe? Answer in English:";
pub const EVAL_MARVL: &str =
    "Based on the two images, is it correct to say \"$STATEMENT\"? Yes or no?  Answer in English:";

/// Every template with the slots it needs, for coverage checks.
pub fn all_templates() -> Vec<&'static str> {
    let mut all = Vec::new();
    all.extend(CAPTION_WITH_LANGUAGE);
    all.extend(CAPTION_TRANSLATABLE);
    all.extend(VQA);
    all.extend(VQG);
    all.extend(RATIONALE_INSTRUCTION);
    all.extend(RATIONALE_LABEL);
    all.extend(RATIONALE_GENERATION);
    all.extend(DETAIL_TRANSLATABLE);
    all.extend([EVAL_CAPTION, EVAL_VQA, EVAL_XVNLI, EVAL_MARVL]);
    all
}

enum Piece<'t> {
    Text(&'t str),
    Slot(&'t str),
}

fn parse(template: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = template;
    while !rest.is_empty() {
        let dollar = rest.find('$');
        let brace = rest.find("{}");
        let next = match (dollar, brace) {
            (Some(d), Some(b)) => Some(d.min(b)),
            (d, b) => d.or(b),
        };
        let Some(at) = next else {
            out.push(Piece::Text(rest));
            break;
        };
        if at > 0 {
            out.push(Piece::Text(&rest[..at]));
        }
        rest = &rest[at..];
        if rest.starts_with("{}") {
            out.push(Piece::Slot("QUESTION"));
            rest = &rest[2..];
            continue;
        }
        let len = rest[1..]
            .bytes()
            .take_while(|b| b.is_ascii_uppercase() || *b == b'_')
            .count();
        if len == 0 {
            out.push(Piece::Text("$"));
            rest = &rest[1..];
        } else {
            out.push(Piece::Slot(&rest[1..1 + len]));
            rest = &rest[1 + len..];
        }
    }
    out
}

/// Names of the placeholders in `template`, in order of appearance.
pub fn slots_of(template: &str) -> Vec<&str> {
    parse(template)
        .into_iter()
        .filter_map(|p| match p {
            Piece::Slot(s) => Some(s),
            Piece::Text(_) => None,
        })
        .collect()
}

/// Substitutes every placeholder. Slot values are inserted verbatim and never
/// re-scanned.
pub fn fill(template: &str, slots: &BTreeMap<&str, &str>) -> Result<String> {
    let mut out = String::with_capacity(template.len() + 32);
    for piece in parse(template) {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(name) => match slots.get(name) {
                Some(v) => out.push_str(v),
                None => {
                    return Err(Error::MissingSlot {
                        template: template.to_string(),
                        slot: name.to_string(),
                    })
                }
            },
        }
    }
    Ok(out)
}

/// English template pool for a task.
pub fn pool(task: TaskKind) -> Vec<&'static str> {
    match task {
        TaskKind::Caption => CAPTION_WITH_LANGUAGE
            .iter()
            .chain(CAPTION_TRANSLATABLE.iter())
            .copied()
            .collect(),
        TaskKind::CaptionDetail => DETAIL_TRANSLATABLE.to_vec(),
        TaskKind::Vqa => VQA.to_vec(),
        TaskKind::Vqg => VQG.to_vec(),
        TaskKind::VqaRationale => RATIONALE_INSTRUCTION.to_vec(),
        TaskKind::RationaleGen => RATIONALE_GENERATION.to_vec(),
    }
}

/// Picks one template uniformly from the task's pool and fills it.
pub fn render_template<R: Rng + ?Sized>(task: TaskKind, slots: &BTreeMap<&str, &str>, rng: &mut R) -> Result<String> {
    let pool = pool(task);
    let template = pool.choose(rng).expect("non-empty pool");
    fill(template, slots)
}

pub fn render_from<R: Rng + ?Sized>(templates: &[&str], slots: &BTreeMap<&str, &str>, rng: &mut R) -> Result<String> {
    let template = templates
        .choose(rng)
        .ok_or_else(|| Error::InvalidInput("empty template pool".into()))?;
    fill(template, slots)
}

pub fn has_placeholder(text: &str) -> bool {
    [
        "$LANGUAGE",
        "$QUESTION",
        "$ANSWER",
        "$RATIONAL",
        "$HYPOTHESIS",
        "$STATEMENT",
    ]
    .iter()
    .any(|p| text.contains(p))
}
