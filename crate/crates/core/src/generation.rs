//! Beam-search decoding with length and repetition penalties.
//!
//! A hypothesis `y` (its EOS included when it has one) scores
//! `Σ log p / |y|^α`. Each step expands every live beam over the whole
//! vocabulary and keeps the `beam_width` candidates with the highest
//! cumulative log-probability; candidates ending in EOS leave the beam and
//! still use up one of those slots. Decoding stops when no beam is live, when
//! `max_len` tokens have been generated, or when no live beam can still beat
//! the best finished hypothesis.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ByteTokenizer, ImageSource, LmInput, VisionLanguageModel, EOS};

/// Anything that yields next-token logits for a generated prefix.
pub trait StepModel: Sync {
    fn vocab_size(&self) -> usize;
    fn eos(&self) -> u32;
    fn next_logits(&self, generated: &[u32]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub beam_width: usize,
    /// Exponent α of the length normalization.
    pub length_penalty: f64,
    pub repetition_penalty: f64,
    pub max_len: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            beam_width: 5,
            length_penalty: 1.0,
            repetition_penalty: 1.0,
            max_len: 64,
        }
    }
}

impl GenConfig {
    /// Short answers: α = −1.
    pub fn classification() -> Self {
        Self {
            length_penalty: -1.0,
            max_len: 16,
            ..Self::default()
        }
    }

    pub fn open_ended() -> Self {
        Self {
            repetition_penalty: 1.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if !self.repetition_penalty.is_finite() || self.repetition_penalty < 1.0 {
            return Err(Error::Config(format!(
                "repetition_penalty must be a finite factor >= 1, got {}",
                self.repetition_penalty
            )));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::Config("length_penalty must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hypothesis {
    /// Generated ids, ending in EOS unless truncated.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub score: f64,
    /// `max_len` was reached before EOS.
    pub truncated: bool,
    /// Step at which the hypothesis was finalized.
    #[serde(skip)]
    pub completed_at: usize,
}

impl Hypothesis {
    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[u32] {
        if self.truncated {
            &self.tokens
        } else {
            &self.tokens[..self.tokens.len() - 1]
        }
    }
}

pub fn length_normalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    log_prob / (len as f64).powf(alpha)
}

/// Applies the repetition penalty to the logits of already generated tokens.
pub fn penalize(logits: &mut [f64], generated: &[u32], factor: f64) {
    if factor == 1.0 {
        return;
    }
    let seen: BTreeSet<u32> = generated.iter().copied().collect();
    for id in seen {
        if let Some(l) = logits.get_mut(id as usize) {
            *l = if *l > 0.0 { *l / factor } else { *l * factor };
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|l| l.is_nan()) {
        return Err(Error::InvalidInput("NaN in next-token logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|l| l - lse).collect())
}

fn step_log_probs(model: &dyn StepModel, generated: &[u32], cfg: &GenConfig) -> Result<Vec<f64>> {
    let mut logits = model.next_logits(generated)?;
    if logits.len() != model.vocab_size() {
        return Err(Error::Shape(format!(
            "model returned {} logits for a vocabulary of {}",
            logits.len(),
            model.vocab_size()
        )));
    }
    penalize(&mut logits, generated, cfg.repetition_penalty);
    log_softmax(&logits)
}

/// Highest cumulative log-prob first, then the lexicographically smaller
/// token sequence.
fn candidate_order(a: &(Vec<u32>, f64), b: &(Vec<u32>, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Best score first; ties go to lower token ids, then earlier completion.
fn hypothesis_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| a.completed_at.cmp(&b.completed_at))
}

/// Largest score any continuation of a live beam could still reach.
fn upper_bound(log_prob: f64, len: usize, max_len: usize, alpha: f64) -> f64 {
    if log_prob == 0.0 {
        return 0.0;
    }
    let best_len = if alpha > 0.0 { max_len } else { len + 1 };
    length_normalized(log_prob, best_len, alpha)
}

/// Every finalized hypothesis, best first.
pub fn beam_search_all(model: &dyn StepModel, cfg: &GenConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let eos = model.eos();
    let alpha = cfg.length_penalty;
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 1..=cfg.max_len {
        let mut candidates = Vec::with_capacity(live.len() * model.vocab_size());
        for (tokens, cum) in &live {
            let lp = step_log_probs(model, tokens, cfg)?;
            for (id, l) in lp.into_iter().enumerate() {
                let mut next = tokens.clone();
                next.push(id as u32);
                candidates.push((next, cum + l));
            }
        }
        candidates.sort_by(candidate_order);
        candidates.truncate(cfg.beam_width);
        live.clear();
        for (tokens, cum) in candidates {
            if tokens.last() == Some(&eos) {
                finished.push(Hypothesis {
                    score: length_normalized(cum, tokens.len(), alpha),
                    tokens,
                    log_prob: cum,
                    truncated: false,
                    completed_at: step,
                });
            } else {
                live.push((tokens, cum));
            }
        }
        if live.is_empty() {
            break;
        }
        if step == cfg.max_len {
            for (tokens, cum) in live.drain(..) {
                finished.push(Hypothesis {
                    score: length_normalized(cum, tokens.len(), alpha),
                    tokens,
                    log_prob: cum,
                    truncated: true,
                    completed_at: step,
                });
            }
            break;
        }
        let best = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let reachable = live
            .iter()
            .map(|(t, c)| upper_bound(*c, t.len(), cfg.max_len, alpha))
            .fold(f64::NEG_INFINITY, f64::max);
        if best > reachable {
            break;
        }
    }
    finished.sort_by(hypothesis_order);
    Ok(finished)
}

pub fn beam_search(model: &dyn StepModel, cfg: &GenConfig) -> Result<Hypothesis> {
    beam_search_all(model, cfg)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidInput("beam search produced no hypothesis".into()))
}

/// Argmax decoding; lower ids win ties.
pub fn greedy(model: &dyn StepModel, max_len: usize, alpha: f64) -> Result<Hypothesis> {
    let mut tokens = Vec::new();
    let mut cum = 0.0;
    let cfg = GenConfig {
        repetition_penalty: 1.0,
        ..GenConfig::default()
    };
    while tokens.len() < max_len {
        let lp = step_log_probs(model, &tokens, &cfg)?;
        let mut best = 0;
        for (i, l) in lp.iter().enumerate() {
            if *l > lp[best] {
                best = i;
            }
        }
        cum += lp[best];
        tokens.push(best as u32);
        if best as u32 == model.eos() {
            break;
        }
    }
    let truncated = tokens.last() != Some(&model.eos());
    Ok(Hypothesis {
        score: length_normalized(cum, tokens.len(), alpha),
        completed_at: tokens.len(),
        tokens,
        log_prob: cum,
        truncated,
    })
}

/// The vision-language model conditioned on one assembled input.
pub struct Conditioned<'m> {
    pub model: &'m VisionLanguageModel,
    pub input: LmInput,
}

impl StepModel for Conditioned<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn eos(&self) -> u32 {
        EOS
    }

    fn next_logits(&self, generated: &[u32]) -> Result<Vec<f64>> {
        self.model.next_token_logits(&self.input, generated)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRequest {
    pub example_id: String,
    pub prompt: String,
    pub language: String,
    pub image_ids: Vec<String>,
    pub gen_config: GenConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResponse {
    pub example_id: String,
    pub text: String,
    pub score: f64,
    pub truncated: bool,
}

pub fn decode(model: &VisionLanguageModel, images: &dyn ImageSource, req: &DecodeRequest) -> Result<DecodeResponse> {
    let patches = req
        .image_ids
        .iter()
        .map(|id| model.encode_image(&images.load(id)?))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = patches.iter().collect();
    let visual = model.visual_tokens(&refs)?;
    let tok = ByteTokenizer;
    let input = model.assemble_lm_input(&visual, &tok.encode(&req.prompt))?;
    let best = beam_search(&Conditioned { model, input }, &req.gen_config)?;
    Ok(DecodeResponse {
        example_id: req.example_id.clone(),
        text: tok.decode(best.content())?.trim().to_string(),
        score: best.score,
        truncated: best.truncated,
    })
}

/// Decodes requests in parallel; output order follows input order.
pub fn decode_all(
    model: &VisionLanguageModel,
    images: &dyn ImageSource,
    requests: &[DecodeRequest],
) -> Result<Vec<DecodeResponse>> {
    requests.par_iter().map(|r| decode(model, images, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Next-token probabilities chosen by a closure over the prefix.
    pub struct TableLm<F: Fn(&[u32]) -> Vec<f64> + Sync>(pub F);

    impl<F: Fn(&[u32]) -> Vec<f64> + Sync> StepModel for TableLm<F> {
        fn vocab_size(&self) -> usize {
            3
        }
        fn eos(&self) -> u32 {
            0
        }
        fn next_logits(&self, generated: &[u32]) -> Result<Vec<f64>> {
            Ok((self.0)(generated).into_iter().map(f64::ln).collect())
        }
    }

    #[test]
    fn scores_match_recomputation() {
        let lm = TableLm(|p: &[u32]| match p.len() {
            0 => vec![0.2, 0.5, 0.3],
            _ => vec![0.4, 0.3, 0.3],
        });
        let cfg = GenConfig {
            beam_width: 3,
            max_len: 4,
            ..Default::default()
        };
        for h in beam_search_all(&lm, &cfg).unwrap() {
            let mut cum = 0.0;
            for i in 0..h.tokens.len() {
                cum += lm.next_logits(&h.tokens[..i]).unwrap()[h.tokens[i] as usize];
            }
            assert!((h.log_prob - cum).abs() < 1e-12);
            assert!((h.score - cum / h.tokens.len() as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn repetition_penalty_signs() {
        let mut l = vec![2.0, -2.0, 1.0];
        penalize(&mut l, &[0, 1, 1], 2.0);
        assert_eq!(l, vec![1.0, -4.0, 1.0]);
    }

    #[test]
    fn repetition_penalty_changes_choice() {
        // Without a penalty the lower id wins every tie.
        let lm = TableLm(|_: &[u32]| vec![0.2, 0.4, 0.4]);
        let base = GenConfig {
            beam_width: 1,
            max_len: 3,
            ..Default::default()
        };
        assert_eq!(beam_search(&lm, &base).unwrap().tokens, vec![1, 1, 1]);
        let pen = GenConfig {
            repetition_penalty: 1.5,
            ..base
        };
        assert_eq!(beam_search(&lm, &pen).unwrap().tokens, vec![1, 2, 1]);
    }

    #[test]
    fn truncation_is_flagged() {
        let lm = TableLm(|_: &[u32]| vec![0.1, 0.6, 0.3]);
        let cfg = GenConfig {
            beam_width: 1,
            max_len: 2,
            ..Default::default()
        };
        let h = beam_search(&lm, &cfg).unwrap();
        assert!(h.truncated);
        assert_eq!(h.content(), &[1, 1]);
    }

    #[test]
    fn config_validation() {
        assert!(GenConfig {
            beam_width: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GenConfig {
            max_len: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GenConfig {
            repetition_penalty: 0.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(GenConfig::classification().length_penalty, -1.0);
    }
}
