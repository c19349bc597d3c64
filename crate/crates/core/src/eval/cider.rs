//! CIDEr-D over a corpus of candidate captions.
//!
//! Each caption becomes TF-IDF vectors of its 1- to 4-grams, with document
//! frequencies counted over the reference sets of the corpus. Per image and
//! reference, the n-gram similarity is `Σ min(c, r)·r / (‖c‖‖r‖)` times a
//! gaussian penalty on the length difference (σ = 6); these are averaged over
//! n and references and scaled by 10.

use std::collections::{BTreeMap, BTreeSet};

use super::segment::Segmenter;
use crate::error::{Error, Result};

pub const MAX_N: usize = 4;
pub const SIGMA: f64 = 6.0;

type Ngram = Vec<String>;

fn ngram_counts(tokens: &[String]) -> BTreeMap<Ngram, f64> {
    let mut counts = BTreeMap::new();
    for n in 1..=MAX_N {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    counts
}

struct Vectors {
    by_order: [BTreeMap<Ngram, f64>; MAX_N],
    norms: [f64; MAX_N],
    len: usize,
}

fn tfidf(tokens: &[String], df: &BTreeMap<Ngram, f64>, log_n: f64) -> Vectors {
    let mut by_order: [BTreeMap<Ngram, f64>; MAX_N] = Default::default();
    let mut norms = [0.0; MAX_N];
    for (g, tf) in ngram_counts(tokens) {
        let idf = log_n - df.get(&g).copied().unwrap_or(0.0).max(1.0).ln();
        let w = tf * idf;
        let n = g.len() - 1;
        norms[n] += w * w;
        by_order[n].insert(g, w);
    }
    Vectors {
        by_order,
        norms: norms.map(f64::sqrt),
        len: tokens.len(),
    }
}

fn similarity(c: &Vectors, r: &Vectors) -> f64 {
    let delta = c.len as f64 - r.len as f64;
    let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..MAX_N {
        let mut dot = 0.0;
        for (g, wc) in &c.by_order[n] {
            if let Some(wr) = r.by_order[n].get(g) {
                dot += wc.min(*wr) * wr;
            }
        }
        if c.norms[n] != 0.0 && r.norms[n] != 0.0 {
            dot /= c.norms[n] * r.norms[n];
        }
        total += dot * penalty;
    }
    total / MAX_N as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CiderScore {
    pub mean: f64,
    pub per_image: BTreeMap<String, f64>,
}

/// Lower-cases and blanks out ASCII punctuation before segmentation.
pub fn prepare_caption(text: &str) -> String {
    text.chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .to_lowercase()
}

/// Corpus CIDEr-D of `candidates` against `references`, keyed by image.
pub fn cider(
    candidates: &BTreeMap<String, String>,
    references: &BTreeMap<String, Vec<String>>,
    segmenter: &dyn Segmenter,
    language: &str,
) -> Result<CiderScore> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("CIDEr needs at least one candidate".into()));
    }
    let seg = |t: &str| segmenter.segment(&prepare_caption(t), language);
    let mut refs_tok: Vec<(&String, Vec<Vec<String>>)> = Vec::with_capacity(candidates.len());
    for id in candidates.keys() {
        let refs = references
            .get(id)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| Error::InvalidInput(format!("image `{id}` has no reference captions")))?;
        refs_tok.push((id, refs.iter().map(|r| seg(r)).collect()));
    }
    let mut df: BTreeMap<Ngram, f64> = BTreeMap::new();
    for (_, refs) in &refs_tok {
        let mut seen: BTreeSet<Ngram> = Default::default();
        for r in refs {
            seen.extend(ngram_counts(r).into_keys());
        }
        for g in seen {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let log_n = (candidates.len() as f64).ln();
    let mut per_image = BTreeMap::new();
    for ((id, cand), (_, refs)) in candidates.iter().zip(&refs_tok) {
        let c = tfidf(&seg(cand), &df, log_n);
        let sum: f64 = refs.iter().map(|r| similarity(&c, &tfidf(r, &df, log_n))).sum();
        per_image.insert(id.clone(), 10.0 * sum / refs.len() as f64);
    }
    let mean = per_image.values().sum::<f64>() / per_image.len() as f64;
    Ok(CiderScore { mean, per_image })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::segment::DefaultSegmenter;

    fn corpus(pairs: &[(&str, &str, &[&str])]) -> (BTreeMap<String, String>, BTreeMap<String, Vec<String>>) {
        let c = pairs.iter().map(|(id, c, _)| (id.to_string(), c.to_string())).collect();
        let r = pairs
            .iter()
            .map(|(id, _, r)| (id.to_string(), r.iter().map(|s| s.to_string()).collect()))
            .collect();
        (c, r)
    }

    #[test]
    fn identical_disjoint_pair_scores_ten() {
        let (c, r) = corpus(&[
            ("a", "a red dog sits on grass", &["a red dog sits on grass"]),
            ("b", "two blue cats near water", &["two blue cats near water"]),
        ]);
        let s = cider(&c, &r, &DefaultSegmenter, "en").unwrap();
        assert!((s.mean - 10.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_ngrams_score_zero() {
        let (c, r) = corpus(&[
            ("a", "zebra zebra zebra", &["a red dog sits on grass"]),
            ("b", "two blue cats near water", &["two blue cats near water"]),
        ]);
        let s = cider(&c, &r, &DefaultSegmenter, "en").unwrap();
        assert_eq!(s.per_image["a"], 0.0);
        assert!((s.mean - 5.0).abs() < 1e-12);
    }

    #[test]
    fn missing_reference_is_an_error() {
        let (c, mut r) = corpus(&[("a", "x y", &["x y"]), ("b", "z", &["z"])]);
        r.remove("b");
        assert!(cider(&c, &r, &DefaultSegmenter, "en").is_err());
    }

    #[test]
    fn punctuation_and_case_are_ignored() {
        assert_eq!(prepare_caption("A Dog, running."), "a dog  running ");
    }
}
