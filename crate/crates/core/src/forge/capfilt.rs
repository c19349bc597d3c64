//! Noun-phrase based subsampling of web captions: every phrase seen at least
//! `min_occurrences` times contributes at most `max_per_phrase` captions.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Plug-in point for phrase extraction.
pub trait NounPhraseExtractor: Send + Sync {
    fn noun_phrases(&self, caption: &str) -> Vec<String>;
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "on", "in", "at", "to", "with", "and", "or", "for", "from", "by", "is", "are", "was",
    "were", "be", "been", "it", "its", "this", "that", "these", "those", "there", "their", "his", "her", "he", "she",
    "they", "we", "you", "i", "as", "into", "onto", "over", "under", "near", "next", "up", "down", "out", "off",
    "some", "while", "has", "have", "very", "other", "each", "two", "three", "four", "several", "many", "who", "which",
    "behind", "between", "around", "through", "during", "above", "below", "across", "along", "against",
];

/// Words that can sit inside a phrase but never end one.
const NON_NOUN: &[&str] = &[
    "sits", "sit", "stands", "stand", "holds", "hold", "looks", "look", "walks", "walk", "runs", "run", "plays",
    "play", "rides", "ride", "eats", "eat", "lies", "lie", "flies", "fly", "big", "small", "large", "little", "old",
    "young", "red", "green", "blue", "yellow", "white", "black", "brown", "purple", "orange", "pink", "gray", "grey",
    "wooden", "tall", "short", "left", "right", "top", "bottom", "new", "empty", "full", "open", "close", "closed",
];

/// Default extractor: maximal runs of non-stopword tokens, cut back to the
/// last noun-like token. `-ing`/`-ly` words and a small verb/adjective
/// lexicon are not noun-like.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicNounPhrases;

fn noun_like(w: &str) -> bool {
    !NON_NOUN.contains(&w)
        && !(w.len() > 4 && (w.ends_with("ing") || w.ends_with("ly")))
        && !w.chars().all(|c| c.is_ascii_digit())
}

impl NounPhraseExtractor for HeuristicNounPhrases {
    fn noun_phrases(&self, caption: &str) -> Vec<String> {
        let lower = caption.to_lowercase();
        let words: Vec<&str> = lower
            .split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '-'))
            .filter(|w| !w.is_empty())
            .collect();
        let mut out = BTreeSet::new();
        let mut run: Vec<&str> = Vec::new();
        let flush = |run: &mut Vec<&str>, out: &mut BTreeSet<String>| {
            while run.last().is_some_and(|w| !noun_like(w)) {
                run.pop();
            }
            if !run.is_empty() {
                out.insert(run.join(" "));
            }
            run.clear();
        };
        for w in words {
            if STOPWORDS.contains(&w) {
                flush(&mut run, &mut out);
            } else {
                run.push(w);
            }
        }
        flush(&mut run, &mut out);
        out.into_iter().collect()
    }
}

/// Indices of the retained captions, ascending.
pub fn sample_capfilt(
    captions: &[(String, String)],
    extractor: &dyn NounPhraseExtractor,
    max_per_phrase: usize,
    min_occurrences: usize,
    seed: u64,
) -> Vec<usize> {
    let mut by_phrase: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, (_, caption)) in captions.iter().enumerate() {
        for phrase in extractor.noun_phrases(caption) {
            by_phrase.entry(phrase).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = BTreeSet::new();
    for ids in by_phrase.values() {
        if ids.len() < min_occurrences {
            continue;
        }
        if ids.len() <= max_per_phrase {
            keep.extend(ids.iter().copied());
        } else {
            keep.extend(sample(&mut rng, ids.len(), max_per_phrase).into_iter().map(|k| ids[k]));
        }
    }
    keep.into_iter().collect()
}
