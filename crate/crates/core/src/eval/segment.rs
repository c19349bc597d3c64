//! Text segmentation for n-gram metrics.

/// Splits text into metric tokens for a given language.
pub trait Segmenter: Send + Sync {
    fn segment(&self, text: &str, language: &str) -> Vec<String>;
}

/// Languages written without spaces between words.
pub const UNSPACED_LANGUAGES: [&str; 3] = ["zh", "ja", "th"];

/// Whitespace tokens, or one token per character for zh/ja/th.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultSegmenter;

impl Segmenter for DefaultSegmenter {
    fn segment(&self, text: &str, language: &str) -> Vec<String> {
        if UNSPACED_LANGUAGES.contains(&language) {
            text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect()
        } else {
            text.split_whitespace().map(str::to_string).collect()
        }
    }
}
