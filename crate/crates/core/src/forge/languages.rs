//! Language inventory and per-example language assignment.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 101 languages of the multilingual C4 corpus.
pub const MC4_LANGUAGES: [(&str, &str); 101] = [
    ("af", "Afrikaans"),
    ("am", "Amharic"),
    ("ar", "Arabic"),
    ("az", "Azerbaijani"),
    ("be", "Belarusian"),
    ("bg", "Bulgarian"),
    ("bn", "Bengali"),
    ("ca", "Catalan"),
    ("ceb", "Cebuano"),
    ("co", "Corsican"),
    ("cs", "Czech"),
    ("cy", "Welsh"),
    ("da", "Danish"),
    ("de", "German"),
    ("el", "Greek"),
    ("en", "English"),
    ("eo", "Esperanto"),
    ("es", "Spanish"),
    ("et", "Estonian"),
    ("eu", "Basque"),
    ("fa", "Persian"),
    ("fi", "Finnish"),
    ("fil", "Filipino"),
    ("fr", "French"),
    ("fy", "Western Frisian"),
    ("ga", "Irish"),
    ("gd", "Scottish Gaelic"),
    ("gl", "Galician"),
    ("gu", "Gujarati"),
    ("ha", "Hausa"),
    ("haw", "Hawaiian"),
    ("hi", "Hindi"),
    ("hmn", "Hmong"),
    ("ht", "Haitian Creole"),
    ("hu", "Hungarian"),
    ("hy", "Armenian"),
    ("id", "Indonesian"),
    ("ig", "Igbo"),
    ("is", "Icelandic"),
    ("it", "Italian"),
    ("iw", "Hebrew"),
    ("ja", "Japanese"),
    ("jv", "Javanese"),
    ("ka", "Georgian"),
    ("kk", "Kazakh"),
    ("km", "Khmer"),
    ("kn", "Kannada"),
    ("ko", "Korean"),
    ("ku", "Kurdish"),
    ("ky", "Kyrgyz"),
    ("la", "Latin"),
    ("lb", "Luxembourgish"),
    ("lo", "Lao"),
    ("lt", "Lithuanian"),
    ("lv", "Latvian"),
    ("mg", "Malagasy"),
    ("mi", "Maori"),
    ("mk", "Macedonian"),
    ("ml", "Malayalam"),
    ("mn", "Mongolian"),
    ("mr", "Marathi"),
    ("ms", "Malay"),
    ("mt", "Maltese"),
    ("my", "Burmese"),
    ("ne", "Nepali"),
    ("nl", "Dutch"),
    ("no", "Norwegian"),
    ("ny", "Chichewa"),
    ("pa", "Punjabi"),
    ("pl", "Polish"),
    ("ps", "Pashto"),
    ("pt", "Portuguese"),
    ("ro", "Romanian"),
    ("ru", "Russian"),
    ("sd", "Sindhi"),
    ("si", "Sinhala"),
    ("sk", "Slovak"),
    ("sl", "Slovenian"),
    ("sm", "Samoan"),
    ("sn", "Shona"),
    ("so", "Somali"),
    ("sq", "Albanian"),
    ("sr", "Serbian"),
    ("st", "Southern Sotho"),
    ("su", "Sundanese"),
    ("sv", "Swedish"),
    ("sw", "Swahili"),
    ("ta", "Tamil"),
    ("te", "Telugu"),
    ("tg", "Tajik"),
    ("th", "Thai"),
    ("tr", "Turkish"),
    ("uk", "Ukrainian"),
    ("ur", "Urdu"),
    ("uz", "Uzbek"),
    ("vi", "Vietnamese"),
    ("xh", "Xhosa"),
    ("yi", "Yiddish"),
    ("yo", "Yoruba"),
    ("zh", "Chinese"),
    ("zu", "Zulu"),
];

/// Dropped because the translation model does not cover them.
pub const EXCLUDED: [&str; 5] = ["fy", "haw", "hmn", "la", "co"];

/// The 96 mix languages: English plus 95 translation targets.
pub fn mix_languages() -> Vec<&'static str> {
    MC4_LANGUAGES
        .iter()
        .map(|(c, _)| *c)
        .filter(|c| !EXCLUDED.contains(c))
        .collect()
}

/// English name of a language code, used in `$LANGUAGE` slots. Unknown codes
/// fall back to the code itself.
pub fn language_name(code: &str) -> &str {
    MC4_LANGUAGES
        .iter()
        .find(|(c, _)| *c == code)
        .map(|(_, n)| *n)
        .unwrap_or(code)
}

/// Probability of each language being picked for an example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, f64>", into = "BTreeMap<String, f64>")]
pub struct LanguageDistribution {
    entries: BTreeMap<String, f64>,
}

impl LanguageDistribution {
    pub fn new(entries: BTreeMap<String, f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("empty language distribution".into()));
        }
        let allowed = mix_languages();
        let mut sum = 0.0;
        for (code, &p) in &entries {
            if !allowed.contains(&code.as_str()) {
                return Err(Error::UnsupportedLanguage(code.clone()));
            }
            if !(p >= 0.0 && p.is_finite()) {
                return Err(Error::Config(format!("probability of `{code}` is {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "language probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self { entries })
    }

    pub fn from_pairs(pairs: &[(&str, f64)]) -> Result<Self> {
        Self::new(pairs.iter().map(|(c, p)| (c.to_string(), *p)).collect())
    }

    /// Rescales non-negative weights to sum to one.
    pub fn from_weights(pairs: &[(&str, f64)]) -> Result<Self> {
        let total: f64 = pairs.iter().map(|(_, w)| w).sum();
        if total <= 0.0 {
            return Err(Error::Config("language weights sum to zero".into()));
        }
        Self::new(pairs.iter().map(|(c, w)| (c.to_string(), w / total)).collect())
    }

    pub fn english_only() -> Self {
        Self::from_pairs(&[("en", 1.0)]).expect("valid")
    }

    pub fn entries(&self) -> &BTreeMap<String, f64> {
        &self.entries
    }

    pub fn probability(&self, code: &str) -> f64 {
        self.entries.get(code).copied().unwrap_or(0.0)
    }
}

impl TryFrom<BTreeMap<String, f64>> for LanguageDistribution {
    type Error = Error;

    fn try_from(entries: BTreeMap<String, f64>) -> Result<Self> {
        Self::new(entries)
    }
}

impl From<LanguageDistribution> for BTreeMap<String, f64> {
    fn from(d: LanguageDistribution) -> Self {
        d.entries
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignMode {
    /// Every example draws its language independently.
    #[default]
    Iid,
    /// Largest-remainder quotas, then a seeded shuffle.
    Quota,
}

/// One language per example. `forced_english[i]` pins example `i` to `en`
/// without changing what the other examples receive.
pub fn assign_languages(
    n: usize,
    forced_english: &[bool],
    dist: &LanguageDistribution,
    mode: AssignMode,
    seed: u64,
) -> Result<Vec<String>> {
    if dist.entries.is_empty() {
        return Err(Error::Config("empty language distribution".into()));
    }
    let codes: Vec<&String> = dist.entries.keys().collect();
    let weights: Vec<f64> = dist.entries.values().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<String> = match mode {
        AssignMode::Iid => {
            let index =
                WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("language distribution: {e}")))?;
            (0..n).map(|_| codes[index.sample(&mut rng)].clone()).collect()
        }
        AssignMode::Quota => {
            let raw: Vec<f64> = weights.iter().map(|p| p * n as f64).collect();
            let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
            let mut left = n - counts.iter().sum::<usize>();
            let mut order: Vec<usize> = (0..codes.len()).collect();
            order.sort_by(|&a, &b| {
                let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
                fb.total_cmp(&fa).then(a.cmp(&b))
            });
            for &i in order.iter().cycle() {
                if left == 0 {
                    break;
                }
                counts[i] += 1;
                left -= 1;
            }
            let mut v: Vec<String> = codes
                .iter()
                .zip(&counts)
                .flat_map(|(c, &k)| std::iter::repeat_n((*c).clone(), k))
                .collect();
            v.shuffle(&mut rng);
            v
        }
    };
    for (lang, &forced) in out.iter_mut().zip(forced_english) {
        if forced {
            *lang = "en".to_string();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inventory_sizes() {
        assert_eq!(MC4_LANGUAGES.len(), 101);
        let codes: std::collections::BTreeSet<_> = MC4_LANGUAGES.iter().map(|(c, _)| c).collect();
        assert_eq!(codes.len(), 101);
        assert_eq!(mix_languages().len(), 96);
        assert!(mix_languages().contains(&"en"));
        assert!(!mix_languages().contains(&"la"));
        assert_eq!(language_name("de"), "German");
    }

    #[test]
    fn distribution_validation() {
        assert!(LanguageDistribution::from_pairs(&[("en", 0.5), ("de", 0.4)]).is_err());
        assert!(LanguageDistribution::from_pairs(&[("en", 1.2), ("de", -0.2)]).is_err());
        assert!(matches!(
            LanguageDistribution::from_pairs(&[("la", 1.0)]),
            Err(Error::UnsupportedLanguage(_))
        ));
        assert!(LanguageDistribution::new(BTreeMap::new()).is_err());
        let d = LanguageDistribution::from_weights(&[("en", 3.0), ("de", 1.0)]).unwrap();
        assert_eq!(d.probability("de"), 0.25);
    }

    #[test]
    fn german_share_within_three_sigma() {
        let d = LanguageDistribution::from_pairs(&[("de", 0.06), ("en", 0.5), ("fr", 0.44)]).unwrap();
        let langs = assign_languages(10_000, &[], &d, AssignMode::Iid, 17).unwrap();
        let de = langs.iter().filter(|l| *l == "de").count() as f64;
        let sigma = (10_000.0f64 * 0.06 * 0.94).sqrt();
        assert!((de - 600.0).abs() <= 3.0 * sigma, "{de}");
    }

    #[test]
    fn english_only_and_determinism() {
        let d = LanguageDistribution::english_only();
        let v = assign_languages(50, &[], &d, AssignMode::Iid, 3).unwrap();
        assert!(v.iter().all(|l| l == "en"));
        let d = LanguageDistribution::from_pairs(&[("de", 0.3), ("en", 0.7)]).unwrap();
        let a = assign_languages(200, &[], &d, AssignMode::Iid, 9).unwrap();
        let b = assign_languages(200, &[], &d, AssignMode::Iid, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quota_mode_is_exact() {
        let d = LanguageDistribution::from_pairs(&[("de", 0.25), ("en", 0.5), ("ja", 0.25)]).unwrap();
        let v = assign_languages(100, &[], &d, AssignMode::Quota, 1).unwrap();
        assert_eq!(v.iter().filter(|l| *l == "de").count(), 25);
        assert_eq!(v.iter().filter(|l| *l == "en").count(), 50);
    }

    #[test]
    fn forced_english_only_touches_flagged_items() {
        let d = LanguageDistribution::from_pairs(&[("de", 1.0)]).unwrap();
        let v = assign_languages(3, &[false, true, false], &d, AssignMode::Iid, 0).unwrap();
        assert_eq!(v, vec!["de", "en", "de"]);
    }
}
