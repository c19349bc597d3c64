//! Turns an English task item into a rendered example in its assigned
//! language.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use rand::seq::IndexedRandom;
use rand::Rng;

use super::languages::language_name;
use super::mt::MtClient;
use super::records::DerivedItem;
use super::templates::{self, fill};
use super::{Dataset, InstructionExample, TaskKind};
use crate::error::{Error, Result};

struct Tr<'a> {
    mt: &'a dyn MtClient,
    lang: &'a str,
}

impl Tr<'_> {
    fn text(&self, text: &str) -> Result<String> {
        if self.lang == "en" {
            return Ok(text.to_string());
        }
        let mut out = self.mt.translate(&[text.to_string()], "en", self.lang)?;
        if out.len() != 1 {
            return Err(Error::Translation(format!(
                "expected one translation, got {}",
                out.len()
            )));
        }
        Ok(out.remove(0))
    }
}

fn need<'a>(field: &'a Option<String>, name: &str, item: &DerivedItem) -> Result<&'a str> {
    field.as_deref().ok_or_else(|| {
        Error::InvalidInput(format!(
            "{} item from {} record {} lacks a {name}",
            item.task, item.dataset, item.source.record
        ))
    })
}

fn pick<'t, R: Rng + ?Sized>(pool: &[&'t str], rng: &mut R) -> &'t str {
    pool.choose(rng).expect("non-empty pool")
}

/// Renders `item` in `language`. Questions, captions, rationales and dialog
/// answers are translated; short VQA answers never are. Caption and detail
/// instructions may themselves be translated; all other templates stay in
/// English and name the language through `$LANGUAGE`.
pub fn localize<R: Rng + ?Sized>(
    item: &DerivedItem,
    language: &str,
    mt: &dyn MtClient,
    rng: &mut R,
) -> Result<InstructionExample> {
    if language != "en" && !mt.supported_languages().contains(language) {
        return Err(Error::UnsupportedLanguage(language.to_string()));
    }
    let tr = Tr { mt, lang: language };
    let name = language_name(language);
    let mut slots: BTreeMap<&str, &str> = BTreeMap::new();
    slots.insert("LANGUAGE", name);
    let (prompt, target) = match item.task {
        TaskKind::Caption => {
            let caption = need(&item.caption, "caption", item)?;
            let k = rng.random_range(0..templates::CAPTION_WITH_LANGUAGE.len() + templates::CAPTION_TRANSLATABLE.len());
            let prompt = match templates::CAPTION_WITH_LANGUAGE.get(k) {
                Some(t) => fill(t, &slots)?,
                None => tr.text(templates::CAPTION_TRANSLATABLE[k - templates::CAPTION_WITH_LANGUAGE.len()])?,
            };
            (prompt, tr.text(caption)?)
        }
        TaskKind::CaptionDetail => {
            let caption = need(&item.caption, "caption", item)?;
            let prompt = tr.text(pick(&templates::DETAIL_TRANSLATABLE, rng))?;
            (prompt, tr.text(caption)?)
        }
        TaskKind::Vqa if item.dataset == Dataset::LlavaConv => {
            let q = need(&item.question, "question", item)?;
            let a = need(&item.answer, "answer", item)?;
            (tr.text(q)?, tr.text(a)?)
        }
        TaskKind::Vqa => {
            let q = tr.text(need(&item.question, "question", item)?)?;
            let a = need(&item.answer, "answer", item)?;
            slots.insert("QUESTION", &q);
            (fill(pick(&templates::VQA, rng), &slots)?, a.to_string())
        }
        TaskKind::Vqg => {
            let q = need(&item.question, "question", item)?;
            let a = need(&item.answer, "answer", item)?;
            slots.insert("ANSWER", a);
            (fill(pick(&templates::VQG, rng), &slots)?, tr.text(q)?)
        }
        TaskKind::VqaRationale => {
            let q = tr.text(need(&item.question, "question", item)?)?;
            let a = need(&item.answer, "answer", item)?;
            let r = tr.text(need(&item.rationale, "rationale", item)?)?;
            slots.insert("QUESTION", &q);
            slots.insert("ANSWER", a);
            slots.insert("RATIONAL", &r);
            let prompt = fill(pick(&templates::RATIONALE_INSTRUCTION, rng), &slots)?;
            let target = fill(pick(&templates::RATIONALE_LABEL, rng), &slots)?;
            (prompt, target)
        }
        TaskKind::RationaleGen => {
            let q = tr.text(need(&item.question, "question", item)?)?;
            let a = need(&item.answer, "answer", item)?;
            let r = need(&item.rationale, "rationale", item)?;
            slots.insert("QUESTION", &q);
            slots.insert("ANSWER", a);
            (fill(pick(&templates::RATIONALE_GENERATION, rng), &slots)?, tr.text(r)?)
        }
    };
    Ok(InstructionExample {
        task: item.task,
        language: language.to_string(),
        prompt,
        target,
        image_ids: item.image_ids.clone(),
        source: item.source.clone(),
    })
}

/// Records the texts a localization pass would send, returning them
/// untranslated. Used to batch all requests per language up front.
pub(crate) struct Collector {
    pub languages: BTreeSet<String>,
    pub wanted: Mutex<BTreeMap<String, BTreeSet<String>>>,
}

impl Collector {
    pub fn new(languages: BTreeSet<String>) -> Self {
        Self {
            languages,
            wanted: Mutex::new(BTreeMap::new()),
        }
    }
}

impl MtClient for Collector {
    fn translate(&self, texts: &[String], _src: &str, tgt: &str) -> Result<Vec<String>> {
        self.wanted
            .lock()
            .expect("collector lock")
            .entry(tgt.to_string())
            .or_default()
            .extend(texts.iter().cloned());
        Ok(texts.to_vec())
    }

    fn supported_languages(&self) -> BTreeSet<String> {
        self.languages.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::mt::{MockMt, SpyMt};
    use crate::forge::records::{derive_task_examples, parse_line};
    use crate::forge::templates::has_placeholder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn items(dataset: Dataset, line: &str) -> Vec<DerivedItem> {
        derive_task_examples(&parse_line(dataset, line).unwrap(), 0).unwrap()
    }

    #[test]
    fn vqa_answers_never_reach_mt() {
        let spy = SpyMt::new(MockMt);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for item in items(
            Dataset::Vqav2,
            r#"{"image_id":"i","question":"What animal is this?","answer":"zebra"}"#,
        ) {
            let ex = localize(&item, "de", &spy, &mut rng).unwrap();
            if item.task == TaskKind::Vqa {
                assert_eq!(ex.target, "zebra");
                assert!(ex.prompt.contains("What animal is this? [de]"));
            } else {
                assert!(ex.prompt.contains("zebra") && ex.prompt.contains("German"));
                assert_eq!(ex.target, "What animal is this? [de]");
            }
        }
        let seen = spy.seen_texts();
        assert!(!seen.is_empty());
        assert!(seen.iter().all(|t| !t.contains("zebra")), "{seen:?}");
    }

    #[test]
    fn english_caption_makes_no_calls() {
        let spy = SpyMt::new(MockMt);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let item = &items(Dataset::Mscoco, r#"{"image_id":"i","caption":"a dog"}"#)[0];
        let ex = localize(item, "en", &spy, &mut rng).unwrap();
        assert_eq!(ex.target, "a dog");
        assert!(spy.calls().is_empty());
    }

    #[test]
    fn french_caption_uses_localized_pool() {
        let mut allowed: BTreeSet<String> = templates::CAPTION_WITH_LANGUAGE
            .iter()
            .map(|t| t.replace("$LANGUAGE", "French"))
            .collect();
        allowed.extend(templates::CAPTION_TRANSLATABLE.iter().map(|t| MockMt::tag(t, "fr")));
        let item = &items(Dataset::Mscoco, r#"{"image_id":"i","caption":"caption"}"#)[0];
        let mut seen = BTreeSet::new();
        for seed in 0..60 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ex = localize(item, "fr", &MockMt, &mut rng).unwrap();
            assert_eq!(ex.target, "caption [fr]");
            assert!(allowed.contains(&ex.prompt), "{}", ex.prompt);
            seen.insert(ex.prompt);
        }
        assert!(seen.iter().any(|p| p.ends_with("[fr]")));
        assert!(seen.iter().any(|p| p.contains("French")));
    }

    #[test]
    fn dialog_answers_are_translated() {
        let spy = SpyMt::new(MockMt);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let item = &items(
            Dataset::LlavaConv,
            r#"{"image_id":"i","turns":[{"question":"What is on the table?","answer":"A bowl of fruit."}]}"#,
        )[0];
        let ex = localize(item, "sw", &spy, &mut rng).unwrap();
        assert_eq!(ex.prompt, "What is on the table? [sw]");
        assert_eq!(ex.target, "A bowl of fruit. [sw]");
    }

    #[test]
    fn rationale_items_render_without_placeholders() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for item in items(
            Dataset::Aokvqa,
            r#"{"image_id":"i","question":"Why wet?","answer":"rain","rationales":["it rained","clouds","puddles"]}"#,
        ) {
            let ex = localize(&item, "en", &MockMt, &mut rng).unwrap();
            assert!(!has_placeholder(&ex.prompt) && !has_placeholder(&ex.target));
            assert!(ex.prompt.contains("rain") || item.task == TaskKind::VqaRationale);
        }
    }

    #[test]
    fn unsupported_language_names_the_code() {
        let item = &items(Dataset::Mscoco, r#"{"image_id":"i","caption":"c"}"#)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = localize(item, "tlh", &MockMt, &mut rng).unwrap_err();
        assert!(err.to_string().contains("tlh"));
    }
}
