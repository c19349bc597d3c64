//! Mix assembly: the end-to-end forge pipeline, exclusion filtering, the
//! seeded shuffle and the manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::capfilt::{sample_capfilt, HeuristicNounPhrases};
use super::languages::{assign_languages, AssignMode, LanguageDistribution};
use super::localize::{localize, Collector};
use super::mt::{CachingMt, MtClient};
use super::records::{derive_task_examples, read_records, DerivedItem, Payload};
use super::{Dataset, InstructionExample};
use crate::error::{Error, Result};
use crate::model::image::stable_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub dataset: Dataset,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapfiltConfig {
    pub max_per_phrase: usize,
    pub min_occurrences: usize,
}

impl Default for CapfiltConfig {
    fn default() -> Self {
        Self {
            max_per_phrase: 30,
            min_occurrences: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgeConfig {
    pub sources: Vec<SourceSpec>,
    pub languages: LanguageDistribution,
    #[serde(default)]
    pub assign_mode: AssignMode,
    #[serde(default)]
    pub capfilt: CapfiltConfig,
    /// Image ids that must not appear in the mix (evaluation images).
    #[serde(default)]
    pub exclude_image_ids: Vec<String>,
    /// Optional file with one excluded image id per line.
    #[serde(default)]
    pub exclude_file: Option<PathBuf>,
    #[serde(default = "default_batch")]
    pub mt_batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    64
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub records: usize,
    pub records_kept: usize,
    pub examples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    /// Examples before exclusion, summed over sources.
    pub input_examples: usize,
    pub excluded_dropped: usize,
    pub total: usize,
    pub per_source: BTreeMap<String, SourceCounts>,
    pub per_dataset: BTreeMap<String, usize>,
    pub per_task: BTreeMap<String, usize>,
    pub per_language: BTreeMap<String, usize>,
}

/// Concatenates the streams, drops every example touching an excluded image,
/// shuffles with `seed` and counts what is left.
pub fn build_mix(
    streams: Vec<Vec<InstructionExample>>,
    exclusion: &BTreeSet<String>,
    seed: u64,
) -> (Vec<InstructionExample>, Manifest) {
    let input_examples = streams.iter().map(Vec::len).sum();
    let mut all: Vec<InstructionExample> = streams.into_iter().flatten().collect();
    all.retain(|ex| !ex.image_ids.iter().any(|id| exclusion.contains(id)));
    let dropped = input_examples - all.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    if all.is_empty() {
        log::warn!("instruction mix is empty");
    }
    let mut m = Manifest {
        seed,
        input_examples,
        excluded_dropped: dropped,
        total: all.len(),
        ..Default::default()
    };
    for ex in &all {
        *m.per_dataset.entry(ex.source.dataset.clone()).or_default() += 1;
        *m.per_task.entry(ex.task.to_string()).or_default() += 1;
        *m.per_language.entry(ex.language.clone()).or_default() += 1;
    }
    (all, m)
}

pub fn to_jsonl(examples: &[InstructionExample]) -> Result<String> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_mix(path: &Path) -> Result<Vec<InstructionExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub struct ForgeOutput {
    pub examples: Vec<InstructionExample>,
    pub manifest: Manifest,
}

impl ForgeOutput {
    /// Writes `mix.jsonl` and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mix = dir.join("mix.jsonl");
        let mut f = fs::File::create(&mix).map_err(|e| Error::io(&mix, e))?;
        f.write_all(to_jsonl(&self.examples)?.as_bytes())
            .map_err(|e| Error::io(&mix, e))?;
        let manifest = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))
    }
}

fn sub_seed(seed: u64, tag: &str) -> u64 {
    stable_seed(&format!("{seed}/{tag}"))
}

fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "templates"));
    rng.set_stream(index as u64);
    rng
}

/// Runs the forge on already-read records, one record list per source.
pub fn forge_records(
    sources: &[(Dataset, Vec<super::RawRecord>)],
    config: &ForgeConfig,
    exclusion: &BTreeSet<String>,
    mt: &dyn MtClient,
) -> Result<ForgeOutput> {
    let mut items: Vec<DerivedItem> = Vec::new();
    let mut per_source: BTreeMap<String, SourceCounts> = BTreeMap::new();
    let mut source_of_item = Vec::new();
    for (si, (dataset, records)) in sources.iter().enumerate() {
        let kept: Vec<usize> = if *dataset == Dataset::Capfilt {
            let caps: Vec<(String, String)> = records
                .iter()
                .map(|r| match &r.payload {
                    Payload::Caption { caption } => (r.image_id.clone(), caption.clone()),
                    _ => (r.image_id.clone(), String::new()),
                })
                .collect();
            sample_capfilt(
                &caps,
                &HeuristicNounPhrases,
                config.capfilt.max_per_phrase,
                config.capfilt.min_occurrences,
                sub_seed(config.seed, "capfilt"),
            )
        } else {
            (0..records.len()).collect()
        };
        let counts = per_source.entry(format!("{si}:{dataset}")).or_default();
        counts.records = records.len();
        counts.records_kept = kept.len();
        for i in kept {
            let derived = derive_task_examples(&records[i], i)?;
            counts.examples += derived.len();
            source_of_item.extend(std::iter::repeat_n(si, derived.len()));
            items.extend(derived);
        }
    }

    let forced: Vec<bool> = items.iter().map(|i| i.dataset == Dataset::Aokvqa).collect();
    let langs = assign_languages(
        items.len(),
        &forced,
        &config.languages,
        config.assign_mode,
        sub_seed(config.seed, "languages"),
    )?;

    // Dry run to learn every text each language needs, then translate in
    // sorted batches so request contents are independent of scheduling.
    let collector = Collector::new(mt.supported_languages());
    for (k, (item, lang)) in items.iter().zip(&langs).enumerate() {
        localize(item, lang, &collector, &mut item_rng(config.seed, k))?;
    }
    let cache = CachingMt::new(mt, config.mt_batch_size);
    let wanted = collector.wanted.into_inner().expect("collector lock");
    for (lang, texts) in &wanted {
        let texts: Vec<String> = texts.iter().cloned().collect();
        cache.translate(&texts, "en", lang)?;
    }
    let rendered: Vec<InstructionExample> = items
        .par_iter()
        .zip(langs.par_iter())
        .enumerate()
        .map(|(k, (item, lang))| localize(item, lang, &cache, &mut item_rng(config.seed, k)))
        .collect::<Result<_>>()?;

    let mut streams: Vec<Vec<InstructionExample>> = vec![Vec::new(); sources.len()];
    for (ex, si) in rendered.into_iter().zip(source_of_item) {
        streams[si].push(ex);
    }
    let (examples, mut manifest) = build_mix(streams, exclusion, sub_seed(config.seed, "shuffle"));
    manifest.seed = config.seed;
    manifest.per_source = per_source;
    Ok(ForgeOutput { examples, manifest })
}

/// Reads the configured sources (paths relative to `base_dir`) and forges
/// the mix.
pub fn forge(config: &ForgeConfig, base_dir: &Path, mt: &dyn MtClient) -> Result<ForgeOutput> {
    let resolve = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    };
    let mut sources = Vec::new();
    for s in &config.sources {
        sources.push((s.dataset, read_records(&resolve(&s.path), s.dataset)?));
    }
    let mut exclusion: BTreeSet<String> = config.exclude_image_ids.iter().cloned().collect();
    if let Some(file) = &config.exclude_file {
        let path = resolve(file);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        exclusion.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from));
    }
    forge_records(&sources, config, &exclusion, mt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::{SourceRef, TaskKind};

    fn ex(image: &str, n: usize) -> InstructionExample {
        InstructionExample {
            task: TaskKind::Caption,
            language: "en".into(),
            prompt: "p".into(),
            target: format!("t{n}"),
            image_ids: vec![image.into()],
            source: SourceRef {
                dataset: "mscoco".into(),
                record: n,
                item: 0,
            },
        }
    }

    #[test]
    fn exclusion_drops_and_counts() {
        let streams = vec![vec![ex("a", 0), ex("b", 1), ex("a", 2)], vec![ex("c", 3)]];
        let excl: BTreeSet<String> = ["a".to_string()].into();
        let (mix, m) = build_mix(streams, &excl, 4);
        assert_eq!(m.excluded_dropped, 2);
        assert_eq!(m.total, 2);
        assert_eq!(m.input_examples, 4);
        assert!(mix.iter().all(|e| e.image_ids[0] != "a"));
    }

    #[test]
    fn shuffle_is_seeded() {
        let make = || vec![(0..50).map(|i| ex("x", i)).collect::<Vec<_>>()];
        let (a, _) = build_mix(make(), &BTreeSet::new(), 1);
        let (b, _) = build_mix(make(), &BTreeSet::new(), 1);
        let (c, _) = build_mix(make(), &BTreeSet::new(), 2);
        assert_eq!(to_jsonl(&a).unwrap(), to_jsonl(&b).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn jsonl_key_order_is_fixed() {
        let line = to_jsonl(&[ex("a", 0)]).unwrap();
        assert!(line.starts_with(
            r#"{"task":"caption","language":"en","prompt":"p","target":"t0","image_ids":["a"],"source":{"#
        ));
    }
}
