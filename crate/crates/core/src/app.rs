//! Run configuration and the pipeline commands behind the CLI.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::adapters::merge_lora;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::eval::{self, plot, DefaultSegmenter, EvalOptions, EvalReport, EvalTask, Normalization, Prediction};
use crate::forge::mix::read_mix;
use crate::forge::{self, ForgeConfig, ForgeOutput, HttpMt, MockMt, MtClient};
use crate::generation::{decode_all, DecodeRequest, GenConfig};
use crate::model::{DirImageSource, ImageSource, ModelConfig, SyntheticImageSource, VisionLanguageModel};
use crate::toy;
use crate::train::{ablation_preset, run_plan, StageOutcome};

pub const MT_ENDPOINT_ENV: &str = "MBLIP_MT_ENDPOINT";
pub const RESOLVED_CONFIG: &str = "resolved-config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the forge, model init and training.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub images: ImagesConfig,
    #[serde(default)]
    pub mt: MtConfig,
    #[serde(default)]
    pub forge: Option<ForgeConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ImagesConfig {
    /// Procedural scenes rendered from the image id.
    #[default]
    Synthetic,
    /// `<dir>/<image_id>.png`.
    Dir { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtConfig {
    pub endpoint: Option<String>,
    pub mock: bool,
    pub timeout_secs: u64,
    pub retries: usize,
    /// Languages the endpoint supports; empty means every mix language.
    pub languages: Vec<String>,
}

impl Default for MtConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            mock: false,
            timeout_secs: 60,
            retries: 3,
            languages: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub preset: String,
    /// Multiplies every stage's step counts.
    pub scale: f64,
    /// Defaults to the forge output of this run.
    pub mix: Option<PathBuf>,
    pub warm_start: Option<bool>,
    pub batch_size: Option<usize>,
    pub grad_accum: Option<usize>,
    pub lr: Option<f64>,
    pub warmup_lr: Option<f64>,
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: "full".into(),
            scale: 1.0,
            mix: None,
            warm_start: None,
            batch_size: None,
            grad_accum: None,
            lr: None,
            warmup_lr: None,
            checkpoint_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalDataset {
    pub task: EvalTask,
    pub gold: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub datasets: Vec<EvalDataset>,
    /// Defaults to the final checkpoint of this run's training.
    pub checkpoint: Option<PathBuf>,
    pub beam_width: Option<usize>,
    pub max_len: Option<usize>,
    pub repetition_penalty: Option<f64>,
    pub normalization: Normalization,
    pub plot: bool,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub preset: Option<String>,
    pub mt_endpoint: Option<String>,
    pub mock_mt: bool,
    pub plot: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.make_paths_absolute(base);
        Ok(cfg)
    }

    fn make_paths_absolute(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output);
        if let ImagesConfig::Dir { path } = &mut self.images {
            fix(path);
        }
        if let Some(f) = &mut self.forge {
            f.sources.iter_mut().for_each(|s| fix(&mut s.path));
            if let Some(p) = &mut f.exclude_file {
                fix(p);
            }
        }
        if let Some(p) = &mut self.train.mix {
            fix(p);
        }
        if let Some(p) = &mut self.eval.checkpoint {
            fix(p);
        }
        self.eval.datasets.iter_mut().for_each(|d| fix(&mut d.gold));
    }

    /// Applies overrides and propagates the run seed.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.output {
            self.output = out.clone();
        }
        if let Some(p) = &o.preset {
            self.train.preset = p.clone();
        }
        if let Some(e) = &o.mt_endpoint {
            self.mt.endpoint = Some(e.clone());
        }
        self.mt.mock |= o.mock_mt;
        self.eval.plot |= o.plot;
        self.model.seed = self.seed;
        if let Some(f) = &mut self.forge {
            f.seed = self.seed;
        }
        self.model.validate()?;
        if self.train.scale.is_nan() || self.train.scale <= 0.0 {
            return Err(Error::Config("train.scale must be positive".into()));
        }
        Ok(self)
    }

    fn dir(&self, command: &str) -> PathBuf {
        self.output.join(command)
    }

    fn snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }

    pub fn image_source(&self) -> Box<dyn ImageSource> {
        match &self.images {
            ImagesConfig::Synthetic => Box::new(SyntheticImageSource::new(self.model.image_size)),
            ImagesConfig::Dir { path } => Box::new(DirImageSource::new(path, self.model.image_size)),
        }
    }

    pub fn mix_path(&self) -> PathBuf {
        self.train
            .mix
            .clone()
            .unwrap_or_else(|| self.dir("forge").join("mix.jsonl"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.eval
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.dir("train").join("final.ckpt"))
    }

    pub fn predictions_path(&self, task: EvalTask) -> PathBuf {
        self.dir("generate").join(format!("{task}-predictions.jsonl"))
    }

    pub fn gen_config(&self, task: EvalTask) -> GenConfig {
        let mut g = task.gen_config();
        if let Some(b) = self.eval.beam_width {
            g.beam_width = b;
        }
        if let Some(m) = self.eval.max_len {
            g.max_len = m;
        }
        if let Some(r) = self.eval.repetition_penalty {
            g.repetition_penalty = r;
        }
        g
    }
}

fn mt_client(cfg: &MtConfig) -> Result<Box<dyn MtClient>> {
    if cfg.mock {
        return Ok(Box::new(MockMt));
    }
    let endpoint = cfg.endpoint.as_deref().ok_or_else(|| {
        Error::Config(format!(
            "no MT endpoint: set mt.endpoint, --mt-endpoint or {MT_ENDPOINT_ENV}, or use --mock-mt"
        ))
    })?;
    let mut client = HttpMt::new(endpoint, Duration::from_secs(cfg.timeout_secs), cfg.retries)?;
    if !cfg.languages.is_empty() {
        client = client.with_languages(cfg.languages.iter().cloned().collect());
    }
    Ok(Box::new(client))
}

pub fn cmd_forge(cfg: &RunConfig) -> Result<ForgeOutput> {
    let fc = cfg
        .forge
        .as_ref()
        .ok_or_else(|| Error::Config("the config has no [forge] section".into()))?;
    let mt = mt_client(&cfg.mt)?;
    let out = forge::forge(fc, Path::new("."), mt.as_ref())?;
    let dir = cfg.dir("forge");
    out.write(&dir)?;
    cfg.snapshot(&dir)?;
    Ok(out)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<StageOutcome>> {
    let preset = ablation_preset(&cfg.train.preset)?;
    let mut plan = preset.plan(cfg.train.scale, cfg.seed);
    let t = &cfg.train;
    if t.warm_start == Some(false) {
        plan.warmup = None;
    }
    for stage in plan.warmup.iter_mut().chain([&mut plan.realign]) {
        if let Some(b) = t.batch_size {
            stage.batch_size = b;
        }
        if let Some(a) = t.grad_accum {
            stage.grad_accum = a;
        }
        stage.checkpoint_every = t.checkpoint_every;
    }
    if let Some(lr) = t.lr {
        plan.realign.lr = lr;
    }
    if let (Some(lr), Some(w)) = (t.warmup_lr, plan.warmup.as_mut()) {
        w.lr = lr;
    }
    let examples = read_mix(&cfg.mix_path())?;
    let images = cfg.image_source();
    let mut model = VisionLanguageModel::new(cfg.model.clone())?;
    let dir = cfg.dir("train");
    cfg.snapshot(&dir)?;
    let outcomes = run_plan(&mut model, &plan, &examples, images.as_ref(), Some(&dir))?;
    checkpoint::save(&dir.join("final.ckpt"), &model, "realign")?;
    Ok(outcomes)
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let ckpt = cfg.checkpoint_path();
    let (mut model, _) = checkpoint::load(&ckpt)?;
    if model.adapters().is_some() {
        merge_lora(&mut model)?;
    }
    let images = cfg.image_source();
    let dir = cfg.dir("generate");
    cfg.snapshot(&dir)?;
    for ds in &cfg.eval.datasets {
        let gold = eval::read_gold(&ds.gold)?;
        let gen = cfg.gen_config(ds.task);
        let requests = gold
            .iter()
            .map(|g| {
                g.validate(ds.task)?;
                Ok(DecodeRequest {
                    example_id: g.example_id.clone(),
                    prompt: g.prompt(ds.task)?,
                    language: g.language.clone(),
                    image_ids: g.image_ids.clone(),
                    gen_config: gen,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let responses = decode_all(&model, images.as_ref(), &requests)?;
        let predictions: Vec<Prediction> = requests
            .iter()
            .zip(&responses)
            .map(|(q, r)| Prediction {
                example_id: r.example_id.clone(),
                language: q.language.clone(),
                prediction: r.text.clone(),
            })
            .collect();
        eval::write_jsonl(&cfg.predictions_path(ds.task), &predictions)?;
        eval::write_jsonl(&dir.join(format!("{}-decoded.jsonl", ds.task)), &responses)?;
        log::info!("{}: decoded {} examples", ds.task, responses.len());
    }
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Vec<EvalReport>> {
    let dir = cfg.dir("evaluate");
    cfg.snapshot(&dir)?;
    let mut reports = Vec::new();
    for ds in &cfg.eval.datasets {
        let gold = eval::read_gold(&ds.gold)?;
        let preds = eval::read_predictions(&cfg.predictions_path(ds.task))?;
        let options = EvalOptions {
            normalization: cfg.eval.normalization,
            context: serde_json::to_value(cfg.gen_config(ds.task))?,
        };
        let report = eval::evaluate_task(&preds, &gold, ds.task, &options, &DefaultSegmenter)?;
        report.write(&dir)?;
        if cfg.eval.plot {
            let path = dir.join(format!("{}-languages.svg", ds.task));
            fs::write(&path, plot::bar_chart_svg(&report)).map_err(|e| Error::io(&path, e))?;
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Sizes of a generated toy workspace.
#[derive(Debug, Clone, Copy)]
pub struct ToySize {
    pub scenes: usize,
    pub eval_per_language: usize,
}

impl Default for ToySize {
    fn default() -> Self {
        Self {
            scenes: 60,
            eval_per_language: 4,
        }
    }
}

pub const TOY_EVAL_LANGUAGES: [&str; 4] = ["en", "de", "fr", "zh"];

/// Writes toy corpora, gold files and a ready-to-run `run.toml` into `dir`;
/// returns the config path.
pub fn write_toy_workspace(dir: &Path, size: ToySize, seed: u64) -> Result<PathBuf> {
    let data = dir.join("data");
    fs::create_dir_all(&data).map_err(|e| Error::io(&data, e))?;
    let mut sources = Vec::new();
    let mut records = toy::toy_records(size.scenes, seed);
    // A few training images double as eval images; the forge must drop them.
    let leaked: Vec<String> = (0..2)
        .map(|k| format!("scene_red_square_left_{}", 900_000 + k))
        .collect();
    for (dataset, recs) in records.iter_mut() {
        if *dataset == forge::Dataset::Mscoco {
            for (r, id) in recs.iter_mut().zip(&leaked) {
                r.image_id = id.clone();
            }
        }
        let path = data.join(format!("{dataset}.jsonl"));
        let mut body = String::new();
        for r in recs.iter() {
            body.push_str(&r.to_line()?);
            body.push('\n');
        }
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        sources.push(forge::SourceSpec {
            dataset: *dataset,
            path: PathBuf::from("data").join(format!("{dataset}.jsonl")),
        });
    }
    let gold_dir = dir.join("gold");
    fs::create_dir_all(&gold_dir).map_err(|e| Error::io(&gold_dir, e))?;
    let mut datasets = Vec::new();
    let mut eval_images = BTreeSet::new();
    for (i, task) in [EvalTask::Xm3600, EvalTask::Xgqa, EvalTask::Xvnli, EvalTask::Marvl]
        .into_iter()
        .enumerate()
    {
        let first_n = 500_000 + 10_000 * i;
        let gold = toy::toy_gold(
            task,
            &TOY_EVAL_LANGUAGES,
            size.eval_per_language,
            first_n,
            seed + i as u64,
        );
        eval_images.extend(gold.iter().flat_map(|g| g.image_ids.clone()));
        let path = gold_dir.join(format!("{task}.jsonl"));
        eval::write_jsonl(&path, &gold)?;
        datasets.push(EvalDataset {
            task,
            gold: PathBuf::from("gold").join(format!("{task}.jsonl")),
        });
    }
    eval_images.extend(leaked);
    let exclude = dir.join("eval-images.txt");
    let body: String = eval_images.iter().map(|id| format!("{id}\n")).collect();
    fs::write(&exclude, body).map_err(|e| Error::io(&exclude, e))?;

    let languages = forge::LanguageDistribution::from_pairs(&[("en", 0.4), ("de", 0.2), ("fr", 0.2), ("zh", 0.2)])?;
    let cfg = RunConfig {
        seed,
        output: PathBuf::from("out"),
        model: toy::toy_model_config(),
        images: ImagesConfig::Synthetic,
        mt: MtConfig {
            mock: true,
            ..MtConfig::default()
        },
        forge: Some(ForgeConfig {
            sources,
            languages,
            assign_mode: forge::AssignMode::Iid,
            capfilt: forge::mix::CapfiltConfig {
                max_per_phrase: 30,
                min_occurrences: 2,
            },
            exclude_image_ids: Vec::new(),
            exclude_file: Some(PathBuf::from("eval-images.txt")),
            mt_batch_size: 64,
            seed,
        }),
        train: TrainConfig {
            preset: "full".into(),
            scale: 0.002,
            batch_size: Some(8),
            grad_accum: Some(1),
            lr: Some(5e-3),
            ..TrainConfig::default()
        },
        eval: EvalConfig {
            datasets,
            beam_width: Some(2),
            max_len: Some(24),
            ..EvalConfig::default()
        },
    };
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2\n").is_err());
        assert!(RunConfig::from_toml("[train]\npreset = \"full\"\nsteps = 3\n").is_err());
        let c = RunConfig::from_toml("seed = 3\n").unwrap();
        assert_eq!(c.train.preset, "full");
    }

    #[test]
    fn overrides_win_and_seed_propagates() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_toy_workspace(
            dir.path(),
            ToySize {
                scenes: 6,
                eval_per_language: 1,
            },
            5,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert!(cfg.output.starts_with(dir.path()));
        let o = Overrides {
            seed: Some(9),
            preset: Some("captions-only".into()),
            plot: true,
            ..Default::default()
        };
        let r = cfg.clone().resolve(&o).unwrap();
        assert_eq!((r.seed, r.model.seed, r.forge.as_ref().unwrap().seed), (9, 9, 9));
        assert_eq!(r.train.preset, "captions-only");
        assert!(r.eval.plot);
        let again = RunConfig::from_toml(&r.to_toml().unwrap()).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn missing_endpoint_is_a_config_error() {
        assert!(matches!(mt_client(&MtConfig::default()), Err(Error::Config(_))));
        assert!(mt_client(&MtConfig {
            mock: true,
            ..Default::default()
        })
        .is_ok());
    }

    #[test]
    fn classification_tasks_decode_with_negative_length_penalty() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c.gen_config(EvalTask::Xgqa).length_penalty, -1.0);
        assert_eq!(c.gen_config(EvalTask::Xm3600).length_penalty, 1.0);
    }
}
