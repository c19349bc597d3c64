use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::{freeze_policy, lr_schedule, Stage, StageConfig};
use super::{FinetuneTask, RunPlan};
use crate::adapters::{attach_lora, LoraTarget};
use crate::autodiff::Mat;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::forge::InstructionExample;
use crate::model::image::stable_seed;
use crate::model::{ByteTokenizer, ImageSource, PatchSequence, VisionLanguageModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageOutcome {
    pub metrics: Vec<StepMetrics>,
    /// `(step, path)` of every checkpoint written.
    pub checkpoints: Vec<(usize, PathBuf)>,
}

impl StageOutcome {
    pub fn initial_loss(&self) -> Option<f64> {
        self.metrics.first().map(|m| m.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.loss)
    }
}

struct Prepared {
    images: Vec<String>,
    prompt: Vec<u32>,
    target: Vec<u32>,
}

/// Frozen vision features for every image in `examples`, computed once.
fn encode_all(
    model: &VisionLanguageModel,
    examples: &[InstructionExample],
    images: &dyn ImageSource,
) -> Result<HashMap<String, PatchSequence>> {
    let ids: BTreeSet<&String> = examples.iter().flat_map(|e| &e.image_ids).collect();
    let ids: Vec<&String> = ids.into_iter().collect();
    let encoded: Vec<(String, PatchSequence)> = ids
        .par_iter()
        .map(|id| {
            let img = images.load(id)?;
            Ok(((*id).clone(), model.encode_image(&img)?))
        })
        .collect::<Result<_>>()?;
    Ok(encoded.into_iter().collect())
}

/// Example order: a fresh seeded permutation per pass over the data.
struct Order {
    n: usize,
    seed: u64,
    perms: HashMap<usize, Vec<usize>>,
}

impl Order {
    fn get(&mut self, position: usize) -> usize {
        let epoch = position / self.n;
        let (n, seed) = (self.n, self.seed);
        let perm = self.perms.entry(epoch).or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch as u64);
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            p
        });
        perm[position % self.n]
    }
}

fn add_into(acc: &mut BTreeMap<String, Mat>, grads: BTreeMap<String, Mat>, scale: f64) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => a.scaled_add(scale, &g),
            None => {
                acc.insert(name, g * scale);
            }
        }
    }
}

/// Trains the stage's freeze set for `cfg.total_steps` AdamW updates.
///
/// Every step draws `batch_size` examples, split into `grad_accum`
/// micro-batches; per-example gradients are computed in parallel and summed
/// in a fixed order, so results do not depend on the thread count. With
/// `out_dir`, the metrics log and checkpoints are written there.
pub fn run_stage(
    model: &mut VisionLanguageModel,
    examples: &[InstructionExample],
    images: &dyn ImageSource,
    cfg: &StageConfig,
    out_dir: Option<&Path>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    let trainable = freeze_policy(model, cfg.stage).trainable;
    let tok = ByteTokenizer;
    let features = encode_all(model, examples, images)?;
    let mut truncated = 0usize;
    let prepared: Vec<Prepared> = examples
        .iter()
        .map(|e| {
            let mut target = tok.encode_target(&e.target);
            if target.len() > cfg.max_target_len {
                target.truncate(cfg.max_target_len);
                truncated += 1;
            }
            Prepared {
                images: e.image_ids.clone(),
                prompt: tok.encode(&e.prompt),
                target,
            }
        })
        .collect();
    if truncated > 0 {
        log::warn!("{truncated} target(s) truncated to {} tokens", cfg.max_target_len);
    }

    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("{}-metrics.jsonl", cfg.stage));
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let training_dropout = model.adapters().is_some_and(|a| a.config.dropout > 0.0);
    let mut order = Order {
        n: prepared.len(),
        seed: cfg.seed,
        perms: HashMap::new(),
    };
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut outcome = StageOutcome::default();
    let micro = cfg.micro_batch();

    for s in 0..cfg.total_steps {
        let step = s + 1;
        let lr = lr_schedule(step, cfg)?;
        let batch: Vec<usize> = (0..cfg.batch_size).map(|j| order.get(s * cfg.batch_size + j)).collect();
        let mut grads: BTreeMap<String, Mat> = BTreeMap::new();
        let mut loss_sum = 0.0;
        for (m, chunk) in batch.chunks(micro).enumerate() {
            let model_ref = &*model;
            let results: Vec<(f64, BTreeMap<String, Mat>)> = chunk
                .par_iter()
                .enumerate()
                .map(|(k, &idx)| {
                    let ex = &prepared[idx];
                    let patches: Vec<&PatchSequence> = ex.images.iter().map(|id| &features[id]).collect();
                    let dropout_seed =
                        training_dropout.then(|| stable_seed(&format!("{}/{step}/{}", cfg.seed, m * micro + k)));
                    model_ref.loss_and_grads(&patches, &ex.prompt, &ex.target, &trainable, dropout_seed)
                })
                .collect::<Result<_>>()?;
            let mut micro_grads = BTreeMap::new();
            for (loss, g) in results {
                loss_sum += loss;
                add_into(&mut micro_grads, g, 1.0 / chunk.len() as f64);
            }
            add_into(&mut grads, micro_grads, 1.0 / cfg.grad_accum as f64);
        }
        let loss = loss_sum / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        opt.step(model.params_mut(), &grads, lr)?;
        let metrics = StepMetrics { step, loss, lr };
        log::debug!("{} step {step}: loss {loss:.5} lr {lr:.3e}", cfg.stage);
        outcome.metrics.push(metrics);

        if let (Some((file, path)), Some(dir)) = (log_file.as_mut(), out_dir) {
            let line = serde_json::to_string(&metrics)? + "\n";
            file.write_all(line.as_bytes()).map_err(|e| Error::io(&*path, e))?;
            let due = cfg.checkpoint_every.is_some_and(|k| step % k == 0) || step == cfg.total_steps;
            if due {
                let ckpt = dir.join(format!("{}-step{step:06}.ckpt", cfg.stage));
                checkpoint::save(&ckpt, model, cfg.stage.as_str())?;
                outcome.checkpoints.push((step, ckpt));
            }
        }
    }
    Ok(outcome)
}

/// Attaches the configured adapters (unless some are already present) and
/// runs the re-alignment stage.
pub fn realign(
    model: &mut VisionLanguageModel,
    examples: &[InstructionExample],
    images: &dyn ImageSource,
    cfg: &StageConfig,
    out_dir: Option<&Path>,
) -> Result<StageOutcome> {
    if cfg.lora.target != LoraTarget::None && model.adapters().is_none() {
        attach_lora(model, cfg.lora, cfg.seed)?;
    }
    run_stage(model, examples, images, cfg, out_dir)
}

/// Warm-up (when planned), then re-alignment.
pub fn run_plan(
    model: &mut VisionLanguageModel,
    plan: &RunPlan,
    examples: &[InstructionExample],
    images: &dyn ImageSource,
    out_dir: Option<&Path>,
) -> Result<Vec<StageOutcome>> {
    let stream: Vec<InstructionExample>;
    let data = if plan.captions_only {
        stream = examples
            .iter()
            .filter(|e| e.source.dataset == "capfilt")
            .cloned()
            .collect();
        &stream[..]
    } else {
        examples
    };
    let mut out = Vec::new();
    if let Some(w) = &plan.warmup {
        out.push(run_stage(model, data, images, w, out_dir)?);
    }
    out.push(realign(model, data, images, &plan.realign, out_dir)?);
    Ok(out)
}

/// Fine-tunes with fresh adapters. Adapters from re-alignment must have
/// been merged beforehand.
pub fn finetune(
    model: &mut VisionLanguageModel,
    task: FinetuneTask,
    examples: &[InstructionExample],
    images: &dyn ImageSource,
    cfg: &StageConfig,
    out_dir: Option<&Path>,
) -> Result<StageOutcome> {
    if model.adapters().is_some() {
        return Err(Error::Adapter(format!(
            "merge the re-alignment adapters before fine-tuning on {task}"
        )));
    }
    if cfg.stage != Stage::Finetune {
        return Err(Error::Config(format!(
            "fine-tuning needs a finetune stage config, got {}",
            cfg.stage
        )));
    }
    if cfg.lora.target != LoraTarget::None {
        attach_lora(model, cfg.lora, cfg.seed)?;
    }
    run_stage(model, examples, images, cfg, out_dir)
}

/// English validation scores, one per candidate checkpoint in order. The
/// only input checkpoint selection accepts.
#[derive(Debug, Clone, PartialEq)]
pub struct EnglishValScores(Vec<f64>);

impl EnglishValScores {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite validation score {bad}")));
        }
        Ok(Self(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// The checkpoint with the best English validation score; ties go to the
/// earliest.
pub fn select_checkpoint<'c, C>(checkpoints: &'c [C], english: &EnglishValScores) -> Result<&'c C> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidInput("no checkpoints to select from".into()));
    }
    if checkpoints.len() != english.0.len() {
        return Err(Error::InvalidInput(format!(
            "{} checkpoints but {} English scores",
            checkpoints.len(),
            english.0.len()
        )));
    }
    let mut best = 0;
    for (i, s) in english.0.iter().enumerate() {
        if *s > english.0[best] {
            best = i;
        }
    }
    Ok(&checkpoints[best])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedAverage {
    pub seeds: Vec<u64>,
    pub scores: Vec<f64>,
    pub mean: f64,
}

/// Runs `job` once per seed and averages the scores it returns.
pub fn average_over_seeds(seeds: &[u64], mut job: impl FnMut(u64) -> Result<f64>) -> Result<SeedAverage> {
    if seeds.is_empty() {
        return Err(Error::InvalidInput("no seeds".into()));
    }
    let scores = seeds.iter().map(|&s| job(s)).collect::<Result<Vec<_>>>()?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(SeedAverage {
        seeds: seeds.to_vec(),
        scores,
        mean,
    })
}
