//! End-to-end acceptance checks. Every criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mblip::adapters::{attach_lora, merge_lora, merged_weight, AdapterSet, LoraAdapter, LoraConfig, LoraTarget};
use mblip::app::{self, Overrides, RunConfig, ToySize};
use mblip::autodiff::Mat;
use mblip::eval::{cider, exact_match, remap_labels, DefaultSegmenter, Normalization};
use mblip::forge::capfilt::{sample_capfilt, HeuristicNounPhrases};
use mblip::forge::mix::{forge_records, CapfiltConfig};
use mblip::forge::templates::{all_templates, fill, has_placeholder, slots_of};
use mblip::forge::{
    assign_languages, build_mix, AssignMode, Dataset, ForgeConfig, InstructionExample, LanguageDistribution, MockMt,
    Payload, RawRecord, SourceRef, SpyMt, TaskKind,
};
use mblip::generation::{beam_search, beam_search_all, greedy, Conditioned, GenConfig, StepModel};
use mblip::model::{
    component_of, ByteTokenizer, Component, ImageSource, ModelConfig, SyntheticImageSource, VisionLanguageModel,
};
use mblip::toy::{caption_examples, toy_model_config};
use mblip::train::{
    ablation_presets, freeze_policy, lr_schedule, realign, run_stage, FinetuneTask, Stage, StageConfig,
};

type Check = Result<(), String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($msg)*));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn short_stage(stage: Stage, steps: usize) -> StageConfig {
    let mut cfg = match stage {
        Stage::Warmup => StageConfig::warmup(),
        _ => StageConfig::realign(),
    };
    cfg.total_steps = steps;
    cfg.warmup_steps = 10;
    cfg.batch_size = 2;
    cfg.grad_accum = 1;
    cfg.lr = 1e-3;
    cfg
}

fn freeze_contract() -> Check {
    let ex = caption_examples(20, 1);
    let src = SyntheticImageSource::new(16);
    let init = ok(VisionLanguageModel::new(toy_model_config()))?;

    let mut m = init.clone();
    ok(realign(&mut m, &ex, &src, &short_stage(Stage::Realign, 100), None))?;
    for (name, w) in init.params().iter() {
        if matches!(component_of(name), Component::Vision | Component::Lm) {
            ensure!(ok(m.params().get(name))? == w, "realign changed frozen `{name}`");
        }
    }
    let moved = init
        .params()
        .iter()
        .filter(|(n, w)| m.params().get(n).map(|v| v != *w).unwrap_or(true))
        .count();
    ensure!(moved > 0, "realign changed nothing");

    let mut m = init.clone();
    ok(run_stage(&mut m, &ex, &src, &short_stage(Stage::Warmup, 100), None))?;
    let changed: BTreeSet<String> = init
        .params()
        .iter()
        .filter(|(n, w)| m.params().get(n).map(|v| v != *w).unwrap_or(true))
        .map(|(n, _)| n.clone())
        .collect();
    let want: BTreeSet<String> = ["proj.bias", "proj.weight"].map(String::from).into();
    ensure!(changed == want, "warm-up changed {changed:?}");
    Ok(())
}

fn random_input(
    model: &VisionLanguageModel,
    rng: &mut ChaCha8Rng,
    src: &dyn ImageSource,
) -> Result<(mblip::model::LmInput, Vec<u32>), String> {
    let img = ok(src.load(&format!("noise_{}", rng.random::<u32>())))?;
    let patches = ok(model.encode_image(&img))?;
    let visual = ok(model.visual_tokens(&[&patches]))?;
    let prompt: Vec<u32> = (0..rng.random_range(1..12)).map(|_| rng.random_range(1..256)).collect();
    let target: Vec<u32> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..256)).collect();
    Ok((ok(model.assemble_lm_input(&visual, &prompt))?, target))
}

fn lora_identity_and_merge() -> Check {
    let src = SyntheticImageSource::new(16);
    let base = ok(VisionLanguageModel::new(toy_model_config()))?;
    let mut adapted = base.clone();
    ok(attach_lora(&mut adapted, LoraConfig::default(), 3))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (input, target) = random_input(&base, &mut rng, &src)?;
    ensure!(
        ok(base.lm_logits(&input, &target))? == ok(adapted.lm_logits(&input, &target))?,
        "fresh adapters changed the forward pass"
    );

    let names: Vec<String> = adapted.adapters().unwrap().targets.iter().cloned().collect();
    for name in names {
        let b = adapted.params_mut().get_mut(&AdapterSet::b_name(&name)).unwrap();
        b.mapv_inplace(|_| rng.random_range(-0.2..0.2));
    }
    let mut merged = adapted.clone();
    ok(merge_lora(&mut merged))?;
    ensure!(merged.adapters().is_none(), "merge left adapters attached");
    for i in 0..100 {
        let (input, target) = random_input(&adapted, &mut rng, &src)?;
        let a = ok(adapted.lm_logits(&input, &target))?;
        let m = ok(merged.lm_logits(&input, &target))?;
        let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        let diff = (&a - &m).iter().fold(0.0f64, |s, v| s.max(v.abs()));
        ensure!(diff <= 1e-5 * scale, "input {i}: relative difference {}", diff / scale);
    }

    let hand = LoraAdapter {
        base_matrix_name: "w".into(),
        a: array![[1.0, 0.0]],
        b: array![[0.0], [1.0]],
        config: LoraConfig {
            r: 1,
            alpha: 2.0,
            dropout: 0.0,
            target: LoraTarget::AllLmMatrices,
        },
    };
    let w = ok(merged_weight(&Mat::eye(2), &hand))?;
    ensure!(w == array![[1.0, 0.0], [2.0, 1.0]], "hand example merged to {w}");
    Ok(())
}

fn gradient_check() -> Check {
    let cfg = toy_model_config();
    let model = ok(VisionLanguageModel::new(cfg))?;
    let src = SyntheticImageSource::new(16);
    let patches = ok(model.encode_image(&ok(src.load("scene_blue_bar_top_1"))?))?;
    let tok = ByteTokenizer;
    let prompt = tok.encode("Caption:");
    let target = tok.encode_target("a bar");
    let names = ["proj.weight", "qformer.layers.0.cross_attn.k.weight"];
    let trainable: BTreeSet<String> = names.iter().map(|s| s.to_string()).collect();
    let (_, grads) = ok(model.loss_and_grads(&[&patches], &prompt, &target, &trainable, None))?;
    let loss_at = |m: &VisionLanguageModel| {
        m.loss_and_grads(&[&patches], &prompt, &target, &BTreeSet::new(), None)
            .map(|r| r.0)
    };
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for name in names {
        let g = &grads[name];
        let (rows, cols) = g.dim();
        let (mut num, mut ana) = (Vec::new(), Vec::new());
        for _ in 0..12 {
            let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
            let mut plus = model.clone();
            plus.params_mut().get_mut(name).unwrap()[[r, c]] += h;
            let mut minus = model.clone();
            minus.params_mut().get_mut(name).unwrap()[[r, c]] -= h;
            num.push((ok(loss_at(&plus))? - ok(loss_at(&minus))?) / (2.0 * h));
            ana.push(g[[r, c]]);
        }
        let err: f64 = num.iter().zip(&ana).map(|(n, a)| (n - a).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = num.iter().map(|n| n * n).sum::<f64>().sqrt();
        ensure!(norm > 0.0, "{name}: zero numerical gradient");
        ensure!(err / norm < 1e-4, "{name}: relative error {}", err / norm);
    }
    Ok(())
}

fn toy_overfit() -> Check {
    let ex = caption_examples(200, 7);
    let src = SyntheticImageSource::new(16);
    let mut model = ok(VisionLanguageModel::new(toy_model_config()))?;
    let mut cfg = StageConfig::realign();
    cfg.lr = 5e-3;
    cfg.warmup_steps = 30;
    cfg.total_steps = 300;
    cfg.batch_size = 8;
    cfg.grad_accum = 1;
    cfg.weight_decay = 0.0;
    let out = ok(realign(&mut model, &ex, &src, &cfg, None))?;
    let (first, last) = (out.initial_loss().unwrap(), out.final_loss().unwrap());
    ensure!(out.metrics.len() == 300, "ran {} steps", out.metrics.len());
    ensure!(last < 0.25 * first, "final loss {last:.4} vs initial {first:.4}");
    Ok(())
}

fn two_image_assembly() -> Check {
    let cfg = ModelConfig::default();
    ensure!(
        cfg.num_query_tokens == 32,
        "default model has {} queries",
        cfg.num_query_tokens
    );
    let model = ok(VisionLanguageModel::new(cfg))?;
    let src = SyntheticImageSource::new(model.config().image_size);
    let left = ok(model.encode_image(&ok(src.load("scene_red_circle_left_1"))?))?;
    let right = ok(model.encode_image(&ok(src.load("scene_blue_square_right_2"))?))?;
    let both = ok(model.visual_tokens(&[&left, &right]))?;
    ensure!(both.tokens.nrows() == 64, "{} visual tokens", both.tokens.nrows());
    let l = ok(model.visual_tokens(&[&left]))?.tokens;
    let r = ok(model.visual_tokens(&[&right]))?.tokens;
    ensure!(
        both.tokens.slice(ndarray::s![..32, ..]) == l,
        "first block is not the left image"
    );
    ensure!(
        both.tokens.slice(ndarray::s![32.., ..]) == r,
        "second block is not the right image"
    );
    let input = ok(model.assemble_lm_input(&both, &ByteTokenizer.encode("Yes or no?")))?;
    ensure!(input.n_visual == 64, "assembled {} visual rows", input.n_visual);
    Ok(())
}

/// Next-token probabilities from a table over the generated prefix.
struct Table(fn(&[u32]) -> [f64; 3]);

impl StepModel for Table {
    fn vocab_size(&self) -> usize {
        3
    }
    fn eos(&self) -> u32 {
        0
    }
    fn next_logits(&self, generated: &[u32]) -> mblip::Result<Vec<f64>> {
        Ok((self.0)(generated).iter().map(|p| p.ln()).collect())
    }
}

/// All finished or length-capped sequences with their scores, best first.
fn enumerate(lm: &Table, max_len: usize, alpha: f64) -> Vec<(Vec<u32>, f64)> {
    fn walk(lm: &Table, prefix: Vec<u32>, p: f64, max_len: usize, alpha: f64, out: &mut Vec<(Vec<u32>, f64)>) {
        let probs = (lm.0)(&prefix);
        for (t, q) in probs.iter().enumerate() {
            let mut seq = prefix.clone();
            seq.push(t as u32);
            let prob = p * q;
            if t == 0 || seq.len() == max_len {
                let score = prob.ln() / (seq.len() as f64).powf(alpha);
                out.push((seq, score));
            } else {
                walk(lm, seq, prob, max_len, alpha, out);
            }
        }
    }
    let mut out = Vec::new();
    walk(lm, Vec::new(), 1.0, max_len, alpha, &mut out);
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

fn three_state(prefix: &[u32]) -> [f64; 3] {
    match prefix {
        [] => [0.1, 0.5, 0.4],
        [1] => [0.3, 0.35, 0.35],
        [2] => [0.9, 0.05, 0.05],
        _ => [0.6, 0.2, 0.2],
    }
}

fn flip_lm(prefix: &[u32]) -> [f64; 3] {
    match prefix {
        [] => [0.001, 0.4995, 0.4995],
        [1] => [0.2, 0.4, 0.4],
        [2] => [0.1, 0.1, 0.8],
        [2, 2] => [0.25, 0.25, 0.5],
        [2, 2, 2] => [0.5, 0.25, 0.25],
        _ => [0.4, 0.3, 0.3],
    }
}

fn decoding() -> Check {
    let model = ok(VisionLanguageModel::new(toy_model_config()))?;
    let src = SyntheticImageSource::new(16);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let beam1 = GenConfig {
        beam_width: 1,
        length_penalty: 1.0,
        repetition_penalty: 1.0,
        max_len: 6,
    };
    for i in 0..50 {
        let (input, _) = random_input(&model, &mut rng, &src)?;
        let lm = Conditioned { model: &model, input };
        let b = ok(beam_search(&lm, &beam1))?;
        let g = ok(greedy(&lm, beam1.max_len, beam1.length_penalty))?;
        ensure!(
            b.tokens == g.tokens,
            "prompt {i}: beam-1 {:?} vs greedy {:?}",
            b.tokens,
            g.tokens
        );
    }

    let lm = Table(three_state);
    let cfg = GenConfig {
        beam_width: 2,
        length_penalty: 1.0,
        repetition_penalty: 1.0,
        max_len: 3,
    };
    let best = ok(beam_search(&lm, &cfg))?;
    let oracle = enumerate(&lm, 3, 1.0);
    ensure!(
        best.tokens == oracle[0].0,
        "beam-2 {:?} vs enumeration {:?}",
        best.tokens,
        oracle[0].0
    );
    ensure!(
        (best.score - oracle[0].1).abs() < 1e-9,
        "score {} vs {}",
        best.score,
        oracle[0].1
    );
    let greedy_pick = ok(greedy(&lm, 3, 1.0))?;
    ensure!(
        greedy_pick.tokens != oracle[0].0,
        "toy LM does not separate greedy from beam-2"
    );

    let lm = Table(flip_lm);
    let (short, long) = (vec![1u32, 0], vec![2u32, 2, 2, 0]);
    for (alpha, want) in [(-1.0, &short), (1.0, &long)] {
        let oracle = enumerate(&lm, 4, alpha);
        ensure!(
            &oracle[0].0 == want,
            "alpha {alpha}: enumeration picks {:?}",
            oracle[0].0
        );
        let cfg = GenConfig {
            beam_width: 4,
            length_penalty: alpha,
            repetition_penalty: 1.0,
            max_len: 4,
        };
        let all = ok(beam_search_all(&lm, &cfg))?;
        ensure!(&all[0].tokens == want, "alpha {alpha}: beam picks {:?}", all[0].tokens);
    }
    Ok(())
}

fn cider_oracle() -> Check {
    let data: serde_json::Value = ok(serde_json::from_str(include_str!("data/cider_reference.json")))?;
    let cands: BTreeMap<String, String> = ok(serde_json::from_value(data["cands"].clone()))?;
    let refs: BTreeMap<String, Vec<String>> = ok(serde_json::from_value(data["refs"].clone()))?;
    ensure!(cands.len() == 20, "corpus has {} examples", cands.len());
    let s = ok(cider(&cands, &refs, &DefaultSegmenter, "en"))?;
    let want = data["mean"].as_f64().unwrap();
    ensure!((s.mean - want).abs() < 1e-6, "CIDEr {} vs reference {want}", s.mean);

    let pair = |a: &str, b: &str| -> (BTreeMap<String, String>, BTreeMap<String, Vec<String>>) {
        (
            [
                ("x".to_string(), a.to_string()),
                ("y".to_string(), "two blue cats near the water".to_string()),
            ]
            .into(),
            [
                ("x".to_string(), vec![b.to_string()]),
                ("y".to_string(), vec!["two blue cats near the water".to_string()]),
            ]
            .into(),
        )
    };
    let (c, r) = pair("a red dog sits on grass", "a red dog sits on grass");
    let s = ok(cider(&c, &r, &DefaultSegmenter, "en"))?;
    ensure!((s.mean - 10.0).abs() < 1e-12, "identical corpus scores {}", s.mean);
    let (c, r) = pair("zebra zebra zebra", "a red dog sits on grass");
    let s = ok(cider(&c, &r, &DefaultSegmenter, "en"))?;
    ensure!(
        s.per_image["x"] == 0.0,
        "disjoint candidate scores {}",
        s.per_image["x"]
    );
    Ok(())
}

fn exact_match_cases() -> Check {
    let m = Normalization::Minimal;
    ensure!(
        !exact_match("kitchen", &["in the kitchen"], m),
        "kitchen matched in the kitchen"
    );
    ensure!(exact_match("Dog.", &["dog"], m), "Dog. did not match dog");
    ensure!(exact_match("chat", &["cat", "chat"], m), "any-candidate match failed");
    ensure!(!exact_match("chien", &["cat", "chat"], m), "non-candidate matched");
    let cases = [
        ("xvnli", "entailment", "yes"),
        ("xvnli", "contradiction", "no"),
        ("xvnli", "neutral", "maybe"),
        ("marvl", "true", "yes"),
        ("marvl", "false", "no"),
    ];
    for (task, label, want) in cases {
        ensure!(ok(remap_labels(task, label))? == want, "{task}/{label}");
    }
    ensure!(remap_labels("xvnli", "dog").is_err(), "unknown label accepted");
    ensure!(remap_labels("marvl", "neutral").is_err(), "marvl accepted neutral");
    Ok(())
}

fn rec(dataset: Dataset, id: &str, payload: Payload) -> RawRecord {
    RawRecord {
        dataset,
        image_id: id.into(),
        payload,
    }
}

fn data_forge() -> Check {
    // CapFilt: phrase counts 50, 9 and 10 against min 10 / max 30.
    let mut corpus = Vec::new();
    for (phrase, n) in [("red car", 50), ("blue boat", 9), ("fire hydrant", 10)] {
        for k in 0..n {
            corpus.push((format!("img_{phrase}_{k}"), format!("a {phrase}")));
        }
    }
    let kept = sample_capfilt(&corpus, &HeuristicNounPhrases, 30, 10, 3);
    let count = |p: &str| kept.iter().filter(|&&i| corpus[i].1.contains(p)).count();
    ensure!(count("red car") == 30, "red car kept {}", count("red car"));
    ensure!(count("blue boat") == 0, "rare phrase kept {}", count("blue boat"));
    ensure!(
        count("fire hydrant") == 10,
        "fire hydrant kept {}",
        count("fire hydrant")
    );

    let dist = ok(LanguageDistribution::from_pairs(&[
        ("de", 0.06),
        ("en", 0.5),
        ("fr", 0.44),
    ]))?;
    let langs = ok(assign_languages(10_000, &[], &dist, AssignMode::Iid, 2024))?;
    let de = langs.iter().filter(|l| *l == "de").count() as f64;
    let sigma = (10_000.0f64 * 0.06 * 0.94).sqrt();
    ensure!((de - 600.0).abs() <= 3.0 * sigma, "{de} German examples");

    let mut vqa = Vec::new();
    let mut aok = Vec::new();
    for i in 0..20 {
        vqa.push(rec(
            Dataset::Vqav2,
            &format!("v{i}"),
            Payload::Vqa {
                question: format!("What is object {i}?"),
                answers: vec![format!("answerword{i}")],
            },
        ));
        aok.push(rec(
            Dataset::Aokvqa,
            &format!("a{i}"),
            Payload::Rationale {
                question: format!("Why is {i} here?"),
                answer: format!("rationaleanswer{i}"),
                rationales: vec![format!("Because of reason {i}")],
            },
        ));
    }
    let config = ForgeConfig {
        sources: vec![],
        languages: ok(LanguageDistribution::from_pairs(&[("de", 0.5), ("fr", 0.5)]))?,
        assign_mode: AssignMode::Iid,
        capfilt: CapfiltConfig::default(),
        exclude_image_ids: vec![],
        exclude_file: None,
        mt_batch_size: 8,
        seed: 1,
    };
    let spy = SpyMt::new(MockMt);
    let out = ok(forge_records(
        &[(Dataset::Vqav2, vqa), (Dataset::Aokvqa, aok)],
        &config,
        &BTreeSet::new(),
        &spy,
    ))?;
    ensure!(!out.examples.is_empty(), "forge produced nothing");
    let leaked: Vec<String> = spy
        .seen_texts()
        .into_iter()
        .filter(|t| t.contains("answerword") || t.contains("rationaleanswer"))
        .collect();
    ensure!(leaked.is_empty(), "answers sent to MT: {leaked:?}");
    ensure!(!spy.calls().is_empty(), "questions were never translated");

    for t in all_templates() {
        let slots: BTreeMap<&str, &str> = slots_of(t).into_iter().map(|s| (s, "value")).collect();
        let text = ok(fill(t, &slots))?;
        ensure!(!has_placeholder(&text), "`{t}` left a placeholder: {text}");
    }

    let examples: Vec<InstructionExample> = (0..40)
        .map(|i| InstructionExample {
            task: TaskKind::Caption,
            language: "en".into(),
            prompt: "p".into(),
            target: "t".into(),
            image_ids: vec![format!("img{i}")],
            source: SourceRef {
                dataset: "mscoco".into(),
                record: i,
                item: 0,
            },
        })
        .collect();
    let exclusion: BTreeSet<String> = (0..40).step_by(3).map(|i| format!("img{i}")).collect();
    let (mix, manifest) = build_mix(vec![examples], &exclusion, 9);
    ensure!(
        mix.iter().all(|e| e.image_ids.iter().all(|id| !exclusion.contains(id))),
        "excluded image leaked into the mix"
    );
    ensure!(
        manifest.excluded_dropped == exclusion.len(),
        "dropped {}",
        manifest.excluded_dropped
    );
    Ok(())
}

fn schedules_and_configs() -> Check {
    let r = StageConfig::realign();
    ensure!(
        ok(lr_schedule(1000, &r))? == 5e-5,
        "lr at step 1000 is {}",
        ok(lr_schedule(1000, &r))?
    );
    ensure!(
        ok(lr_schedule(r.total_steps, &r))? == 0.0,
        "lr at the last step is not 0"
    );

    let rows: Vec<(&str, bool, LoraTarget, bool)> = ablation_presets()
        .iter()
        .map(|p| (p.name, p.instruction_mix, p.lora_target, p.warm_start))
        .collect();
    let want = [
        (false, LoraTarget::None, true),
        (false, LoraTarget::AllLmMatrices, true),
        (true, LoraTarget::None, true),
        (true, LoraTarget::QueryValue, true),
        (true, LoraTarget::AllLmMatrices, false),
        (true, LoraTarget::AllLmMatrices, true),
    ];
    ensure!(rows.len() == 6, "{} presets", rows.len());
    for (row, w) in rows.iter().zip(want) {
        ensure!((row.1, row.2, row.3) == w, "preset {} is {:?}", row.0, row);
    }
    for p in ablation_presets() {
        let plan = p.plan(0.001, 1);
        ensure!(
            plan.warmup.is_some() == p.warm_start,
            "{}: warm-up stage mismatch",
            p.name
        );
        ensure!(
            plan.realign.lora.target == p.lora_target,
            "{}: LoRA target mismatch",
            p.name
        );
        ensure!(plan.captions_only == !p.instruction_mix, "{}: data mismatch", p.name);
    }
    for (task, want) in [
        (FinetuneTask::Xgqa, (5, 5e-5, 256)),
        (FinetuneTask::Xvnli, (10, 1e-5, 128)),
        (FinetuneTask::Marvl, (20, 5e-5, 128)),
    ] {
        let r = task.recipe();
        ensure!((r.epochs, r.lr, r.batch_size) == want, "{task}: {:?}", r);
    }
    let model = ok(VisionLanguageModel::new(toy_model_config()))?;
    let warm = freeze_policy(&model, Stage::Warmup);
    ensure!(warm.trainable.len() == 2, "warm-up trains {:?}", warm.trainable);
    Ok(())
}

fn pipeline_once(config: &Path, out: &Path) -> Result<(), String> {
    let cfg = ok(ok(RunConfig::load(config))?.resolve(&Overrides {
        output: Some(out.to_path_buf()),
        ..Default::default()
    }))?;
    ok(app::cmd_forge(&cfg))?;
    ok(app::cmd_train(&cfg))?;
    ok(app::cmd_generate(&cfg))?;
    ok(app::cmd_evaluate(&cfg))?;
    Ok(())
}

fn determinism() -> Check {
    let dir = ok(tempfile::tempdir())?;
    let size = ToySize {
        scenes: 24,
        eval_per_language: 2,
    };
    let config = ok(app::write_toy_workspace(dir.path(), size, 42))?;
    let (a, b) = (dir.path().join("run-a"), dir.path().join("run-b"));
    pipeline_once(&config, &a)?;
    pipeline_once(&config, &b)?;
    let mut files = vec!["forge/mix.jsonl", "forge/manifest.json", "train/final.ckpt"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    for task in ["xm3600", "xgqa", "xvnli", "marvl"] {
        files.push(format!("generate/{task}-predictions.jsonl"));
        files.push(format!("evaluate/{task}-report.json"));
        files.push(format!("evaluate/{task}-report.txt"));
    }
    for f in files {
        let x = ok(fs::read(a.join(&f)))?;
        let y = ok(fs::read(b.join(&f)))?;
        ensure!(!x.is_empty(), "{f} is empty");
        ensure!(x == y, "{f} differs between runs");
    }
    Ok(())
}

fn report(line: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 11] = [
        ("freeze contract", freeze_contract),
        ("LoRA identity and merge", lora_identity_and_merge),
        ("gradient correctness", gradient_check),
        ("toy overfit", toy_overfit),
        ("two-image assembly", two_image_assembly),
        ("decoding", decoding),
        ("CIDEr oracle equivalence", cider_oracle),
        ("exact match", exact_match_cases),
        ("data forge", data_forge),
        ("schedules and configs", schedules_and_configs),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(msg)
        });
        match result {
            Ok(()) => report(format!("PASS {:>2} {name}", i + 1)),
            Err(why) => {
                report(format!("FAIL {:>2} {name}: {why}", i + 1));
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
