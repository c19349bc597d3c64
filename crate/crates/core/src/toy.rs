//! Procedural scene corpora for smoke runs and tests.
//!
//! Every image id has the form `scene_<color>_<shape>_<position>_<n>`, which
//! [`SyntheticImageSource`](crate::model::SyntheticImageSource) renders and
//! from which captions, questions and answers are derived.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{EvalTask, GoldExample};
use crate::forge::templates::CAPTION_WITH_LANGUAGE;
use crate::forge::{fill, Dataset, InstructionExample, MockMt, Payload, RawRecord, SourceRef, TaskKind, Turn};
use crate::model::image::{SCENE_COLORS, SCENE_POSITIONS, SCENE_SHAPES};
use crate::model::ModelConfig;

/// Small enough to train a few hundred steps on one CPU core.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 8,
        h_img: 16,
        num_query_tokens: 8,
        h_q: 24,
        h_v: 24,
        h_l: 48,
        n_layers_vit: 1,
        n_layers_qformer: 1,
        n_layers_lm: 2,
        n_heads: 2,
        mlp_ratio: 2,
        max_positions: 384,
        ..Default::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub color: &'static str,
    pub shape: &'static str,
    pub position: &'static str,
    pub n: usize,
}

impl Scene {
    pub fn image_id(&self) -> String {
        format!("scene_{}_{}_{}_{}", self.color, self.shape, self.position, self.n)
    }

    pub fn parse(image_id: &str) -> Option<Scene> {
        let parts: Vec<&str> = image_id.split('_').collect();
        let [prefix, color, shape, position, n] = parts[..] else {
            return None;
        };
        if prefix != "scene" {
            return None;
        }
        Some(Scene {
            color: SCENE_COLORS.iter().find(|(c, _)| *c == color)?.0,
            shape: SCENE_SHAPES.iter().find(|s| **s == shape)?,
            position: SCENE_POSITIONS.iter().find(|p| **p == position)?,
            n: n.parse().ok()?,
        })
    }

    pub fn caption(&self) -> String {
        format!("a {} {} on the {}", self.color, self.shape, self.position)
    }
}

/// `n` scenes drawn uniformly over colors, shapes and positions.
pub fn scenes(n: usize, seed: u64) -> Vec<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Scene {
            color: SCENE_COLORS[rng.random_range(0..SCENE_COLORS.len())].0,
            shape: SCENE_SHAPES.choose(&mut rng).expect("non-empty"),
            position: SCENE_POSITIONS.choose(&mut rng).expect("non-empty"),
            n: i,
        })
        .collect()
}

/// English caption examples prompted with the first caption template.
pub fn caption_examples(n: usize, seed: u64) -> Vec<InstructionExample> {
    let template = CAPTION_WITH_LANGUAGE[0];
    let prompt =
        fill(template, &[("LANGUAGE", "English")].into_iter().collect()).expect("template has only the language slot");
    scenes(n, seed)
        .into_iter()
        .enumerate()
        .map(|(i, s)| InstructionExample {
            task: TaskKind::Caption,
            language: "en".into(),
            prompt: prompt.clone(),
            target: s.caption(),
            image_ids: vec![s.image_id()],
            source: SourceRef {
                dataset: "capfilt".into(),
                record: i,
                item: 0,
            },
        })
        .collect()
}

/// Raw records for every source dataset, `n` scenes each.
pub fn toy_records(n: usize, seed: u64) -> Vec<(Dataset, Vec<RawRecord>)> {
    let sc = scenes(n, seed);
    let rec = |dataset, s: &Scene, payload| RawRecord {
        dataset,
        image_id: s.image_id(),
        payload,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let capfilt = sc
        .iter()
        .map(|s| {
            let caption = match rng.random_range(0..3) {
                0 => s.caption(),
                1 => format!("{} {} near the {} edge", s.color, s.shape, s.position),
                _ => format!("the {} {} on a gray wall", s.color, s.shape),
            };
            rec(Dataset::Capfilt, s, Payload::Caption { caption })
        })
        .collect();
    let mscoco = sc
        .iter()
        .map(|s| rec(Dataset::Mscoco, s, Payload::Caption { caption: s.caption() }))
        .collect();
    let vqav2 = sc
        .iter()
        .map(|s| {
            let (question, answer) = match s.n % 3 {
                0 => ("What color is the shape?".to_string(), s.color),
                1 => ("Which shape is shown?".to_string(), s.shape),
                _ => (format!("Where is the {}?", s.shape), s.position),
            };
            rec(
                Dataset::Vqav2,
                s,
                Payload::Vqa {
                    question,
                    answers: vec![answer.to_string()],
                },
            )
        })
        .collect();
    let aokvqa = sc
        .iter()
        .map(|s| {
            rec(
                Dataset::Aokvqa,
                s,
                Payload::Rationale {
                    question: format!("What shape is on the {}?", s.position),
                    answer: s.shape.to_string(),
                    rationales: vec![format!("The {} object has the outline of a {}", s.color, s.shape)],
                },
            )
        })
        .collect();
    let detail = sc
        .iter()
        .map(|s| {
            let caption = format!(
                "The image shows a {} {} placed on the {} side of a gray background.",
                s.color, s.shape, s.position
            );
            rec(Dataset::LlavaDetail, s, Payload::Caption { caption })
        })
        .collect();
    let conv = sc
        .iter()
        .map(|s| {
            rec(
                Dataset::LlavaConv,
                s,
                Payload::Dialog {
                    turns: vec![
                        Turn {
                            question: "What is in the image?".into(),
                            answer: format!("A {} {}.", s.color, s.shape),
                        },
                        Turn {
                            question: "Where is it?".into(),
                            answer: format!("It is on the {}.", s.position),
                        },
                    ],
                },
            )
        })
        .collect();
    vec![
        (Dataset::Capfilt, capfilt),
        (Dataset::Mscoco, mscoco),
        (Dataset::Vqav2, vqav2),
        (Dataset::Aokvqa, aokvqa),
        (Dataset::LlavaDetail, detail),
        (Dataset::LlavaConv, conv),
    ]
}

fn in_language(text: &str, lang: &str) -> String {
    if lang == "en" {
        text.to_string()
    } else {
        MockMt::tag(text, lang)
    }
}

/// Gold examples for `task`: `per_language` scenes in each language. Scene
/// numbers start at `first_n`.
pub fn toy_gold(
    task: EvalTask,
    languages: &[&str],
    per_language: usize,
    first_n: usize,
    seed: u64,
) -> Vec<GoldExample> {
    let pool = scenes(languages.len() * per_language * 2, seed);
    let mut out = Vec::new();
    for (li, lang) in languages.iter().enumerate() {
        for k in 0..per_language {
            let idx = li * per_language + k;
            let mut s = pool[idx].clone();
            s.n = first_n + idx;
            let mut g = GoldExample {
                example_id: format!("{task}-{lang}-{k:03}"),
                language: lang.to_string(),
                image_ids: vec![s.image_id()],
                question: None,
                hypothesis: None,
                statement: None,
                references: vec![],
                answers: vec![],
                label: None,
            };
            match task {
                EvalTask::Xm3600 | EvalTask::Xflickrco => {
                    g.references = vec![
                        in_language(&s.caption(), lang),
                        in_language(&format!("{} {} near the {} edge", s.color, s.shape, s.position), lang),
                    ];
                }
                EvalTask::Xgqa | EvalTask::Maxm => {
                    g.question = Some(in_language("What color is the shape?", lang));
                    let answer = if task == EvalTask::Xgqa {
                        s.color.to_string()
                    } else {
                        in_language(s.color, lang)
                    };
                    g.answers = vec![answer];
                }
                EvalTask::Xvnli => {
                    let (h, label) = match k % 3 {
                        0 => (format!("The shape is {}.", s.color), "entailment"),
                        1 => (format!("The shape is not {}.", s.color), "contradiction"),
                        _ => ("The shape was drawn by a child.".to_string(), "neutral"),
                    };
                    g.hypothesis = Some(in_language(&h, lang));
                    g.label = Some(label.into());
                }
                EvalTask::Marvl => {
                    let mut other = pool[pool.len() - 1 - idx].clone();
                    other.n = first_n + 100_000 + idx;
                    g.image_ids.push(other.image_id());
                    let same = s.color == other.color;
                    g.statement = Some(in_language(&format!("Both shapes are {}.", s.color), lang));
                    g.label = Some(if same { "true" } else { "false" }.into());
                }
            }
            out.push(g);
        }
    }
    out
}
