//! The modular vision-language model: a frozen patch encoder, a Q-Former
//! with learned query tokens, an affine projection into the language model
//! embedding space, and a frozen causal language model that reads the
//! projected visual tokens as a prefix.

mod config;
mod forward;
pub mod image;
pub mod tokenizer;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapters::AdapterSet;
use crate::autodiff::{Graph, Mat};
use crate::error::{shape_err, Error, Result};

pub use config::ModelConfig;
use forward::Fwd;
pub use image::{DirImageSource, Image, ImageSource, SyntheticImageSource};
pub use tokenizer::{ByteTokenizer, EOS};

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Mat> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::InvalidInput(format!("no parameter named `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> Option<Mat> {
        self.tensors.insert(name.into(), value)
    }

    pub fn remove(&mut self, name: &str) -> Option<Mat> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Mat::len).sum()
    }
}

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Vision,
    QFormer,
    Projection,
    Lm,
    Adapter,
}

pub fn component_of(name: &str) -> Component {
    match name.split('.').next() {
        Some("vit") => Component::Vision,
        Some("qformer") => Component::QFormer,
        Some("proj") => Component::Projection,
        Some("lora") => Component::Adapter,
        _ => Component::Lm,
    }
}

/// Output of the frozen image encoder for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    /// `num_patches × h_img`
    pub embeddings: Mat,
    pub source_image_id: String,
}

/// Projected query tokens for one or more images, concatenated in input
/// order: block `i` holds the `num_query_tokens` rows of image `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokenSet {
    /// `(k · num_query_tokens) × h_l`
    pub tokens: Mat,
    pub image_ids: Vec<String>,
}

/// The learned queries. Trained during re-alignment and fine-tuning, frozen
/// during the projection-only warm-up.
#[derive(Debug, Clone, Copy)]
pub struct QueryTokens<'a> {
    pub embeddings: &'a Mat,
}

/// Visual tokens followed by embedded prompt tokens. Only target positions
/// appended later by [`VisionLanguageModel::lm_loss`] carry loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LmInput {
    pub embeddings: Mat,
    pub n_visual: usize,
    pub n_prompt: usize,
}

impl LmInput {
    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `true` where a position contributes to the loss; never the case for
    /// visual or prompt positions.
    pub fn loss_mask(&self) -> Vec<bool> {
        vec![false; self.len()]
    }
}

/// Affine map `visual · W + b`, applied row-wise.
pub fn project(visual: &Mat, weight: &Mat, bias: &Mat) -> Result<Mat> {
    if visual.ncols() != weight.nrows() {
        return Err(shape_err!(
            "projection input width {} but weight is {:?}",
            visual.ncols(),
            weight.dim()
        ));
    }
    if bias.dim() != (1, weight.ncols()) {
        return Err(shape_err!(
            "projection bias {:?} for output width {}",
            bias.dim(),
            weight.ncols()
        ));
    }
    Ok(visual.dot(weight) + bias)
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionLanguageModel {
    config: ModelConfig,
    params: ParamStore,
    adapters: Option<AdapterSet>,
}

fn push_linear(specs: &mut Vec<(String, (usize, usize), Init)>, prefix: &str, d_in: usize, d_out: usize, bias: bool) {
    specs.push((
        format!("{prefix}.weight"),
        (d_out, d_in),
        Init::Normal(1.0 / (d_in as f64).sqrt()),
    ));
    if bias {
        specs.push((format!("{prefix}.bias"), (1, d_out), Init::Zeros));
    }
}

fn push_ln(specs: &mut Vec<(String, (usize, usize), Init)>, prefix: &str, d: usize) {
    specs.push((format!("{prefix}.gamma"), (1, d), Init::Ones));
    specs.push((format!("{prefix}.beta"), (1, d), Init::Zeros));
}

fn push_attention(specs: &mut Vec<(String, (usize, usize), Init)>, prefix: &str, d: usize, d_kv: usize, bias: bool) {
    push_linear(specs, &format!("{prefix}.q"), d, d, bias);
    push_linear(specs, &format!("{prefix}.k"), d_kv, d, bias);
    push_linear(specs, &format!("{prefix}.v"), d_kv, d, bias);
    push_linear(specs, &format!("{prefix}.o"), d, d, bias);
}

fn push_mlp(specs: &mut Vec<(String, (usize, usize), Init)>, prefix: &str, d: usize, ratio: usize, bias: bool) {
    push_linear(specs, &format!("{prefix}.up"), d, d * ratio, bias);
    push_linear(specs, &format!("{prefix}.down"), d * ratio, d, bias);
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, (usize, usize), Init)> {
    let mut s = Vec::new();
    push_linear(&mut s, "vit.patch_embed", cfg.patch_dim(), cfg.h_img, true);
    for i in 0..cfg.n_layers_vit {
        let p = format!("vit.layers.{i}");
        push_ln(&mut s, &format!("{p}.ln1"), cfg.h_img);
        push_attention(&mut s, &format!("{p}.attn"), cfg.h_img, cfg.h_img, true);
        push_ln(&mut s, &format!("{p}.ln2"), cfg.h_img);
        push_mlp(&mut s, &format!("{p}.mlp"), cfg.h_img, cfg.mlp_ratio, true);
    }

    s.push((
        "qformer.query_tokens".into(),
        (cfg.num_query_tokens, cfg.h_q),
        Init::Normal(0.02),
    ));
    s.push((
        "qformer.patch_pos".into(),
        (cfg.num_patches(), cfg.h_img),
        Init::Normal(0.02),
    ));
    push_ln(&mut s, "qformer.kv_ln", cfg.h_img);
    for i in 0..cfg.n_layers_qformer {
        let p = format!("qformer.layers.{i}");
        push_ln(&mut s, &format!("{p}.ln1"), cfg.h_q);
        push_attention(&mut s, &format!("{p}.self_attn"), cfg.h_q, cfg.h_q, true);
        push_ln(&mut s, &format!("{p}.ln2"), cfg.h_q);
        push_attention(&mut s, &format!("{p}.cross_attn"), cfg.h_q, cfg.h_img, true);
        push_ln(&mut s, &format!("{p}.ln3"), cfg.h_q);
        push_mlp(&mut s, &format!("{p}.mlp"), cfg.h_q, cfg.mlp_ratio, true);
    }
    push_ln(&mut s, "qformer.ln_f", cfg.h_q);
    push_linear(&mut s, "qformer.out", cfg.h_q, cfg.h_v, true);

    s.push((
        "proj.weight".into(),
        (cfg.h_v, cfg.h_l),
        Init::Normal(1.0 / (cfg.h_v as f64).sqrt()),
    ));
    s.push(("proj.bias".into(), (1, cfg.h_l), Init::Zeros));

    s.push((
        "lm.embed".into(),
        (cfg.vocab_size, cfg.h_l),
        Init::Normal(cfg.embed_std),
    ));
    s.push(("lm.pos".into(), (cfg.max_positions, cfg.h_l), Init::Normal(0.02)));
    for i in 0..cfg.n_layers_lm {
        let p = format!("lm.layers.{i}");
        push_ln(&mut s, &format!("{p}.ln1"), cfg.h_l);
        push_attention(&mut s, &format!("{p}.attn"), cfg.h_l, cfg.h_l, false);
        push_ln(&mut s, &format!("{p}.ln2"), cfg.h_l);
        push_mlp(&mut s, &format!("{p}.mlp"), cfg.h_l, cfg.mlp_ratio, false);
    }
    push_ln(&mut s, "lm.ln_f", cfg.h_l);
    s
}

impl VisionLanguageModel {
    /// Seeded random initialization; the same config (including seed) always
    /// produces bit-identical weights.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::default();
        for (name, shape, init) in param_specs(&config) {
            let value = match init {
                Init::Zeros => Mat::zeros(shape),
                Init::Ones => Mat::ones(shape),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                    Mat::from_shape_simple_fn(shape, || dist.sample(&mut rng))
                }
            };
            params.insert(name, value);
        }
        Ok(Self {
            config,
            params,
            adapters: None,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: ParamStore, adapters: Option<AdapterSet>) -> Result<Self> {
        config.validate()?;
        for (name, shape, _) in param_specs(&config) {
            let p = params
                .get(&name)
                .map_err(|_| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if p.dim() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, config expects {shape:?}",
                    p.dim()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            adapters,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn adapters(&self) -> Option<&AdapterSet> {
        self.adapters.as_ref()
    }

    pub(crate) fn adapters_mut(&mut self) -> &mut Option<AdapterSet> {
        &mut self.adapters
    }

    pub fn query_tokens(&self) -> QueryTokens<'_> {
        QueryTokens {
            embeddings: self.params.get("qformer.query_tokens").expect("query tokens"),
        }
    }

    /// LM weight matrices eligible for adapters: attention projections and
    /// feed-forward matrices. Embeddings and layer norms are excluded.
    pub fn lm_matrix_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.config.n_layers_lm {
            for m in ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down"] {
                names.push(format!("lm.layers.{i}.{m}.weight"));
            }
        }
        names
    }

    fn patchify(&self, image: &Image) -> Result<Mat> {
        let cfg = &self.config;
        if image.height != cfg.image_size || image.width != cfg.image_size {
            return Err(shape_err!(
                "image `{}` is {}x{}, model expects {}x{}",
                image.id,
                image.height,
                image.width,
                cfg.image_size,
                cfg.image_size
            ));
        }
        if image.pixels.len() != image.height * image.width * 3 {
            return Err(shape_err!("image `{}` pixel buffer has wrong length", image.id));
        }
        if let Some(v) = image.pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "image `{}` has pixel value {v} outside [0, 1]",
                image.id
            )));
        }
        let p = cfg.patch_size;
        let side = cfg.image_size / p;
        let mut out = Mat::zeros((side * side, cfg.patch_dim()));
        for py in 0..side {
            for px in 0..side {
                let mut row = out.row_mut(py * side + px);
                let mut k = 0;
                for y in 0..p {
                    for x in 0..p {
                        for c in 0..3 {
                            row[k] = image.at(py * p + y, px * p + x, c);
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Flattened patches, row-major over the patch grid, each patch in
    /// `(y, x, channel)` order.
    pub fn flatten_patches(&self, image: &Image) -> Result<Mat> {
        self.patchify(image)
    }

    /// Runs the frozen image encoder. No parameter of the encoder is ever
    /// registered for gradients.
    pub fn encode_image(&self, image: &Image) -> Result<PatchSequence> {
        let flat = self.patchify(image)?;
        let none = BTreeSet::new();
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, &self.config, &self.params, None, &none, None);
        let x = f.g.constant_owned(flat);
        let out = f.vision(x)?;
        Ok(PatchSequence {
            embeddings: g.value(out).clone(),
            source_image_id: image.id.clone(),
        })
    }

    /// Q-Former output for one image: `num_query_tokens × h_v` regardless of
    /// the patch count.
    pub fn qformer_encode(&self, patches: &PatchSequence) -> Result<Mat> {
        let none = BTreeSet::new();
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, &self.config, &self.params, None, &none, None);
        let x = f.g.constant(&patches.embeddings);
        let out = f.qformer(x)?;
        Ok(g.value(out).clone())
    }

    pub fn encode_images(&self, images: &[Image]) -> Result<VisualTokenSet> {
        if images.is_empty() {
            return Err(Error::InvalidInput("encode_images needs at least one image".into()));
        }
        let patches = images
            .iter()
            .map(|im| self.encode_image(im))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&PatchSequence> = patches.iter().collect();
        self.visual_tokens(&refs)
    }

    /// Q-Former + projection for each patch sequence, concatenated in order.
    pub fn visual_tokens(&self, patches: &[&PatchSequence]) -> Result<VisualTokenSet> {
        if patches.is_empty() {
            return Err(Error::InvalidInput("no images to encode".into()));
        }
        let none = BTreeSet::new();
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, &self.config, &self.params, None, &none, None);
        let mut blocks = Vec::with_capacity(patches.len());
        for p in patches {
            let x = f.g.constant(&p.embeddings);
            let q = f.qformer(x)?;
            blocks.push(f.project(q)?);
        }
        let tokens = if blocks.len() == 1 {
            blocks[0]
        } else {
            f.g.concat_rows(&blocks)?
        };
        Ok(VisualTokenSet {
            tokens: g.value(tokens).clone(),
            image_ids: patches.iter().map(|p| p.source_image_id.clone()).collect(),
        })
    }

    pub fn assemble_lm_input(&self, visual: &VisualTokenSet, prompt_ids: &[u32]) -> Result<LmInput> {
        if visual.tokens.ncols() != self.config.h_l {
            return Err(shape_err!(
                "visual tokens have width {}, LM expects {}",
                visual.tokens.ncols(),
                self.config.h_l
            ));
        }
        let table = self.params.get("lm.embed")?;
        let vocab = table.nrows();
        let mut embeddings = Mat::zeros((visual.tokens.nrows() + prompt_ids.len(), self.config.h_l));
        embeddings
            .slice_mut(ndarray::s![..visual.tokens.nrows(), ..])
            .assign(&visual.tokens);
        for (i, &id) in prompt_ids.iter().enumerate() {
            if id as usize >= vocab {
                return Err(Error::OutOfVocab { id, vocab });
            }
            embeddings
                .row_mut(visual.tokens.nrows() + i)
                .assign(&table.row(id as usize));
        }
        Ok(LmInput {
            embeddings,
            n_visual: visual.tokens.nrows(),
            n_prompt: prompt_ids.len(),
        })
    }

    fn truncate_target<'t>(&self, target: &'t [u32]) -> &'t [u32] {
        let max = self.config.max_target_len;
        if target.len() > max {
            log::warn!("target of {} tokens truncated to {max}", target.len());
            &target[..max]
        } else {
            target
        }
    }

    /// Rows of the logit matrix that predict each target token.
    fn target_rows(prefix_len: usize, target: &[u32]) -> Vec<(usize, usize)> {
        target
            .iter()
            .enumerate()
            .map(|(t, &id)| (prefix_len + t - 1, id as usize))
            .collect()
    }

    /// Full logit matrix for `input ++ target[..len-1]`; row `i` predicts
    /// position `i + 1`.
    pub fn lm_logits(&self, input: &LmInput, target: &[u32]) -> Result<Mat> {
        let target = self.truncate_target(target);
        let none = BTreeSet::new();
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, &self.config, &self.params, self.adapters.as_ref(), &none, None);
        let prefix = f.g.constant(&input.embeddings);
        let seq = if target.len() > 1 {
            let t = f.embed_tokens(&target[..target.len() - 1])?;
            f.g.concat_rows(&[prefix, t])?
        } else {
            prefix
        };
        let h = f.lm_hidden(seq)?;
        let logits = f.logits(h)?;
        Ok(g.value(logits).clone())
    }

    /// Mean next-token cross-entropy over the target tokens only.
    pub fn lm_loss(&self, input: &LmInput, target: &[u32]) -> Result<f64> {
        if input.is_empty() {
            return Err(Error::InvalidInput("empty LM input".into()));
        }
        let target = self.truncate_target(target);
        if target.is_empty() {
            return Err(Error::InvalidInput("empty target".into()));
        }
        let logits = self.lm_logits(input, target)?;
        let mut g = Graph::new();
        let l = g.constant(&logits);
        let loss = g.cross_entropy(l, &Self::target_rows(input.len(), target))?;
        Ok(g.scalar(loss))
    }

    /// Loss of one example and the gradients of every parameter in
    /// `trainable`. Parameters outside the set are constants on the tape.
    /// With `dropout_seed`, adapter dropout is active (training mode).
    pub fn loss_and_grads(
        &self,
        patches: &[&PatchSequence],
        prompt_ids: &[u32],
        target_ids: &[u32],
        trainable: &BTreeSet<String>,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, BTreeMap<String, Mat>)> {
        if patches.is_empty() {
            return Err(Error::InvalidInput("example without images".into()));
        }
        let target = self.truncate_target(target_ids);
        if target.is_empty() {
            return Err(Error::InvalidInput("empty target".into()));
        }
        let rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let mut g = Graph::new();
        let mut f = Fwd::new(
            &mut g,
            &self.config,
            &self.params,
            self.adapters.as_ref(),
            trainable,
            rng,
        );
        let mut parts = Vec::with_capacity(patches.len() + 2);
        for p in patches {
            let x = f.g.constant(&p.embeddings);
            let q = f.qformer(x)?;
            parts.push(f.project(q)?);
        }
        let n_visual = patches.len() * self.config.num_query_tokens;
        if !prompt_ids.is_empty() {
            parts.push(f.embed_tokens(prompt_ids)?);
        }
        if target.len() > 1 {
            parts.push(f.embed_tokens(&target[..target.len() - 1])?);
        }
        let seq = f.g.concat_rows(&parts)?;
        let h = f.lm_hidden(seq)?;
        let logits = f.logits(h)?;
        let rows = Self::target_rows(n_visual + prompt_ids.len(), target);
        let loss = g.cross_entropy(logits, &rows)?;
        let value = g.scalar(loss);
        let grads = if trainable.is_empty() {
            BTreeMap::new()
        } else {
            g.backward(loss)?.into_params()
        };
        Ok((value, grads))
    }

    /// Next-token logits after `input ++ generated`, adapters applied in
    /// inference mode.
    pub fn next_token_logits(&self, input: &LmInput, generated: &[u32]) -> Result<Vec<f64>> {
        let none = BTreeSet::new();
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, &self.config, &self.params, self.adapters.as_ref(), &none, None);
        let prefix = f.g.constant(&input.embeddings);
        let seq = if generated.is_empty() {
            prefix
        } else {
            let t = f.embed_tokens(generated)?;
            f.g.concat_rows(&[prefix, t])?
        };
        let h = f.lm_hidden(seq)?;
        let hidden = g.value(h);
        let last = hidden.row(hidden.nrows() - 1);
        let table = self.params.get("lm.embed")?;
        Ok(table.dot(&last).to_vec())
    }
}
