//! Graph-building forward passes shared by inference, loss evaluation and
//! training.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::AdapterSet;
use crate::autodiff::{Graph, Mat, Var};
use crate::error::{shape_err, Error, Result};
use crate::model::{ModelConfig, ParamStore};

pub(crate) struct Fwd<'m, 'g> {
    pub g: &'g mut Graph<'m>,
    pub cfg: &'m ModelConfig,
    params: &'m ParamStore,
    adapters: Option<&'m AdapterSet>,
    trainable: &'g BTreeSet<String>,
    dropout: Option<ChaCha8Rng>,
}

impl<'m, 'g> Fwd<'m, 'g> {
    pub fn new(
        g: &'g mut Graph<'m>,
        cfg: &'m ModelConfig,
        params: &'m ParamStore,
        adapters: Option<&'m AdapterSet>,
        trainable: &'g BTreeSet<String>,
        dropout: Option<ChaCha8Rng>,
    ) -> Self {
        Self {
            g,
            cfg,
            params,
            adapters,
            trainable,
            dropout,
        }
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let value = self.params.get(name)?;
        Ok(self.g.param(name, value, self.trainable.contains(name)))
    }

    fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    /// `x · Wᵀ (+ b)` for a weight stored `out × in`, plus the low-rank
    /// update when an adapter wraps this weight.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let wname = format!("{prefix}.weight");
        let w = self.p(&wname)?;
        let mut y = self.g.matmul_t(x, w)?;
        let bname = format!("{prefix}.bias");
        if self.has(&bname) {
            let b = self.p(&bname)?;
            y = self.g.add_row(y, b)?;
        }
        if let Some(adapters) = self.adapters {
            if adapters.targets.contains(&wname) {
                let scaling = adapters.config.scaling();
                let p_drop = adapters.config.dropout;
                let a = self.p(&AdapterSet::a_name(&wname))?;
                let b = self.p(&AdapterSet::b_name(&wname))?;
                let xin = match self.dropout.as_mut() {
                    Some(rng) if p_drop > 0.0 => {
                        let shape = self.g.value(x).raw_dim();
                        let keep = 1.0 / (1.0 - p_drop);
                        let mask =
                            Mat::from_shape_simple_fn(shape, || if rng.random::<f64>() < p_drop { 0.0 } else { keep });
                        let m = self.g.constant_owned(mask);
                        self.g.mul(x, m)?
                    }
                    _ => x,
                };
                let low = self.g.matmul_t(xin, a)?;
                let up = self.g.matmul_t(low, b)?;
                let up = self.g.scale(up, scaling);
                y = self.g.add(y, up)?;
            }
        }
        Ok(y)
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        self.g.layer_norm(x, gamma, beta, self.cfg.layer_norm_eps)
    }

    /// Multi-head attention of `xq` over `xkv`.
    pub fn attention(&mut self, prefix: &str, xq: Var, xkv: Var, causal: bool) -> Result<Var> {
        let q = self.linear(&format!("{prefix}.q"), xq)?;
        let k = self.linear(&format!("{prefix}.k"), xkv)?;
        let v = self.linear(&format!("{prefix}.v"), xkv)?;
        let width = self.g.value(q).ncols();
        let heads = self.cfg.n_heads;
        if !width.is_multiple_of(heads) {
            return Err(shape_err!("attention width {width} not divisible by {heads} heads"));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.g.slice_cols(q, h * dh, dh)?,
                    self.g.slice_cols(k, h * dh, dh)?,
                    self.g.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = self.g.matmul_t(qh, kh)?;
            let scores = self.g.scale(scores, scale);
            let probs = self.g.softmax(scores, causal.then_some(0));
            outs.push(self.g.matmul(probs, vh)?);
        }
        let merged = if heads == 1 {
            outs[0]
        } else {
            self.g.concat_cols(&outs)?
        };
        self.linear(&format!("{prefix}.o"), merged)
    }

    pub fn mlp(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(&format!("{prefix}.up"), x)?;
        let h = self.g.gelu(h);
        self.linear(&format!("{prefix}.down"), h)
    }

    /// Pre-norm self-attention + MLP block.
    fn block(&mut self, prefix: &str, x: Var, causal: bool) -> Result<Var> {
        let h = self.layer_norm(&format!("{prefix}.ln1"), x)?;
        let a = self.attention(&format!("{prefix}.attn"), h, h, causal)?;
        let x = self.g.add(x, a)?;
        let h = self.layer_norm(&format!("{prefix}.ln2"), x)?;
        let m = self.mlp(&format!("{prefix}.mlp"), h)?;
        self.g.add(x, m)
    }

    /// Patch embedding followed by the encoder blocks. Carries no position
    /// information, so identical patches always map to identical rows.
    pub fn vision(&mut self, flat_patches: Var) -> Result<Var> {
        let mut x = self.linear("vit.patch_embed", flat_patches)?;
        for i in 0..self.cfg.n_layers_vit {
            x = self.block(&format!("vit.layers.{i}"), x, false)?;
        }
        Ok(x)
    }

    /// Learned queries cross-attending over one image's patch features.
    pub fn qformer(&mut self, patches: Var) -> Result<Var> {
        let n = self.g.value(patches).nrows();
        if n == 0 {
            return Err(Error::InvalidInput(
                "empty patch sequence: nothing to cross-attend to".into(),
            ));
        }
        // Position table covers the configured grid; shorter sequences use a prefix.
        let table = self.p("qformer.patch_pos")?;
        let (rows, width) = self.g.value(table).dim();
        let (n_in, w_in) = self.g.value(patches).dim();
        if n_in > rows || w_in != width {
            return Err(shape_err!(
                "patch sequence {:?} does not fit the configured patch grid {:?}",
                (n_in, w_in),
                (rows, width)
            ));
        }
        let pos = if n_in == rows {
            table
        } else {
            self.g.slice_rows(table, 0, n_in)?
        };
        let kv = self.g.add(patches, pos)?;
        let kv = self.layer_norm("qformer.kv_ln", kv)?;
        let mut q = self.p("qformer.query_tokens")?;
        for i in 0..self.cfg.n_layers_qformer {
            let pre = format!("qformer.layers.{i}");
            let h = self.layer_norm(&format!("{pre}.ln1"), q)?;
            let a = self.attention(&format!("{pre}.self_attn"), h, h, false)?;
            q = self.g.add(q, a)?;
            let h = self.layer_norm(&format!("{pre}.ln2"), q)?;
            let c = self.attention(&format!("{pre}.cross_attn"), h, kv, false)?;
            q = self.g.add(q, c)?;
            let h = self.layer_norm(&format!("{pre}.ln3"), q)?;
            let m = self.mlp(&format!("{pre}.mlp"), h)?;
            q = self.g.add(q, m)?;
        }
        let q = self.layer_norm("qformer.ln_f", q)?;
        self.linear("qformer.out", q)
    }

    /// Row-wise affine bridge into the language model space.
    pub fn project(&mut self, visual: Var) -> Result<Var> {
        let w = self.p("proj.weight")?;
        let b = self.p("proj.bias")?;
        let y = self.g.matmul(visual, w)?;
        self.g.add_row(y, b)
    }

    /// Causal LM over an already-embedded sequence; returns final hidden
    /// states.
    pub fn lm_hidden(&mut self, embeddings: Var) -> Result<Var> {
        let n = self.g.value(embeddings).nrows();
        if n > self.cfg.max_positions {
            return Err(Error::InvalidInput(format!(
                "sequence of {n} positions exceeds max_positions {}",
                self.cfg.max_positions
            )));
        }
        let pos_table = self.params.get("lm.pos")?;
        let pos = self.g.constant_owned(pos_table.slice(ndarray::s![..n, ..]).to_owned());
        let mut x = self.g.add(embeddings, pos)?;
        for i in 0..self.cfg.n_layers_lm {
            x = self.block(&format!("lm.layers.{i}"), x, true)?;
        }
        self.layer_norm("lm.ln_f", x)
    }

    /// Token embeddings for `ids` as a constant (the table is never trained).
    pub fn embed_tokens(&mut self, ids: &[u32]) -> Result<Var> {
        let table = self.params.get("lm.embed")?;
        let vocab = table.nrows();
        let mut out = Mat::zeros((ids.len(), table.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            if id as usize >= vocab {
                return Err(Error::OutOfVocab { id, vocab });
            }
            out.row_mut(r).assign(&table.row(id as usize));
        }
        Ok(self.g.constant_owned(out))
    }

    /// Logits through the tied output embedding.
    pub fn logits(&mut self, hidden: Var) -> Result<Var> {
        let e = self.p("lm.embed")?;
        self.g.matmul_t(hidden, e)
    }
}
