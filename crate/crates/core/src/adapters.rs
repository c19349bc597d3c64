//! Low-rank adapters on the frozen language model.
//!
//! An adapter on weight `W` (`d_out × d_in`) holds `A` (`r × d_in`) and `B`
//! (`d_out × r`) and adds `(alpha / r) · B · A · x` to `W · x`. `B` starts at
//! zero so a freshly attached adapter leaves every output unchanged.

use std::collections::BTreeSet;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{shape_err, Error, Result};
use crate::model::VisionLanguageModel;

/// Which LM matrices receive adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    None,
    QueryValue,
    AllLmMatrices,
}

impl std::fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LoraTarget::None => "none",
            LoraTarget::QueryValue => "q,v",
            LoraTarget::AllLmMatrices => "all",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub target: LoraTarget,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            r: 8,
            alpha: 16.0,
            dropout: 0.05,
            target: LoraTarget::AllLmMatrices,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.r as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Config("LoRA rank must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("LoRA dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Adapters attached to a model. The `A`/`B` tensors themselves live in the
/// model's parameter store under the `lora.` namespace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    pub config: LoraConfig,
    /// Names of the wrapped base weights.
    pub targets: BTreeSet<String>,
}

impl AdapterSet {
    pub fn a_name(base: &str) -> String {
        format!("lora.{base}.a")
    }

    pub fn b_name(base: &str) -> String {
        format!("lora.{base}.b")
    }

    pub fn param_names(&self) -> Vec<String> {
        self.targets
            .iter()
            .flat_map(|t| [Self::a_name(t), Self::b_name(t)])
            .collect()
    }
}

/// A standalone adapter, used for the single-vector formulation.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub base_matrix_name: String,
    /// `r × d_in`
    pub a: Mat,
    /// `d_out × r`
    pub b: Mat,
    pub config: LoraConfig,
}

/// `W·x + (alpha/r)·B·(A·dropout(x))`. Dropout only applies when `training`
/// and an RNG is supplied.
pub fn lora_forward(
    x: &Array1<f64>,
    w: &Mat,
    adapter: &LoraAdapter,
    training: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Array1<f64>> {
    let r = adapter.config.r;
    if w.ncols() != x.len() {
        return Err(shape_err!("W is {:?} but x has length {}", w.dim(), x.len()));
    }
    if adapter.a.dim() != (r, w.ncols()) || adapter.b.dim() != (w.nrows(), r) {
        return Err(shape_err!(
            "rank mismatch: A {:?}, B {:?} for r = {r} and W {:?}",
            adapter.a.dim(),
            adapter.b.dim(),
            w.dim()
        ));
    }
    let p = adapter.config.dropout;
    let xin = match (training, rng) {
        (true, Some(rng)) if p > 0.0 => x.mapv(|v| if rng.random::<f64>() < p { 0.0 } else { v / (1.0 - p) }),
        _ => x.clone(),
    };
    let low = adapter.a.dot(&xin);
    Ok(w.dot(x) + adapter.b.dot(&low) * adapter.config.scaling())
}

/// Attaches fresh adapters: `A ~ N(0, 0.02²)`, `B = 0`.
pub fn attach_lora(model: &mut VisionLanguageModel, config: LoraConfig, seed: u64) -> Result<()> {
    config.validate()?;
    let wanted: Vec<String> = match config.target {
        LoraTarget::None => Vec::new(),
        LoraTarget::AllLmMatrices => model.lm_matrix_names(),
        LoraTarget::QueryValue => model
            .lm_matrix_names()
            .into_iter()
            .filter(|n| n.ends_with("attn.q.weight") || n.ends_with("attn.v.weight"))
            .collect(),
    };
    if let Some(existing) = model.adapters() {
        if let Some(dup) = wanted.iter().find(|n| existing.targets.contains(*n)) {
            return Err(Error::Adapter(format!("`{dup}` already has an adapter attached")));
        }
        if existing.config != config && !wanted.is_empty() {
            return Err(Error::Adapter("cannot mix adapter configurations on one model".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 0.02).expect("valid std");
    for name in &wanted {
        let (d_out, d_in) = model.params().get(name)?.dim();
        let a = Mat::from_shape_simple_fn((config.r, d_in), || dist.sample(&mut rng));
        let b = Mat::zeros((d_out, config.r));
        model.params_mut().insert(AdapterSet::a_name(name), a);
        model.params_mut().insert(AdapterSet::b_name(name), b);
    }
    let slot = model.adapters_mut();
    match slot {
        Some(set) => set.targets.extend(wanted),
        None => {
            *slot = Some(AdapterSet {
                config,
                targets: wanted.into_iter().collect(),
            })
        }
    }
    Ok(())
}

/// `W + (alpha/r)·B·A` for one adapter.
pub fn merged_weight(w: &Mat, adapter: &LoraAdapter) -> Result<Mat> {
    let (r, (d_out, d_in)) = (adapter.config.r, w.dim());
    if adapter.a.dim() != (r, d_in) || adapter.b.dim() != (d_out, r) {
        return Err(shape_err!(
            "adapter A {:?}, B {:?} do not fit W {:?}",
            adapter.a.dim(),
            adapter.b.dim(),
            w.dim()
        ));
    }
    Ok(w + &(adapter.b.dot(&adapter.a) * adapter.config.scaling()))
}

/// Folds every adapter into its base weight, `W ← W + (alpha/r)·B·A`, and
/// removes the adapters.
pub fn merge_lora(model: &mut VisionLanguageModel) -> Result<()> {
    let Some(set) = model.adapters_mut().take() else {
        return Err(Error::Adapter("no adapters attached; nothing to merge".into()));
    };
    let scaling = set.config.scaling();
    for base in &set.targets {
        let a = model
            .params_mut()
            .remove(&AdapterSet::a_name(base))
            .ok_or_else(|| Error::Adapter(format!("missing A for `{base}`")))?;
        let b = model
            .params_mut()
            .remove(&AdapterSet::b_name(base))
            .ok_or_else(|| Error::Adapter(format!("missing B for `{base}`")))?;
        let delta = b.dot(&a) * scaling;
        let w = model.params_mut().get_mut(base)?;
        *w += &delta;
    }
    Ok(())
}

/// Number of trainable adapter parameters: `Σ r·(d_in + d_out)`.
pub fn trainable_adapter_params(model: &VisionLanguageModel) -> usize {
    model.adapters().map_or(0, |set| {
        set.param_names()
            .iter()
            .filter_map(|n| model.params().get(n).ok())
            .map(Mat::len)
            .sum()
    })
}
