use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of the toy vision-language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Vision encoder width.
    pub h_img: usize,
    pub num_query_tokens: usize,
    /// Q-Former width.
    pub h_q: usize,
    /// Q-Former output width, the input side of the projection.
    pub h_v: usize,
    /// Language model width, the output side of the projection.
    pub h_l: usize,
    pub n_layers_vit: usize,
    pub n_layers_qformer: usize,
    pub n_layers_lm: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub max_target_len: usize,
    pub max_positions: usize,
    pub layer_norm_eps: f64,
    /// Standard deviation of the (tied) token embedding at init.
    pub embed_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            h_img: 32,
            num_query_tokens: 32,
            h_q: 32,
            h_v: 32,
            h_l: 48,
            n_layers_vit: 2,
            n_layers_qformer: 2,
            n_layers_lm: 2,
            n_heads: 4,
            mlp_ratio: 4,
            vocab_size: 256,
            max_target_len: 128,
            max_positions: 512,
            layer_norm_eps: 1e-5,
            embed_std: 0.3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 {
            return fail("image_size and patch_size must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_query_tokens == 0 {
            return fail("num_query_tokens must be > 0".into());
        }
        for (name, v) in [
            ("h_img", self.h_img),
            ("h_q", self.h_q),
            ("h_v", self.h_v),
            ("h_l", self.h_l),
            ("n_heads", self.n_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("vocab_size", self.vocab_size),
            ("max_target_len", self.max_target_len),
            ("max_positions", self.max_positions),
        ] {
            if v == 0 {
                return fail(format!("{name} must be > 0"));
            }
        }
        for (name, v) in [("h_img", self.h_img), ("h_q", self.h_q), ("h_l", self.h_l)] {
            if v % self.n_heads != 0 {
                return fail(format!("{name} = {v} is not divisible by n_heads = {}", self.n_heads));
            }
        }
        Ok(())
    }
}
