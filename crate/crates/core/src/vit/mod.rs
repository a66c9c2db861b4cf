//! Plain Vision Transformer with an instrumented forward pass.
//!
//! Blocks use pre-LN ordering. Every intermediate feature of every block is
//! available through [`TapRecord`]; the last block may be rebuilt with a
//! different head count (the adaptive block) so its per-head relations line
//! up with a teacher's.

mod forward;
mod mask;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub use forward::{
    block_forward, classification_head, merge_heads, patch_embed, patchify, qkv_project, BlockTaps,
    BranchScales, ForwardOptions, ForwardOutput, Mode, TapRecord,
};
pub use mask::MaskSpec;

fn default_channels() -> usize {
    3
}

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub drop_path_rate: f32,
    /// Head count of the last block when it differs from `heads`.
    #[serde(default)]
    pub adaptive_last_block_heads: Option<usize>,
}

impl ViTConfig {
    /// Checks every structural invariant; `path` prefixes error locations.
    pub fn validate(&self, path: &str) -> Result<()> {
        let at = |field: &str| format!("{path}.{field}");
        for (name, v) in [
            ("depth", self.depth),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("num_classes", self.num_classes),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return Err(Error::config(at(name), "must be positive"));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                at("heads"),
                format!("hidden_dim {} is not divisible by {} heads", self.hidden_dim, self.heads),
            ));
        }
        if let Some(m) = self.adaptive_last_block_heads {
            if m == 0 || !self.hidden_dim.is_multiple_of(m) {
                return Err(Error::config(
                    at("adaptive_last_block_heads"),
                    format!("hidden_dim {} is not divisible by {} heads", self.hidden_dim, m),
                ));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                at("patch_size"),
                format!("image_size {} is not divisible by patch_size {}", self.image_size, self.patch_size),
            ));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::config(at("drop_path_rate"), "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch count N.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length N + 1 (class token first).
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_dim(&self) -> usize {
        self.hidden_dim * self.mlp_ratio
    }

    /// Head count of 0-based block `i`.
    pub fn heads_for_block(&self, i: usize) -> usize {
        match self.adaptive_last_block_heads {
            Some(m) if i + 1 == self.depth => m,
            _ => self.heads,
        }
    }

    pub fn head_dim_for_block(&self, i: usize) -> usize {
        self.hidden_dim / self.heads_for_block(i)
    }

    /// Stochastic-depth rate of 0-based block `i`: linear from 0 at the first
    /// block to `rate` at the last.
    pub fn block_drop_rate(&self, i: usize, rate: f32) -> f32 {
        if self.depth <= 1 {
            0.0
        } else {
            rate * i as f32 / (self.depth - 1) as f32
        }
    }
}

/// Names, shapes and decay flags of every parameter implied by a config.
pub fn param_layout(cfg: &ViTConfig) -> Vec<(String, Vec<usize>, bool)> {
    let (d, h) = (cfg.hidden_dim, cfg.mlp_dim());
    let mut out = vec![
        ("patch_embed.weight".to_string(), vec![cfg.patch_dim(), d], true),
        ("patch_embed.bias".to_string(), vec![d], false),
        ("cls_token".to_string(), vec![d], false),
        ("mask_token".to_string(), vec![d], false),
        ("pos_embed".to_string(), vec![cfg.tokens(), d], false),
    ];
    for i in 0..cfg.depth {
        let p = |s: &str| format!("blocks.{i}.{s}");
        out.extend([
            (p("norm1.weight"), vec![d], false),
            (p("norm1.bias"), vec![d], false),
            (p("attn.q.weight"), vec![d, d], true),
            (p("attn.q.bias"), vec![d], false),
            (p("attn.k.weight"), vec![d, d], true),
            (p("attn.k.bias"), vec![d], false),
            (p("attn.v.weight"), vec![d, d], true),
            (p("attn.v.bias"), vec![d], false),
            (p("attn.proj.weight"), vec![d, d], true),
            (p("attn.proj.bias"), vec![d], false),
            (p("norm2.weight"), vec![d], false),
            (p("norm2.bias"), vec![d], false),
            (p("mlp.fc1.weight"), vec![d, h], true),
            (p("mlp.fc1.bias"), vec![h], false),
            (p("mlp.fc2.weight"), vec![h, d], true),
            (p("mlp.fc2.bias"), vec![d], false),
        ]);
    }
    out.extend([
        ("norm.weight".to_string(), vec![d], false),
        ("norm.bias".to_string(), vec![d], false),
        ("head.weight".to_string(), vec![d, cfg.num_classes], true),
        ("head.bias".to_string(), vec![cfg.num_classes], false),
    ]);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel {
    pub config: ViTConfig,
    pub params: ParamStore,
}

impl ViTModel {
    /// Fresh model: truncated normal σ = 0.02 for projections, tokens and
    /// positional embedding; zero biases; unit layer-norm gains.
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate("$")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, decay) in param_layout(&config) {
            let t = if name.ends_with("norm1.weight")
                || name.ends_with("norm2.weight")
                || name == "norm.weight"
            {
                Tensor::ones(&shape)
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                Tensor::trunc_normal(&shape, 0.02, &mut rng)
            };
            params.insert(name, t, decay);
        }
        Ok(ViTModel { config, params })
    }

    /// Wraps existing parameters, refusing any that do not match the layout
    /// implied by `config`.
    pub fn from_params(config: ViTConfig, params: ParamStore) -> Result<Self> {
        config.validate("$.config")?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "config implies {} tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in layout.iter().zip(params.iter()) {
            if *name != p.name || *shape != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected {name} {shape:?}, found {} {:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        Ok(ViTModel { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Parameter count of 0-based block `i`.
    pub fn block_parameters(&self, i: usize) -> usize {
        let prefix = format!("blocks.{i}.");
        self.params
            .iter()
            .filter(|p| p.name.starts_with(&prefix))
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Saves as a checkpoint whose header embeds the full config. Returns the
    /// checkpoint hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let header = serde_json::json!({ "config": self.config });
        checkpoint::save(path, &self.params, header)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, params) = checkpoint::load(path)?;
        let config: ViTConfig = serde_json::from_value(manifest.header["config"].clone()).map_err(|e| {
            Error::Checkpoint(format!("{}: header has no valid config: {e}", path.display()))
        })?;
        Self::from_params(config, params)
    }

    /// Copies every parameter whose name and shape also exist in `other`.
    /// Returns the number of tensors copied.
    pub fn copy_matching_from(&mut self, other: &ViTModel) -> usize {
        let mut copied = 0;
        for p in self.params.iter_mut() {
            if let Some(src) = other.params.get(&p.name) {
                if src.shape() == p.tensor.shape() {
                    p.tensor.data_mut().copy_from_slice(src.data());
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Replaces the classification head with a freshly initialized one.
    pub fn reset_head(&mut self, num_classes: usize, seed: u64) {
        self.config.num_classes = num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.hidden_dim;
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            match p.name.as_str() {
                "head.weight" => params.insert(
                    "head.weight",
                    Tensor::trunc_normal(&[d, num_classes], 0.02, &mut rng),
                    true,
                ),
                "head.bias" => params.insert("head.bias", Tensor::zeros(&[num_classes]), false),
                _ => params.insert(p.name.clone(), p.tensor.clone(), p.decay),
            }
        }
        self.params = params;
    }
}

/// Builds a student whose last block carries `teacher_heads` heads at the
/// student's own hidden width.
pub fn build_student(mut config: ViTConfig, teacher_heads: usize, seed: u64) -> Result<ViTModel> {
    config.adaptive_last_block_heads = (teacher_heads != config.heads).then_some(teacher_heads);
    ViTModel::new(config, seed)
}
