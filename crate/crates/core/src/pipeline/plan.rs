use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::distill::{LossKind, LossStrategy};
use crate::error::{Error, Result};
use crate::vit::ViTConfig;

/// Reference peak learning rate and the batch size it was tuned for; the
/// default peak scales linearly with batch size.
pub const REFERENCE_PEAK_LR: f64 = 2.4e-3;
pub const REFERENCE_BATCH: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum InputMode {
    #[default]
    Raw,
    Masked { mask_ratio: f32 },
}


fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    64
}
fn default_warmup() -> usize {
    5
}
fn default_wd() -> f32 {
    0.05
}
fn default_min_lr() -> f64 {
    1e-5
}
fn default_student_dpr() -> f32 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillPlan {
    /// Required for a standalone stage; later stages of a chain take the
    /// previous stage's student instead and must leave this unset.
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    /// Start from these weights instead of a fresh initialization.
    #[serde(default)]
    pub student_init_checkpoint: Option<PathBuf>,
    pub student_config: ViTConfig,
    /// 1-based teacher block; defaults to `round(0.75·depth)`.
    #[serde(default)]
    pub target_block_index: Option<usize>,
    pub loss_strategy: LossStrategy,
    #[serde(default)]
    pub input_mode: InputMode,
    #[serde(default)]
    pub teacher_drop_path: f32,
    #[serde(default = "default_student_dpr")]
    pub student_drop_path: f32,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Defaults to 2.4e-3 · batch_size / 4096.
    #[serde(default)]
    pub peak_lr: Option<f64>,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_wd")]
    pub weight_decay: f32,
    #[serde(default = "default_min_lr")]
    pub min_lr: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DistillPlan {
    pub fn new(student_config: ViTConfig, loss_strategy: LossStrategy) -> Self {
        DistillPlan {
            teacher_checkpoint: None,
            student_init_checkpoint: None,
            student_config,
            target_block_index: None,
            loss_strategy,
            input_mode: InputMode::Raw,
            teacher_drop_path: 0.0,
            student_drop_path: default_student_dpr(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            peak_lr: None,
            warmup_epochs: default_warmup(),
            weight_decay: default_wd(),
            min_lr: default_min_lr(),
            seed: 0,
        }
    }

    pub fn effective_peak_lr(&self) -> f64 {
        self.peak_lr
            .unwrap_or(REFERENCE_PEAK_LR * self.batch_size as f64 / REFERENCE_BATCH as f64)
    }

    /// Checks everything that does not need the teacher.
    pub fn validate(&self, path: &str) -> Result<()> {
        let at = |f: &str| format!("{path}.{f}");
        self.student_config.validate(&at("student_config"))?;
        self.loss_strategy.validate(&at("loss_strategy"))?;
        if self.batch_size == 0 {
            return Err(Error::config(at("batch_size"), "must be positive"));
        }
        for (name, v) in [("teacher_drop_path", self.teacher_drop_path), ("student_drop_path", self.student_drop_path)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(at(name), "must lie in [0, 1)"));
            }
        }
        if let InputMode::Masked { mask_ratio } = self.input_mode {
            if !(0.0..1.0).contains(&mask_ratio) {
                return Err(Error::config(at("input_mode.mask_ratio"), "must lie in [0, 1)"));
            }
        }
        if self.loss_strategy.with_reconstruction && !matches!(self.input_mode, InputMode::Masked { mask_ratio } if mask_ratio > 0.0) {
            return Err(Error::config(
                at("loss_strategy.with_reconstruction"),
                "reconstruction needs masked input with a positive mask_ratio",
            ));
        }
        if let Some(lr) = self.peak_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(at("peak_lr"), "must be positive"));
            }
        }
        if !(self.min_lr >= 0.0) {
            return Err(Error::config(at("min_lr"), "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return Err(Error::config(at("weight_decay"), "must lie in [0, 1)"));
        }
        if self.target_block_index == Some(0) {
            return Err(Error::config(at("target_block_index"), "blocks are numbered from 1"));
        }
        Ok(())
    }

    /// Checks the plan against the teacher it will distill from.
    pub fn validate_against_teacher(&self, teacher: &ViTConfig, path: &str) -> Result<usize> {
        let at = |f: &str| format!("{path}.{f}");
        let s = &self.student_config;
        let target = select_target_block(teacher.depth, self.target_block_index)
            .map_err(|_| Error::config(at("target_block_index"), format!("teacher has {} blocks", teacher.depth)))?;
        if teacher.depth < s.depth || teacher.hidden_dim < s.hidden_dim {
            return Err(Error::config(
                at("student_config"),
                format!(
                    "student (depth {}, width {}) is larger than teacher (depth {}, width {})",
                    s.depth, s.hidden_dim, teacher.depth, teacher.hidden_dim
                ),
            ));
        }
        if teacher.image_size != s.image_size || teacher.patch_size != s.patch_size || teacher.channels != s.channels {
            return Err(Error::config(
                at("student_config"),
                "student and teacher must share image_size, patch_size and channels",
            ));
        }
        if self.loss_strategy.kind == LossKind::Relation {
            let th = teacher.heads_for_block(target - 1);
            let sh = s.heads_for_block(s.depth - 1);
            if th != sh {
                return Err(Error::config(
                    at("student_config.adaptive_last_block_heads"),
                    format!("teacher block {target} has {th} heads, student last block has {sh}; set adaptive_last_block_heads to {th}"),
                ));
            }
        }
        Ok(target)
    }

    /// Stable identifier: hash of the canonical typed JSON.
    pub fn config_hash(&self) -> String {
        canonical_hash(self)
    }
}

/// First 12 hex digits of the SHA-256 of a value's canonical JSON, so key
/// order and whitespace in the source file do not matter.
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    let text = serde_json::to_string(&v).expect("serializable");
    sha256_hex(text.as_bytes())[..12].to_string()
}

/// `override` when given, otherwise `round(0.75·depth)`.
pub fn select_target_block(teacher_depth: usize, override_index: Option<usize>) -> Result<usize> {
    match override_index {
        Some(i) if i >= 1 && i <= teacher_depth => Ok(i),
        Some(i) => Err(Error::config(
            "$.target_block_index",
            format!("block {i} outside 1..={teacher_depth}"),
        )),
        None => Ok(((0.75 * teacher_depth as f64).round() as usize).max(1)),
    }
}

/// Stages run in order; each stage's student becomes the next teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageChain {
    pub stages: Vec<DistillPlan>,
}

impl StageChain {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("$.stages", "chain has no stages"));
        }
        if self.stages[0].teacher_checkpoint.is_none() {
            return Err(Error::config("$.stages[0].teacher_checkpoint", "first stage needs a teacher"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let path = format!("$.stages[{i}]");
            s.validate(&path)?;
            if i > 0 {
                if s.teacher_checkpoint.is_some() {
                    return Err(Error::config(
                        format!("{path}.teacher_checkpoint"),
                        "later stages use the previous student as teacher",
                    ));
                }
                s.validate_against_teacher(&self.stages[i - 1].student_config, &path)?;
            }
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        canonical_hash(self)
    }
}

/// Parses JSON into `T`, reporting failures with the JSON path of the
/// offending field.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_syntax() || inner.is_eof() {
            Error::Json {
                path: origin.to_path_buf(),
                message: inner.to_string(),
            }
        } else {
            let at = if path == "." { "$".to_string() } else { format!("$.{path}") };
            Error::config(at, inner.to_string())
        }
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text, path)
}
