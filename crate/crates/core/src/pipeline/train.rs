use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::plan::{DistillPlan, InputMode, StageChain};
use crate::autograd::{Graph, Var};
use crate::checkpoint;
use crate::data::Dataset;
use crate::distill::{distill_loss, init_heads, normalize_patches, tap_streams, Reconstruction};
use crate::error::{Error, Result};
use crate::metrics::{MetricLog, MetricRow};
use crate::optim::{AdamW, AdamWConfig, WarmupCosine};
use crate::params::ParamStore;
use crate::seeds;
use crate::tensor::Tensor;
use crate::vit::{patchify, ForwardOptions, MaskSpec, Mode, ViTModel};

pub const PLAN_FILE: &str = "plan.json";
pub const INIT_CHECKPOINT: &str = "student_init.json";
pub const STUDENT_CHECKPOINT: &str = "student.json";
pub const HEADS_CHECKPOINT: &str = "heads.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Batch size used for forward-only passes (teacher caching, evaluation).
pub(crate) const INFERENCE_BATCH: usize = 128;

/// Result of one distillation stage, in memory.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub student: ViTModel,
    /// Projection heads and decoder; discarded after distillation.
    pub heads: ParamStore,
    pub metrics: MetricLog,
    pub target_block: usize,
}

/// Optimizer steps per epoch (the last batch may be short).
pub fn steps_per_epoch(num_samples: usize, batch_size: usize) -> usize {
    num_samples.div_ceil(batch_size)
}

pub fn schedule_for(plan: &DistillPlan, num_samples: usize) -> WarmupCosine {
    let spe = steps_per_epoch(num_samples, plan.batch_size);
    WarmupCosine {
        peak_lr: plan.effective_peak_lr(),
        min_lr: plan.min_lr,
        warmup_steps: plan.warmup_epochs * spe,
        total_steps: plan.epochs * spe,
    }
}

/// Seeded sample order for one epoch.
pub(crate) fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[seeds::SHUFFLE, epoch as u64])));
    order
}

/// Initial student for a plan: the init checkpoint when given, otherwise a
/// seeded fresh model.
pub fn initial_student(plan: &DistillPlan) -> Result<ViTModel> {
    match &plan.student_init_checkpoint {
        Some(path) => {
            let m = ViTModel::load(path)?;
            if m.config != plan.student_config {
                return Err(Error::config(
                    "$.student_init_checkpoint",
                    format!("{} was saved with a different student_config", path.display()),
                ));
            }
            Ok(m)
        }
        None => ViTModel::new(plan.student_config.clone(), seeds::derive(plan.seed, &[seeds::STUDENT_INIT])),
    }
}

/// Teacher streams per sample, computed once in eval mode on raw input.
struct TeacherCache {
    per_sample: Vec<Vec<Tensor>>,
}

fn teacher_streams(
    plan: &DistillPlan,
    teacher: &ViTModel,
    images: &Tensor,
    target: usize,
    mode: Mode,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let p = teacher.params.bind(&mut g, false);
    let opts = ForwardOptions {
        mode,
        masks: None,
        drop_path_rate: plan.teacher_drop_path,
        seed,
        stop_after_block: Some(target),
        with_head: false,
    };
    let out = teacher.forward_with_taps(&mut g, &p, images, &opts)?;
    let taps = *out.taps.block(target)?;
    let streams = tap_streams(&mut g, &taps, &plan.loss_strategy)?;
    Ok(streams.into_iter().map(|v| g.value(v).clone()).collect())
}

impl TeacherCache {
    fn build(plan: &DistillPlan, teacher: &ViTModel, data: &Dataset, target: usize) -> Result<Self> {
        let mut per_sample = Vec::with_capacity(data.len());
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(INFERENCE_BATCH) {
            let streams = teacher_streams(plan, teacher, &data.batch(chunk), target, Mode::Eval, 0)?;
            for b in 0..chunk.len() {
                per_sample.push(streams.iter().map(|s| s.index0(b)).collect());
            }
        }
        Ok(TeacherCache { per_sample })
    }

    fn batch(&self, indices: &[usize]) -> Result<Vec<Tensor>> {
        let n = self.per_sample.first().map_or(0, Vec::len);
        (0..n)
            .map(|s| {
                let parts: Vec<Tensor> = indices.iter().map(|&i| self.per_sample[i][s].clone()).collect();
                Tensor::stack(&parts)
            })
            .collect()
    }
}

/// Distills `teacher` into `student` on `data` (labels unused).
///
/// The teacher runs on raw images and is never updated; with a zero teacher
/// drop-path rate its targets are computed once up front. The student sees
/// raw or masked images per the plan and is supervised at its last block.
pub fn train_student(plan: &DistillPlan, teacher: &ViTModel, mut student: ViTModel, data: &Dataset) -> Result<StageOutcome> {
    plan.validate("$")?;
    let target = plan.validate_against_teacher(&teacher.config, "$")?;
    if student.config != plan.student_config {
        return Err(Error::Contract("student model does not match plan.student_config".into()));
    }
    let cfg = student.config.clone();
    if data.channels != cfg.channels || data.image_size != cfg.image_size {
        return Err(Error::config(
            "$.student_config",
            format!(
                "dataset has {} channels of {}x{} pixels",
                data.channels, data.image_size, data.image_size
            ),
        ));
    }
    let strategy = &plan.loss_strategy;
    let mut heads = init_heads(
        strategy,
        cfg.hidden_dim,
        teacher.config.hidden_dim,
        cfg.patch_dim(),
        seeds::derive(plan.seed, &[seeds::HEADS_INIT]),
    );
    let mut metrics = MetricLog::new(strategy.component_names());
    if plan.epochs == 0 || data.is_empty() {
        return Ok(StageOutcome {
            student,
            heads,
            metrics,
            target_block: target,
        });
    }

    let cache = if plan.teacher_drop_path == 0.0 {
        Some(TeacherCache::build(plan, teacher, data, target)?)
    } else {
        None
    };
    let opt_cfg = AdamWConfig {
        weight_decay: plan.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt_s = AdamW::new(opt_cfg, student.params.len());
    let mut opt_h = AdamW::new(opt_cfg, heads.len());
    let schedule = schedule_for(plan, data.len());
    let start = Instant::now();
    let mut step = 0usize;
    for epoch in 0..plan.epochs {
        let order = epoch_order(data.len(), plan.seed, epoch);
        for batch in order.chunks(plan.batch_size) {
            let lr = schedule.lr(step);
            let images = data.batch(batch);
            let teacher_t = match &cache {
                Some(c) => c.batch(batch)?,
                None => teacher_streams(
                    plan,
                    teacher,
                    &images,
                    target,
                    Mode::Train,
                    seeds::derive(plan.seed, &[seeds::DROP_PATH, 1, step as u64]),
                )?,
            };
            let masks: Option<Vec<MaskSpec>> = match plan.input_mode {
                InputMode::Raw => None,
                InputMode::Masked { mask_ratio } => Some(
                    batch
                        .iter()
                        .map(|&i| {
                            MaskSpec::random(
                                cfg.num_patches(),
                                mask_ratio,
                                seeds::derive(plan.seed, &[seeds::MASK, epoch as u64, i as u64]),
                            )
                        })
                        .collect::<Result<_>>()?,
                ),
            };

            let mut g = Graph::new();
            let sp = student.params.bind(&mut g, true);
            let hp = heads.bind(&mut g, true);
            let opts = ForwardOptions {
                mode: Mode::Train,
                masks: masks.as_deref(),
                drop_path_rate: plan.student_drop_path,
                seed: seeds::derive(plan.seed, &[seeds::DROP_PATH, 0, step as u64]),
                stop_after_block: None,
                with_head: false,
            };
            let out = student.forward_with_taps(&mut g, &sp, &images, &opts)?;
            let last = *out.taps.block(cfg.depth)?;
            let s_streams = tap_streams(&mut g, &last, strategy)?;
            let t_streams: Vec<Var> = teacher_t.into_iter().map(|t| g.constant(t)).collect();
            let recon_target = match &masks {
                Some(_) if strategy.with_reconstruction => Some(normalize_patches(&patchify(&images, &cfg)?)),
                _ => None,
            };
            let recon = match (&recon_target, &masks) {
                (Some(t), Some(m)) => Some(Reconstruction {
                    student_tokens: last.output,
                    target: t,
                    masks: m,
                }),
                _ => None,
            };
            let loss = distill_loss(&mut g, strategy, &s_streams, &t_streams, &hp, recon)?;
            let total = g.value(loss.total).item();
            if !total.is_finite() {
                let parts: Vec<String> = loss
                    .components
                    .iter()
                    .map(|(n, v)| format!("{n}={}", g.value(*v).item()))
                    .collect();
                return Err(Error::NonFinite(format!(
                    "distillation loss at step {step} (target block {target}): {}",
                    parts.join(", ")
                )));
            }
            let components: Vec<f32> = loss.components.iter().map(|(_, v)| g.value(*v).item()).collect();
            g.backward(loss.total)?;
            let sg = sp.grads(&g);
            let hg = hp.grads(&g);
            opt_s.step(&mut student.params, &sg, lr as f32, None)?;
            opt_h.step(&mut heads, &hg, lr as f32, None)?;
            metrics.push(MetricRow {
                step,
                lr,
                loss_total: total,
                components,
                eval_accuracy: None,
                wall_ms: start.elapsed().as_millis() as u64,
            })?;
            step += 1;
        }
    }
    Ok(StageOutcome {
        student,
        heads,
        metrics,
        target_block: target,
    })
}

/// [`train_student`] from the plan's own student initialization.
pub fn train_stage(plan: &DistillPlan, teacher: &ViTModel, data: &Dataset) -> Result<StageOutcome> {
    let student = initial_student(plan)?;
    train_student(plan, teacher, student, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub plan_hash: String,
    pub teacher_checkpoint: PathBuf,
    pub teacher_hash: String,
    pub init_hash: String,
    pub student_hash: String,
    pub target_block: usize,
    pub steps: usize,
    pub final_loss: Option<f32>,
    pub teacher_unchanged: bool,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs one stage against the teacher checkpoint at `teacher_path` and
/// persists everything under `run_dir`: the plan, initial and final student
/// checkpoints, projection heads, metrics and a summary.
pub fn run_stage(plan: &DistillPlan, teacher_path: &Path, data: &Dataset, run_dir: &Path) -> Result<StageSummary> {
    plan.validate("$")?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    write_json(&run_dir.join(PLAN_FILE), plan)?;
    let teacher_hash = checkpoint::file_hash(teacher_path)?;
    let teacher = ViTModel::load(teacher_path)?;
    plan.validate_against_teacher(&teacher.config, "$")?;
    let student = initial_student(plan)?;
    let init_hash = student.save(&run_dir.join(INIT_CHECKPOINT))?;
    let before = teacher.clone();
    let outcome = train_student(plan, &teacher, student, data)?;
    let student_hash = outcome.student.save(&run_dir.join(STUDENT_CHECKPOINT))?;
    checkpoint::save(&run_dir.join(HEADS_CHECKPOINT), &outcome.heads, serde_json::json!({}))?;
    outcome.metrics.write_csv(&run_dir.join(METRICS_FILE))?;
    let summary = StageSummary {
        plan_hash: plan.config_hash(),
        teacher_checkpoint: teacher_path.to_path_buf(),
        teacher_hash,
        init_hash,
        student_hash,
        target_block: outcome.target_block,
        steps: outcome.metrics.rows.len(),
        final_loss: outcome.metrics.last_loss(),
        teacher_unchanged: before == teacher,
    };
    write_json(&run_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

pub fn stage_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("stage{i}"))
}

/// Runs the chain's stages in order; stage `i + 1` loads stage `i`'s saved
/// student as its teacher. A failing stage stops the chain; earlier stage
/// directories stay intact.
pub fn run_sequential(chain: &StageChain, data: &Dataset, root: &Path) -> Result<Vec<StageSummary>> {
    chain.validate()?;
    let mut summaries = Vec::with_capacity(chain.stages.len());
    let mut teacher_path = chain.stages[0].teacher_checkpoint.clone().expect("validated");
    for (i, plan) in chain.stages.iter().enumerate() {
        let dir = stage_dir(root, i);
        let summary = run_stage(plan, &teacher_path, data, &dir)?;
        teacher_path = dir.join(STUDENT_CHECKPOINT);
        summaries.push(summary);
    }
    Ok(summaries)
}
