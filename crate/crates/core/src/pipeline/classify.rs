//! Supervised training and the two evaluation protocols.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::train::{epoch_order, steps_per_epoch, INFERENCE_BATCH};
use crate::autograd::{Graph, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{MetricLog, MetricRow};
use crate::optim::{AdamW, AdamWConfig, WarmupCosine};
use crate::params::ParamStore;
use crate::seeds;
use crate::tensor::Tensor;
use crate::vit::{ForwardOptions, Mode, ViTModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    LinearProbe,
    FineTune,
}

fn d_epochs() -> usize {
    20
}
fn d_batch() -> usize {
    32
}
fn d_lr() -> f64 {
    1e-3
}
fn d_warmup() -> usize {
    2
}
fn d_min_lr() -> f64 {
    1e-6
}
fn d_wd() -> f32 {
    0.05
}
fn d_layer_decay() -> f32 {
    0.65
}
fn d_dpr() -> f32 {
    0.1
}
fn d_smoothing() -> f32 {
    0.1
}

/// Supervised schedule. Defaults follow the fine-tuning recipe: layer-wise
/// lr decay 0.65, drop path 0.1, label smoothing 0.1, weight decay 0.05,
/// cosine decay to 1e-6.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub peak_lr: f64,
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "d_min_lr")]
    pub min_lr: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f32,
    /// 1.0 disables layer-wise decay.
    #[serde(default = "d_layer_decay")]
    pub layer_decay: f32,
    #[serde(default = "d_dpr")]
    pub drop_path_rate: f32,
    #[serde(default = "d_smoothing")]
    pub label_smoothing: f32,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        let at = |f: &str| format!("{path}.{f}");
        if self.batch_size == 0 {
            return Err(Error::config(at("batch_size"), "must be positive"));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::config(at("peak_lr"), "must be positive"));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::config(at("layer_decay"), "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::config(at("drop_path_rate"), "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(at("label_smoothing"), "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    #[serde(default)]
    pub train: ClassifierTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub accuracy: f32,
    pub train_accuracy: f32,
}

/// Layer id of a parameter: 0 for the embedding, `i + 1` for block `i`,
/// `depth + 1` for the final norm and head.
pub fn layer_id(name: &str, depth: usize) -> usize {
    if let Some(rest) = name.strip_prefix("blocks.") {
        rest.split('.').next().and_then(|s| s.parse::<usize>().ok()).map_or(0, |i| i + 1)
    } else if name.starts_with("norm.") || name.starts_with("head.") {
        depth + 1
    } else {
        0
    }
}

/// Per-parameter multipliers `decay^(depth + 1 − layer_id)`.
pub fn layer_lr_scales(model: &ViTModel, decay: f32) -> Vec<f32> {
    let depth = model.config.depth;
    model
        .params
        .iter()
        .map(|p| decay.powi((depth + 1 - layer_id(&p.name, depth)) as i32))
        .collect()
}

/// Mean cross-entropy against label-smoothed targets.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize], smoothing: f32) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("cross_entropy", format!("logits {shape:?} for {} labels", labels.len())));
    }
    let c = shape[1];
    let off = smoothing / c as f32;
    let target = Tensor::from_fn(&shape, |i| {
        if labels[i / c] == i % c {
            1.0 - smoothing + off
        } else {
            off
        }
    });
    let t = g.constant(target);
    let lp = g.log_softmax(logits, 1)?;
    let prod = g.mul(lp, t)?;
    let s = g.sum_all(prod);
    Ok(g.scale(s, -1.0 / labels.len() as f32))
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode forward in batches; returns the pooled class tokens `[n, D]`
/// and logits `[n, C]`.
pub fn infer(model: &ViTModel, data: &Dataset) -> Result<(Tensor, Tensor)> {
    let (d, c) = (model.config.hidden_dim, model.config.num_classes);
    let mut pooled = Vec::with_capacity(data.len() * d);
    let mut logits = Vec::with_capacity(data.len() * c);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(INFERENCE_BATCH) {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let out = model.forward_with_taps(&mut g, &p, &data.batch(chunk), &ForwardOptions::eval())?;
        pooled.extend_from_slice(g.value(out.pooled.expect("head requested")).data());
        logits.extend_from_slice(g.value(out.logits.expect("head requested")).data());
    }
    Ok((
        Tensor::new(vec![data.len(), d], pooled)?,
        Tensor::new(vec![data.len(), c], logits)?,
    ))
}

fn accuracy_of(logits: &Tensor, labels: &[usize]) -> f32 {
    let c = logits.shape()[1];
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    hits as f32 / labels.len() as f32
}

/// Top-1 accuracy of the model's own head.
pub fn accuracy(model: &ViTModel, data: &Dataset) -> Result<f32> {
    let (_, logits) = infer(model, data)?;
    Ok(accuracy_of(&logits, data.labels()))
}

fn schedule(cfg: &ClassifierTrainConfig, n: usize) -> WarmupCosine {
    let spe = steps_per_epoch(n, cfg.batch_size);
    WarmupCosine {
        peak_lr: cfg.peak_lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_epochs * spe,
        total_steps: cfg.epochs * spe,
    }
}

/// Trains every parameter of `model` on labeled data with cross-entropy.
pub fn train_classifier(model: &mut ViTModel, data: &Dataset, cfg: &ClassifierTrainConfig) -> Result<MetricLog> {
    cfg.validate("$")?;
    if data.num_classes != model.config.num_classes {
        return Err(Error::Contract(format!(
            "dataset has {} classes, model head has {}",
            data.num_classes, model.config.num_classes
        )));
    }
    let scales = layer_lr_scales(model, cfg.layer_decay);
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        model.params.len(),
    );
    let sched = schedule(cfg, data.len());
    let mut log = MetricLog::new(vec!["loss_ce".into()]);
    let start = Instant::now();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_order(data.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            let lr = sched.lr(step);
            let labels: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let opts = ForwardOptions {
                mode: Mode::Train,
                drop_path_rate: cfg.drop_path_rate,
                seed: seeds::derive(cfg.seed, &[seeds::DROP_PATH, step as u64]),
                ..ForwardOptions::eval()
            };
            let out = model.forward_with_taps(&mut g, &p, &data.batch(batch), &opts)?;
            let loss = cross_entropy(&mut g, out.logits.expect("head requested"), &labels, cfg.label_smoothing)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("classification loss at step {step}")));
            }
            g.backward(loss)?;
            let grads = p.grads(&g);
            opt.step(&mut model.params, &grads, lr as f32, Some(&scales))?;
            log.push(MetricRow {
                step,
                lr,
                loss_total: value,
                components: vec![value],
                eval_accuracy: None,
                wall_ms: start.elapsed().as_millis() as u64,
            })?;
            step += 1;
        }
    }
    Ok(log)
}

/// Trains a linear head on frozen features `[n, D]`; returns the head.
fn fit_linear_head(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
    cfg: &ClassifierTrainConfig,
) -> Result<ParamStore> {
    let (n, d) = (features.shape()[0], features.shape()[1]);
    let mut head = ParamStore::new();
    head.insert("head.weight", Tensor::zeros(&[d, num_classes]), true);
    head.insert("head.bias", Tensor::zeros(&[num_classes]), false);
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        2,
    );
    let sched = schedule(cfg, n);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_order(n, cfg.seed, epoch).chunks(cfg.batch_size) {
            let x: Vec<Tensor> = batch.iter().map(|&i| features.index0(i)).collect();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let p = head.bind(&mut g, true);
            let x = g.constant(Tensor::stack(&x)?);
            let z = g.matmul(x, p.var("head.weight"))?;
            let z = g.add(z, p.var("head.bias"))?;
            let loss = cross_entropy(&mut g, z, &y, 0.0)?;
            g.backward(loss)?;
            let grads = p.grads(&g);
            opt.step(&mut head, &grads, sched.lr(step) as f32, None)?;
            step += 1;
        }
    }
    Ok(head)
}

fn linear_logits(features: &Tensor, head: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = head.bind(&mut g, false);
    let x = g.constant(features.clone());
    let z = g.matmul(x, p.var("head.weight"))?;
    let z = g.add(z, p.var("head.bias"))?;
    Ok(g.value(z).clone())
}

/// Top-1 accuracy on `test` after adapting `model` to `train`, under either
/// protocol. The backbone passed in is never modified; a fresh head is used.
pub fn evaluate(model: &ViTModel, train: &Dataset, test: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.train.validate("$.train")?;
    if train.num_classes != test.num_classes {
        return Err(Error::Contract("train and test sets disagree on num_classes".into()));
    }
    let mut m = model.clone();
    m.reset_head(train.num_classes, seeds::derive(cfg.train.seed, &[seeds::CLASSIFIER_HEAD]));
    match cfg.mode {
        EvalMode::FineTune => {
            train_classifier(&mut m, train, &cfg.train)?;
            Ok(EvalReport {
                mode: cfg.mode,
                accuracy: accuracy(&m, test)?,
                train_accuracy: accuracy(&m, train)?,
            })
        }
        EvalMode::LinearProbe => {
            let (ftrain, _) = infer(&m, train)?;
            let (ftest, _) = infer(&m, test)?;
            let head = fit_linear_head(&ftrain, train.labels(), train.num_classes, &cfg.train)?;
            Ok(EvalReport {
                mode: cfg.mode,
                accuracy: accuracy_of(&linear_logits(&ftest, &head)?, test.labels()),
                train_accuracy: accuracy_of(&linear_logits(&ftrain, &head)?, train.labels()),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Generator, SyntheticDatasetSpec};
    use crate::vit::ViTConfig;

    fn tiny() -> ViTConfig {
        ViTConfig {
            depth: 2,
            hidden_dim: 8,
            heads: 2,
            patch_size: 4,
            image_size: 8,
            channels: 1,
            num_classes: 4,
            mlp_ratio: 2,
            drop_path_rate: 0.0,
            adaptive_last_block_heads: None,
        }
    }

    fn data(n: usize, seed: u64) -> Dataset {
        generate(&SyntheticDatasetSpec {
            num_samples: n,
            image_size: 8,
            num_classes: 4,
            generator: Generator::Shapes,
            seed,
            channels: 1,
        })
        .unwrap()
        .0
    }

    #[test]
    fn layer_ids_and_scales() {
        let m = ViTModel::new(tiny(), 0).unwrap();
        assert_eq!(layer_id("pos_embed", 2), 0);
        assert_eq!(layer_id("blocks.1.attn.q.weight", 2), 2);
        assert_eq!(layer_id("head.weight", 2), 3);
        let s = layer_lr_scales(&m, 0.5);
        let head = m.params.position("head.weight").unwrap();
        let embed = m.params.position("patch_embed.weight").unwrap();
        assert_eq!(s[head], 1.0);
        assert_eq!(s[embed], 0.125);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 4]));
        let l = cross_entropy(&mut g, z, &[0, 1, 3], 0.1).unwrap();
        assert!((g.value(l).item() - 4f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn random_head_is_near_chance() {
        let m = ViTModel::new(tiny(), 3).unwrap();
        let test = data(400, 9);
        let acc = accuracy(&m, &test).unwrap();
        // Binomial sd at p = 0.25, n = 400 is about 0.022; a random net can
        // also collapse to one class (exactly 0.25 here), so allow 5 sd.
        assert!((acc - 0.25).abs() < 0.11, "{acc}");
    }

    #[test]
    fn evaluation_is_deterministic() {
        let m = ViTModel::new(tiny(), 3).unwrap();
        let (train, test) = (data(40, 1), data(40, 2));
        let cfg = EvalConfig {
            mode: EvalMode::LinearProbe,
            train: ClassifierTrainConfig {
                epochs: 2,
                ..Default::default()
            },
        };
        let a = evaluate(&m, &train, &test, &cfg).unwrap();
        let b = evaluate(&m, &train, &test, &cfg).unwrap();
        assert_eq!(a, b);
        let ft = EvalConfig {
            mode: EvalMode::FineTune,
            ..cfg
        };
        assert_eq!(evaluate(&m, &train, &test, &ft).unwrap(), evaluate(&m, &train, &test, &ft).unwrap());
    }
}
