//! Distillation losses and the small trainable heads they need.
//!
//! Both sides of a loss are described as "streams": the tensors a strategy
//! reads from one block's taps. The teacher's streams can be cached as plain
//! tensors and fed back as graph constants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::relations::{compute_relations, RelationPair, RelationSet};
use crate::tensor::Tensor;
use crate::vit::{merge_heads, BlockTaps, MaskSpec};

pub const SMOOTH_L1_BETA: f32 = 2.0;
pub const KL_FLOOR: f32 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    ClassToken,
    Feature,
    Relation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTarget {
    Output,
    FfnPre,
    FfnPost,
    AttnPre,
    AttnPost,
    Qkv,
}

fn default_pairs() -> Vec<RelationPair> {
    vec![RelationPair::QK, RelationPair::VV]
}

fn default_true() -> bool {
    true
}

fn default_temperature() -> f32 {
    1.0
}

fn default_feature_target() -> FeatureTarget {
    FeatureTarget::Output
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossStrategy {
    pub kind: LossKind,
    #[serde(default = "default_feature_target")]
    pub feature_target: FeatureTarget,
    #[serde(default = "default_pairs")]
    pub relation_pairs: Vec<RelationPair>,
    #[serde(default = "default_true")]
    pub relation_softmax: bool,
    #[serde(default)]
    pub with_reconstruction: bool,
    #[serde(default = "default_temperature")]
    pub class_token_temperature: f32,
    /// Drop the class token from relations (rows and columns).
    #[serde(default)]
    pub relation_exclude_cls: bool,
}

impl LossStrategy {
    pub fn relation(pairs: &[RelationPair]) -> Self {
        LossStrategy {
            kind: LossKind::Relation,
            relation_pairs: pairs.to_vec(),
            ..Self::class_token()
        }
    }

    pub fn feature(target: FeatureTarget) -> Self {
        LossStrategy {
            kind: LossKind::Feature,
            feature_target: target,
            ..Self::class_token()
        }
    }

    pub fn class_token() -> Self {
        LossStrategy {
            kind: LossKind::ClassToken,
            feature_target: FeatureTarget::Output,
            relation_pairs: default_pairs(),
            relation_softmax: true,
            with_reconstruction: false,
            class_token_temperature: 1.0,
            relation_exclude_cls: false,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.kind == LossKind::Relation && self.relation_pairs.is_empty() {
            return Err(Error::config(format!("{path}.relation_pairs"), "relation loss needs at least one pair"));
        }
        let mut seen = self.relation_pairs.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.relation_pairs.len() {
            return Err(Error::config(format!("{path}.relation_pairs"), "duplicate pair"));
        }
        if !(self.class_token_temperature > 0.0 && self.class_token_temperature.is_finite()) {
            return Err(Error::config(format!("{path}.class_token_temperature"), "must be positive"));
        }
        Ok(())
    }

    /// Loss-component column names in the order [`distill_loss`] reports them.
    pub fn component_names(&self) -> Vec<String> {
        let mut v: Vec<String> = match (self.kind, self.feature_target) {
            (LossKind::ClassToken, _) => vec!["loss_class_token".into()],
            (LossKind::Feature, FeatureTarget::Qkv) => {
                ["q", "k", "v"].iter().map(|s| format!("loss_feature_{s}")).collect()
            }
            (LossKind::Feature, _) => vec!["loss_feature".into()],
            (LossKind::Relation, _) => self.relation_pairs.iter().map(|p| format!("loss_{}", p.key())).collect(),
        };
        if self.with_reconstruction {
            v.push("loss_reconstruction".into());
        }
        v
    }
}

/// `mean_rows Σ_j t·(log t − log p)` over the last axis; both sides are
/// clamped at [`KL_FLOOR`] inside the logarithm, so `0·log 0` counts as 0.
pub fn kl_loss(g: &mut Graph, p: Var, t: Var) -> Result<Var> {
    if g.shape(p) != g.shape(t) {
        return Err(Error::shape("kl_loss", format!("{:?} vs {:?}", g.shape(p), g.shape(t))));
    }
    let shape = g.shape(t).to_vec();
    let width = *shape.last().ok_or_else(|| Error::shape("kl_loss", "scalar input"))?;
    for (i, row) in g.value(t).data().chunks(width.max(1)).enumerate() {
        let s: f32 = row.iter().sum();
        if (s - 1.0).abs() > 1e-4 || row.iter().any(|&x| x < 0.0) {
            return Err(Error::Contract(format!("kl_loss target row {i} is not a distribution (sums to {s})")));
        }
    }
    let rows = g.value(t).numel() / width.max(1);
    let lt = g.ln_clamped(t, KL_FLOOR);
    let lp = g.ln_clamped(p, KL_FLOOR);
    let d = g.sub(lt, lp)?;
    let terms = g.mul(t, d)?;
    let s = g.sum_all(terms);
    Ok(g.scale(s, 1.0 / rows as f32))
}

/// KL between temperature-softmaxed class tokens `[.., D]`.
pub fn class_token_loss(g: &mut Graph, c_s: Var, c_t: Var, temperature: f32) -> Result<Var> {
    if g.shape(c_s) != g.shape(c_t) {
        return Err(Error::shape(
            "class_token_loss",
            format!("student {:?} vs teacher {:?}", g.shape(c_s), g.shape(c_t)),
        ));
    }
    let axis = g.shape(c_s).len() - 1;
    let s = g.scale(c_s, 1.0 / temperature);
    let t = g.scale(c_t, 1.0 / temperature);
    let p = g.softmax(s, axis)?;
    let q = g.softmax(t, axis)?;
    kl_loss(g, p, q)
}

/// Mean smooth-L1 with the distillation β.
pub fn smooth_l1(g: &mut Graph, y_hat: Var, y: Var) -> Result<Var> {
    g.smooth_l1(y_hat, y, SMOOTH_L1_BETA)
}

/// Linear `D_s → D_t` map trained alongside the student.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ProjectionHead {
    /// Identity when `d_in == d_out`, truncated normal otherwise.
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = if d_in == d_out {
            Tensor::from_fn(&[d_in, d_out], |i| if i / d_out == i % d_out { 1.0 } else { 0.0 })
        } else {
            Tensor::trunc_normal(&[d_in, d_out], 0.02, rng)
        };
        ProjectionHead {
            weight,
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn register(self, store: &mut ParamStore, name: &str) {
        store.insert(format!("{name}.weight"), self.weight, true);
        store.insert(format!("{name}.bias"), self.bias, false);
    }
}

fn project(g: &mut Graph, heads: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, heads.var(&format!("{name}.weight")))?;
    g.add(y, heads.var(&format!("{name}.bias")))
}

/// Smooth-L1 between the projected student feature and the whitened
/// (affine-free layer-normed) teacher feature. The student is whitened too
/// before projection, so an identical student with an identity head scores 0.
pub fn feature_loss(g: &mut Graph, student: Var, teacher: Var, heads: &Bound, head: &str) -> Result<Var> {
    let s = g.layer_norm(student, None, None)?;
    let s = project(g, heads, head, s)?;
    let t = g.layer_norm(teacher, None, None)?;
    if g.shape(s) != g.shape(t) {
        return Err(Error::shape(
            "feature_loss",
            format!("projected student {:?} vs teacher {:?}", g.shape(s), g.shape(t)),
        ));
    }
    smooth_l1(g, s, t)
}

/// Per selected pair: KL (or smooth-L1 when softmax is off) between student
/// and teacher relations, averaged over heads and rows; pairs are summed.
/// Returns one loss per pair, in `pairs` order.
pub fn relation_loss(
    g: &mut Graph,
    student: &RelationSet,
    teacher: &RelationSet,
    pairs: &[RelationPair],
) -> Result<Vec<Var>> {
    if student.softmax_applied != teacher.softmax_applied {
        return Err(Error::Contract("student and teacher relations disagree on softmax".into()));
    }
    let (ss, ts) = (g.shape(student.qq).to_vec(), g.shape(teacher.qq).to_vec());
    if ss.len() != ts.len() || ss.len() < 3 {
        return Err(Error::shape("relation_loss", format!("student {ss:?} vs teacher {ts:?}")));
    }
    let r = ss.len();
    if ss[r - 3] != ts[r - 3] {
        return Err(Error::Contract(format!(
            "student has {} heads but teacher has {}; configure adaptive_last_block_heads = {} on the student",
            ss[r - 3],
            ts[r - 3],
            ts[r - 3]
        )));
    }
    if ss != ts {
        return Err(Error::shape("relation_loss", format!("student {ss:?} vs teacher {ts:?}")));
    }
    pairs
        .iter()
        .map(|&p| {
            let (a, b) = (student.get(p), teacher.get(p));
            if student.softmax_applied {
                kl_loss(g, a, b)
            } else {
                smooth_l1(g, a, b)
            }
        })
        .collect()
}

/// Per-patch normalization of reconstruction targets `[.., N, P]`: each
/// patch shifted to zero mean and scaled to unit variance.
pub fn normalize_patches(patches: &Tensor) -> Tensor {
    let p = *patches.shape().last().unwrap_or(&1);
    let mut out = patches.clone();
    for row in out.data_mut().chunks_mut(p.max(1)) {
        let mean = row.iter().sum::<f32>() / p as f32;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / p as f32;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for x in row.iter_mut() {
            *x = (*x - mean) * inv;
        }
    }
    out
}

/// Mean squared error over masked patches only. `pred` is `[B, N, P]`,
/// `target` the normalized patches of the same shape.
pub fn reconstruction_loss(g: &mut Graph, pred: Var, target: &Tensor, masks: &[MaskSpec]) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if shape.as_slice() != target.shape() || shape.len() != 3 || masks.len() != shape[0] {
        return Err(Error::shape(
            "reconstruction_loss",
            format!("pred {:?}, target {:?}, {} masks", shape, target.shape(), masks.len()),
        ));
    }
    let (b, n) = (shape[0], shape[1]);
    let mut ind = Vec::with_capacity(b * n);
    for m in masks {
        ind.extend(m.indicator(n));
    }
    let count: f32 = ind.iter().sum();
    if count == 0.0 {
        return Err(Error::Contract("reconstruction loss needs at least one masked patch".into()));
    }
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    let per_patch = g.mean(sq, 2)?;
    let w = g.constant(Tensor::new(vec![b, n], ind)?);
    let masked = g.mul(per_patch, w)?;
    let s = g.sum_all(masked);
    Ok(g.scale(s, 1.0 / count))
}

/// Tensors a strategy reads from one block:
/// class token `[B, D]`, a feature `[B, T, D]`, merged Q/K/V `[B, T, D]`
/// (feature target `qkv`), or per-head Q/K/V `[B, M, T, d]` (relations).
pub fn tap_streams(g: &mut Graph, taps: &BlockTaps, strategy: &LossStrategy) -> Result<Vec<Var>> {
    Ok(match strategy.kind {
        LossKind::ClassToken => {
            let shape = g.shape(taps.output).to_vec();
            let row = g.narrow(taps.output, 1, 0, 1)?;
            vec![g.reshape(row, &[shape[0], shape[2]])?]
        }
        LossKind::Feature => match strategy.feature_target {
            FeatureTarget::Output | FeatureTarget::FfnPost => vec![taps.output],
            FeatureTarget::FfnPre => vec![taps.ffn_pre],
            FeatureTarget::AttnPre => vec![taps.attn_pre],
            FeatureTarget::AttnPost => vec![taps.attn_post],
            FeatureTarget::Qkv => vec![
                merge_heads(g, taps.q)?,
                merge_heads(g, taps.k)?,
                merge_heads(g, taps.v)?,
            ],
        },
        LossKind::Relation => vec![taps.q, taps.k, taps.v],
    })
}

/// Names of the projection heads a strategy trains.
fn head_names(strategy: &LossStrategy) -> Vec<&'static str> {
    match (strategy.kind, strategy.feature_target) {
        (LossKind::ClassToken, _) => vec!["proj.cls"],
        (LossKind::Feature, FeatureTarget::Qkv) => vec!["proj.q", "proj.k", "proj.v"],
        (LossKind::Feature, _) => vec!["proj.feature"],
        (LossKind::Relation, _) => vec![],
    }
}

pub const DECODER: &str = "decoder";

/// Projection heads (and the reconstruction decoder, when enabled) for one
/// distillation run.
pub fn init_heads(strategy: &LossStrategy, d_s: usize, d_t: usize, patch_dim: usize, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for name in head_names(strategy) {
        ProjectionHead::new(d_s, d_t, &mut rng).register(&mut store, name);
    }
    if strategy.with_reconstruction {
        store.insert(format!("{DECODER}.weight"), Tensor::trunc_normal(&[d_s, patch_dim], 0.02, &mut rng), true);
        store.insert(format!("{DECODER}.bias"), Tensor::zeros(&[patch_dim]), false);
    }
    store
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    /// `(name, loss)` in [`LossStrategy::component_names`] order.
    pub components: Vec<(String, Var)>,
}

/// Reconstruction inputs: the student's final tokens and the targets.
pub struct Reconstruction<'a> {
    pub student_tokens: Var,
    pub target: &'a Tensor,
    pub masks: &'a [MaskSpec],
}

/// Total distillation loss from matching student/teacher streams.
pub fn distill_loss(
    g: &mut Graph,
    strategy: &LossStrategy,
    student: &[Var],
    teacher: &[Var],
    heads: &Bound,
    recon: Option<Reconstruction>,
) -> Result<LossBreakdown> {
    if student.len() != teacher.len() {
        return Err(Error::Contract(format!("{} student streams vs {} teacher streams", student.len(), teacher.len())));
    }
    let names = strategy.component_names();
    let mut losses = match strategy.kind {
        LossKind::ClassToken => {
            let s = project(g, heads, "proj.cls", student[0])?;
            vec![class_token_loss(g, s, teacher[0], strategy.class_token_temperature)?]
        }
        LossKind::Feature => head_names(strategy)
            .iter()
            .zip(student.iter().zip(teacher))
            .map(|(h, (&s, &t))| feature_loss(g, s, t, heads, h))
            .collect::<Result<Vec<_>>>()?,
        LossKind::Relation => {
            let sr = compute_relations(
                g,
                student[0],
                student[1],
                student[2],
                strategy.relation_softmax,
                strategy.relation_exclude_cls,
            )?;
            let tr = compute_relations(
                g,
                teacher[0],
                teacher[1],
                teacher[2],
                strategy.relation_softmax,
                strategy.relation_exclude_cls,
            )?;
            relation_loss(g, &sr, &tr, &strategy.relation_pairs)?
        }
    };
    if strategy.with_reconstruction {
        let r = recon.ok_or_else(|| Error::Contract("reconstruction loss needs masked input".into()))?;
        let shape = g.shape(r.student_tokens).to_vec();
        let patches = g.narrow(r.student_tokens, 1, 1, shape[1] - 1)?;
        let pred = project(g, heads, DECODER, patches)?;
        losses.push(reconstruction_loss(g, pred, r.target, r.masks)?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    Ok(LossBreakdown {
        total,
        components: names.into_iter().zip(losses).collect(),
    })
}
