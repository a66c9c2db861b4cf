//! Batched forward pass. Activations carry a leading batch axis: token
//! features are `[B, T, D]` and per-head projections `[B, M, T, D/M]`, with
//! `T = N + 1` and the class token at index 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MaskSpec, ViTConfig, ViTModel};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    /// One mask per batch element; masked patches become the mask token.
    pub masks: Option<&'a [MaskSpec]>,
    /// Global stochastic-depth rate (only used in train mode).
    pub drop_path_rate: f32,
    pub seed: u64,
    /// Stop after this 1-based block; later blocks are not computed.
    pub stop_after_block: Option<usize>,
    /// Also compute the final norm, pooled class token and logits.
    pub with_head: bool,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            masks: None,
            drop_path_rate: 0.0,
            seed: 0,
            stop_after_block: None,
            with_head: true,
        }
    }

    pub fn train(drop_path_rate: f32, seed: u64) -> Self {
        ForwardOptions {
            mode: Mode::Train,
            drop_path_rate,
            seed,
            ..Self::eval()
        }
    }
}

/// Per-sample multipliers `[B, 1, 1]` for the two residual branches of one
/// block: 0 drops the branch, `1/keep` keeps it.
#[derive(Clone, Debug)]
pub struct BranchScales {
    pub attn: Tensor,
    pub mlp: Tensor,
}

impl BranchScales {
    pub fn sample<R: Rng>(batch: usize, rate: f32, rng: &mut R) -> Self {
        let keep = 1.0 - rate;
        let mut draw = || {
            Tensor::from_fn(&[batch, 1, 1], |_| {
                if rng.random::<f32>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
        };
        let attn = draw();
        let mlp = draw();
        BranchScales { attn, mlp }
    }
}

/// Every intermediate feature of one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockTaps {
    /// F_{i−1}
    pub input: Var,
    /// H_i, attention branch output (after any drop-path scaling).
    pub attn_pre: Var,
    /// Ĥ_i = H_i + F_{i−1}
    pub attn_post: Var,
    /// H̃_i, FFN branch output.
    pub ffn_pre: Var,
    /// F̄_i = Ĥ_i + H̃_i
    pub ffn_post: Var,
    /// F_i, identical node to `ffn_post`.
    pub output: Var,
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct TapRecord {
    /// F₀ `[B, T, D]`.
    pub patch_embed: Var,
    pub blocks: Vec<BlockTaps>,
}

impl TapRecord {
    /// Taps of 1-based block `i`.
    pub fn block(&self, i: usize) -> Result<&BlockTaps> {
        i.checked_sub(1)
            .and_then(|j| self.blocks.get(j))
            .ok_or_else(|| Error::Contract(format!("block {i} was not recorded ({} available)", self.blocks.len())))
    }

    /// Class-token row of the last recorded block output, `[B, D]`.
    pub fn class_token(&self, g: &mut Graph) -> Result<Var> {
        let last = self.blocks.last().map_or(self.patch_embed, |b| b.output);
        class_token_of(g, last)
    }
}

pub(crate) fn class_token_of(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let row = g.narrow(x, 1, 0, 1)?;
    g.reshape(row, &[shape[0], shape[2]])
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub taps: TapRecord,
    /// Normalized class token `[B, D]`.
    pub pooled: Option<Var>,
    pub logits: Option<Var>,
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn batched(images: &Tensor) -> Result<Tensor> {
    match images.rank() {
        4 => Ok(images.clone()),
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(images.shape());
            images.reshape(&s)
        }
        _ => Err(Error::shape(
            "patch_embed",
            format!("expected [B, C, H, W] or [C, H, W], got {:?}", images.shape()),
        )),
    }
}

/// Rearranges `[B, C, H, W]` into non-overlapping patches `[B, N, C·p·p]`,
/// patches in row-major grid order, each flattened channel-first.
pub fn patchify(images: &Tensor, cfg: &ViTConfig) -> Result<Tensor> {
    let images = batched(images)?;
    let s = images.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if c != cfg.channels || h != cfg.image_size || w != cfg.image_size {
        return Err(Error::shape(
            "patch_embed",
            format!(
                "image {:?} does not match config ({} channels, {}x{})",
                &s[1..],
                cfg.channels,
                cfg.image_size,
                cfg.image_size
            ),
        ));
    }
    let p = cfg.patch_size;
    let grid = cfg.grid();
    let pd = cfg.patch_dim();
    let src = images.data();
    let mut out = vec![0.0; b * grid * grid * pd];
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                let base = ((bi * grid + gy) * grid + gx) * pd;
                let mut k = 0;
                for ci in 0..c {
                    for dy in 0..p {
                        let row = ((bi * c + ci) * h + gy * p + dy) * w + gx * p;
                        out[base + k..base + k + p].copy_from_slice(&src[row..row + p]);
                        k += p;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, grid * grid, pd], out)
}

/// Linear patch projection, optional mask-token substitution, class token
/// prepended at row 0, learned positional embedding added. Output `[B, T, D]`.
pub fn patch_embed(
    g: &mut Graph,
    p: &Bound,
    images: &Tensor,
    cfg: &ViTConfig,
    masks: Option<&[MaskSpec]>,
) -> Result<Var> {
    let patches = patchify(images, cfg)?;
    let b = patches.shape()[0];
    let (n, d) = (cfg.num_patches(), cfg.hidden_dim);
    let x = g.constant(patches);
    let mut tokens = linear(g, x, p.var("patch_embed.weight"), p.var("patch_embed.bias"))?;
    if let Some(masks) = masks {
        if masks.len() != b {
            return Err(Error::Contract(format!("{} masks for a batch of {}", masks.len(), b)));
        }
        if masks.iter().any(|m| !m.masked_indices.is_empty()) {
            let mut ind = Vec::with_capacity(b * n);
            for m in masks {
                if m.masked_indices.iter().any(|&i| i >= n) {
                    return Err(Error::Contract(format!("mask index out of range for {n} patches")));
                }
                ind.extend(m.indicator(n));
            }
            let keep = g.constant(Tensor::from_fn(&[b, n, 1], |i| 1.0 - ind[i]));
            let masked = g.constant(Tensor::new(vec![b, n, 1], ind)?);
            let kept = g.mul(tokens, keep)?;
            let filler = g.mul(masked, p.var("mask_token"))?;
            tokens = g.add(kept, filler)?;
        }
    }
    let cls = g.reshape(p.var("cls_token"), &[1, 1, d])?;
    let cls = g.broadcast_to(cls, &[b, 1, d])?;
    let seq = g.concat(&[cls, tokens], 1)?;
    g.add(seq, p.var("pos_embed"))
}

fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, t, heads, d / heads])?;
    g.permute(x, &[0, 2, 1, 3])
}

/// `[B, M, T, D/M] → [B, T, D]`: concatenation of the heads along features.
pub fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, m, t, dh) = (s[0], s[1], s[2], s[3]);
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b, t, m * dh])
}

/// Q/K/V of 0-based `block`: `LN(F_{i−1})·W` split into `heads` heads of
/// width `D/heads`. `bypass_norm` skips the layer norm (test hook).
pub fn qkv_project(
    g: &mut Graph,
    p: &Bound,
    block: usize,
    x: Var,
    heads: usize,
    bypass_norm: bool,
) -> Result<(Var, Var, Var)> {
    let name = |s: &str| format!("blocks.{block}.{s}");
    let h = if bypass_norm {
        x
    } else {
        g.layer_norm(x, Some(p.var(&name("norm1.weight"))), Some(p.var(&name("norm1.bias"))))?
    };
    let mut out = [x; 3];
    for (slot, which) in out.iter_mut().zip(["q", "k", "v"]) {
        let y = linear(
            g,
            h,
            p.var(&name(&format!("attn.{which}.weight"))),
            p.var(&name(&format!("attn.{which}.bias"))),
        )?;
        *slot = split_heads(g, y, heads)?;
    }
    Ok((out[0], out[1], out[2]))
}

/// One pre-LN transformer block:
/// `H = Attn(LN(F)); Ĥ = H + F; H̃ = FFN(LN(Ĥ)); F' = Ĥ + H̃`.
/// `drop` multiplies each residual branch per sample before the addition.
pub fn block_forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &ViTConfig,
    block: usize,
    x: Var,
    drop: Option<&BranchScales>,
) -> Result<BlockTaps> {
    let name = |s: &str| format!("blocks.{block}.{s}");
    let heads = cfg.heads_for_block(block);
    let (q, k, v) = qkv_project(g, p, block, x, heads, false)?;
    let scale = 1.0 / (cfg.head_dim_for_block(block) as f32).sqrt();
    let kt = g.transpose(k, 2, 3)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, scale);
    let attn = g.softmax(logits, 3)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = merge_heads(g, ctx)?;
    let mut attn_pre = linear(g, ctx, p.var(&name("attn.proj.weight")), p.var(&name("attn.proj.bias")))?;
    if let Some(d) = drop {
        let s = g.constant(d.attn.clone());
        attn_pre = g.mul(attn_pre, s)?;
    }
    let attn_post = g.add(attn_pre, x)?;

    let h = g.layer_norm(attn_post, Some(p.var(&name("norm2.weight"))), Some(p.var(&name("norm2.bias"))))?;
    let h = linear(g, h, p.var(&name("mlp.fc1.weight")), p.var(&name("mlp.fc1.bias")))?;
    let h = g.gelu(h);
    let mut ffn_pre = linear(g, h, p.var(&name("mlp.fc2.weight")), p.var(&name("mlp.fc2.bias")))?;
    if let Some(d) = drop {
        let s = g.constant(d.mlp.clone());
        ffn_pre = g.mul(ffn_pre, s)?;
    }
    let ffn_post = g.add(attn_post, ffn_pre)?;
    Ok(BlockTaps {
        input: x,
        attn_pre,
        attn_post,
        ffn_pre,
        ffn_post,
        output: ffn_post,
        q,
        k,
        v,
        heads,
    })
}

/// Linear classifier on the pooled class token.
pub fn classification_head(g: &mut Graph, p: &Bound, pooled: Var) -> Result<Var> {
    linear(g, pooled, p.var("head.weight"), p.var("head.bias"))
}

impl ViTModel {
    /// Runs patch embedding and the blocks, recording every tap. In train
    /// mode with a positive drop-path rate, residual branches are dropped per
    /// sample with rates rising linearly over depth.
    pub fn forward_with_taps(
        &self,
        g: &mut Graph,
        p: &Bound,
        images: &Tensor,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let mut x = patch_embed(g, p, images, cfg, opts.masks)?;
        let b = g.shape(x)[0];
        let last = opts.stop_after_block.unwrap_or(cfg.depth);
        if last == 0 || last > cfg.depth {
            return Err(Error::Contract(format!("cannot stop after block {last} of {}", cfg.depth)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut blocks = Vec::with_capacity(last);
        for i in 0..last {
            let rate = cfg.block_drop_rate(i, opts.drop_path_rate);
            let drop = (opts.mode == Mode::Train && rate > 0.0).then(|| BranchScales::sample(b, rate, &mut rng));
            let taps = block_forward(g, p, cfg, i, x, drop.as_ref())?;
            if !g.value(taps.output).is_finite() {
                return Err(Error::NonFinite(format!("output of block {} is not finite", i + 1)));
            }
            x = taps.output;
            blocks.push(taps);
        }
        let taps = TapRecord { patch_embed: blocks.first().map_or(x, |t| t.input), blocks };
        if !opts.with_head || last != cfg.depth {
            return Ok(ForwardOutput {
                taps,
                pooled: None,
                logits: None,
            });
        }
        let normed = g.layer_norm(x, Some(p.var("norm.weight")), Some(p.var("norm.bias")))?;
        let pooled = class_token_of(g, normed)?;
        let logits = classification_head(g, p, pooled)?;
        Ok(ForwardOutput {
            taps,
            pooled: Some(pooled),
            logits: Some(logits),
        })
    }
}
