//! Finite-difference cases for every differentiable op and every loss.

use vitdistill::distill::{
    class_token_loss, distill_loss, feature_loss, init_heads, kl_loss, normalize_patches, reconstruction_loss,
    relation_loss, smooth_l1, tap_streams, FeatureTarget, LossStrategy, ProjectionHead, Reconstruction,
};
use vitdistill::params::ParamStore;
use vitdistill::pipeline::cross_entropy;
use vitdistill::relations::{compute_relations, RelationPair};
use vitdistill::vit::{patchify, ForwardOptions, MaskSpec, ViTConfig, ViTModel};
use vitdistill::{Graph, Result, Tensor, Var};

use super::*;

/// `Σ out ⊙ W` for a fixed random `W`, so every output element carries a
/// distinct upstream gradient.
fn weighted(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let w = g.constant(randn(g.shape(out), seed));
    let p = g.mul(out, w)?;
    Ok(g.sum_all(p))
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let mut t = randn(shape, seed);
    for x in t.data_mut() {
        *x = x.abs() + 0.5;
    }
    t
}

pub fn op_cases() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut case = |name, inputs: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>| {
        out.push((name, check_inputs(&inputs, f)));
    };
    case("matmul", vec![randn(&[3, 4], 1), randn(&[4, 5], 2)], &|g, x| {
        let y = g.matmul(x[0], x[1])?;
        weighted(g, y, 9)
    });
    case("matmul_batched_broadcast", vec![randn(&[2, 1, 3, 4], 3), randn(&[3, 4, 2], 4)], &|g, x| {
        let y = g.matmul(x[0], x[1])?;
        weighted(g, y, 9)
    });
    case("add_broadcast", vec![randn(&[2, 3, 4], 5), randn(&[4], 6)], &|g, x| {
        let y = g.add(x[0], x[1])?;
        weighted(g, y, 9)
    });
    case("sub_broadcast", vec![randn(&[2, 3], 7), randn(&[2, 1], 8)], &|g, x| {
        let y = g.sub(x[0], x[1])?;
        weighted(g, y, 9)
    });
    case("mul_broadcast", vec![randn(&[3, 4], 10), randn(&[1, 4], 11)], &|g, x| {
        let y = g.mul(x[0], x[1])?;
        weighted(g, y, 9)
    });
    case("mul_self", vec![randn(&[5], 12)], &|g, x| {
        let y = g.mul(x[0], x[0])?;
        weighted(g, y, 9)
    });
    case("scale", vec![randn(&[2, 3], 13)], &|g, x| {
        let y = g.scale(x[0], -1.7);
        weighted(g, y, 9)
    });
    case("gelu", vec![randn(&[4, 5], 14)], &|g, x| {
        let y = g.gelu(x[0]);
        weighted(g, y, 9)
    });
    case("softmax_last", vec![randn(&[2, 3, 5], 15)], &|g, x| {
        let y = g.softmax(x[0], 2)?;
        weighted(g, y, 9)
    });
    case("softmax_middle", vec![randn(&[2, 4, 3], 16)], &|g, x| {
        let y = g.softmax(x[0], 1)?;
        weighted(g, y, 9)
    });
    case("log_softmax", vec![randn(&[3, 6], 17)], &|g, x| {
        let y = g.log_softmax(x[0], 1)?;
        weighted(g, y, 9)
    });
    case("layer_norm_affine", vec![randn(&[2, 3, 6], 18), randn(&[6], 19), randn(&[6], 20)], &|g, x| {
        let y = g.layer_norm(x[0], Some(x[1]), Some(x[2]))?;
        weighted(g, y, 9)
    });
    case("layer_norm_plain", vec![randn(&[4, 5], 21)], &|g, x| {
        let y = g.layer_norm(x[0], None, None)?;
        weighted(g, y, 9)
    });
    case("reshape", vec![randn(&[2, 6], 22)], &|g, x| {
        let y = g.reshape(x[0], &[3, 4])?;
        weighted(g, y, 9)
    });
    case("permute", vec![randn(&[2, 3, 4], 23)], &|g, x| {
        let y = g.permute(x[0], &[2, 0, 1])?;
        weighted(g, y, 9)
    });
    case("transpose", vec![randn(&[2, 3, 4], 24)], &|g, x| {
        let y = g.transpose(x[0], 0, 2)?;
        weighted(g, y, 9)
    });
    case("broadcast_to", vec![randn(&[3, 1], 25)], &|g, x| {
        let y = g.broadcast_to(x[0], &[2, 3, 4])?;
        weighted(g, y, 9)
    });
    case("concat", vec![randn(&[2, 1, 3], 26), randn(&[2, 4, 3], 27)], &|g, x| {
        let y = g.concat(&[x[0], x[1]], 1)?;
        weighted(g, y, 9)
    });
    case("narrow", vec![randn(&[2, 5, 3], 28)], &|g, x| {
        let y = g.narrow(x[0], 1, 1, 3)?;
        weighted(g, y, 9)
    });
    case("sum_axis", vec![randn(&[2, 3, 4], 29)], &|g, x| {
        let y = g.sum(x[0], 1)?;
        weighted(g, y, 9)
    });
    case("mean_axis", vec![randn(&[2, 3, 4], 30)], &|g, x| {
        let y = g.mean(x[0], 2)?;
        weighted(g, y, 9)
    });
    case("sum_all", vec![randn(&[3, 3], 31)], &|g, x| {
        let y = g.mul(x[0], x[0])?;
        Ok(g.sum_all(y))
    });
    case("mean_all", vec![randn(&[3, 3], 32)], &|g, x| {
        let y = g.mul(x[0], x[0])?;
        Ok(g.mean_all(y))
    });
    case("ln_clamped", vec![positive(&[3, 4], 33)], &|g, x| {
        let y = g.ln_clamped(x[0], 1e-8);
        weighted(g, y, 9)
    });
    case("smooth_l1_op", vec![randn(&[4, 5], 34), randn(&[4, 5], 35)], &|g, x| {
        // Spread the differences over both the quadratic and linear regimes.
        let a = g.scale(x[0], 3.0);
        g.smooth_l1(a, x[1], 2.0)
    });
    out
}

fn tiny_teacher() -> ViTModel {
    rough_model(tiny_config(2, 8, 4), 71)
}

fn tiny_student() -> ViTModel {
    let cfg = ViTConfig {
        adaptive_last_block_heads: Some(4),
        ..tiny_config(2, 4, 2)
    };
    rough_model(cfg, 72)
}

fn images() -> Tensor {
    randn(&[2, 1, 8, 8], 73)
}

/// Student and projection-head parameters merged into one store.
fn combined(student: &ViTModel, heads: &ParamStore) -> ParamStore {
    let mut s = student.params.clone();
    let mut r = rng(74);
    for p in heads.iter() {
        let t = Tensor::randn(p.tensor.shape(), &mut r);
        s.insert(p.name.clone(), t, p.decay);
    }
    s
}

/// Gradient of a full distillation loss w.r.t. student and head
/// parameters, through the student's forward pass.
fn composite(strategy: LossStrategy, masked: bool) -> f64 {
    let teacher = tiny_teacher();
    let student = tiny_student();
    let cfg = student.config.clone();
    let x = images();
    let heads = init_heads(&strategy, cfg.hidden_dim, teacher.config.hidden_dim, cfg.patch_dim(), 75);
    let store = combined(&student, &heads);
    let masks: Vec<MaskSpec> = (0..2).map(|b| MaskSpec::random(cfg.num_patches(), 0.75, b).unwrap()).collect();
    let target = normalize_patches(&patchify(&x, &cfg).unwrap());
    check_store(&store, |g, p| {
        let tp = teacher.params.bind(g, false);
        let tout = teacher.forward_with_taps(g, &tp, &x, &ForwardOptions::eval())?;
        let t_streams = tap_streams(g, tout.taps.block(2)?, &strategy)?;
        let opts = ForwardOptions {
            masks: masked.then_some(masks.as_slice()),
            with_head: false,
            ..ForwardOptions::eval()
        };
        let sout = student.forward_with_taps(g, p, &x, &opts)?;
        let last = *sout.taps.block(2)?;
        let s_streams = tap_streams(g, &last, &strategy)?;
        let recon = strategy.with_reconstruction.then(|| Reconstruction {
            student_tokens: last.output,
            target: &target,
            masks: &masks,
        });
        Ok(distill_loss(g, &strategy, &s_streams, &t_streams, p, recon)?.total)
    })
}

pub fn loss_cases() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    out.push((
        "kl_loss",
        check_inputs(&[randn(&[2, 3, 5], 40)], |g, x| {
            let p = g.softmax(x[0], 2)?;
            let t = g.constant(distribution(&[2, 3, 5], 41));
            kl_loss(g, p, t)
        }),
    ));
    out.push((
        "class_token_loss",
        check_inputs(&[randn(&[3, 6], 42)], |g, x| {
            let t = g.constant(randn(&[3, 6], 43));
            class_token_loss(g, x[0], t, 0.5)
        }),
    ));
    out.push((
        "smooth_l1",
        check_inputs(&[randn(&[3, 4], 44)], |g, x| {
            let a = g.scale(x[0], 3.0);
            let t = g.constant(randn(&[3, 4], 45));
            smooth_l1(g, a, t)
        }),
    ));
    out.push(("feature_loss", {
        let mut store = ParamStore::new();
        store.insert("student", randn(&[2, 3, 4], 46), false);
        ProjectionHead::new(4, 6, &mut rng(47)).register(&mut store, "proj.feature");
        let store = {
            let mut s = ParamStore::new();
            let mut r = rng(48);
            for p in store.iter() {
                s.insert(p.name.clone(), Tensor::randn(p.tensor.shape(), &mut r), p.decay);
            }
            s
        };
        let teacher = randn(&[2, 3, 6], 49);
        check_store(&store, |g, p| {
            let t = g.constant(teacher.clone());
            feature_loss(g, p.var("student"), t, p, "proj.feature")
        })
    }));
    for (name, softmax, exclude) in [
        ("relation_loss", true, false),
        ("relation_loss_no_softmax", false, false),
        ("relation_loss_exclude_cls", true, true),
    ] {
        let inputs = [randn(&[2, 2, 4, 3], 50), randn(&[2, 2, 4, 3], 51), randn(&[2, 2, 4, 3], 52)];
        let teacher: Vec<Tensor> = (53..56).map(|s| randn(&[2, 2, 4, 3], s)).collect();
        out.push((
            name,
            check_inputs(&inputs, |g, x| {
                let s = compute_relations(g, x[0], x[1], x[2], softmax, exclude)?;
                let tv: Vec<Var> = teacher.iter().map(|t| g.constant(t.clone())).collect();
                let t = compute_relations(g, tv[0], tv[1], tv[2], softmax, exclude)?;
                let parts = relation_loss(g, &s, &t, &RelationPair::ALL)?;
                let mut total = parts[0];
                for &p in &parts[1..] {
                    total = g.add(total, p)?;
                }
                Ok(total)
            }),
        ));
    }
    out.push((
        "reconstruction_loss",
        check_inputs(&[randn(&[2, 4, 5], 56)], |g, x| {
            let masks = [MaskSpec::random(4, 0.5, 1)?, MaskSpec::random(4, 0.75, 2)?];
            reconstruction_loss(g, x[0], &randn(&[2, 4, 5], 57), &masks)
        }),
    ));
    out.push((
        "cross_entropy",
        check_inputs(&[randn(&[4, 3], 58)], |g, x| cross_entropy(g, x[0], &[0, 2, 1, 2], 0.1)),
    ));
    out.push(("vit_classifier", {
        let model = rough_model(tiny_config(2, 4, 2), 59);
        let x = images();
        check_store(&model.params, |g, p| {
            let out = model.forward_with_taps(g, p, &x, &ForwardOptions::eval())?;
            cross_entropy(g, out.logits.expect("head"), &[1, 2], 0.1)
        })
    }));
    out.push(("distill_class_token", composite(LossStrategy::class_token(), false)));
    out.push(("distill_feature_output", composite(LossStrategy::feature(FeatureTarget::Output), false)));
    out.push(("distill_feature_qkv", composite(LossStrategy::feature(FeatureTarget::Qkv), false)));
    out.push(("distill_relation", composite(LossStrategy::relation(&RelationPair::ALL), false)));
    out.push((
        "distill_relation_masked_reconstruction",
        composite(
            LossStrategy {
                with_reconstruction: true,
                ..LossStrategy::relation(&[RelationPair::QK, RelationPair::VV])
            },
            true,
        ),
    ));
    out
}
