#![allow(dead_code)]

pub mod oracles;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vitdistill::params::{Bound, ParamStore};
use vitdistill::vit::{ViTConfig, ViTModel};
use vitdistill::{Graph, Result, Tensor, Var};

pub const STEP: f32 = 1e-3;
pub const TOLERANCE: f64 = 1e-2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut rng(seed))
}

/// Rows of positive numbers summing to one.
pub fn distribution(shape: &[usize], seed: u64) -> Tensor {
    let mut t = randn(shape, seed);
    let w = *shape.last().unwrap();
    for row in t.data_mut().chunks_mut(w) {
        let m = row.iter().cloned().fold(f32::MIN, f32::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    t
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute difference when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale < 1e-7 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `eval` around `inputs`, flattened in input order.
fn numeric(inputs: &[Tensor], eval: &dyn Fn(&[Tensor]) -> f32) -> Vec<f64> {
    let mut out = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let x = work[i].data()[j];
            work[i].data_mut()[j] = x + STEP;
            let up = eval(&work) as f64;
            work[i].data_mut()[j] = x - STEP;
            let down = eval(&work) as f64;
            work[i].data_mut()[j] = x;
            out.push((up - down) / (2.0 * STEP as f64));
        }
    }
    out
}

/// Checks the tape gradient of a scalar built from leaves holding `inputs`.
pub fn check_inputs(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let build = |values: &[Tensor], g: &mut Graph| {
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(&t.clone().with_requires_grad(true))).collect();
        let loss = f(g, &vars).expect("loss builds");
        (vars, loss)
    };
    let mut g = Graph::new();
    let (vars, loss) = build(inputs, &mut g);
    g.backward(loss).expect("backward");
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match g.grad(*v) {
            Some(gr) => analytic.extend(gr.iter().map(|&x| x as f64)),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }
    let eval = |values: &[Tensor]| {
        let mut g = Graph::new();
        let (_, loss) = build(values, &mut g);
        g.value(loss).item()
    };
    relative_error(&analytic, &numeric(inputs, &eval))
}

fn store_with(template: &ParamStore, values: &[Tensor]) -> ParamStore {
    let mut s = template.clone();
    for (p, v) in s.iter_mut().zip(values) {
        p.tensor = v.clone().with_requires_grad(true);
    }
    s
}

/// Checks the gradient of a scalar w.r.t. every parameter of `store`.
pub fn check_store(store: &ParamStore, f: impl Fn(&mut Graph, &Bound) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let bound = store.bind(&mut g, true);
    let loss = f(&mut g, &bound).expect("loss builds");
    g.backward(loss).expect("backward");
    let mut analytic = Vec::new();
    for (gr, p) in bound.grads(&g).into_iter().zip(store.iter()) {
        match gr {
            Some(gr) => analytic.extend(gr.iter().map(|&x| x as f64)),
            None => analytic.extend(std::iter::repeat_n(0.0, p.tensor.numel())),
        }
    }
    let values: Vec<Tensor> = store.iter().map(|p| p.tensor.clone()).collect();
    let eval = |vals: &[Tensor]| {
        let s = store_with(store, vals);
        let mut g = Graph::new();
        let b = s.bind(&mut g, false);
        let loss = f(&mut g, &b).expect("loss builds");
        g.value(loss).item()
    };
    relative_error(&analytic, &numeric(&values, &eval))
}

/// A ViT under 1k parameters: 8×8 single-channel images, 4×4 patches.
pub fn tiny_config(depth: usize, dim: usize, heads: usize) -> ViTConfig {
    ViTConfig {
        depth,
        hidden_dim: dim,
        heads,
        patch_size: 4,
        image_size: 8,
        channels: 1,
        num_classes: 3,
        mlp_ratio: 2,
        drop_path_rate: 0.0,
        adaptive_last_block_heads: None,
    }
}

/// Model with every parameter redrawn at a scale that gives sizeable
/// gradients everywhere (the default init leaves many near zero).
pub fn rough_model(cfg: ViTConfig, seed: u64) -> ViTModel {
    let mut m = ViTModel::new(cfg, seed).expect("valid config");
    let mut r = rng(seed ^ 0x5eed);
    for p in m.params.iter_mut() {
        let noise = Tensor::randn(p.tensor.shape(), &mut r);
        let base = if p.name.ends_with("norm1.weight") || p.name.ends_with("norm2.weight") || p.name == "norm.weight" {
            1.0
        } else {
            0.0
        };
        for (x, n) in p.tensor.data_mut().iter_mut().zip(noise.data()) {
            *x = base + 0.4 * n;
        }
    }
    m
}
