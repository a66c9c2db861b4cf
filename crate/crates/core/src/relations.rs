//! Per-head token relations: scaled products `XYᵀ/√d` of the Q/K/V taps,
//! optionally softmaxed along the key axis.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationPair {
    QQ,
    KK,
    VV,
    QK,
}

impl RelationPair {
    pub const ALL: [RelationPair; 4] = [RelationPair::QQ, RelationPair::KK, RelationPair::VV, RelationPair::QK];

    pub fn key(self) -> &'static str {
        match self {
            RelationPair::QQ => "qq",
            RelationPair::KK => "kk",
            RelationPair::VV => "vv",
            RelationPair::QK => "qk",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.key().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for RelationPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = self.key().as_bytes();
        write!(f, "{}-{}", (k[0] as char).to_ascii_uppercase(), (k[1] as char).to_ascii_uppercase())
    }
}

/// Relation matrices `[.., M, T, T]` as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct RelationSet {
    pub qq: Var,
    pub kk: Var,
    pub vv: Var,
    pub qk: Var,
    pub softmax_applied: bool,
    pub scale: f32,
}

impl RelationSet {
    pub fn get(&self, pair: RelationPair) -> Var {
        match pair {
            RelationPair::QQ => self.qq,
            RelationPair::KK => self.kk,
            RelationPair::VV => self.vv,
            RelationPair::QK => self.qk,
        }
    }
}

/// `softmax(x·yᵀ·scale)` over the last axis, or the raw scaled product.
pub fn relation(g: &mut Graph, x: Var, y: Var, scale: f32, apply_softmax: bool) -> Result<Var> {
    let r = g.shape(y).len();
    if r < 2 {
        return Err(Error::shape("relation", format!("rank {r} input")));
    }
    let yt = g.transpose(y, r - 2, r - 1)?;
    let p = g.matmul(x, yt)?;
    let p = g.scale(p, scale);
    if apply_softmax {
        g.softmax(p, r - 1)
    } else {
        Ok(p)
    }
}

/// All four relations from `[.., M, T, d]` projections. With `exclude_cls`,
/// token 0 is dropped from both rows and columns.
pub fn compute_relations(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    apply_softmax: bool,
    exclude_cls: bool,
) -> Result<RelationSet> {
    let shape = g.shape(q).to_vec();
    if g.shape(k) != shape.as_slice() || g.shape(v) != shape.as_slice() {
        return Err(Error::shape(
            "compute_relations",
            format!("q {:?}, k {:?}, v {:?}", shape, g.shape(k), g.shape(v)),
        ));
    }
    let r = shape.len();
    if r < 3 {
        return Err(Error::shape("compute_relations", format!("expected [.., M, T, d], got {shape:?}")));
    }
    let (t, d) = (shape[r - 2], shape[r - 1]);
    let (q, k, v) = if exclude_cls {
        if t < 2 {
            return Err(Error::Contract("cannot exclude the class token from a 1-token sequence".into()));
        }
        (
            g.narrow(q, r - 2, 1, t - 1)?,
            g.narrow(k, r - 2, 1, t - 1)?,
            g.narrow(v, r - 2, 1, t - 1)?,
        )
    } else {
        (q, k, v)
    };
    let scale = 1.0 / (d as f32).sqrt();
    Ok(RelationSet {
        qq: relation(g, q, q, scale, apply_softmax)?,
        kk: relation(g, k, k, scale, apply_softmax)?,
        vv: relation(g, v, v, scale, apply_softmax)?,
        qk: relation(g, q, k, scale, apply_softmax)?,
        softmax_applied: apply_softmax,
        scale,
    })
}

/// Evaluates one relation on plain tensors.
pub fn relation_matrix(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    pair: RelationPair,
    apply_softmax: bool,
    exclude_cls: bool,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let set = compute_relations(&mut g, q, k, v, apply_softmax, exclude_cls)?;
    Ok(g.value(set.get(pair)).clone())
}

/// Stacks per-head `[T, T]` relations into `[M, T, T]`, preserving order.
pub fn stack_heads(heads: &[Tensor]) -> Result<Tensor> {
    Tensor::stack(heads)
}

/// Writes a `[T, T]` matrix as headerless CSV, one row per line.
pub fn write_csv(path: &Path, matrix: &Tensor) -> Result<()> {
    if matrix.rank() != 2 {
        return Err(Error::shape("write_csv", format!("expected [T, T], got {:?}", matrix.shape())));
    }
    let cols = matrix.shape()[1];
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    for row in matrix.data().chunks(cols.max(1)) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
