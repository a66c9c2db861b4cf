//! Raw slice kernels shared by the graph ops.

use crate::error::{Error, Result};
use crate::tensor::numel;

/// `c += a · b` with `a: [m, k]`, `b: [k, n]`, `c: [m, n]`, all row-major.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `c += aᵀ · b` with `a: [k, m]`, `b: [k, n]`, `c: [m, n]`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_pi * b_pj;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: [m, k]`, `b: [n, k]`, `c: [m, n]`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    let bt = transpose2(n, k, b);
    gemm_nn(m, k, n, a, &bt, c);
}

pub(crate) fn transpose2(rows: usize, cols: usize, x: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

#[derive(Clone, Debug)]
enum BroadcastKind {
    Same,
    /// `b` repeats over the leading axes of `a == out`.
    BSuffix(usize),
    /// `a` repeats over the leading axes of `b == out`.
    ASuffix(usize),
    General,
}

/// Numpy-style broadcast of two shapes, with an index walker over the output.
#[derive(Clone, Debug)]
pub(crate) struct BroadcastMap {
    pub out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    kind: BroadcastKind,
}

fn strip_leading_ones(shape: &[usize]) -> &[usize] {
    let first = shape.iter().position(|&d| d != 1).unwrap_or(shape.len());
    &shape[first..]
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    let short = strip_leading_ones(short);
    short.len() <= long.len() && &long[long.len() - short.len()..] == short
}

fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let own = contiguous_strides(shape);
    (0..out.len())
        .map(|d| {
            if d < offset || shape[d - offset] == 1 {
                0
            } else {
                own[d - offset]
            }
        })
        .collect()
}

impl BroadcastMap {
    pub fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let mut out_shape = vec![0; rank];
        for d in 0..rank {
            let da = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
            let db = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
            out_shape[d] = match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(Error::shape(
                        op,
                        format!("cannot broadcast {:?} with {:?}", a, b),
                    ))
                }
            };
        }
        let kind = if a == b {
            BroadcastKind::Same
        } else if a == out_shape.as_slice() && is_suffix(b, &out_shape) {
            BroadcastKind::BSuffix(numel(b))
        } else if b == out_shape.as_slice() && is_suffix(a, &out_shape) {
            BroadcastKind::ASuffix(numel(a))
        } else {
            BroadcastKind::General
        };
        Ok(BroadcastMap {
            a_strides: aligned_strides(a, &out_shape),
            b_strides: aligned_strides(b, &out_shape),
            out_shape,
            kind,
        })
    }

    pub fn out_numel(&self) -> usize {
        numel(&self.out_shape)
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    #[inline]
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.out_numel();
        match self.kind {
            BroadcastKind::Same => (0..n).for_each(|i| f(i, i, i)),
            BroadcastKind::BSuffix(len) => (0..n).for_each(|i| f(i, i, i % len)),
            BroadcastKind::ASuffix(len) => (0..n).for_each(|i| f(i, i % len, i)),
            BroadcastKind::General => {
                let rank = self.out_shape.len();
                if rank == 0 {
                    f(0, 0, 0);
                    return;
                }
                let mut idx = vec![0usize; rank];
                let (mut ai, mut bi) = (0usize, 0usize);
                for i in 0..n {
                    f(i, ai, bi);
                    let mut d = rank;
                    while d > 0 {
                        d -= 1;
                        idx[d] += 1;
                        ai += self.a_strides[d];
                        bi += self.b_strides[d];
                        if idx[d] < self.out_shape[d] {
                            break;
                        }
                        ai -= self.a_strides[d] * self.out_shape[d];
                        bi -= self.b_strides[d] * self.out_shape[d];
                        idx[d] = 0;
                    }
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// Calls `f(out_index, in_index)` for a permutation `axes` of `in_shape`.
pub(crate) fn for_each_permuted(in_shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = in_shape.len();
    let in_strides = contiguous_strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = numel(in_shape);
    if rank == 0 {
        f(0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for i in 0..n {
        f(i, off);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}
