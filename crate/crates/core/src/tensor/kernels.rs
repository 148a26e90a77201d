// Raw loops shared by the forward and backward passes of the tape.

use super::Scalar;
use crate::error::{Error, Result};

// ── Broadcasting ─────────────────────────────────────────────────────

/// Numpy-style broadcast of two shapes (aligned on the right).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Dimension {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// How an operand's flat index is derived from an output flat index.
pub(crate) enum Bcast {
    Same,
    /// Operand shape is a trailing suffix of the output shape.
    Repeat(usize),
    Map(Vec<usize>),
}

impl Bcast {
    pub(crate) fn new(src: &[usize], out: &[usize]) -> Bcast {
        if src == out {
            return Bcast::Same;
        }
        let n: usize = src.iter().product();
        if src.len() <= out.len() && out[out.len() - src.len()..] == *src {
            return Bcast::Repeat(n.max(1));
        }
        let rank = out.len();
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..src.len()).rev() {
            let oi = i + rank - src.len();
            strides[oi] = if src[i] == 1 { 0 } else { acc };
            acc *= src[i];
        }
        let total: usize = out.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..total {
            map.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out[d] {
                    break;
                }
                off -= strides[d] * out[d];
                idx[d] = 0;
            }
        }
        Bcast::Map(map)
    }

    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Repeat(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }
}

// ── Matrix products ──────────────────────────────────────────────────

/// Batch layout of a broadcast matmul: per output batch item, the offsets
/// of the matching `a` and `b` matrices.
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_off: Vec<usize>,
    pub b_off: Vec<usize>,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    let err = || Error::Dimension {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch = broadcast_shape("matmul", ab, bb).map_err(|_| err())?;
    let total: usize = batch.iter().product();
    let amap = Bcast::new(ab, &batch);
    let bmap = Bcast::new(bb, &batch);
    let a_off = (0..total).map(|i| amap.at(i) * m * k).collect();
    let b_off = (0..total).map(|i| bmap.at(i) * k * n).collect();
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulPlan {
        m,
        k,
        n,
        a_off,
        b_off,
        out_shape,
    })
}

/// c[m,n] += a[m,k] · b[k,n]
#[inline]
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// c[m,k] += a[m,n] · b[k,n]ᵀ
#[inline]
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            c[i * k + p] = c[i * k + p] + s;
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
#[inline]
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

// ── Permutation ──────────────────────────────────────────────────────

/// Returns, for each output flat index, the source flat index.
pub(crate) fn permute_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = shape.len();
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, map)
}
