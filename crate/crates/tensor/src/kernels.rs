//! Raw loops over flat buffers. Nothing here knows about the tape.

use crate::error::{mismatch, Result};
use crate::scalar::Scalar;

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_gemm(a: usize, b: usize, c: usize, sa: usize, sb: usize, sc: usize) {
    assert!(a >= sa && b >= sb && c >= sc, "gemm buffers shorter than their dimensions");
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    check_gemm(a.len(), b.len(), c.len(), m * k, k * n, m * n);
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: lengths checked above; `c` is a distinct mutable borrow.
    unsafe { S::gemm_raw(m, k, n, a.as_ptr(), (k_, 1), b.as_ptr(), (n_, 1), c.as_mut_ptr(), (n_, 1)) }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
pub(crate) fn gemm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, n: usize, k: usize) {
    check_gemm(a.len(), b.len(), c.len(), m * n, k * n, m * k);
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: as in `gemm_nn`.
    unsafe { S::gemm_raw(m, n, k, a.as_ptr(), (n_, 1), b.as_ptr(), (1, n_), c.as_mut_ptr(), (k_, 1)) }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub(crate) fn gemm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    check_gemm(a.len(), b.len(), c.len(), m * k, m * n, k * n);
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: as in `gemm_nn`.
    unsafe { S::gemm_raw(k, m, n, a.as_ptr(), (1, k_), b.as_ptr(), (n_, 1), c.as_mut_ptr(), (n_, 1)) }
}

/// How an operand of a broadcasting binary op maps output positions to its own.
#[derive(Clone, Debug)]
pub(crate) enum BroadcastMap {
    Identity,
    /// Operand index is `(i / inner) % len`.
    Block { inner: usize, len: usize },
    /// Per-dimension strides in operand space (0 on broadcast dims).
    General { out_shape: Vec<usize>, strides: Vec<usize> },
}

impl BroadcastMap {
    #[cfg(test)]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            BroadcastMap::Identity => i,
            BroadcastMap::Block { inner, len } => (i / inner) % len,
            BroadcastMap::General { out_shape, strides } => {
                let mut rem = i;
                let mut idx = 0;
                for d in (0..out_shape.len()).rev() {
                    let e = out_shape[d];
                    idx += (rem % e) * strides[d];
                    rem /= e;
                }
                idx
            }
        }
    }
}

impl BroadcastMap {
    /// Visits output rows as `(output offset, operand offset, row length, operand stride)`,
    /// where the stride is 0 for a broadcast row and 1 for a contiguous one.
    fn rows(&self, total: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        match self {
            BroadcastMap::Identity => f(0, 0, total, 1),
            BroadcastMap::Block { inner, len } => {
                let mut i = 0;
                while i < total {
                    if *inner == 1 {
                        f(i, 0, *len, 1);
                        i += len;
                    } else {
                        for l in 0..*len {
                            f(i, l, *inner, 0);
                            i += inner;
                        }
                    }
                }
            }
            BroadcastMap::General { out_shape, strides } => {
                let rank = out_shape.len();
                let (width, step) = (out_shape[rank - 1], strides[rank - 1]);
                let mut counter = vec![0usize; rank - 1];
                let mut idx = 0usize;
                let mut i = 0;
                while i < total {
                    f(i, idx, width, step);
                    i += width;
                    for d in (0..rank - 1).rev() {
                        counter[d] += 1;
                        idx += strides[d];
                        if counter[d] < out_shape[d] {
                            break;
                        }
                        idx -= strides[d] * out_shape[d];
                        counter[d] = 0;
                    }
                }
            }
        }
    }

    /// The operand stretched to `total` output positions.
    pub(crate) fn expand<'a, S: Scalar>(&self, src: &'a [S], total: usize) -> std::borrow::Cow<'a, [S]> {
        if let BroadcastMap::Identity = self {
            return std::borrow::Cow::Borrowed(src);
        }
        let mut out = vec![S::zero(); total];
        self.rows(total, |i, j, w, step| {
            if step == 0 {
                out[i..i + w].fill(src[j]);
            } else {
                out[i..i + w].copy_from_slice(&src[j..j + w]);
            }
        });
        std::borrow::Cow::Owned(out)
    }

    /// Sums output-shaped `g` back onto the operand: `dst[j] += Σ_{i→j} g[i]`.
    pub(crate) fn reduce_into<S: Scalar>(&self, g: &[S], dst: &mut [S]) {
        self.rows(g.len(), |i, j, w, step| {
            if step == 0 {
                dst[j] += g[i..i + w].iter().copied().sum::<S>();
            } else {
                dst[j..j + w].iter_mut().zip(&g[i..i + w]).for_each(|(d, &x)| *d += x);
            }
        });
    }
}

/// Right-aligned broadcast of two shapes; size-1 extents stretch.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for d in 0..rank {
        let ea = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
        let eb = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
        out[d] = match (ea, eb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(mismatch(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Builds the map from `out` positions into an operand of shape `operand`.
pub(crate) fn broadcast_map(operand: &[usize], out: &[usize]) -> BroadcastMap {
    let rank = out.len();
    let aligned: Vec<usize> = (0..rank)
        .map(|d| {
            if d + operand.len() >= rank {
                operand[d + operand.len() - rank]
            } else {
                1
            }
        })
        .collect();
    if aligned == out {
        return BroadcastMap::Identity;
    }
    // A contiguous run of matching extents surrounded by size-1 extents.
    let matches: Vec<bool> = (0..rank).map(|d| aligned[d] == out[d]).collect();
    let first = matches.iter().position(|&m| m);
    let block = match first {
        None => Some((0, 0)),
        Some(lo) => {
            let hi = (lo..rank).find(|&d| !matches[d]).unwrap_or(rank);
            let tail_ok = (hi..rank).all(|d| aligned[d] == 1);
            let head_ok = (0..lo).all(|d| aligned[d] == 1);
            (tail_ok && head_ok).then_some((lo, hi))
        }
    };
    if let Some((lo, hi)) = block {
        let inner = out[hi..].iter().product();
        let len = out[lo..hi].iter().product();
        return BroadcastMap::Block { inner, len };
    }
    let mut strides = vec![0; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        if aligned[d] != 1 {
            strides[d] = s;
        }
        s *= aligned[d];
    }
    BroadcastMap::General {
        out_shape: out.to_vec(),
        strides,
    }
}

/// Copies `src` (of `shape`) into the axis order given by `perm`.
pub(crate) fn permute<S: Scalar>(src: &[S], shape: &[usize], perm: &[usize]) -> Vec<S> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let (outer_rank, run) = match perm.last() {
        Some(&p) if p == rank - 1 => (rank - 1, shape[rank - 1]),
        _ => (rank, 1),
    };
    let mut out = Vec::with_capacity(src.len());
    if run == 0 {
        return out;
    }
    let mut counter = vec![0usize; outer_rank];
    let mut offset = 0usize;
    for _ in 0..src.len() / run {
        out.extend_from_slice(&src[offset..offset + run]);
        for d in (0..outer_rank).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    out
}

pub(crate) fn gelu<S: Scalar>(x: S) -> (S, S) {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(0.044715);
    let half = S::lit(0.5);
    let one = S::one();
    let inner = c * (x + k * x * x * x);
    let t = S::lit(2.0) / (one + (-S::lit(2.0) * inner).exp()) - one;
    let y = half * x * (one + t);
    let dinner = c * (one + S::lit(3.0) * k * x * x);
    let dy = half * (one + t) + half * x * (one - t * t) * dinner;
    (y, dy)
}
