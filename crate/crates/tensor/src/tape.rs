use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{mismatch, Result, TensorError};
use crate::kernels::{self, axis_split, BroadcastMap};
use crate::scalar::Scalar;
use crate::tensor::{check_shape, numel, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Reduction geometry around one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Axis {
    pub outer: usize,
    pub n: usize,
    pub inner: usize,
}

impl Axis {
    #[inline]
    pub(crate) fn at(&self, o: usize, i: usize, j: usize) -> usize {
        (o * self.n + i) * self.inner + j
    }
}

pub(crate) enum Op<S> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        map_a: BroadcastMap,
        map_b: BroadcastMap,
    },
    AddScalar(usize),
    MulScalar(usize, S),
    Exp(usize),
    Log(usize),
    Pow(usize, S),
    Gelu(usize),
    Clamp(usize, S, S),
    Sum(usize, Axis),
    Mean(usize, Axis),
    Extremum(usize, Axis, Vec<usize>),
    L2Normalize(usize, Axis, Vec<S>),
    Softmax(usize, Axis),
    LogSoftmax(usize, Axis),
    LogSumExp(usize, Axis),
    MinMaxNormalize {
        a: usize,
        axis: Axis,
        argmin: Vec<usize>,
        argmax: Vec<usize>,
        range: Vec<S>,
    },
    LayerNorm {
        a: usize,
        n: usize,
        rstd: Vec<S>,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        a: usize,
        axis: Axis,
        start: usize,
        len: usize,
    },
    Permute(usize, Vec<usize>),
    Reshape(usize),
    IndexSelect {
        a: usize,
        row: usize,
        indices: Vec<usize>,
    },
}

pub(crate) struct Node<S> {
    pub shape: Vec<usize>,
    pub value: Vec<S>,
    pub op: Op<S>,
    pub requires_grad: bool,
    /// Persistent gradient of leaves; accumulates across `backward` calls.
    pub grad: Option<Vec<S>>,
}

/// Append-only record of a computation.
///
/// Nodes are stored in creation order, which is a valid topological order, so
/// backward simply iterates in reverse. A tape must not be shared between
/// threads while recording.
pub struct Tape<S: Scalar> {
    id: u64,
    pub(crate) nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::DetachedTensor);
        }
        Ok(v.idx)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Records a tensor; it is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        let rg = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<Var> {
        check_shape("constant", &shape, data.len())?;
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.idx].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    /// First element of the value, for scalar results.
    pub fn item(&self, v: Var) -> S {
        self.nodes[v.idx].value[0]
    }

    /// Accumulated gradient of a leaf (or of the last backward for other nodes).
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes.get(v.idx).and_then(|n| n.grad.as_deref())
    }

    /// Copies value and gradient out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let node = &self.nodes[v.idx];
        let mut t = Tensor::new(node.shape.clone(), node.value.clone()).expect("tape shape");
        t.set_requires_grad(node.requires_grad);
        if let Some(g) = &node.grad {
            t.accumulate_grad(g).expect("grad shape");
        }
        t
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// argmin/argmax choices of every min/max-like node, in tape order.
    ///
    /// Two evaluations of the same graph with equal signatures are on the same
    /// smooth piece of any piecewise function built from min/max/clamp.
    pub fn extremum_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Extremum(_, _, idx) => sig.extend_from_slice(idx),
                Op::MinMaxNormalize { argmin, argmax, range, .. } => {
                    sig.extend_from_slice(argmin);
                    sig.extend_from_slice(argmax);
                    sig.extend(range.iter().map(|r| usize::from(*r == S::zero())));
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &self.nodes[*a].value;
                    sig.extend(x.iter().map(|&v| if v < *lo { 0 } else if v > *hi { 2 } else { 1 }));
                }
                _ => {}
            }
        }
        sig
    }

    fn axis_of(&self, op: &'static str, i: usize, axis: usize) -> Result<Axis> {
        let shape = &self.nodes[i].shape;
        if axis >= shape.len() {
            return Err(mismatch(op, format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = axis_split(shape, axis);
        Ok(Axis { outer, n, inner })
    }

    // ---------------------------------------------------------------- linear algebra

    /// Matrix product over the last two axes.
    ///
    /// Leading axes must agree, except that a rank-2 right operand is shared by
    /// every matrix of a batched left operand.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let sa = self.nodes[ia].shape.clone();
        let sb = self.nodes[ib].shape.clone();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}: operands need rank >= 2")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}: inner extents differ")));
        }
        let lead = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && lead != &sb[..sb.len() - 2] {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}: batch extents differ")));
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![S::zero(); batch * m * n];
        {
            let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
            if shared_rhs {
                kernels::gemm_nn(va, vb, &mut out, batch * m, k, n);
            } else {
                for t in 0..batch {
                    kernels::gemm_nn(
                        &va[t * m * k..(t + 1) * m * k],
                        &vb[t * k * n..(t + 1) * k * n],
                        &mut out[t * m * n..(t + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a: ia,
                b: ib,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let op_name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let out_shape = kernels::broadcast_shape(op_name, &self.nodes[ia].shape, &self.nodes[ib].shape)?;
        let map_a = kernels::broadcast_map(&self.nodes[ia].shape, &out_shape);
        let map_b = kernels::broadcast_map(&self.nodes[ib].shape, &out_shape);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if kind == BinaryKind::Div && vb.iter().any(|&x| x == S::zero()) {
            return Err(TensorError::DomainError {
                op: "div",
                detail: "divisor contains an exact zero".into(),
            });
        }
        let total = numel(&out_shape);
        let (fa, fb) = (map_a.expand(va, total), map_b.expand(vb, total));
        let out: Vec<S> = fa.iter().zip(fb.iter()).map(|(&x, &y)| apply_binary(kind, x, y)).collect();
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(
            out_shape,
            out,
            Op::Binary {
                kind,
                a: ia,
                b: ib,
                map_a,
                map_b,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Elementwise quotient; an exact zero anywhere in `b` is a domain error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: impl FnOnce(usize) -> Op<S>) -> Result<Var> {
        let ia = self.idx(a)?;
        let out: Vec<S> = self.nodes[ia].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[ia].shape.clone();
        let rg = self.rg(ia);
        Ok(self.push(shape, out, op(ia), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Result<Var> {
        self.unary(a, |x| x + c, Op::AddScalar)
    }

    pub fn mul_scalar(&mut self, a: Var, c: S) -> Result<Var> {
        self.unary(a, |x| x * c, |i| Op::MulScalar(i, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -S::one())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.exp(), Op::Exp)
    }

    /// Natural log; exact zeros and negatives are domain errors (no silent epsilon).
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        if self.nodes[ia].value.iter().any(|&x| x <= S::zero()) {
            return Err(TensorError::DomainError {
                op: "log",
                detail: "input contains a non-positive entry".into(),
            });
        }
        self.unary(a, |x| x.ln(), Op::Log)
    }

    /// `x^c` for a constant exponent.
    pub fn pow(&mut self, a: Var, c: S) -> Result<Var> {
        let ia = self.idx(a)?;
        if c.fract() != S::zero() && self.nodes[ia].value.iter().any(|&x| x < S::zero()) {
            return Err(TensorError::DomainError {
                op: "pow",
                detail: "negative base with fractional exponent".into(),
            });
        }
        self.unary(a, |x| if c == S::zero() { S::one() } else { x.powf(c) }, |i| Op::Pow(i, c))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| kernels::gelu(x).0, Op::Gelu)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Result<Var> {
        self.unary(a, |x| x.max(lo).min(hi), |i| Op::Clamp(i, lo, hi))
    }

    // ---------------------------------------------------------------- reductions

    fn reduced_shape(&self, i: usize, axis: usize, keepdim: bool) -> Vec<usize> {
        let mut shape = self.nodes[i].shape.clone();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        shape
    }

    fn reduce(&mut self, op_name: &'static str, a: Var, axis: usize, keepdim: bool, mean: bool) -> Result<Var> {
        let ia = self.idx(a)?;
        let ax = self.axis_of(op_name, ia, axis)?;
        let v = &self.nodes[ia].value;
        let mut out = vec![S::zero(); ax.outer * ax.inner];
        for o in 0..ax.outer {
            for i in 0..ax.n {
                for j in 0..ax.inner {
                    out[o * ax.inner + j] += v[ax.at(o, i, j)];
                }
            }
        }
        if mean {
            let inv = S::one() / S::lit(ax.n as f64);
            out.iter_mut().for_each(|x| *x *= inv);
        }
        let shape = self.reduced_shape(ia, axis, keepdim);
        let rg = self.rg(ia);
        let op = if mean { Op::Mean(ia, ax) } else { Op::Sum(ia, ax) };
        Ok(self.push(shape, out, op, rg))
    }

    pub fn sum(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce("sum", a, axis, keepdim, false)
    }

    pub fn mean(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce("mean", a, axis, keepdim, true)
    }

    /// Sum of every element, as a scalar of shape `[]`.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = numel(self.shape(a));
        let flat = self.reshape(a, vec![n])?;
        self.sum(flat, 0, false)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = numel(self.shape(a));
        let flat = self.reshape(a, vec![n])?;
        self.mean(flat, 0, false)
    }

    fn extremum(&mut self, op_name: &'static str, a: Var, axis: usize, keepdim: bool, want_max: bool) -> Result<Var> {
        let ia = self.idx(a)?;
        let ax = self.axis_of(op_name, ia, axis)?;
        let v = &self.nodes[ia].value;
        let mut out = Vec::with_capacity(ax.outer * ax.inner);
        let mut idx = Vec::with_capacity(ax.outer * ax.inner);
        for o in 0..ax.outer {
            for j in 0..ax.inner {
                let mut best = 0;
                for i in 1..ax.n {
                    let (cand, cur) = (v[ax.at(o, i, j)], v[ax.at(o, best, j)]);
                    // strict comparison keeps the first extremal index on ties
                    if (want_max && cand > cur) || (!want_max && cand < cur) {
                        best = i;
                    }
                }
                out.push(v[ax.at(o, best, j)]);
                idx.push(best);
            }
        }
        let shape = self.reduced_shape(ia, axis, keepdim);
        let rg = self.rg(ia);
        Ok(self.push(shape, out, Op::Extremum(ia, ax, idx), rg))
    }

    /// Maximum along `axis`; the gradient flows to the first maximal entry.
    pub fn max(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.extremum("max", a, axis, keepdim, true)
    }

    /// Minimum along `axis`; the gradient flows to the first minimal entry.
    pub fn min(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.extremum("min", a, axis, keepdim, false)
    }

    // ---------------------------------------------------------------- normalizations

    /// Scales each slice along `axis` to unit L2 norm.
    ///
    /// Slices with norm below [`crate::NORM_GUARD`] map to the first basis
    /// vector along `axis` and pass no gradient.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let ax = self.axis_of("l2_normalize", ia, axis)?;
        let v = &self.nodes[ia].value;
        let guard = S::lit(crate::NORM_GUARD);
        let mut out = vec![S::zero(); v.len()];
        let mut inv = vec![S::zero(); ax.outer * ax.inner];
        for o in 0..ax.outer {
            for j in 0..ax.inner {
                let sq: S = (0..ax.n).map(|i| v[ax.at(o, i, j)] * v[ax.at(o, i, j)]).sum();
                let norm = sq.sqrt();
                if norm < guard {
                    out[ax.at(o, 0, j)] = S::one();
                } else {
                    let r = S::one() / norm;
                    inv[o * ax.inner + j] = r;
                    for i in 0..ax.n {
                        out[ax.at(o, i, j)] = v[ax.at(o, i, j)] * r;
                    }
                }
            }
        }
        let shape = self.nodes[ia].shape.clone();
        let rg = self.rg(ia);
        Ok(self.push(shape, out, Op::L2Normalize(ia, ax, inv), rg))
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, log: bool) -> Result<Var> {
        let op_name = if log { "log_softmax" } else { "softmax" };
        let ia = self.idx(a)?;
        let ax = self.axis_of(op_name, ia, axis)?;
        let v = &self.nodes[ia].value;
        let mut out = vec![S::zero(); v.len()];
        for o in 0..ax.outer {
            for j in 0..ax.inner {
                let mut m = S::neg_infinity();
                for i in 0..ax.n {
                    m = m.max(v[ax.at(o, i, j)]);
                }
                let mut z = S::zero();
                for i in 0..ax.n {
                    z += (v[ax.at(o, i, j)] - m).exp();
                }
                let lz = z.ln();
                for i in 0..ax.n {
                    let shifted = v[ax.at(o, i, j)] - m;
                    out[ax.at(o, i, j)] = if log { shifted - lz } else { shifted.exp() / z };
                }
            }
        }
        let shape = self.nodes[ia].shape.clone();
        let rg = self.rg(ia);
        let op = if log { Op::LogSoftmax(ia, ax) } else { Op::Softmax(ia, ax) };
        Ok(self.push(shape, out, op, rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, true)
    }

    /// `log(sum(exp(x)))` along `axis`, computed with a max shift.
    pub fn logsumexp(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let ia = self.idx(a)?;
        let ax = self.axis_of("logsumexp", ia, axis)?;
        let v = &self.nodes[ia].value;
        let mut out = Vec::with_capacity(ax.outer * ax.inner);
        for o in 0..ax.outer {
            for j in 0..ax.inner {
                let mut m = S::neg_infinity();
                for i in 0..ax.n {
                    m = m.max(v[ax.at(o, i, j)]);
                }
                let z: S = (0..ax.n).map(|i| (v[ax.at(o, i, j)] - m).exp()).sum();
                out.push(m + z.ln());
            }
        }
        let shape = self.reduced_shape(ia, axis, keepdim);
        let rg = self.rg(ia);
        Ok(self.push(shape, out, Op::LogSumExp(ia, ax), rg))
    }

    /// `(x - min) / (max - min)` along `axis`.
    ///
    /// A slice whose range is at most `degenerate` becomes uniform `1/n` with
    /// zero gradient.
    pub fn minmax_normalize(&mut self, a: Var, axis: usize, degenerate: S) -> Result<Var> {
        let ia = self.idx(a)?;
        let ax = self.axis_of("minmax_normalize", ia, axis)?;
        let v = &self.nodes[ia].value;
        let slots = ax.outer * ax.inner;
        let mut out = vec![S::zero(); v.len()];
        let (mut argmin, mut argmax, mut range) = (vec![0; slots], vec![0; slots], vec![S::zero(); slots]);
        let uniform = S::one() / S::lit(ax.n as f64);
        for o in 0..ax.outer {
            for j in 0..ax.inner {
                let (mut lo, mut hi) = (0, 0);
                for i in 1..ax.n {
                    let x = v[ax.at(o, i, j)];
                    if x < v[ax.at(o, lo, j)] {
                        lo = i;
                    }
                    if x > v[ax.at(o, hi, j)] {
                        hi = i;
                    }
                }
                let (mn, mx) = (v[ax.at(o, lo, j)], v[ax.at(o, hi, j)]);
                let r = mx - mn;
                let s = o * ax.inner + j;
                argmin[s] = lo;
                argmax[s] = hi;
                if r <= degenerate {
                    for i in 0..ax.n {
                        out[ax.at(o, i, j)] = uniform;
                    }
                } else {
                    range[s] = r;
                    for i in 0..ax.n {
                        out[ax.at(o, i, j)] = (v[ax.at(o, i, j)] - mn) / r;
                    }
                }
            }
        }
        let shape = self.nodes[ia].shape.clone();
        let rg = self.rg(ia);
        Ok(self.push(
            shape,
            out,
            Op::MinMaxNormalize {
                a: ia,
                axis: ax,
                argmin,
                argmax,
                range,
            },
            rg,
        ))
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: S) -> Result<Var> {
        let ia = self.idx(a)?;
        let shape = self.nodes[ia].shape.clone();
        let n = *shape.last().ok_or_else(|| mismatch("layer_norm", "scalar input"))?;
        let v = &self.nodes[ia].value;
        let rows = v.len() / n;
        let inv_n = S::one() / S::lit(n as f64);
        let mut out = vec![S::zero(); v.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &v[r * n..(r + 1) * n];
            let mu = x.iter().copied().sum::<S>() * inv_n;
            let var = x.iter().map(|&e| (e - mu) * (e - mu)).sum::<S>() * inv_n;
            let rs = S::one() / (var + eps).sqrt();
            for (o, &e) in out[r * n..(r + 1) * n].iter_mut().zip(x) {
                *o = (e - mu) * rs;
            }
            rstd.push(rs);
        }
        let rg = self.rg(ia);
        Ok(self.push(shape, out, Op::LayerNorm { a: ia, n, rstd }, rg))
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.idx(a)?;
        check_shape("reshape", &shape, self.nodes[ia].value.len())?;
        let out = self.nodes[ia].value.clone();
        let rg = self.rg(ia);
        Ok(self.push(shape, out, Op::Reshape(ia), rg))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let shape = self.nodes[ia].shape.clone();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(mismatch("permute", format!("{perm:?} is not a permutation of {shape:?}")));
        }
        let out = kernels::permute(&self.nodes[ia].value, &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(ia);
        Ok(self.push(out_shape, out, Op::Permute(ia, perm.to_vec()), rg))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if d0 >= rank || d1 >= rank {
            return Err(mismatch("transpose", format!("axes ({d0},{d1}) for rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    /// Materializes `a` at a larger shape under the right-aligned broadcast rule.
    pub fn broadcast(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.idx(a)?;
        let target = kernels::broadcast_shape("broadcast", &self.nodes[ia].shape, &shape)?;
        if target != shape {
            return Err(mismatch("broadcast", format!("{:?} does not expand to {shape:?}", self.nodes[ia].shape)));
        }
        let zeros = self.constant(shape, vec![S::zero(); numel(&target)])?;
        self.add(a, zeros)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| mismatch("concat", "no inputs"))?;
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let base = self.nodes[self.idx(first)?].shape.clone();
        if axis >= base.len() {
            return Err(mismatch("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &i in &idx {
            let s = &self.nodes[i].shape;
            let ok = s.len() == base.len() && (0..base.len()).all(|d| d == axis || s[d] == base[d]);
            if !ok {
                return Err(mismatch("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let widths: Vec<usize> = idx.iter().map(|&i| self.nodes[i].shape[axis] * inner).collect();
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&i, &w) in idx.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[i].value[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(shape, out, Op::Concat { inputs: idx, outer, widths }, rg))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let ax = self.axis_of("slice", ia, axis)?;
        if start >= end || end > ax.n {
            return Err(mismatch("slice", format!("range {start}..{end} of extent {}", ax.n)));
        }
        let len = end - start;
        let v = &self.nodes[ia].value;
        let mut out = Vec::with_capacity(ax.outer * len * ax.inner);
        for o in 0..ax.outer {
            out.extend_from_slice(&v[ax.at(o, start, 0)..ax.at(o, end - 1, 0) + ax.inner]);
        }
        let mut shape = self.nodes[ia].shape.clone();
        shape[axis] = len;
        let rg = self.rg(ia);
        Ok(self.push(shape, out, Op::Slice { a: ia, axis: ax, start, len }, rg))
    }

    /// Gathers slices along the first axis (embedding lookup, row repetition).
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let shape = self.nodes[ia].shape.clone();
        if shape.is_empty() || indices.is_empty() {
            return Err(mismatch("index_select", "needs rank >= 1 and at least one index"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(mismatch("index_select", format!("index {bad} out of range {}", shape[0])));
        }
        let row: usize = shape[1..].iter().product();
        let v = &self.nodes[ia].value;
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&v[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let rg = self.rg(ia);
        Ok(self.push(
            out_shape,
            out,
            Op::IndexSelect {
                a: ia,
                row,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }
}

#[inline]
pub(crate) fn apply_binary<S: Scalar>(kind: BinaryKind, x: S, y: S) -> S {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    }
}
