use crate::error::{Result, TensorError};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tape::{BinaryKind, Op, Tape, Var};

fn add_into<S: Scalar>(slot: &mut Option<Vec<S>>, len: usize) -> &mut Vec<S> {
    slot.get_or_insert_with(|| vec![S::zero(); len])
}

impl<S: Scalar> Tape<S> {
    /// Back-propagates from a scalar `loss`.
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`];
    /// gradients of interior nodes reflect the most recent call only.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[root].shape.clone()));
        }
        if !self.nodes[root].requires_grad {
            return Err(TensorError::DetachedTensor);
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(vec![S::one()]);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                match &mut self.nodes[id].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => self.nodes[id].grad = Some(g),
                }
            } else {
                self.nodes[id].grad = Some(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let val = |i: usize| &self.nodes[i].value;
        let needs = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (a, b, batch, m, k, n) = (*a, *b, *batch, *m, *k, *n);
                if needs(a) {
                    let ga = add_into(&mut grads[a], batch * m * k);
                    let vb = val(b);
                    for t in 0..batch {
                        let bt = if *shared_rhs { &vb[..] } else { &vb[t * k * n..(t + 1) * k * n] };
                        kernels::gemm_nt(&g[t * m * n..(t + 1) * m * n], bt, &mut ga[t * m * k..(t + 1) * m * k], m, n, k);
                    }
                }
                if needs(b) {
                    let va = val(a);
                    if *shared_rhs {
                        let gb = add_into(&mut grads[b], k * n);
                        kernels::gemm_tn(va, g, gb, batch * m, k, n);
                    } else {
                        let gb = add_into(&mut grads[b], batch * k * n);
                        for t in 0..batch {
                            kernels::gemm_tn(
                                &va[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut gb[t * k * n..(t + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            } => {
                let (a, b) = (*a, *b);
                let n = g.len();
                let (fa, fb) = (map_a.expand(val(a), n), map_b.expand(val(b), n));
                if needs(a) {
                    let d: Vec<S> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                        BinaryKind::Mul => g.iter().zip(fb.iter()).map(|(&gi, &y)| gi * y).collect(),
                        BinaryKind::Div => g.iter().zip(fb.iter()).map(|(&gi, &y)| gi / y).collect(),
                    };
                    let ga = add_into(&mut grads[a], val(a).len());
                    map_a.reduce_into(&d, ga);
                }
                if needs(b) {
                    let d: Vec<S> = match kind {
                        BinaryKind::Add => g.to_vec(),
                        BinaryKind::Sub => g.iter().map(|&gi| -gi).collect(),
                        BinaryKind::Mul => g.iter().zip(fa.iter()).map(|(&gi, &x)| gi * x).collect(),
                        BinaryKind::Div => g
                            .iter()
                            .zip(fa.iter().zip(fb.iter()))
                            .map(|(&gi, (&x, &y))| -gi * x / (y * y))
                            .collect(),
                    };
                    let gb = add_into(&mut grads[b], val(b).len());
                    map_b.reduce_into(&d, gb);
                }
            }
            Op::AddScalar(a) => elementwise(grads, *a, g, |_, gi| gi),
            Op::MulScalar(a, c) => elementwise(grads, *a, g, |_, gi| gi * *c),
            Op::Exp(a) => elementwise(grads, *a, g, |i, gi| gi * y[i]),
            Op::Log(a) => {
                let x = val(*a);
                elementwise(grads, *a, g, |i, gi| gi / x[i])
            }
            Op::Pow(a, c) => {
                let x = val(*a);
                let c = *c;
                elementwise(grads, *a, g, |i, gi| {
                    if c == S::zero() {
                        S::zero()
                    } else {
                        gi * c * x[i].powf(c - S::one())
                    }
                })
            }
            Op::Gelu(a) => {
                let x = val(*a);
                elementwise(grads, *a, g, |i, gi| gi * kernels::gelu(x[i]).1)
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                elementwise(grads, *a, g, |i, gi| {
                    if x[i] >= *lo && x[i] <= *hi {
                        gi
                    } else {
                        S::zero()
                    }
                })
            }
            Op::Sum(a, ax) | Op::Mean(a, ax) => {
                let scale = if matches!(node.op, Op::Mean(..)) {
                    S::one() / S::lit(ax.n as f64)
                } else {
                    S::one()
                };
                let ga = add_into(&mut grads[*a], ax.outer * ax.n * ax.inner);
                for o in 0..ax.outer {
                    for i in 0..ax.n {
                        for j in 0..ax.inner {
                            ga[ax.at(o, i, j)] += g[o * ax.inner + j] * scale;
                        }
                    }
                }
            }
            Op::Extremum(a, ax, idx) => {
                let ga = add_into(&mut grads[*a], ax.outer * ax.n * ax.inner);
                for o in 0..ax.outer {
                    for j in 0..ax.inner {
                        let s = o * ax.inner + j;
                        ga[ax.at(o, idx[s], j)] += g[s];
                    }
                }
            }
            Op::L2Normalize(a, ax, inv) => {
                let ga = add_into(&mut grads[*a], y.len());
                for o in 0..ax.outer {
                    for j in 0..ax.inner {
                        let r = inv[o * ax.inner + j];
                        if r == S::zero() {
                            continue;
                        }
                        let yg: S = (0..ax.n).map(|i| y[ax.at(o, i, j)] * g[ax.at(o, i, j)]).sum();
                        for i in 0..ax.n {
                            let p = ax.at(o, i, j);
                            ga[p] += (g[p] - y[p] * yg) * r;
                        }
                    }
                }
            }
            Op::Softmax(a, ax) => {
                let ga = add_into(&mut grads[*a], y.len());
                for o in 0..ax.outer {
                    for j in 0..ax.inner {
                        let yg: S = (0..ax.n).map(|i| y[ax.at(o, i, j)] * g[ax.at(o, i, j)]).sum();
                        for i in 0..ax.n {
                            let p = ax.at(o, i, j);
                            ga[p] += y[p] * (g[p] - yg);
                        }
                    }
                }
            }
            Op::LogSoftmax(a, ax) => {
                let ga = add_into(&mut grads[*a], y.len());
                for o in 0..ax.outer {
                    for j in 0..ax.inner {
                        let gs: S = (0..ax.n).map(|i| g[ax.at(o, i, j)]).sum();
                        for i in 0..ax.n {
                            let p = ax.at(o, i, j);
                            ga[p] += g[p] - y[p].exp() * gs;
                        }
                    }
                }
            }
            Op::LogSumExp(a, ax) => {
                let x = val(*a);
                let ga = add_into(&mut grads[*a], x.len());
                for o in 0..ax.outer {
                    for j in 0..ax.inner {
                        let s = o * ax.inner + j;
                        for i in 0..ax.n {
                            let p = ax.at(o, i, j);
                            ga[p] += g[s] * (x[p] - y[s]).exp();
                        }
                    }
                }
            }
            Op::MinMaxNormalize {
                a,
                axis: ax,
                argmin,
                argmax,
                range,
            } => {
                let ga = add_into(&mut grads[*a], y.len());
                for o in 0..ax.outer {
                    for j in 0..ax.inner {
                        let s = o * ax.inner + j;
                        let r = range[s];
                        if r == S::zero() {
                            continue;
                        }
                        let mut gsum = S::zero();
                        let mut gy = S::zero();
                        for i in 0..ax.n {
                            let p = ax.at(o, i, j);
                            ga[p] += g[p] / r;
                            gsum += g[p];
                            gy += g[p] * y[p];
                        }
                        ga[ax.at(o, argmin[s], j)] += (gy - gsum) / r;
                        ga[ax.at(o, argmax[s], j)] -= gy / r;
                    }
                }
            }
            Op::LayerNorm { a, n, rstd } => {
                let n = *n;
                let inv_n = S::one() / S::lit(n as f64);
                let ga = add_into(&mut grads[*a], y.len());
                for (r, &rs) in rstd.iter().enumerate() {
                    let (gr, yr) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                    let mg = gr.iter().copied().sum::<S>() * inv_n;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<S>() * inv_n;
                    for ((dst, &gi), &yi) in ga[r * n..(r + 1) * n].iter_mut().zip(gr).zip(yr) {
                        *dst += rs * (gi - mg - yi * mgy);
                    }
                }
            }
            Op::Concat { inputs, outer, widths } => {
                let row: usize = widths.iter().sum();
                let mut offset = 0;
                for (&i, &w) in inputs.iter().zip(widths) {
                    if needs(i) {
                        let gi = add_into(&mut grads[i], outer * w);
                        for o in 0..*outer {
                            let src = &g[o * row + offset..o * row + offset + w];
                            gi[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { a, axis: ax, start, len } => {
                let ga = add_into(&mut grads[*a], ax.outer * ax.n * ax.inner);
                let w = len * ax.inner;
                for o in 0..ax.outer {
                    let dst = ax.at(o, *start, 0);
                    ga[dst..dst + w].iter_mut().zip(&g[o * w..(o + 1) * w]).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inverse[p] = d;
                }
                let back = kernels::permute(g, &node.shape, &inverse);
                let ga = add_into(&mut grads[*a], back.len());
                ga.iter_mut().zip(&back).for_each(|(d, &s)| *d += s);
            }
            Op::Reshape(a) => elementwise(grads, *a, g, |_, gi| gi),
            Op::IndexSelect { a, row, indices } => {
                let ga = add_into(&mut grads[*a], val(*a).len());
                for (t, &i) in indices.iter().enumerate() {
                    ga[i * row..(i + 1) * row]
                        .iter_mut()
                        .zip(&g[t * row..(t + 1) * row])
                        .for_each(|(d, &s)| *d += s);
                }
            }
        }
    }
}

fn elementwise<S: Scalar>(grads: &mut [Option<Vec<S>>], a: usize, g: &[S], f: impl Fn(usize, S) -> S) {
    let ga = add_into(&mut grads[a], g.len());
    for (i, (d, &gi)) in ga.iter_mut().zip(g).enumerate() {
        *d += f(i, gi);
    }
}
