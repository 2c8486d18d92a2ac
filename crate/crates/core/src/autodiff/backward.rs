use crate::autodiff::tape::{outer_inner, Node, Op};
use crate::autodiff::{gemm, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient w.r.t. a leaf; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, F>) -> Tensor<F> {
        self.get(var.id())
    }

    pub(crate) fn get(&self, id: usize) -> Tensor<F> {
        match self.grads.get(id) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(&self.shapes[id]),
        }
    }

    /// Move the gradient out, leaving zeros behind.
    pub fn take(&mut self, var: Var<'_, F>) -> Tensor<F> {
        let id = var.id();
        match self.grads.get_mut(id).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[id]),
        }
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

struct Acc<'a, F: Real> {
    grads: &'a mut [Option<Tensor<F>>],
    nodes: &'a [Node<F>],
}

impl<F: Real> Acc<'_, F> {
    /// Gradient buffer of `id`, or `None` when it needs no gradient.
    fn slot(&mut self, id: usize) -> Option<&mut [F]> {
        let node = &self.nodes[id];
        if !node.requires_grad {
            return None;
        }
        Some(
            self.grads[id]
                .get_or_insert_with(|| Tensor::zeros(node.value.shape()))
                .data_mut(),
        )
    }

    fn add_map(&mut self, id: usize, g: &[F], f: impl Fn(usize, F) -> F) {
        if let Some(dst) = self.slot(id) {
            for (i, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
                *d = *d + f(i, gi);
            }
        }
    }
}

impl<F: Real> Tape<F> {
    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Nodes are visited in reverse creation order, so accumulation order
    /// is deterministic.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        let root = loss.id();
        let root_val = &nodes[root].value;
        if root_val.numel() != 1 {
            return Err(Error::NonScalarLoss(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(root_val.shape()));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let out = &node.value;
            let gd = g.data();
            let mut acc = Acc {
                grads: &mut grads,
                nodes: &nodes,
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc.add_map(*a, gd, |_, v| v);
                    acc.add_map(*b, gd, |_, v| v);
                }
                Op::Sub(a, b) => {
                    acc.add_map(*a, gd, |_, v| v);
                    acc.add_map(*b, gd, |_, v| -v);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
                    acc.add_map(*a, gd, |i, v| v * bv.data()[i]);
                    acc.add_map(*b, gd, |i, v| v * av.data()[i]);
                }
                Op::AddRow(x, b) => {
                    acc.add_map(*x, gd, |_, v| v);
                    let (_, cols) = out.matrix_dims();
                    if let Some(dst) = acc.slot(*b) {
                        for row in gd.chunks(cols) {
                            for (d, &v) in dst.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                    }
                }
                Op::MulRow(x, r) => {
                    let (xv, rv) = (nodes[*x].value.clone(), nodes[*r].value.clone());
                    let (_, cols) = out.matrix_dims();
                    acc.add_map(*x, gd, |i, v| v * rv.data()[i % cols]);
                    if let Some(dst) = acc.slot(*r) {
                        for (grow, xrow) in gd.chunks(cols).zip(xv.data().chunks(cols)) {
                            for ((d, &gv), &xv) in dst.iter_mut().zip(grow).zip(xrow) {
                                *d = *d + gv * xv;
                            }
                        }
                    }
                }
                Op::Scale(a, c) => acc.add_map(*a, gd, |_, v| v * *c),
                Op::AddScalar(a) => acc.add_map(*a, gd, |_, v| v),
                Op::MatMul(a, b) => {
                    let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if let Some(dst) = acc.slot(*a) {
                        // dA = dC · Bᵀ
                        gemm(gd, (m, n), false, bv.data(), (k, n), true, dst, true);
                    }
                    if let Some(dst) = acc.slot(*b) {
                        // dB = Aᵀ · dC
                        gemm(av.data(), (m, k), true, gd, (m, n), false, dst, true);
                    }
                }
                Op::Concat { parts, axis } => {
                    let (outer, inner) = outer_inner(out.shape(), *axis);
                    let full = out.shape()[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].value.shape()[*axis] * inner;
                        if let Some(dst) = acc.slot(p) {
                            for o in 0..outer {
                                let src = &gd[o * full + offset..o * full + offset + len];
                                for (d, &v) in dst[o * len..(o + 1) * len].iter_mut().zip(src) {
                                    *d = *d + v;
                                }
                            }
                        }
                        offset += len;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let in_shape = nodes[*input].value.shape();
                    let (outer, inner) = outer_inner(in_shape, *axis);
                    let full = in_shape[*axis] * inner;
                    let len = out.shape()[*axis] * inner;
                    if let Some(dst) = acc.slot(*input) {
                        for o in 0..outer {
                            let base = o * full + start * inner;
                            for (d, &v) in dst[base..base + len]
                                .iter_mut()
                                .zip(&gd[o * len..(o + 1) * len])
                            {
                                *d = *d + v;
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    // out is [c × r]; input is [r × c]
                    let (c, r) = (out.shape()[0], out.shape()[1]);
                    if let Some(dst) = acc.slot(*a) {
                        for i in 0..r {
                            for j in 0..c {
                                dst[i * c + j] = dst[i * c + j] + gd[j * r + i];
                            }
                        }
                    }
                }
                Op::Reshape(a) => acc.add_map(*a, gd, |_, v| v),
                Op::GatherRows { input, index } => {
                    let (_, cols) = out.matrix_dims();
                    if let Some(dst) = acc.slot(*input) {
                        for (k, &src) in index.iter().enumerate() {
                            for (d, &v) in dst[src * cols..(src + 1) * cols]
                                .iter_mut()
                                .zip(&gd[k * cols..(k + 1) * cols])
                            {
                                *d = *d + v;
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    let s = gd[0];
                    acc.add_map(*a, &vec![s; nodes[*a].value.numel()], |_, v| v);
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.numel();
                    let s = gd[0] / F::from_usize(n).unwrap();
                    acc.add_map(*a, &vec![s; n], |_, v| v);
                }
                Op::Sigmoid(a) => {
                    let y = out.data();
                    acc.add_map(*a, gd, |i, v| v * y[i] * (F::one() - y[i]));
                }
                Op::Swish(a) => {
                    let x = nodes[*a].value.clone();
                    acc.add_map(*a, gd, |i, v| {
                        let xi = x.data()[i];
                        let s = sigmoid(xi);
                        v * (s + xi * s * (F::one() - s))
                    });
                }
                Op::Relu(a) => {
                    let x = nodes[*a].value.clone();
                    acc.add_map(*a, gd, |i, v| {
                        if x.data()[i] > F::zero() {
                            v
                        } else {
                            F::zero()
                        }
                    });
                }
                Op::Abs(a) => {
                    let x = nodes[*a].value.clone();
                    acc.add_map(*a, gd, |i, v| {
                        let xi = x.data()[i];
                        if xi > F::zero() {
                            v
                        } else if xi < F::zero() {
                            -v
                        } else {
                            F::zero()
                        }
                    });
                }
                Op::LnFloor { input, floor } => {
                    let x = nodes[*input].value.clone();
                    acc.add_map(*input, gd, |i, v| {
                        let xi = x.data()[i];
                        if xi > *floor {
                            v / xi
                        } else {
                            F::zero()
                        }
                    });
                }
                Op::Softmax(a) => {
                    let (_, cols) = out.matrix_dims();
                    if let Some(dst) = acc.slot(*a) {
                        for ((drow, grow), yrow) in dst
                            .chunks_mut(cols)
                            .zip(gd.chunks(cols))
                            .zip(out.data().chunks(cols))
                        {
                            let dot: F = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                            for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d = *d + y * (g - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    input,
                    gamma,
                    beta,
                    stats,
                } => {
                    let x = nodes[*input].value.clone();
                    let gam = nodes[*gamma].value.clone();
                    let (_, cols) = out.matrix_dims();
                    let n = F::from_usize(cols).unwrap();
                    let xhat = |r: usize, j: usize| {
                        let (mean, rstd) = stats[r];
                        (x.data()[r * cols + j] - mean) * rstd
                    };
                    if let Some(dst) = acc.slot(*input) {
                        for (r, (drow, grow)) in dst.chunks_mut(cols).zip(gd.chunks(cols)).enumerate() {
                            let rstd = stats[r].1;
                            let mut sum_d = F::zero();
                            let mut sum_dx = F::zero();
                            for j in 0..cols {
                                let dxh = grow[j] * gam.data()[j];
                                sum_d = sum_d + dxh;
                                sum_dx = sum_dx + dxh * xhat(r, j);
                            }
                            for j in 0..cols {
                                let dxh = grow[j] * gam.data()[j];
                                drow[j] = drow[j]
                                    + rstd / n * (n * dxh - sum_d - xhat(r, j) * sum_dx);
                            }
                        }
                    }
                    if let Some(dst) = acc.slot(*gamma) {
                        for (r, grow) in gd.chunks(cols).enumerate() {
                            for j in 0..cols {
                                dst[j] = dst[j] + grow[j] * xhat(r, j);
                            }
                        }
                    }
                    if let Some(dst) = acc.slot(*beta) {
                        for grow in gd.chunks(cols) {
                            for (d, &v) in dst.iter_mut().zip(grow) {
                                *d = *d + v;
                            }
                        }
                    }
                }
                Op::CausalDwConv {
                    input,
                    weight,
                    bias,
                } => {
                    let x = nodes[*input].value.clone();
                    let w = nodes[*weight].value.clone();
                    let (t_len, c) = (x.shape()[0], x.shape()[1]);
                    let k = w.shape()[0];
                    let taps = |t: usize| (0..k).filter_map(move |j| (t + j + 1).checked_sub(k).map(|s| (j, s)));
                    if let Some(dst) = acc.slot(*input) {
                        for t in 0..t_len {
                            let grow = &gd[t * c..(t + 1) * c];
                            for (j, src) in taps(t) {
                                let wr = &w.data()[j * c..(j + 1) * c];
                                for ((d, &gv), &wv) in dst[src * c..(src + 1) * c].iter_mut().zip(grow).zip(wr) {
                                    *d = *d + gv * wv;
                                }
                            }
                        }
                    }
                    if let Some(dst) = acc.slot(*weight) {
                        for t in 0..t_len {
                            let grow = &gd[t * c..(t + 1) * c];
                            for (j, src) in taps(t) {
                                let xr = &x.data()[src * c..(src + 1) * c];
                                for ((d, &gv), &xv) in dst[j * c..(j + 1) * c].iter_mut().zip(grow).zip(xr) {
                                    *d = *d + gv * xv;
                                }
                            }
                        }
                    }
                    if let Some(dst) = acc.slot(*bias) {
                        for grow in gd.chunks(c) {
                            for (d, &v) in dst.iter_mut().zip(grow) {
                                *d = *d + v;
                            }
                        }
                    }
                }
                Op::Glu(a) => {
                    let x = nodes[*a].value.clone();
                    let (_, cols) = x.matrix_dims();
                    let half = cols / 2;
                    if let Some(dst) = acc.slot(*a) {
                        for (r, grow) in gd.chunks(half).enumerate() {
                            let xrow = &x.data()[r * cols..(r + 1) * cols];
                            let drow = &mut dst[r * cols..(r + 1) * cols];
                            for j in 0..half {
                                let (av, bv) = (xrow[j], xrow[half + j]);
                                let s = sigmoid(bv);
                                drow[j] = drow[j] + grow[j] * s;
                                drow[half + j] = drow[half + j] + grow[j] * av * s * (F::one() - s);
                            }
                        }
                    }
                }
                Op::Custom { inputs, backward } => {
                    let vals: Vec<&Tensor<F>> = inputs.iter().map(|&i| &*nodes[i].value).collect();
                    let parts = backward(&g, &vals, out);
                    for (&i, part) in inputs.iter().zip(&parts) {
                        if part.shape() != nodes[i].value.shape() {
                            return Err(Error::shape(
                                "custom backward",
                                format!("{:?} vs {:?}", part.shape(), nodes[i].value.shape()),
                            ));
                        }
                        acc.add_map(i, part.data(), |_, v| v);
                    }
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| if matches!(n.op, Op::Leaf) { g } else { None })
            .collect();
        Ok(Gradients { grads, shapes })
    }
}
