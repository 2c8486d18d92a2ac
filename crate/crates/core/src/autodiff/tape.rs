use std::cell::{Cell, Ref, RefCell};
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Additive attention-mask value for disallowed positions.
pub const MASK_NEG: f64 = -1e9;

/// Entries of an additive mask at or below this are treated as masked.
const MASKED_BELOW: f64 = -1e8;

/// Backward rule of a user-defined op: `(upstream grad, input values,
/// output value) -> one gradient per input`.
pub type CustomBackward<F> = Box<dyn Fn(&Tensor<F>, &[&Tensor<F>], &Tensor<F>) -> Vec<Tensor<F>>>;

pub(crate) enum Op<F: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, F),
    AddScalar(usize),
    MatMul(usize, usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Transpose(usize),
    Reshape(usize),
    GatherRows { input: usize, index: Vec<usize> },
    Sum(usize),
    Mean(usize),
    Sigmoid(usize),
    Swish(usize),
    Relu(usize),
    Abs(usize),
    LnFloor { input: usize, floor: F },
    Softmax(usize),
    LayerNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        stats: Vec<(F, F)>,
    },
    CausalDwConv {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Glu(usize),
    Custom {
        inputs: Vec<usize>,
        backward: CustomBackward<F>,
    },
}

pub(crate) struct Node<F: Real> {
    pub(crate) value: Arc<Tensor<F>>,
    pub(crate) op: Op<F>,
    pub(crate) requires_grad: bool,
}

/// Records a computation graph for one forward/backward pass.
pub struct Tape<F: Real> {
    pub(crate) nodes: RefCell<Vec<Node<F>>>,
    nan_check: Cell<bool>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Real> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Real> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            nan_check: Cell::new(false),
        }
    }

    /// Fail any op whose output contains NaN or infinity.
    pub fn set_nan_check(&self, on: bool) {
        self.nan_check.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that gradients are accumulated into.
    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(Arc::new(value), true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(Arc::new(value), false)
    }

    pub fn leaf(&self, value: Arc<Tensor<F>>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor<F>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Result<Var<'_, F>> {
        if self.nan_check.get() && !value.all_finite() {
            return Err(Error::NonFinite {
                what: format!("op output #{}", self.len()),
                step: 0,
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?
            .value();
        if axis >= first.rank() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {:?}", first.shape()),
            ));
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == shape.len()
                && s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", first.shape(), s),
                ));
            }
            shape[axis] += s[axis];
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.requires(&ids);
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat { parts: ids, axis },
            rg,
        )
    }

    /// Op with a caller-supplied backward rule.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t, F>],
        value: Tensor<F>,
        backward: CustomBackward<F>,
    ) -> Result<Var<'t, F>> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = self.requires(&ids);
        self.push(
            value,
            Op::Custom {
                inputs: ids,
                backward,
            },
            rg,
        )
    }
}

impl<'t, F: Real> Var<'t, F> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(self) -> Arc<Tensor<F>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn requires_grad(self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn with_value<R>(self, f: impl FnOnce(&Tensor<F>) -> R) -> R {
        let nodes: Ref<'_, Vec<Node<F>>> = self.tape.nodes.borrow();
        f(&nodes[self.id].value)
    }

    fn unary(self, op: Op<F>, f: impl Fn(F) -> F) -> Result<Var<'t, F>> {
        let v = self.value();
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())?;
        let rg = self.requires_grad();
        self.tape.push(out, op, rg)
    }

    fn binary(
        self,
        other: Var<'t, F>,
        name: &'static str,
        op: Op<F>,
        f: impl Fn(F, F) -> F,
    ) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.tape.requires(&[self.id, other.id]);
        self.tape
            .push(Tensor::new(a.shape().to_vec(), data)?, op, rg)
    }

    pub fn add(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    fn row_broadcast(
        self,
        row: Var<'t, F>,
        name: &'static str,
        op: Op<F>,
        f: impl Fn(F, F) -> F,
    ) -> Result<Var<'t, F>> {
        let (x, r) = (self.value(), row.value());
        let (rows, cols) = x.matrix_dims();
        if r.numel() != cols || x.rank() == 0 {
            return Err(Error::shape(
                name,
                format!("row {:?} does not broadcast over {:?}", r.shape(), x.shape()),
            ));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend(x.row(i).iter().zip(r.data()).map(|(&a, &b)| f(a, b)));
        }
        let rg = self.tape.requires(&[self.id, row.id]);
        self.tape.push(Tensor::new(x.shape().to_vec(), data)?, op, rg)
    }

    /// `x[t, :] + b` for every row `t`.
    pub fn add_row(self, bias: Var<'t, F>) -> Result<Var<'t, F>> {
        self.row_broadcast(bias, "add_row", Op::AddRow(self.id, bias.id), |a, b| a + b)
    }

    /// `x[t, :] ⊙ r` for every row `t`.
    pub fn mul_row(self, scale: Var<'t, F>) -> Result<Var<'t, F>> {
        self.row_broadcast(scale, "mul_row", Op::MulRow(self.id, scale.id), |a, b| a * b)
    }

    pub fn scale(self, c: F) -> Result<Var<'t, F>> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(self, c: F) -> Result<Var<'t, F>> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn matmul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![F::zero(); m * n];
        gemm(a.data(), (m, k), false, b.data(), (k, n), false, &mut out, false);
        let rg = self.tape.requires(&[self.id, other.id]);
        self.tape.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(self.id, other.id),
            rg,
        )
    }

    /// Dense layer `x·W + b`.
    pub fn affine(self, weight: Var<'t, F>, bias: Var<'t, F>) -> Result<Var<'t, F>> {
        self.matmul(weight)?.add_row(bias)
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, F>> {
        let v = self.value();
        if axis >= v.rank() || start + len > v.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, v.shape()),
            ));
        }
        let mut shape = v.shape().to_vec();
        let full = shape[axis];
        shape[axis] = len;
        let (outer, inner) = outer_inner(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let rg = self.requires_grad();
        self.tape.push(
            Tensor::new(shape, data)?,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            rg,
        )
    }

    pub fn transpose(self) -> Result<Var<'t, F>> {
        let v = self.value();
        if v.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", v.shape())));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v.data()[i * c + j];
            }
        }
        let rg = self.requires_grad();
        self.tape
            .push(Tensor::new(vec![c, r], data)?, Op::Transpose(self.id), rg)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, F>> {
        let v = (*self.value()).clone().reshaped(shape.to_vec())?;
        let rg = self.requires_grad();
        self.tape.push(v, Op::Reshape(self.id), rg)
    }

    /// Select rows (first-axis entries of a matrix view) by index; repeats allowed.
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t, F>> {
        let v = self.value();
        let (rows, cols) = v.matrix_dims();
        if v.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("{:?}", v.shape())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            data.extend_from_slice(v.row(i));
        }
        let rg = self.requires_grad();
        self.tape.push(
            Tensor::new(vec![index.len(), cols], data)?,
            Op::GatherRows {
                input: self.id,
                index: index.to_vec(),
            },
            rg,
        )
    }

    pub fn sum(self) -> Result<Var<'t, F>> {
        let s = self.with_value(|t| t.data().iter().copied().sum());
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Result<Var<'t, F>> {
        let (s, n) = self.with_value(|t| (t.data().iter().copied().sum::<F>(), t.numel()));
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let rg = self.requires_grad();
        self.tape.push(
            Tensor::scalar(s / F::from_usize(n).unwrap()),
            Op::Mean(self.id),
            rg,
        )
    }

    pub fn sigmoid(self) -> Result<Var<'t, F>> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// `x · sigmoid(x)`.
    pub fn swish(self) -> Result<Var<'t, F>> {
        self.unary(Op::Swish(self.id), |x| x * sigmoid(x))
    }

    pub fn relu(self) -> Result<Var<'t, F>> {
        self.unary(Op::Relu(self.id), |x| x.max(F::zero()))
    }

    pub fn abs(self) -> Result<Var<'t, F>> {
        self.unary(Op::Abs(self.id), |x| x.abs())
    }

    /// `ln(max(x, floor))`; zero gradient where the floor binds.
    pub fn ln_floor(self, floor: F) -> Result<Var<'t, F>> {
        self.unary(
            Op::LnFloor {
                input: self.id,
                floor,
            },
            |x| x.max(floor).ln(),
        )
    }

    /// Softmax over the last axis of `x + mask`.
    ///
    /// `mask` is additive (0 or [`MASK_NEG`]) with the same shape as `x`.
    /// A row with every entry masked is an error.
    pub fn softmax(self, mask: Option<&Tensor<F>>) -> Result<Var<'t, F>> {
        let v = self.value();
        if v.rank() == 0 {
            return Err(Error::shape("softmax", "scalar input"));
        }
        if let Some(m) = mask {
            same_shape("softmax", &v, m)?;
        }
        let (rows, cols) = v.matrix_dims();
        let masked_below = F::lit(MASKED_BELOW);
        let mut out = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let x = v.row(r);
            let z: Vec<F> = match mask {
                Some(m) => x.iter().zip(m.row(r)).map(|(&a, &b)| a + b).collect(),
                None => x.to_vec(),
            };
            if let Some(m) = mask {
                if m.row(r).iter().all(|&b| b <= masked_below) {
                    return Err(Error::FullyMaskedRow { row: r });
                }
            }
            let max = z.iter().copied().fold(F::neg_infinity(), F::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut total = F::zero();
            for (dst, &zi) in o.iter_mut().zip(&z) {
                *dst = (zi - max).exp();
                total = total + *dst;
            }
            o.iter_mut().for_each(|d| *d = *d / total);
        }
        let rg = self.requires_grad();
        self.tape
            .push(Tensor::new(v.shape().to_vec(), out)?, Op::Softmax(self.id), rg)
    }

    /// Layer normalisation over the last axis with learned scale and shift.
    pub fn layer_norm(self, gamma: Var<'t, F>, beta: Var<'t, F>, eps: F) -> Result<Var<'t, F>> {
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        let (rows, cols) = x.matrix_dims();
        if g.numel() != cols || b.numel() != cols || x.rank() == 0 {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    x.shape(),
                    g.shape(),
                    b.shape()
                ),
            ));
        }
        let n = F::from_usize(cols).unwrap();
        let mut out = Vec::with_capacity(rows * cols);
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rstd = F::one() / (var + eps).sqrt();
            stats.push((mean, rstd));
            out.extend(
                row.iter()
                    .zip(g.data().iter().zip(b.data()))
                    .map(|(&v, (&gi, &bi))| (v - mean) * rstd * gi + bi),
            );
        }
        let rg = self.tape.requires(&[self.id, gamma.id, beta.id]);
        self.tape.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::LayerNorm {
                input: self.id,
                gamma: gamma.id,
                beta: beta.id,
                stats,
            },
            rg,
        )
    }

    /// Causal depthwise 1-D convolution over time.
    ///
    /// `self` is `[T × C]`, `weight` is `[K × C]`, `bias` is `[C]`:
    /// `y[t, c] = b[c] + Σ_k w[k, c] · x[t − (K − 1) + k, c]`, with zero
    /// padding before the first frame.
    pub fn causal_depthwise_conv1d(self, weight: Var<'t, F>, bias: Var<'t, F>) -> Result<Var<'t, F>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        if x.rank() != 2 || w.rank() != 2 || w.shape()[1] != x.shape()[1] || b.numel() != x.shape()[1] {
            return Err(Error::shape(
                "causal_depthwise_conv1d",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    x.shape(),
                    w.shape(),
                    b.shape()
                ),
            ));
        }
        let (t_len, c) = (x.shape()[0], x.shape()[1]);
        let k = w.shape()[0];
        let mut out = Vec::with_capacity(t_len * c);
        for t in 0..t_len {
            out.extend_from_slice(b.data());
            let o = &mut out[t * c..];
            for j in 0..k {
                // input frame feeding tap j
                let Some(src) = (t + j + 1).checked_sub(k) else {
                    continue;
                };
                let xr = &x.data()[src * c..(src + 1) * c];
                let wr = &w.data()[j * c..(j + 1) * c];
                for ((d, &xv), &wv) in o[..c].iter_mut().zip(xr).zip(wr) {
                    *d = *d + xv * wv;
                }
            }
        }
        let rg = self.tape.requires(&[self.id, weight.id, bias.id]);
        self.tape.push(
            Tensor::new(vec![t_len, c], out)?,
            Op::CausalDwConv {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
            },
            rg,
        )
    }

    /// Gated linear unit over the last axis: `a ⊙ sigmoid(b)` where
    /// `[a, b]` are the two halves.
    pub fn glu(self) -> Result<Var<'t, F>> {
        let x = self.value();
        let (rows, cols) = x.matrix_dims();
        if x.rank() == 0 || cols % 2 != 0 {
            return Err(Error::shape("glu", format!("odd last axis in {:?}", x.shape())));
        }
        let half = cols / 2;
        let mut out = Vec::with_capacity(rows * half);
        for r in 0..rows {
            let row = x.row(r);
            out.extend(
                row[..half]
                    .iter()
                    .zip(&row[half..])
                    .map(|(&a, &b)| a * sigmoid(b)),
            );
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = half;
        let rg = self.requires_grad();
        self.tape.push(Tensor::new(shape, out)?, Op::Glu(self.id), rg)
    }

    /// Inverted dropout; the identity when `p == 0`.
    pub fn dropout(self, p: f64, rng: &mut impl Rng) -> Result<Var<'t, F>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout p = {p}")));
        }
        if p == 0.0 {
            return Ok(self);
        }
        let keep = F::lit(1.0 / (1.0 - p));
        let shape = self.shape();
        let mask = Tensor::from_fn(&shape, |_| {
            if rng.random::<f64>() < p {
                F::zero()
            } else {
                keep
            }
        });
        self.mul(self.tape.constant(mask))
    }
}
