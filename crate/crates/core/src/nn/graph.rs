//! Tape of tensor operations with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards
//! visits every node after all of its consumers.

use std::fmt;

use super::kernels::{self, ConvGeometry};
use super::tensor::{lit, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation family of a node; used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
    Linear,
    Conv2d,
    MaxPool2d,
    BatchNorm2d,
    Reshape,
    SliceLast,
    ConcatLast,
    Stack,
    Index,
    SwapAxes,
    Dropout,
    SquaredError,
    Dot,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Linear => "linear",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::BatchNorm2d => "batchnorm2d",
            OpKind::Reshape => "reshape",
            OpKind::SliceLast => "slice",
            OpKind::ConcatLast => "concat",
            OpKind::Stack => "stack",
            OpKind::Index => "index",
            OpKind::SwapAxes => "swap_axes",
            OpKind::Dropout => "dropout",
            OpKind::SquaredError => "squared_error",
            OpKind::Dot => "dot",
        };
        f.write_str(name)
    }
}

/// Scales every input gradient produced by one operation family.
/// Test hook for checking that gradient verification notices errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradFault {
    pub kind: OpKind,
    pub scale: f64,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm2d {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Reshape(Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    Stack(Vec<Var>),
    Index {
        x: Var,
        index: usize,
    },
    SwapAxes(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SquaredError {
        pred: Var,
        target: Vec<T>,
        weights: Vec<T>,
    },
    Dot {
        x: Var,
        coeffs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::BatchNorm2d { .. } => OpKind::BatchNorm2d,
            Op::Reshape(_) => OpKind::Reshape,
            Op::SliceLast { .. } => OpKind::SliceLast,
            Op::ConcatLast(_) => OpKind::ConcatLast,
            Op::Stack(_) => OpKind::Stack,
            Op::Index { .. } => OpKind::Index,
            Op::SwapAxes(_) => OpKind::SwapAxes,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::SquaredError { .. } => OpKind::SquaredError,
            Op::Dot { .. } => OpKind::Dot,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracks: bool,
}

/// Batch statistics observed by a batch-norm node, for running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    fault: Option<GradFault>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when `v` did not influence
    /// the output.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Option<GradFault>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tracks
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracks = inputs.iter().any(|v| self.tracks(*v));
        self.nodes.push(Node { value, op, tracks });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (parameter or checked input).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracks: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracks: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Fails with a diagnostic naming `label` if `v` holds NaN or infinity.
    pub fn ensure_finite(&self, v: Var, label: &str) -> Result<()> {
        if self.value(v).all_finite() {
            Ok(())
        } else {
            Err(Error::Numerical(format!("non-finite activation after {label}")))
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x + *y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x * *y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let data = self.data(x).iter().map(|v| f(*v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same length");
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    /// `y = x·Wᵀ + b` over the trailing dimension of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (Some(&f), [o, wf]) = (xs.last(), ws.as_slice()) else {
            return Err(Error::Shape(format!("linear: input {xs:?}, weight {ws:?}")));
        };
        let o = *o;
        if *wf != f {
            return Err(Error::Shape(format!(
                "linear: input feature size {f} does not match weight {ws:?}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::Shape(format!(
                    "linear: bias {:?} does not match {o} outputs",
                    self.shape(b)
                )));
            }
        }
        let m = self.value(x).numel() / f.max(1);
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![T::zero(); m * o];
        for r in 0..m {
            let xr = &xd[r * f..][..f];
            let dst = &mut out[r * o..][..o];
            for (k, d) in dst.iter_mut().enumerate() {
                let wr = &wd[k * f..][..f];
                *d = xr.iter().zip(wr).map(|(a, b)| *a * *b).sum();
            }
        }
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_mut(o) {
                for (d, bv) in row.iter_mut().zip(bd) {
                    *d += *bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = o;
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// 2D convolution; vertical padding is zero-filled, horizontal padding
    /// wraps around.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::Shape(format!(
                    "conv2d: bias {:?} does not match {} output channels",
                    self.shape(b),
                    geom.out_channels
                )));
            }
        }
        let out = kernels::conv2d_forward(&geom, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let value = Tensor::new(geom.output_shape(), out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    pub fn maxpool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let (out, shape, argmax) = kernels::maxpool2d_forward(self.data(x), self.shape(x), kernel, stride)?;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Batch normalization with batch statistics; returns them alongside the
    /// output so callers can update running averages.
    pub fn batchnorm2d_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        self.check_bn_params(x, gamma, beta)?;
        let fwd =
            kernels::batchnorm_train_forward(self.data(x), self.shape(x), self.data(gamma), self.data(beta), eps)?;
        let value = Tensor::new(self.shape(x).to_vec(), fwd.output)?;
        let op = Op::BatchNorm2d {
            x,
            gamma,
            beta,
            xhat: fwd.xhat,
            inv_std: fwd.inv_std,
            batch_stats: true,
        };
        let stats = BatchStats {
            mean: fwd.mean,
            var_unbiased: fwd.var_unbiased,
        };
        Ok((self.push(value, op, &[x, gamma, beta]), stats))
    }

    /// Batch normalization with fixed statistics.
    pub fn batchnorm2d_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        self.check_bn_params(x, gamma, beta)?;
        let fwd = kernels::batchnorm_eval_forward(
            self.data(x),
            self.shape(x),
            self.data(gamma),
            self.data(beta),
            mean,
            var,
            eps,
        )?;
        let value = Tensor::new(self.shape(x).to_vec(), fwd.output)?;
        let op = Op::BatchNorm2d {
            x,
            gamma,
            beta,
            xhat: fwd.xhat,
            inv_std: fwd.inv_std,
            batch_stats: false,
        };
        Ok(self.push(value, op, &[x, gamma, beta]))
    }

    fn check_bn_params(&self, x: Var, gamma: Var, beta: Var) -> Result<()> {
        let c = self.shape(x).get(1).copied().unwrap_or(0);
        if self.shape(x).len() != 4 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "batchnorm2d: input {:?}, gamma {:?}, beta {:?}",
                self.shape(x),
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(())
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `x[..., start..start+len]`
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().unwrap_or(&0);
        if start + len > last {
            return Err(Error::Shape(format!(
                "slice {start}..{} out of range for trailing dim {last}",
                start + len
            )));
        }
        let data: Vec<T> = self
            .data(x)
            .chunks(last)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::SliceLast { x, start }, &[x]))
    }

    /// Concatenation along the trailing dimension.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::Shape("concat of zero tensors".into()));
        };
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return Err(Error::Shape(format!("concat: {:?} vs {:?}", self.shape(*first), s)));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| *self.shape(*p).last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(*p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Stacks equally shaped tensors along a new leading dimension.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::Shape("stack of zero tensors".into()));
        };
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(*first).numel());
        for p in parts {
            if self.shape(*p) != inner.as_slice() {
                return Err(Error::Shape(format!("stack: {inner:?} vs {:?}", self.shape(*p))));
            }
            data.extend_from_slice(self.data(*p));
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Stack(parts.to_vec()), parts))
    }

    /// `x[index]` along the leading dimension.
    pub fn index(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(Error::Shape(format!("index {index} out of range for {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.data(x)[index * inner..(index + 1) * inner].to_vec();
        let value = Tensor::new(shape[1..].to_vec(), data)?;
        Ok(self.push(value, Op::Index { x, index }, &[x]))
    }

    /// Swaps the two leading dimensions.
    pub fn swap_axes01(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("swap_axes01 needs rank >= 2, got {shape:?}")));
        }
        let (a, b) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let src = self.data(x);
        let mut data = Vec::with_capacity(src.len());
        for j in 0..b {
            for i in 0..a {
                data.extend_from_slice(&src[(i * b + j) * inner..][..inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.swap(0, 1);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::SwapAxes(x), &[x]))
    }

    /// Elementwise product with a fixed mask (already scaled).
    pub fn dropout_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::Shape("dropout mask length mismatch".into()));
        }
        let data = self.data(x).iter().zip(&mask).map(|(a, m)| *a * *m).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// `Σ wᵢ (predᵢ - targetᵢ)²` as a scalar.
    pub fn squared_error(&mut self, pred: Var, target: Vec<T>, weights: Vec<T>) -> Result<Var> {
        let n = self.value(pred).numel();
        if target.len() != n || weights.len() != n {
            return Err(Error::Shape(format!(
                "squared_error: prediction has {n} elements, target {}, weights {}",
                target.len(),
                weights.len()
            )));
        }
        let total = self
            .data(pred)
            .iter()
            .zip(&target)
            .zip(&weights)
            .map(|((p, t), w)| *w * (*p - *t) * (*p - *t))
            .sum();
        let op = Op::SquaredError { pred, target, weights };
        Ok(self.push(Tensor::scalar(total), op, &[pred]))
    }

    /// `Σ cᵢ xᵢ` as a scalar.
    pub fn dot_const(&mut self, x: Var, coeffs: Vec<T>) -> Result<Var> {
        if coeffs.len() != self.value(x).numel() {
            return Err(Error::Shape("dot_const length mismatch".into()));
        }
        let total = self.data(x).iter().zip(&coeffs).map(|(a, c)| *a * *c).sum();
        Ok(self.push(Tensor::scalar(total), Op::Dot { x, coeffs }, &[x]))
    }

    /// Gradients of the scalar `output` with respect to every tracking leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.tracks || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let mut contributions = self.local_backward(&node.op, &node.value, &dy);
            if let Some(fault) = self.fault.filter(|f| f.kind == node.op.kind()) {
                let s: T = lit(fault.scale);
                for (_, g) in contributions.iter_mut() {
                    g.iter_mut().for_each(|v| *v *= s);
                }
            }
            for (v, g) in contributions {
                if !self.tracks(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient at node {i} ({})",
                        self.nodes[i].op.kind()
                    )));
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Input gradients of one node given its output gradient.
    fn local_backward(&self, op: &Op<T>, out: &Tensor<T>, dy: &[T]) -> Vec<(Var, Vec<T>)> {
        let zip_map = |a: &[T], f: &dyn Fn(T, T) -> T| -> Vec<T> { a.iter().zip(dy).map(|(x, g)| f(*x, *g)).collect() };
        match op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, dy.to_vec()), (*b, dy.to_vec())],
            Op::Mul(a, b) => {
                let ga = zip_map(self.data(*b), &|bv, g| bv * g);
                let gb = zip_map(self.data(*a), &|av, g| av * g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Relu(x) => {
                let gx = zip_map(self.data(*x), &|xv, g| if xv > T::zero() { g } else { T::zero() });
                vec![(*x, gx)]
            }
            Op::Sigmoid(x) => {
                let gx = zip_map(out.data(), &|y, g| g * y * (T::one() - y));
                vec![(*x, gx)]
            }
            Op::Tanh(x) => {
                let gx = zip_map(out.data(), &|y, g| g * (T::one() - y * y));
                vec![(*x, gx)]
            }
            Op::Linear { x, w, b } => {
                let wshape = self.shape(*w);
                let (o, f) = (wshape[0], wshape[1]);
                let (xd, wd) = (self.data(*x), self.data(*w));
                let m = xd.len() / f.max(1);
                let mut res = Vec::with_capacity(3);
                if self.tracks(*x) {
                    let mut gx = vec![T::zero(); xd.len()];
                    for r in 0..m {
                        let gr = &mut gx[r * f..][..f];
                        for k in 0..o {
                            let g = dy[r * o + k];
                            if g == T::zero() {
                                continue;
                            }
                            for (d, wv) in gr.iter_mut().zip(&wd[k * f..][..f]) {
                                *d += g * *wv;
                            }
                        }
                    }
                    res.push((*x, gx));
                }
                if self.tracks(*w) {
                    let mut gw = vec![T::zero(); wd.len()];
                    for r in 0..m {
                        let xr = &xd[r * f..][..f];
                        for k in 0..o {
                            let g = dy[r * o + k];
                            if g == T::zero() {
                                continue;
                            }
                            for (d, xv) in gw[k * f..][..f].iter_mut().zip(xr) {
                                *d += g * *xv;
                            }
                        }
                    }
                    res.push((*w, gw));
                }
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); o];
                    for row in dy.chunks(o) {
                        for (d, g) in gb.iter_mut().zip(row) {
                            *d += *g;
                        }
                    }
                    res.push((*b, gb));
                }
                res
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv2d_backward(geom, self.data(*x), self.data(*w), dy, self.tracks(*x));
                let mut res = vec![(*w, gw)];
                if let Some(gx) = gx {
                    res.push((*x, gx));
                }
                if let Some(b) = b {
                    res.push((*b, gb));
                }
                res
            }
            Op::MaxPool2d { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (g, &src) in dy.iter().zip(argmax) {
                    gx[src] += *g;
                }
                vec![(*x, gx)]
            }
            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (gx, gg, gb) =
                    kernels::batchnorm_backward(self.shape(*x), xhat, inv_std, self.data(*gamma), dy, *batch_stats);
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Reshape(x) => vec![(*x, dy.to_vec())],
            Op::SliceLast { x, start } => {
                let last = *self.shape(*x).last().unwrap();
                let len = *out.shape().last().unwrap();
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (row, grow) in gx.chunks_mut(last).zip(dy.chunks(len)) {
                    row[*start..*start + len].copy_from_slice(grow);
                }
                vec![(*x, gx)]
            }
            Op::ConcatLast(parts) => {
                let total = *out.shape().last().unwrap();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let w = *self.shape(*p).last().unwrap();
                    let g: Vec<T> = dy
                        .chunks(total)
                        .flat_map(|row| row[offset..offset + w].iter().copied())
                        .collect();
                    offset += w;
                    res.push((*p, g));
                }
                res
            }
            Op::Stack(parts) => {
                let inner = dy.len() / parts.len();
                parts
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (*p, dy[i * inner..(i + 1) * inner].to_vec()))
                    .collect()
            }
            Op::Index { x, index } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                let inner = dy.len();
                gx[index * inner..(index + 1) * inner].copy_from_slice(dy);
                vec![(*x, gx)]
            }
            Op::SwapAxes(x) => {
                let shape = self.shape(*x);
                let (a, b) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let mut gx = vec![T::zero(); dy.len()];
                for j in 0..b {
                    for i in 0..a {
                        gx[(i * b + j) * inner..][..inner].copy_from_slice(&dy[(j * a + i) * inner..][..inner]);
                    }
                }
                vec![(*x, gx)]
            }
            Op::Dropout { x, mask } => {
                let gx = zip_map(mask, &|m, g| m * g);
                vec![(*x, gx)]
            }
            Op::SquaredError { pred, target, weights } => {
                let two: T = lit(2.0);
                let g = dy[0];
                let gp = self
                    .data(*pred)
                    .iter()
                    .zip(target)
                    .zip(weights)
                    .map(|((p, t), w)| g * two * *w * (*p - *t))
                    .collect();
                vec![(*pred, gp)]
            }
            Op::Dot { x, coeffs } => {
                let g = dy[0];
                vec![(*x, coeffs.iter().map(|c| *c * g).collect())]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[3.0]));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(g.value(y).data(), &[9.0]);
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.dot_const(y, vec![1.0, 1.0]).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_values_and_subgradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.dot_const(y, vec![1.0; 3]).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.param(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.param(t(&[2], &[0.0, 0.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let z = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let b2 = g.param(t(&[2], &[0.5, -1.5]));
        let y = g.linear(z, w, Some(b2)).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.5]);
        let bad = g.param(t(&[3, 3], &[0.0; 9]));
        assert!(g.linear(x, bad, None).is_err());
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 1, 2], &[2.0, 2.0]));
        let y = g.maxpool2d(x, (1, 2), (1, 2)).unwrap();
        let s = g.dot_const(y, vec![1.0]).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn shape_plumbing_round_trips() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3, 2], &(0..12).map(f64::from).collect::<Vec<_>>()));
        let s = g.swap_axes01(x).unwrap();
        assert_eq!(g.shape(s), &[3, 2, 2]);
        assert_eq!(&g.value(s).data()[..4], &[0.0, 1.0, 6.0, 7.0]);
        let back = g.swap_axes01(s).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());

        let a = g.slice_last(x, 0, 1).unwrap();
        let b = g.slice_last(x, 1, 1).unwrap();
        let cat = g.concat_last(&[a, b]).unwrap();
        assert_eq!(g.value(cat).data(), g.value(x).data());

        let i0 = g.index(x, 0).unwrap();
        let i1 = g.index(x, 1).unwrap();
        let st = g.stack(&[i0, i1]).unwrap();
        assert_eq!(g.value(st), g.value(x));
    }

    #[test]
    fn fault_scales_gradient() {
        let mut g = Graph::with_fault(Some(GradFault {
            kind: OpKind::Relu,
            scale: 1.01,
        }));
        let x = g.param(t(&[1], &[2.0]));
        let y = g.relu(x);
        let s = g.dot_const(y, vec![1.0]).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[1.01]);
    }

    #[test]
    fn non_finite_activation_is_reported() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[f64::NAN]));
        let y = g.relu(x);
        let err = g.ensure_finite(x, "input").unwrap_err();
        assert!(err.to_string().contains("input"));
        assert!(g.ensure_finite(y, "relu").is_ok());
    }
}
