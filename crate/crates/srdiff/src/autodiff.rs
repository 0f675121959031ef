//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node in a
//! Wengert list; [`Tape::backward`] walks the list in reverse and accumulates
//! gradients deterministically (fixed traversal order, no threading), so a
//! training step is a pure function of its inputs. The op set is exactly what
//! the models in this crate need: broadcasted elementwise arithmetic,
//! matrix products, 2-D convolution, normalization building blocks, softmax,
//! and a fused cross-entropy head.
//!
//! Everything is generic over [`Scalar`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient verification.

use ndarray::{ArrayD, Axis, Ix2, Ix3, Ix4, IxDyn};

use crate::error::{Error, Result};

/// Dynamic-dimensional tensor alias used throughout the crate.
pub type Arr<F> = ArrayD<F>;

/// Element types the tape can differentiate through (`f32` and `f64`).
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + PartialOrd
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
    /// Logistic sigmoid, used by the SiLU activation and its derivative.
    fn sigmoid(self) -> Self {
        Self::one() / (Self::one() + (-self).exp())
    }
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<F: Scalar> {
    Leaf,
    Bin { kind: BinKind, a: usize, b: usize },
    Scale { a: usize, c: F },
    AddScalar { a: usize },
    Relu { a: usize },
    Silu { a: usize },
    Rsqrt { a: usize, eps: F },
    MeanAxes { a: usize, axes: Vec<usize> },
    SumAll { a: usize },
    Reshape { a: usize },
    Permute { a: usize, axes: Vec<usize> },
    Matmul { a: usize, b: usize },
    Bmm { a: usize, b: usize, trans_b: bool },
    SoftmaxLast { a: usize },
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    Upsample2x { a: usize },
    AvgPool2 { a: usize },
    ConcatC { a: usize, b: usize },
    CrossEntropyLogits { logits: usize, targets: Vec<usize> },
}

/// Gradients of one backward pass, indexed by the [`Var`]s of the tape.
pub struct Grads<F: Scalar> {
    by_node: Vec<Option<Arr<F>>>,
}

impl<F: Scalar> Grads<F> {
    /// Gradient accumulated at `v`, if any reached it.
    pub fn get(&self, v: Var) -> Option<&Arr<F>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient at `v`, or a zero array of the given shape.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Arr<F> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Arr::zeros(IxDyn(shape)),
        }
    }
}

/// Reverse-mode tape. One tape records one forward pass.
pub struct Tape<F: Scalar> {
    values: Vec<Arr<F>>,
    ops: Vec<Op<F>>,
    requires: Vec<bool>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
        }
    }

    fn push(&mut self, value: Arr<F>, op: Op<F>, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        Var(self.values.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Arr<F> {
        &self.values[v.0]
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Differentiable leaf (a model parameter).
    pub fn param(&mut self, value: Arr<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (an input or other constant).
    pub fn constant(&mut self, value: Arr<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn binop(&mut self, kind: BinKind, a: Var, b: Var) -> Var {
        let out = broadcast_apply(kind, &self.values[a.0], &self.values[b.0]);
        let requires = self.req(a) || self.req(b);
        self.push(out, Op::Bin { kind, a: a.0, b: b.0 }, requires)
    }

    /// Elementwise `a + b` with numpy-style broadcasting (equal ndim).
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binop(BinKind::Add, a, b)
    }

    /// Elementwise `a - b` with broadcasting.
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binop(BinKind::Sub, a, b)
    }

    /// Elementwise `a * b` with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binop(BinKind::Mul, a, b)
    }

    /// Elementwise `a / b` with broadcasting.
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binop(BinKind::Div, a, b)
    }

    /// `a * c` for a scalar constant.
    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.values[a.0].mapv(|x| x * c);
        let requires = self.req(a);
        self.push(out, Op::Scale { a: a.0, c }, requires)
    }

    /// `a + c` for a scalar constant.
    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let out = self.values[a.0].mapv(|x| x + c);
        let requires = self.req(a);
        self.push(out, Op::AddScalar { a: a.0 }, requires)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(|x| x.maximum(F::zero()));
        let requires = self.req(a);
        self.push(out, Op::Relu { a: a.0 }, requires)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(|x| x * x.sigmoid());
        let requires = self.req(a);
        self.push(out, Op::Silu { a: a.0 }, requires)
    }

    /// `1 / sqrt(a + eps)`, the normalization denominator.
    pub fn rsqrt(&mut self, a: Var, eps: F) -> Var {
        let out = self.values[a.0].mapv(|x| F::one() / (x + eps).sqrt());
        let requires = self.req(a);
        self.push(out, Op::Rsqrt { a: a.0, eps }, requires)
    }

    /// Mean over `axes`, keeping reduced axes as size 1.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let mut out = self.values[a.0].clone();
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &ax in sorted.iter().rev() {
            let n = F::from_f64(out.shape()[ax] as f64);
            out = out.sum_axis(Axis(ax)).mapv(|x| x / n);
            out.insert_axis_inplace(Axis(ax));
        }
        let requires = self.req(a);
        self.push(out, Op::MeanAxes { a: a.0, axes: sorted }, requires)
    }

    /// Sum of every element; result is a 0-d array.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.values[a.0].sum();
        let out = Arr::from_elem(IxDyn(&[]), s);
        let requires = self.req(a);
        self.push(out, Op::SumAll { a: a.0 }, requires)
    }

    /// Mean of every element; result is a 0-d array.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len();
        let s = self.sum_all(a);
        self.scale(s, F::one() / F::from_f64(n as f64))
    }

    /// Reshape to `shape` (element count must match).
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.values[a.0]
            .as_standard_layout()
            .to_owned()
            .into_shape(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let requires = self.req(a);
        self.push(out, Op::Reshape { a: a.0 }, requires)
    }

    /// Permute axes; the result is materialized in standard layout.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let out = self.values[a.0]
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let requires = self.req(a);
        self.push(
            out,
            Op::Permute {
                a: a.0,
                axes: axes.to_vec(),
            },
            requires,
        )
    }

    /// 2-D matrix product `a @ b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.values[b.0].view().into_dimensionality::<Ix2>().unwrap();
        let out = av.dot(&bv).into_dyn();
        let requires = self.req(a) || self.req(b);
        self.push(out, Op::Matmul { a: a.0, b: b.0 }, requires)
    }

    /// Batched matrix product over leading axis: `a[b] @ b[b]`
    /// (or `a[b] @ b[b].T` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.values[b.0].view().into_dimensionality::<Ix3>().unwrap();
        let batch = av.shape()[0];
        let n = av.shape()[1];
        let m = if trans_b { bv.shape()[1] } else { bv.shape()[2] };
        let mut out = ndarray::Array3::<F>::zeros((batch, n, m));
        for i in 0..batch {
            let ai = av.index_axis(Axis(0), i);
            let bi = bv.index_axis(Axis(0), i);
            let prod = if trans_b { ai.dot(&bi.t()) } else { ai.dot(&bi) };
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        let requires = self.req(a) || self.req(b);
        self.push(out.into_dyn(), Op::Bmm { a: a.0, b: b.0, trans_b }, requires)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let mut out = self.values[a.0].clone();
        for mut lane in out.lanes_mut(Axis(out.ndim() - 1)) {
            let mut mx = lane[0];
            for &v in lane.iter() {
                mx = mx.maximum(v);
            }
            let mut sum = F::zero();
            for v in lane.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in lane.iter_mut() {
                *v = *v / sum;
            }
        }
        let requires = self.req(a);
        self.push(out, Op::SoftmaxLast { a: a.0 }, requires)
    }

    /// 2-D convolution of `x: [B,Cin,H,W]` with `w: [Cout,Cin,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = self.values[x.0].view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.values[w.0].view().into_dimensionality::<Ix4>().unwrap();
        let out = conv2d_forward(&xv, &wv, stride, pad);
        let requires = self.req(x) || self.req(w);
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                x: x.0,
                w: w.0,
                stride,
                pad,
            },
            requires,
        )
    }

    /// Nearest-neighbor 2x spatial upsampling of `[B,C,H,W]`.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = av.dim();
        let mut out = ndarray::Array4::<F>::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = av[[bi, ci, i, j]];
                        out[[bi, ci, 2 * i, 2 * j]] = v;
                        out[[bi, ci, 2 * i, 2 * j + 1]] = v;
                        out[[bi, ci, 2 * i + 1, 2 * j]] = v;
                        out[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
        }
        let requires = self.req(a);
        self.push(out.into_dyn(), Op::Upsample2x { a: a.0 }, requires)
    }

    /// 2x2 average pooling with stride 2 (even spatial dims required).
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = av.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 requires even dims");
        let quarter = F::from_f64(0.25);
        let mut out = ndarray::Array4::<F>::zeros((b, c, h / 2, w / 2));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        let s = av[[bi, ci, 2 * i, 2 * j]]
                            + av[[bi, ci, 2 * i, 2 * j + 1]]
                            + av[[bi, ci, 2 * i + 1, 2 * j]]
                            + av[[bi, ci, 2 * i + 1, 2 * j + 1]];
                        out[[bi, ci, i, j]] = s * quarter;
                    }
                }
            }
        }
        let requires = self.req(a);
        self.push(out.into_dyn(), Op::AvgPool2 { a: a.0 }, requires)
    }

    /// Concatenate two `[B,C,H,W]` tensors along the channel axis.
    pub fn concat_c(&mut self, a: Var, b: Var) -> Var {
        let av = self.values[a.0].view();
        let bv = self.values[b.0].view();
        let out = ndarray::concatenate(Axis(1), &[av, bv]).expect("concat_c shape mismatch");
        let requires = self.req(a) || self.req(b);
        self.push(out, Op::ConcatC { a: a.0, b: b.0 }, requires)
    }

    /// Mean cross-entropy of `logits: [B,C]` against integer class targets,
    /// fused with a numerically stable log-softmax. Result is 0-d.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.values[logits.0]
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let batch = lv.shape()[0];
        assert_eq!(batch, targets.len(), "cross_entropy: target count");
        let mut total = F::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.index_axis(Axis(0), i);
            let mut mx = row[0];
            for &v in row.iter() {
                mx = mx.maximum(v);
            }
            let mut lse = F::zero();
            for &v in row.iter() {
                lse += (v - mx).exp();
            }
            let lse = lse.ln() + mx;
            total += lse - row[t];
        }
        let mean = total / F::from_f64(batch as f64);
        let out = Arr::from_elem(IxDyn(&[]), mean);
        let requires = self.req(logits);
        self.push(
            out,
            Op::CrossEntropyLogits {
                logits: logits.0,
                targets: targets.to_vec(),
            },
            requires,
        )
    }

    /// Backward pass from a 0-d (scalar) node, seeded with 1.
    pub fn backward(&self, root: Var) -> Grads<F> {
        let seed = Arr::from_elem(self.values[root.0].raw_dim(), F::one());
        self.backward_seeded(root, seed)
    }

    /// Backward pass with an explicit seed gradient at `root`.
    pub fn backward_seeded(&self, root: Var, seed: Arr<F>) -> Grads<F> {
        assert_eq!(
            seed.shape(),
            self.values[root.0].shape(),
            "backward seed shape"
        );
        let mut grads: Vec<Option<Arr<F>>> = vec![None; self.values.len()];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.requires[i] {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { by_node: grads }
    }

    fn accumulate(grads: &mut [Option<Arr<F>>], idx: usize, contrib: Arr<F>) {
        match &mut grads[idx] {
            Some(existing) => *existing += &contrib,
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backward_op(&self, idx: usize, g: &Arr<F>, grads: &mut Vec<Option<Arr<F>>>) {
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::Bin { kind, a, b } => {
                let av = &self.values[*a];
                let bv = &self.values[*b];
                match kind {
                    BinKind::Add => {
                        if self.requires[*a] {
                            Self::accumulate(grads, *a, reduce_to_shape(g.clone(), av.shape()));
                        }
                        if self.requires[*b] {
                            Self::accumulate(grads, *b, reduce_to_shape(g.clone(), bv.shape()));
                        }
                    }
                    BinKind::Sub => {
                        if self.requires[*a] {
                            Self::accumulate(grads, *a, reduce_to_shape(g.clone(), av.shape()));
                        }
                        if self.requires[*b] {
                            Self::accumulate(
                                grads,
                                *b,
                                reduce_to_shape(g.mapv(|x| -x), bv.shape()),
                            );
                        }
                    }
                    BinKind::Mul => {
                        if self.requires[*a] {
                            let full = broadcast_apply(BinKind::Mul, g, bv);
                            Self::accumulate(grads, *a, reduce_to_shape(full, av.shape()));
                        }
                        if self.requires[*b] {
                            let full = broadcast_apply(BinKind::Mul, g, av);
                            Self::accumulate(grads, *b, reduce_to_shape(full, bv.shape()));
                        }
                    }
                    BinKind::Div => {
                        if self.requires[*a] {
                            let full = broadcast_apply(BinKind::Div, g, bv);
                            Self::accumulate(grads, *a, reduce_to_shape(full, av.shape()));
                        }
                        if self.requires[*b] {
                            // d(a/b)/db = -a / b^2
                            let bb = broadcast_apply(BinKind::Mul, bv, bv);
                            let num = broadcast_apply(BinKind::Mul, g, av);
                            let full = broadcast_apply(BinKind::Div, &num, &bb).mapv(|x| -x);
                            Self::accumulate(grads, *b, reduce_to_shape(full, bv.shape()));
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.requires[*a] {
                    Self::accumulate(grads, *a, g.mapv(|x| x * *c));
                }
            }
            Op::AddScalar { a } => {
                if self.requires[*a] {
                    Self::accumulate(grads, *a, g.clone());
                }
            }
            Op::Relu { a } => {
                if self.requires[*a] {
                    let av = &self.values[*a];
                    let mut out = g.clone();
                    ndarray::Zip::from(&mut out).and(av).for_each(|go, &x| {
                        if x <= F::zero() {
                            *go = F::zero();
                        }
                    });
                    Self::accumulate(grads, *a, out);
                }
            }
            Op::Silu { a } => {
                if self.requires[*a] {
                    let av = &self.values[*a];
                    let mut out = g.clone();
                    ndarray::Zip::from(&mut out).and(av).for_each(|go, &x| {
                        let s = x.sigmoid();
                        *go = *go * (s * (F::one() + x * (F::one() - s)));
                    });
                    Self::accumulate(grads, *a, out);
                }
            }
            Op::Rsqrt { a, eps } => {
                if self.requires[*a] {
                    let y = &self.values[idx];
                    let _ = eps;
                    let half = F::from_f64(0.5);
                    let mut out = g.clone();
                    ndarray::Zip::from(&mut out).and(y).for_each(|go, &yv| {
                        *go = *go * (-half * yv * yv * yv);
                    });
                    Self::accumulate(grads, *a, out);
                }
            }
            Op::MeanAxes { a, axes } => {
                if self.requires[*a] {
                    let ashape = self.values[*a].shape().to_vec();
                    let mut count = 1usize;
                    for &ax in axes {
                        count *= ashape[ax];
                    }
                    let inv = F::one() / F::from_f64(count as f64);
                    let scaled = g.mapv(|x| x * inv);
                    let full = scaled
                        .broadcast(IxDyn(&ashape))
                        .expect("mean_axes backward broadcast")
                        .to_owned();
                    Self::accumulate(grads, *a, full);
                }
            }
            Op::SumAll { a } => {
                if self.requires[*a] {
                    let ashape = self.values[*a].shape().to_vec();
                    let gv = *g.first().expect("sum_all grad");
                    Self::accumulate(grads, *a, Arr::from_elem(IxDyn(&ashape), gv));
                }
            }
            Op::Reshape { a } => {
                if self.requires[*a] {
                    let ashape = self.values[*a].shape().to_vec();
                    let back = g
                        .as_standard_layout()
                        .to_owned()
                        .into_shape(IxDyn(&ashape))
                        .expect("reshape backward");
                    Self::accumulate(grads, *a, back);
                }
            }
            Op::Permute { a, axes } => {
                if self.requires[*a] {
                    let mut inverse = vec![0usize; axes.len()];
                    for (pos, &ax) in axes.iter().enumerate() {
                        inverse[ax] = pos;
                    }
                    let back = g
                        .view()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .to_owned();
                    Self::accumulate(grads, *a, back);
                }
            }
            Op::Matmul { a, b } => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.values[*a].view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.values[*b].view().into_dimensionality::<Ix2>().unwrap();
                if self.requires[*a] {
                    Self::accumulate(grads, *a, gv.dot(&bv.t()).into_dyn());
                }
                if self.requires[*b] {
                    Self::accumulate(grads, *b, av.t().dot(&gv).into_dyn());
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let av = self.values[*a].view().into_dimensionality::<Ix3>().unwrap();
                let bv = self.values[*b].view().into_dimensionality::<Ix3>().unwrap();
                let batch = av.shape()[0];
                if self.requires[*a] {
                    let mut da = ndarray::Array3::<F>::zeros(av.raw_dim());
                    for i in 0..batch {
                        let gi = gv.index_axis(Axis(0), i);
                        let bi = bv.index_axis(Axis(0), i);
                        let prod = if *trans_b { gi.dot(&bi) } else { gi.dot(&bi.t()) };
                        da.index_axis_mut(Axis(0), i).assign(&prod);
                    }
                    Self::accumulate(grads, *a, da.into_dyn());
                }
                if self.requires[*b] {
                    let mut db = ndarray::Array3::<F>::zeros(bv.raw_dim());
                    for i in 0..batch {
                        let gi = gv.index_axis(Axis(0), i);
                        let ai = av.index_axis(Axis(0), i);
                        let prod = if *trans_b { gi.t().dot(&ai) } else { ai.t().dot(&gi) };
                        db.index_axis_mut(Axis(0), i).assign(&prod);
                    }
                    Self::accumulate(grads, *b, db.into_dyn());
                }
            }
            Op::SoftmaxLast { a } => {
                if self.requires[*a] {
                    let y = &self.values[idx];
                    let last = y.ndim() - 1;
                    let mut out = broadcast_apply(BinKind::Mul, g, y);
                    // dx = y * (g - sum_last(g * y))
                    for (mut lane, ylane) in out
                        .lanes_mut(Axis(last))
                        .into_iter()
                        .zip(y.lanes(Axis(last)))
                    {
                        let mut dot = F::zero();
                        for &v in lane.iter() {
                            dot += v;
                        }
                        for (v, &yv) in lane.iter_mut().zip(ylane.iter()) {
                            *v = *v - yv * dot;
                        }
                    }
                    Self::accumulate(grads, *a, out);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let xv = self.values[*x].view().into_dimensionality::<Ix4>().unwrap();
                let wv = self.values[*w].view().into_dimensionality::<Ix4>().unwrap();
                let (dx, dw) = conv2d_backward(
                    &xv,
                    &wv,
                    &gv,
                    *stride,
                    *pad,
                    self.requires[*x],
                    self.requires[*w],
                );
                if self.requires[*x] {
                    Self::accumulate(grads, *x, dx.unwrap().into_dyn());
                }
                if self.requires[*w] {
                    Self::accumulate(grads, *w, dw.unwrap().into_dyn());
                }
            }
            Op::Upsample2x { a } => {
                if self.requires[*a] {
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (b, c, h2, w2) = gv.dim();
                    let (h, w) = (h2 / 2, w2 / 2);
                    let mut da = ndarray::Array4::<F>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            for i in 0..h {
                                for j in 0..w {
                                    da[[bi, ci, i, j]] = gv[[bi, ci, 2 * i, 2 * j]]
                                        + gv[[bi, ci, 2 * i, 2 * j + 1]]
                                        + gv[[bi, ci, 2 * i + 1, 2 * j]]
                                        + gv[[bi, ci, 2 * i + 1, 2 * j + 1]];
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, *a, da.into_dyn());
                }
            }
            Op::AvgPool2 { a } => {
                if self.requires[*a] {
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (b, c, ho, wo) = gv.dim();
                    let quarter = F::from_f64(0.25);
                    let mut da = ndarray::Array4::<F>::zeros((b, c, ho * 2, wo * 2));
                    for bi in 0..b {
                        for ci in 0..c {
                            for i in 0..ho {
                                for j in 0..wo {
                                    let v = gv[[bi, ci, i, j]] * quarter;
                                    da[[bi, ci, 2 * i, 2 * j]] = v;
                                    da[[bi, ci, 2 * i, 2 * j + 1]] = v;
                                    da[[bi, ci, 2 * i + 1, 2 * j]] = v;
                                    da[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, *a, da.into_dyn());
                }
            }
            Op::ConcatC { a, b } => {
                let ca = self.values[*a].shape()[1];
                if self.requires[*a] {
                    let da = g.slice_axis(Axis(1), ndarray::Slice::from(0..ca)).to_owned();
                    Self::accumulate(grads, *a, da);
                }
                if self.requires[*b] {
                    let db = g
                        .slice_axis(Axis(1), ndarray::Slice::from(ca..))
                        .to_owned();
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::CrossEntropyLogits { logits, targets } => {
                if self.requires[*logits] {
                    let lv = self.values[*logits]
                        .view()
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let batch = lv.shape()[0];
                    let gv = *g.first().expect("cross_entropy grad");
                    let invb = F::one() / F::from_f64(batch as f64);
                    let mut dl = ndarray::Array2::<F>::zeros(lv.raw_dim());
                    for (i, &t) in targets.iter().enumerate() {
                        let row = lv.index_axis(Axis(0), i);
                        let mut mx = row[0];
                        for &v in row.iter() {
                            mx = mx.maximum(v);
                        }
                        let mut sum = F::zero();
                        for &v in row.iter() {
                            sum += (v - mx).exp();
                        }
                        for (j, &v) in row.iter().enumerate() {
                            let p = (v - mx).exp() / sum;
                            let delta = if j == t { F::one() } else { F::zero() };
                            dl[[i, j]] = (p - delta) * invb * gv;
                        }
                    }
                    Self::accumulate(grads, *logits, dl.into_dyn());
                }
            }
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "binop operands must have equal ndim");
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "incompatible broadcast {:?} vs {:?}", a, b);
            x.max(y)
        })
        .collect()
}

fn broadcast_apply<F: Scalar>(kind: BinKind, a: &Arr<F>, b: &Arr<F>) -> Arr<F> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast a");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast b");
    let mut out = Arr::zeros(IxDyn(&shape));
    match kind {
        BinKind::Add => ndarray::Zip::from(&mut out)
            .and(&av)
            .and(&bv)
            .for_each(|o, &x, &y| *o = x + y),
        BinKind::Sub => ndarray::Zip::from(&mut out)
            .and(&av)
            .and(&bv)
            .for_each(|o, &x, &y| *o = x - y),
        BinKind::Mul => ndarray::Zip::from(&mut out)
            .and(&av)
            .and(&bv)
            .for_each(|o, &x, &y| *o = x * y),
        BinKind::Div => ndarray::Zip::from(&mut out)
            .and(&av)
            .and(&bv)
            .for_each(|o, &x, &y| *o = x / y),
    }
    out
}

/// Sum `grad` down to `shape` over axes that were broadcast (size 1).
fn reduce_to_shape<F: Scalar>(grad: Arr<F>, shape: &[usize]) -> Arr<F> {
    if grad.shape() == shape {
        return grad;
    }
    let mut out = grad;
    for ax in 0..shape.len() {
        if shape[ax] == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax));
            out.insert_axis_inplace(Axis(ax));
        }
    }
    out
}

fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unfold one image `[Cin,H,W]` into `[Cin*k*k, Ho*Wo]` patch columns.
fn im2col<F: Scalar>(
    x: &ndarray::ArrayView3<F>,
    k: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array2<F> {
    let (cin, h, w) = x.dim();
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let mut cols = ndarray::Array2::<F>::zeros((cin * k * k, ho * wo));
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let mut cols_row = cols.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols_row[oy * wo + ox] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Fold patch-column gradients back onto the input image (adjoint of im2col).
fn col2im<F: Scalar>(
    dcols: &ndarray::Array2<F>,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<F> {
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let mut dx = ndarray::Array3::<F>::zeros((cin, h, w));
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let drow = dcols.row(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[c, iy as usize, ix as usize]] += drow[oy * wo + ox];
                    }
                }
            }
        }
    }
    dx
}

fn conv2d_forward<F: Scalar>(
    x: &ndarray::ArrayView4<F>,
    w: &ndarray::ArrayView4<F>,
    stride: usize,
    pad: usize,
) -> ndarray::Array4<F> {
    let (b, cin, h, wd) = x.dim();
    let (cout, cin_w, k, k2) = w.dim();
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    assert_eq!(k, k2, "conv2d kernels are square");
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(wd, k, stride, pad);
    let wmat = w
        .to_shape((cout, cin * k * k))
        .expect("conv weight reshape")
        .to_owned();
    let mut out = ndarray::Array4::<F>::zeros((b, cout, ho, wo));
    for bi in 0..b {
        let cols = im2col(&x.index_axis(Axis(0), bi), k, stride, pad);
        let prod = wmat.dot(&cols); // [Cout, Ho*Wo]
        let reshaped = prod.into_shape((cout, ho, wo)).unwrap();
        out.index_axis_mut(Axis(0), bi).assign(&reshaped);
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv2d_backward<F: Scalar>(
    x: &ndarray::ArrayView4<F>,
    w: &ndarray::ArrayView4<F>,
    g: &ndarray::ArrayView4<F>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<ndarray::Array4<F>>, Option<ndarray::Array4<F>>) {
    let (b, cin, h, wd) = x.dim();
    let (cout, _, k, _) = w.dim();
    let (_, _, ho, wo) = g.dim();
    let wmat = w
        .to_shape((cout, cin * k * k))
        .expect("conv weight reshape")
        .to_owned();
    let mut dw_acc = ndarray::Array2::<F>::zeros((cout, cin * k * k));
    let mut dx = if need_dx {
        Some(ndarray::Array4::<F>::zeros((b, cin, h, wd)))
    } else {
        None
    };
    for bi in 0..b {
        let gmat = g
            .index_axis(Axis(0), bi)
            .to_shape((cout, ho * wo))
            .expect("conv grad reshape")
            .to_owned();
        if need_dw {
            let cols = im2col(&x.index_axis(Axis(0), bi), k, stride, pad);
            dw_acc = dw_acc + gmat.dot(&cols.t());
        }
        if let Some(dx) = dx.as_mut() {
            let dcols = wmat.t().dot(&gmat);
            let dxi = col2im(&dcols, cin, h, wd, k, stride, pad);
            dx.index_axis_mut(Axis(0), bi).assign(&dxi);
        }
    }
    let dw = if need_dw {
        Some(dw_acc.into_shape((cout, cin, k, k)).unwrap())
    } else {
        None
    };
    (dx, dw)
}

/// Abort helper: verify every element of `v` is finite.
pub fn ensure_finite<F: Scalar>(v: &Arr<F>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains NaN or Inf")))
    }
}
