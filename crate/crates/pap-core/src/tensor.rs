//! Minimal reverse-mode tensor engine.
//!
//! A [`Tape`] records every differentiable operation as it executes; a
//! [`Tensor`] is a cheap `Copy` handle into the tape. Calling
//! [`Tape::backward`] on a scalar replays the record in reverse and leaves a
//! gradient on every tracked node. A tape and its tensors are confined to a
//! single worker; independent jobs each build their own tape.
//!
//! The op set is deliberately small: stride-1 same-padded convolution (with
//! dilation), elementwise add/sub/mul, relu/sigmoid, 2x2 max pooling,
//! bilinear upsampling, masked summation, channel concatenation and a few
//! helpers needed to compose patches into images. Downsampling happens only
//! through pooling. There is no broadcasting except tensor-scalar.
//!
//! All numerics are generic over [`Scalar`] so the same code paths run at
//! f32 for experiments and f64 for gradient checks.

use std::cell::RefCell;
use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};
use rand::distr::uniform::SampleUniform;

use crate::error::{Error, Result};

/// Element type of the engine: f32 for experiments, f64 for checks.
pub trait Scalar:
    Float + FromPrimitive + SampleUniform + Default + Debug + Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for converting an f64 literal into the active scalar type.
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal must convert into Scalar")
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    Relu(usize),
    Sigmoid(usize),
    Clamp01(usize),
    Conv2d { input: usize, kernel: usize, bias: usize, dilation: usize },
    MaxPool2 { input: usize, argmax: Vec<u32> },
    Upsample { input: usize },
    Sum { input: usize, mask: Option<Vec<T>> },
    Place { input: usize, row: usize, col: usize },
    ConcatChannels { inputs: Vec<usize> },
    ChannelWeightedSum { input: usize, weights: Vec<T> },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    tracked: bool,
    op: Op<T>,
}

/// Ordered record of executed differentiable operations.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: RefCell<bool>,
}

/// Handle to a value on a tape.
#[derive(Clone, Copy)]
pub struct Tensor<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), consumed: RefCell::new(false) }
    }

    fn push(&self, shape: Vec<usize>, data: Vec<T>, tracked: bool, op: Op<T>) -> Tensor<'_, T> {
        assert!(
            !*self.consumed.borrow(),
            "tape already consumed by backward; build a fresh tape"
        );
        debug_assert_eq!(numel(&shape), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, data, grad: None, tracked, op });
        Tensor { tape: self, id: nodes.len() - 1 }
    }

    /// Insert a constant value. Rejects non-finite input data.
    pub fn leaf(&self, shape: &[usize], data: Vec<T>) -> Result<Tensor<'_, T>> {
        self.leaf_inner(shape, data, false)
    }

    /// Insert a differentiable leaf; its gradient is available after backward.
    pub fn leaf_grad(&self, shape: &[usize], data: Vec<T>) -> Result<Tensor<'_, T>> {
        self.leaf_inner(shape, data, true)
    }

    fn leaf_inner(&self, shape: &[usize], data: Vec<T>, tracked: bool) -> Result<Tensor<'_, T>> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "leaf",
                format!("shape {:?} wants {} values, got {}", shape, numel(shape), data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "leaf data".to_string() });
        }
        Ok(self.push(shape.to_vec(), data, tracked, Op::Leaf))
    }

    pub fn scalar(&self, value: T) -> Result<Tensor<'_, T>> {
        self.leaf(&[1], vec![value])
    }

    /// Reverse sweep from a scalar loss. Populates gradients on every tracked
    /// node and consumes the tape: no further ops or backward calls accepted.
    pub fn backward(&self, loss: Tensor<'_, T>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::arg("backward", "loss lives on a different tape"));
        }
        if *self.consumed.borrow() {
            return Err(Error::TapeConsumed);
        }
        let mut nodes = self.nodes.borrow_mut();
        let n = nodes.len();
        {
            let ln = &nodes[loss.id];
            if ln.data.len() != 1 {
                return Err(Error::NonScalarLoss { numel: ln.data.len() });
            }
            if !ln.data[0].is_finite() {
                return Err(Error::NonFinite { context: "loss".to_string() });
            }
        }

        let mut adj: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        adj[loss.id] = Some(vec![T::one()]);

        for id in (0..n).rev() {
            let Some(dy) = adj[id].take() else { continue };
            if !nodes[id].tracked {
                continue;
            }
            backprop_node(&nodes, id, &dy, &mut adj);
            adj[id] = Some(dy);
        }

        for (id, a) in adj.into_iter().enumerate() {
            if nodes[id].tracked {
                nodes[id].grad = a.or_else(|| Some(vec![T::zero(); nodes[id].data.len()]));
            }
        }
        *self.consumed.borrow_mut() = true;
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

/// Propagate the adjoint `dy` of node `id` into its tracked parents.
fn backprop_node<T: Scalar>(nodes: &[Node<T>], id: usize, dy: &[T], adj: &mut [Option<Vec<T>>]) {
    let tracked = |p: usize| nodes[p].tracked;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if tracked(*a) {
                let ga = accumulate(&mut adj[*a], dy.len());
                for (g, d) in ga.iter_mut().zip(dy) {
                    *g = *g + *d;
                }
            }
            if tracked(*b) {
                let gb = accumulate(&mut adj[*b], dy.len());
                for (g, d) in gb.iter_mut().zip(dy) {
                    *g = *g + *d;
                }
            }
        }
        Op::Sub(a, b) => {
            if tracked(*a) {
                let ga = accumulate(&mut adj[*a], dy.len());
                for (g, d) in ga.iter_mut().zip(dy) {
                    *g = *g + *d;
                }
            }
            if tracked(*b) {
                let gb = accumulate(&mut adj[*b], dy.len());
                for (g, d) in gb.iter_mut().zip(dy) {
                    *g = *g - *d;
                }
            }
        }
        Op::Mul(a, b) => {
            if tracked(*a) {
                let bv = &nodes[*b].data;
                let ga = accumulate(&mut adj[*a], dy.len());
                for ((g, d), v) in ga.iter_mut().zip(dy).zip(bv) {
                    *g = *g + *d * *v;
                }
            }
            if tracked(*b) {
                let av = &nodes[*a].data;
                let gb = accumulate(&mut adj[*b], dy.len());
                for ((g, d), v) in gb.iter_mut().zip(dy).zip(av) {
                    *g = *g + *d * *v;
                }
            }
        }
        Op::AddScalar(a) => {
            if tracked(*a) {
                let ga = accumulate(&mut adj[*a], dy.len());
                for (g, d) in ga.iter_mut().zip(dy) {
                    *g = *g + *d;
                }
            }
        }
        Op::MulScalar(a, s) => {
            if tracked(*a) {
                let ga = accumulate(&mut adj[*a], dy.len());
                for (g, d) in ga.iter_mut().zip(dy) {
                    *g = *g + *d * *s;
                }
            }
        }
        Op::Relu(a) => {
            if tracked(*a) {
                let xv = &nodes[*a].data;
                let ga = accumulate(&mut adj[*a], dy.len());
                // Subgradient at exactly 0 is 0.
                for ((g, d), x) in ga.iter_mut().zip(dy).zip(xv) {
                    if *x > T::zero() {
                        *g = *g + *d;
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if tracked(*a) {
                let yv = &nodes[id].data;
                let ga = accumulate(&mut adj[*a], dy.len());
                for ((g, d), y) in ga.iter_mut().zip(dy).zip(yv) {
                    *g = *g + *d * *y * (T::one() - *y);
                }
            }
        }
        Op::Clamp01(a) => {
            if tracked(*a) {
                let xv = &nodes[*a].data;
                let ga = accumulate(&mut adj[*a], dy.len());
                for ((g, d), x) in ga.iter_mut().zip(dy).zip(xv) {
                    if *x >= T::zero() && *x <= T::one() {
                        *g = *g + *d;
                    }
                }
            }
        }
        Op::Conv2d { input, kernel, bias, dilation } => {
            conv2d_backward(nodes, id, *input, *kernel, *bias, *dilation, dy, adj);
        }
        Op::MaxPool2 { input, argmax } => {
            if tracked(*input) {
                let ga = accumulate(&mut adj[*input], nodes[*input].data.len());
                for (d, &src) in dy.iter().zip(argmax) {
                    ga[src as usize] = ga[src as usize] + *d;
                }
            }
        }
        Op::Upsample { input } => {
            if tracked(*input) {
                let in_shape = nodes[*input].shape.clone();
                let out_shape = nodes[id].shape.clone();
                let ga = accumulate(&mut adj[*input], nodes[*input].data.len());
                upsample_backward(&in_shape, &out_shape, dy, ga);
            }
        }
        Op::Sum { input, mask } => {
            if tracked(*input) {
                let d = dy[0];
                let ga = accumulate(&mut adj[*input], nodes[*input].data.len());
                match mask {
                    None => {
                        for g in ga.iter_mut() {
                            *g = *g + d;
                        }
                    }
                    Some(m) => {
                        for (g, mv) in ga.iter_mut().zip(m) {
                            *g = *g + d * *mv;
                        }
                    }
                }
            }
        }
        Op::Place { input, row, col } => {
            if tracked(*input) {
                let (c, p, q) = {
                    let s = &nodes[*input].shape;
                    (s[0], s[1], s[2])
                };
                let (h, w) = {
                    let s = &nodes[id].shape;
                    (s[2], s[3])
                };
                let ga = accumulate(&mut adj[*input], c * p * q);
                for ch in 0..c {
                    for y in 0..p {
                        let src = (ch * h + (row + y)) * w + col;
                        let dst = (ch * p + y) * q;
                        for x in 0..q {
                            ga[dst + x] = ga[dst + x] + dy[src + x];
                        }
                    }
                }
            }
        }
        Op::ConcatChannels { inputs } => {
            let (h, w) = {
                let s = &nodes[id].shape;
                (s[2], s[3])
            };
            let plane = h * w;
            let mut offset = 0;
            for &p in inputs {
                let pc = nodes[p].shape[1];
                if tracked(p) {
                    let ga = accumulate(&mut adj[p], nodes[p].data.len());
                    ga.iter_mut()
                        .zip(&dy[offset * plane..(offset + pc) * plane])
                        .for_each(|(g, d)| *g = *g + *d);
                }
                offset += pc;
            }
        }
        Op::ChannelWeightedSum { input, weights } => {
            if tracked(*input) {
                let plane = dy.len();
                let ga = accumulate(&mut adj[*input], nodes[*input].data.len());
                for (k, &wk) in weights.iter().enumerate() {
                    let base = k * plane;
                    for (i, d) in dy.iter().enumerate() {
                        ga[base + i] = ga[base + i] + *d * wk;
                    }
                }
            }
        }
    }
}

impl<'t, T: Scalar> Tensor<'t, T> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].data.len()
    }

    /// Copy of the node's values.
    pub fn value(&self) -> Vec<T> {
        self.tape.nodes.borrow()[self.id].data.clone()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> T {
        let nodes = self.tape.nodes.borrow();
        assert_eq!(nodes[self.id].data.len(), 1, "item() on non-scalar");
        nodes[self.id].data[0]
    }

    /// Gradient recorded by the last backward pass, if this node was tracked.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    fn same_tape(&self, other: &Tensor<'t, T>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::arg(op, "operands live on different tapes"))
        }
    }

    fn binary(&self, other: Tensor<'t, T>, op: &'static str) -> Result<(Vec<usize>, bool)> {
        self.same_tape(&other, op)?;
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        if a.shape != b.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
        }
        Ok((a.shape.clone(), a.tracked || b.tracked))
    }

    pub fn add(&self, other: Tensor<'t, T>) -> Result<Tensor<'t, T>> {
        let (shape, tracked) = self.binary(other, "add")?;
        let data = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].data.iter().zip(&nodes[other.id].data).map(|(a, b)| *a + *b).collect()
        };
        Ok(self.tape.push(shape, data, tracked, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Tensor<'t, T>) -> Result<Tensor<'t, T>> {
        let (shape, tracked) = self.binary(other, "sub")?;
        let data = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].data.iter().zip(&nodes[other.id].data).map(|(a, b)| *a - *b).collect()
        };
        Ok(self.tape.push(shape, data, tracked, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Tensor<'t, T>) -> Result<Tensor<'t, T>> {
        let (shape, tracked) = self.binary(other, "mul")?;
        let data = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].data.iter().zip(&nodes[other.id].data).map(|(a, b)| *a * *b).collect()
        };
        Ok(self.tape.push(shape, data, tracked, Op::Mul(self.id, other.id)))
    }

    pub fn add_scalar(&self, s: T) -> Tensor<'t, T> {
        let (shape, data, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.data.iter().map(|v| *v + s).collect(), n.tracked)
        };
        self.tape.push(shape, data, tracked, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(&self, s: T) -> Tensor<'t, T> {
        let (shape, data, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.data.iter().map(|v| *v * s).collect(), n.tracked)
        };
        self.tape.push(shape, data, tracked, Op::MulScalar(self.id, s))
    }

    pub fn relu(&self) -> Tensor<'t, T> {
        let (shape, data, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.data.iter().map(|v| v.max(T::zero())).collect(), n.tracked)
        };
        self.tape.push(shape, data, tracked, Op::Relu(self.id))
    }

    /// Logistic function. Outputs are clamped into the open unit interval:
    /// for large positive inputs 1/(1+e^-x) rounds to exactly 1, which would
    /// silently break the strict (0,1) contract downstream weighting relies
    /// on.
    pub fn sigmoid(&self) -> Tensor<'t, T> {
        let (shape, data, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let d = n.data.iter().map(|v| sigmoid_open(*v)).collect();
            (n.shape.clone(), d, n.tracked)
        };
        self.tape.push(shape, data, tracked, Op::Sigmoid(self.id))
    }

    /// Clip values into [0, 1]. Gradient passes only where the input already
    /// lay inside the range.
    pub fn clamp01(&self) -> Tensor<'t, T> {
        let (shape, data, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let d = n.data.iter().map(|v| v.max(T::zero()).min(T::one())).collect();
            (n.shape.clone(), d, n.tracked)
        };
        self.tape.push(shape, data, tracked, Op::Clamp01(self.id))
    }

    /// Stride-1 cross-correlation with zero same-padding.
    ///
    /// `input [N,C,H,W]`, `kernel [K,C,kh,kw]` (odd spatial dims),
    /// `bias [K]`, `dilation >= 1`; output `[N,K,H,W]`.
    pub fn conv2d(
        &self,
        kernel: Tensor<'t, T>,
        bias: Tensor<'t, T>,
        dilation: usize,
    ) -> Result<Tensor<'t, T>> {
        self.same_tape(&kernel, "conv2d")?;
        self.same_tape(&bias, "conv2d")?;
        if dilation < 1 {
            return Err(Error::arg("conv2d", format!("dilation must be >= 1, got {dilation}")));
        }
        let (out_shape, data, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let (x, k, b) = (&nodes[self.id], &nodes[kernel.id], &nodes[bias.id]);
            if x.shape.len() != 4 || k.shape.len() != 4 {
                return Err(Error::shape(
                    "conv2d",
                    format!("want 4-d input and kernel, got {:?} and {:?}", x.shape, k.shape),
                ));
            }
            let [n, c, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
            let [ko, kc, kh, kw] = [k.shape[0], k.shape[1], k.shape[2], k.shape[3]];
            if kc != c {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel expects {kc} input channels, input has {c}"),
                ));
            }
            if b.shape != [ko] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} does not match {ko} output channels", b.shape),
                ));
            }
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::arg(
                    "conv2d",
                    format!("kernel spatial dims must be odd, got {kh}x{kw}"),
                ));
            }
            let out = conv2d_forward(&x.data, n, c, h, w, &k.data, ko, kh, kw, &b.data, dilation);
            let tracked = x.tracked || k.tracked || b.tracked;
            (vec![n, ko, h, w], out, tracked)
        };
        Ok(self.tape.push(
            out_shape,
            data,
            tracked,
            Op::Conv2d { input: self.id, kernel: kernel.id, bias: bias.id, dilation },
        ))
    }

    /// 2x2 non-overlapping max pool; ties route the gradient to the first
    /// maximal element in row-major order.
    pub fn maxpool2(&self) -> Result<Tensor<'t, T>> {
        let (out_shape, data, argmax, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            if x.shape.len() != 4 {
                return Err(Error::shape("maxpool2", format!("want 4-d input, got {:?}", x.shape)));
            }
            let [n, c, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::arg("maxpool2", format!("spatial dims must be even, got {h}x{w}")));
            }
            let (oh, ow) = (h / 2, w / 2);
            let mut out = Vec::with_capacity(n * c * oh * ow);
            let mut arg = Vec::with_capacity(n * c * oh * ow);
            for plane in 0..n * c {
                let base = plane * h * w;
                for y in 0..oh {
                    for x0 in 0..ow {
                        let mut best_idx = base + (2 * y) * w + 2 * x0;
                        let mut best = x.data[best_idx];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * y + dy) * w + (2 * x0 + dx);
                            if x.data[idx] > best {
                                best = x.data[idx];
                                best_idx = idx;
                            }
                        }
                        out.push(best);
                        arg.push(best_idx as u32);
                    }
                }
            }
            (vec![n, c, oh, ow], out, arg, x.tracked)
        };
        Ok(self.tape.push(out_shape, data, tracked, Op::MaxPool2 { input: self.id, argmax }))
    }

    /// Bilinear interpolation to `(out_h, out_w)`, align-corners false.
    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor<'t, T>> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::arg("upsample_bilinear", "output dims must be >= 1"));
        }
        let (out_shape, data, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            if x.shape.len() != 4 {
                return Err(Error::shape(
                    "upsample_bilinear",
                    format!("want 4-d input, got {:?}", x.shape),
                ));
            }
            let [n, c, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
            let mut out = vec![T::zero(); n * c * out_h * out_w];
            for plane in 0..n * c {
                let src = &x.data[plane * h * w..(plane + 1) * h * w];
                let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
                for oy in 0..out_h {
                    let (y0, y1, ly) = sample_coord::<T>(oy, h, out_h);
                    for ox in 0..out_w {
                        let (x0, x1, lx) = sample_coord::<T>(ox, w, out_w);
                        let one = T::one();
                        let v = src[y0 * w + x0] * (one - ly) * (one - lx)
                            + src[y0 * w + x1] * (one - ly) * lx
                            + src[y1 * w + x0] * ly * (one - lx)
                            + src[y1 * w + x1] * ly * lx;
                        dst[oy * out_w + ox] = v;
                    }
                }
            }
            (vec![n, c, out_h, out_w], out, x.tracked)
        };
        Ok(self.tape.push(out_shape, data, tracked, Op::Upsample { input: self.id }))
    }

    /// Sum of all entries, or of the entries selected by `mask` (same numel,
    /// typically 0/1). Returns a scalar tensor.
    pub fn sum(&self, mask: Option<&[T]>) -> Result<Tensor<'t, T>> {
        let (total, tracked, mask_owned) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            match mask {
                None => {
                    let mut acc = T::zero();
                    for v in &x.data {
                        acc = acc + *v;
                    }
                    (acc, x.tracked, None)
                }
                Some(m) => {
                    if m.len() != x.data.len() {
                        return Err(Error::shape(
                            "sum",
                            format!("mask has {} entries, tensor has {}", m.len(), x.data.len()),
                        ));
                    }
                    let mut acc = T::zero();
                    for (v, mv) in x.data.iter().zip(m) {
                        acc = acc + *v * *mv;
                    }
                    (acc, x.tracked, Some(m.to_vec()))
                }
            }
        };
        Ok(self.tape.push(vec![1], vec![total], tracked, Op::Sum { input: self.id, mask: mask_owned }))
    }

    /// Write a `[C,P,Q]` block into an all-zero `[1,C,H,W]` canvas with its
    /// top-left corner at `(row, col)`.
    pub fn place(&self, h: usize, w: usize, row: usize, col: usize) -> Result<Tensor<'t, T>> {
        let (out_shape, data, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            if x.shape.len() != 3 {
                return Err(Error::shape("place", format!("want [C,P,Q] input, got {:?}", x.shape)));
            }
            let [c, p, q] = [x.shape[0], x.shape[1], x.shape[2]];
            if row + p > h || col + q > w {
                return Err(Error::arg(
                    "place",
                    format!("{p}x{q} block at ({row},{col}) exceeds {h}x{w} canvas"),
                ));
            }
            let mut out = vec![T::zero(); c * h * w];
            for ch in 0..c {
                for y in 0..p {
                    let dst = (ch * h + row + y) * w + col;
                    let src = (ch * p + y) * q;
                    out[dst..dst + q].copy_from_slice(&x.data[src..src + q]);
                }
            }
            (vec![1, c, h, w], out, x.tracked)
        };
        Ok(self.tape.push(out_shape, data, tracked, Op::Place { input: self.id, row, col }))
    }

    /// Concatenate `[N,C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[Tensor<'t, T>]) -> Result<Tensor<'t, T>> {
        let first = parts.first().ok_or(Error::EmptyInput { op: "concat_channels" })?;
        let tape = first.tape;
        for p in parts {
            first.same_tape(p, "concat_channels")?;
        }
        let (out_shape, data, tracked) = {
            let nodes = tape.nodes.borrow();
            let s0 = &nodes[first.id].shape;
            if s0.len() != 4 {
                return Err(Error::shape("concat_channels", format!("want 4-d inputs, got {:?}", s0)));
            }
            let [n, h, w] = [s0[0], s0[2], s0[3]];
            let mut total_c = 0;
            for p in parts {
                let s = &nodes[p.id].shape;
                if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                    return Err(Error::shape(
                        "concat_channels",
                        format!("incompatible part shape {:?} vs {:?}", s, s0),
                    ));
                }
                total_c += s[1];
            }
            if n != 1 {
                return Err(Error::arg("concat_channels", "only batch size 1 supported"));
            }
            let mut out = Vec::with_capacity(total_c * h * w);
            for p in parts {
                out.extend_from_slice(&nodes[p.id].data);
            }
            let tracked = parts.iter().any(|p| nodes[p.id].tracked);
            (vec![n, total_c, h, w], out, tracked)
        };
        Ok(tape.push(
            out_shape,
            data,
            tracked,
            Op::ConcatChannels { inputs: parts.iter().map(|p| p.id).collect() },
        ))
    }

    /// Fixed per-channel weighted sum over `[1,K,H,W]`, producing `[1,1,H,W]`.
    /// The weights are treated as constants.
    pub fn channel_weighted_sum(&self, weights: &[T]) -> Result<Tensor<'t, T>> {
        let (out_shape, data, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            if x.shape.len() != 4 || x.shape[0] != 1 {
                return Err(Error::shape(
                    "channel_weighted_sum",
                    format!("want [1,K,H,W] input, got {:?}", x.shape),
                ));
            }
            let [k, h, w] = [x.shape[1], x.shape[2], x.shape[3]];
            if weights.len() != k {
                return Err(Error::shape(
                    "channel_weighted_sum",
                    format!("{} weights for {k} channels", weights.len()),
                ));
            }
            let plane = h * w;
            let mut out = vec![T::zero(); plane];
            for (ch, &wk) in weights.iter().enumerate() {
                let src = &x.data[ch * plane..(ch + 1) * plane];
                for (o, v) in out.iter_mut().zip(src) {
                    *o = *o + wk * *v;
                }
            }
            (vec![1, 1, h, w], out, x.tracked)
        };
        Ok(self.tape.push(
            out_shape,
            data,
            tracked,
            Op::ChannelWeightedSum { input: self.id, weights: weights.to_vec() },
        ))
    }
}

/// 1/(1+e^-x) kept strictly inside (0,1) at the saturation boundary.
pub fn sigmoid_open<T: Scalar>(x: T) -> T {
    let y = T::one() / (T::one() + (-x).exp());
    y.max(T::min_positive_value()).min(T::one() - T::epsilon())
}

/// Source coordinate for bilinear sampling, align-corners false.
fn sample_coord<T: Scalar>(out_idx: usize, in_dim: usize, out_dim: usize) -> (usize, usize, T) {
    let scale = in_dim as f64 / out_dim as f64;
    let src = ((out_idx as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_dim - 1);
    let i1 = (i0 + 1).min(in_dim - 1);
    // Degenerate at edges: both taps hit the same cell, keep it exact.
    let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
    (i0, i1, lit(frac))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: &[T],
    ko: usize,
    kh: usize,
    kw: usize,
    bias: &[T],
    dilation: usize,
) -> Vec<T> {
    let pad_h = (kh - 1) * dilation / 2;
    let pad_w = (kw - 1) * dilation / 2;
    let mut out = vec![T::zero(); n * ko * h * w];
    out.chunks_mut(h * w).enumerate().for_each(|(plane, out_plane)| {
        let (b, oc) = (plane / ko, plane % ko);
        for v in out_plane.iter_mut() {
            *v = bias[oc];
        }
        for ic in 0..c {
            let in_plane = &x[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
            for ky in 0..kh {
                let dy = (ky * dilation) as isize - pad_h as isize;
                let y_lo = (-dy).max(0) as usize;
                let y_hi = (h as isize - dy).min(h as isize) as usize;
                for kx in 0..kw {
                    let weight = k[((oc * c + ic) * kh + ky) * kw + kx];
                    let dx = (kx * dilation) as isize - pad_w as isize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in y_lo..y_hi {
                        let src_base =
                            (y as isize + dy) as usize * w + (x_lo as isize + dx) as usize;
                        let src = &in_plane[src_base..src_base + (x_hi - x_lo)];
                        let dst = &mut out_plane[y * w + x_lo..y * w + x_hi];
                        for (o, v) in dst.iter_mut().zip(src) {
                            *o = *o + weight * *v;
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    nodes: &[Node<T>],
    out_id: usize,
    input: usize,
    kernel: usize,
    bias: usize,
    dilation: usize,
    dy: &[T],
    adj: &mut [Option<Vec<T>>],
) {
    let (n, c, h, w) = {
        let s = &nodes[input].shape;
        (s[0], s[1], s[2], s[3])
    };
    let (ko, kh, kw) = {
        let s = &nodes[kernel].shape;
        (s[0], s[2], s[3])
    };
    debug_assert_eq!(nodes[out_id].shape, vec![n, ko, h, w]);
    let pad_h = (kh - 1) * dilation / 2;
    let pad_w = (kw - 1) * dilation / 2;

    if nodes[bias].tracked {
        let gb = accumulate(&mut adj[bias], ko);
        for b in 0..n {
            for oc in 0..ko {
                let plane = &dy[(b * ko + oc) * h * w..(b * ko + oc + 1) * h * w];
                let mut acc = T::zero();
                for v in plane {
                    acc = acc + *v;
                }
                gb[oc] = gb[oc] + acc;
            }
        }
    }

    if nodes[kernel].tracked {
        let xv = &nodes[input].data;
        let gk = accumulate(&mut adj[kernel], nodes[kernel].data.len());
        gk.chunks_mut(c * kh * kw).enumerate().for_each(|(oc, gk_oc)| {
            for b in 0..n {
                let dplane = &dy[(b * ko + oc) * h * w..(b * ko + oc + 1) * h * w];
                for ic in 0..c {
                    let in_plane = &xv[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                    for ky in 0..kh {
                        let dyo = (ky * dilation) as isize - pad_h as isize;
                        let y_lo = (-dyo).max(0) as usize;
                        let y_hi = (h as isize - dyo).min(h as isize) as usize;
                        for kx in 0..kw {
                            let dxo = (kx * dilation) as isize - pad_w as isize;
                            let x_lo = (-dxo).max(0) as usize;
                            let x_hi = (w as isize - dxo).min(w as isize) as usize;
                            if x_lo >= x_hi {
                                continue;
                            }
                            let mut acc = T::zero();
                            for y in y_lo..y_hi {
                                let src_base = (y as isize + dyo) as usize * w
                                    + (x_lo as isize + dxo) as usize;
                                let src = &in_plane[src_base..src_base + (x_hi - x_lo)];
                                let dd = &dplane[y * w + x_lo..y * w + x_hi];
                                for (d, v) in dd.iter().zip(src) {
                                    acc = acc + *d * *v;
                                }
                            }
                            let idx = (ic * kh + ky) * kw + kx;
                            gk_oc[idx] = gk_oc[idx] + acc;
                        }
                    }
                }
            }
        });
    }

    if nodes[input].tracked {
        let kv = &nodes[kernel].data;
        let gx = accumulate(&mut adj[input], nodes[input].data.len());
        gx.chunks_mut(h * w).enumerate().for_each(|(plane, gx_plane)| {
            let (b, ic) = (plane / c, plane % c);
            for oc in 0..ko {
                let dplane = &dy[(b * ko + oc) * h * w..(b * ko + oc + 1) * h * w];
                for ky in 0..kh {
                    let dyo = (ky * dilation) as isize - pad_h as isize;
                    let y_lo = (-dyo).max(0) as usize;
                    let y_hi = (h as isize - dyo).min(h as isize) as usize;
                    for kx in 0..kw {
                        let weight = kv[((oc * c + ic) * kh + ky) * kw + kx];
                        let dxo = (kx * dilation) as isize - pad_w as isize;
                        let x_lo = (-dxo).max(0) as usize;
                        let x_hi = (w as isize - dxo).min(w as isize) as usize;
                        if x_lo >= x_hi {
                            continue;
                        }
                        for y in y_lo..y_hi {
                            let dst = (y as isize + dyo) as usize * w
                                + (x_lo as isize + dxo) as usize;
                            let dd = &dplane[y * w + x_lo..y * w + x_hi];
                            let gslice = &mut gx_plane[dst..dst + (x_hi - x_lo)];
                            for (g, d) in gslice.iter_mut().zip(dd) {
                                *g = *g + weight * *d;
                            }
                        }
                    }
                }
            }
        });
    }
}

fn upsample_backward<T: Scalar>(in_shape: &[usize], out_shape: &[usize], dy: &[T], gx: &mut [T]) {
    let [h, w] = [in_shape[2], in_shape[3]];
    let [oh, ow] = [out_shape[2], out_shape[3]];
    let planes = in_shape[0] * in_shape[1];
    for plane in 0..planes {
        let dst = plane * h * w;
        let src = &dy[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, ly) = sample_coord::<T>(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1, lx) = sample_coord::<T>(ox, w, ow);
                let one = T::one();
                let d = src[oy * ow + ox];
                gx[dst + y0 * w + x0] = gx[dst + y0 * w + x0] + d * (one - ly) * (one - lx);
                gx[dst + y0 * w + x1] = gx[dst + y0 * w + x1] + d * (one - ly) * lx;
                gx[dst + y1 * w + x0] = gx[dst + y1 * w + x0] + d * ly * (one - lx);
                gx[dst + y1 * w + x1] = gx[dst + y1 * w + x1] + d * ly * lx;
            }
        }
    }
}
