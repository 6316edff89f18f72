use std::cell::{Cell, RefCell};

use super::kernels::{self, ConvShapes};
use super::{Real, Shape, ShapeError, Tensor};

type NodeId = usize;

/// Handle to a value produced on a [`Tape`].
///
/// Untracked vars (constants, or anything computed on a non-recording tape)
/// carry no node id and receive no gradient.
#[derive(Clone, Debug)]
pub struct Var<R = f32> {
    value: Tensor<R>,
    id: Option<NodeId>,
}

impl<R: Real> Var<R> {
    pub fn constant(value: Tensor<R>) -> Self {
        Self { value, id: None }
    }

    pub fn value(&self) -> &Tensor<R> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<R> {
        self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    fn saved(&self) -> Saved<R> {
        Saved {
            id: self.id,
            value: self.value.clone(),
        }
    }
}

#[derive(Clone)]
struct Saved<R> {
    id: Option<NodeId>,
    value: Tensor<R>,
}

enum Op<R> {
    Leaf,
    Conv2d {
        x: Saved<R>,
        w: Saved<R>,
        b: Option<NodeId>,
        shapes: ConvShapes,
    },
    Deconv2d {
        x: Saved<R>,
        w: Saved<R>,
        b: Option<NodeId>,
        shapes: ConvShapes,
    },
    Warp {
        src: Saved<R>,
        flow: Saved<R>,
    },
    Add(Option<NodeId>, Option<NodeId>),
    Sub(Option<NodeId>, Option<NodeId>),
    Mul(Saved<R>, Saved<R>),
    Div(Saved<R>, Saved<R>),
    Scale(Option<NodeId>, R),
    Identity(Option<NodeId>),
    Concat(Vec<(Option<NodeId>, usize)>),
    SliceChannels {
        a: Option<NodeId>,
        start: usize,
        in_shape: Shape,
    },
    LeakyRelu(Saved<R>, R),
    Sigmoid {
        a: Option<NodeId>,
        out: Tensor<R>,
    },
    Softplus(Saved<R>),
    Clamp(Saved<R>, R, R),
    Powf(Saved<R>, R),
    Sum(Option<NodeId>, Shape),
    AvgPool2 {
        a: Option<NodeId>,
        in_shape: Shape,
    },
    Upsample2(Option<NodeId>, Shape),
    Crop {
        a: Option<NodeId>,
        in_shape: Shape,
    },
    PadReplicate {
        a: Option<NodeId>,
        in_shape: Shape,
    },
    Reshape(Option<NodeId>),
    /// Fused elementwise op with precomputed local derivatives, one per input.
    Fused(Vec<(Option<NodeId>, Vec<R>)>),
    /// Each output element depends on `width` input elements, listed by index.
    Sparse(Vec<SparseInput<R>>),
}

struct SparseInput<R> {
    id: Option<NodeId>,
    numel: usize,
    width: usize,
    index: Vec<u32>,
    coef: Vec<R>,
}

struct Node<R> {
    op: Op<R>,
    shape: Shape,
}

/// Records differentiable ops in execution order.
///
/// A tape created with [`Tape::inference`] never records, so networks can be
/// run for coding without keeping intermediates alive.
pub struct Tape<R = f32> {
    nodes: RefCell<Vec<Node<R>>>,
    recording: bool,
    flops: Cell<u64>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<R> {
    grads: Vec<Option<Vec<R>>>,
    shapes: Vec<Shape>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of the loss with respect to `var`, or `None` when no path
    /// connects them.
    pub fn wrt(&self, var: &Var<R>) -> Option<Tensor<R>> {
        let id = var.id?;
        let g = self.grads.get(id)?.as_ref()?;
        Some(Tensor::from_parts(self.shapes[id], g.clone()))
    }
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<(), ShapeError> {
    if a == b {
        Ok(())
    } else {
        Err(ShapeError::new(op, format!("{a} vs {b}")))
    }
}

fn accumulate<R: Real>(grads: &mut [Option<Vec<R>>], id: Option<NodeId>, g: impl AsRef<[R]>) {
    let Some(id) = id else { return };
    let g = g.as_ref();
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            flops: Cell::new(0),
        }
    }

    /// A tape that computes values only.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-add FLOPs (2 per MAC) executed by conv and deconv ops so far.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    /// Registers a differentiable leaf (a trainable parameter or an input
    /// whose gradient is wanted).
    pub fn leaf(&self, value: Tensor<R>) -> Var<R> {
        if !self.recording {
            return Var::constant(value);
        }
        self.push(Op::Leaf, value)
    }

    pub fn constant(&self, value: Tensor<R>) -> Var<R> {
        Var::constant(value)
    }

    fn push(&self, op: Op<R>, value: Tensor<R>) -> Var<R> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            shape: value.shape(),
        });
        Var {
            value,
            id: Some(nodes.len() - 1),
        }
    }

    fn record(&self, inputs: &[&Var<R>], value: Tensor<R>, op: impl FnOnce() -> Op<R>) -> Var<R> {
        if self.recording && inputs.iter().any(|v| v.is_tracked()) {
            self.push(op(), value)
        } else {
            Var::constant(value)
        }
    }

    pub fn conv2d(
        &self,
        x: &Var<R>,
        w: &Var<R>,
        b: Option<&Var<R>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<R>, ShapeError> {
        let shapes =
            kernels::conv2d_shapes(x.shape(), w.shape(), b.map(|b| b.shape()), stride, padding)?;
        let out = kernels::conv2d_forward(x.value(), w.value(), b.map(|b| b.value()), &shapes);
        let s = w.shape();
        self.add_flops(2 * s.n * s.c * s.h * s.w * shapes.out.plane() * x.shape().n);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(&inputs, out, || Op::Conv2d {
            x: x.saved(),
            w: w.saved(),
            b: b.and_then(|b| b.id),
            shapes,
        }))
    }

    /// Transposed convolution with kernel `(C_in, C_out, k, k)`; the output
    /// is exactly `stride` times the input size.
    pub fn deconv2d(
        &self,
        x: &Var<R>,
        w: &Var<R>,
        b: Option<&Var<R>>,
        stride: usize,
    ) -> Result<Var<R>, ShapeError> {
        let shapes = kernels::deconv2d_shapes(x.shape(), w.shape(), b.map(|b| b.shape()), stride)?;
        let out = kernels::deconv2d_forward(x.value(), w.value(), b.map(|b| b.value()), &shapes);
        let s = w.shape();
        self.add_flops(2 * s.n * s.c * s.h * s.w * x.shape().plane() * x.shape().n);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(&inputs, out, || Op::Deconv2d {
            x: x.saved(),
            w: w.saved(),
            b: b.and_then(|b| b.id),
            shapes,
        }))
    }

    fn add_flops(&self, f: usize) {
        self.flops.set(self.flops.get() + f as u64);
    }

    /// Samples `source` at `(x + dx, y + dy)` with bilinear interpolation and
    /// clamp-to-edge borders. `flow` holds `(dx, dy)` in pixels.
    pub fn warp(&self, source: &Var<R>, flow: &Var<R>) -> Result<Var<R>, ShapeError> {
        let (s, f) = (source.shape(), flow.shape());
        if f.c != 2 {
            return Err(ShapeError::new(
                "warp",
                format!("flow {f} must have 2 channels"),
            ));
        }
        if (s.n, s.h, s.w) != (f.n, f.h, f.w) {
            return Err(ShapeError::new("warp", format!("source {s} vs flow {f}")));
        }
        let out = kernels::warp_forward(source.value(), flow.value());
        Ok(self.record(&[source, flow], out, || Op::Warp {
            src: source.saved(),
            flow: flow.saved(),
        }))
    }

    pub fn add(&self, a: &Var<R>, b: &Var<R>) -> Result<Var<R>, ShapeError> {
        same_shape("add", a.shape(), b.shape())?;
        let out = a.value().zip_map(b.value(), |x, y| x + y)?;
        Ok(self.record(&[a, b], out, || Op::Add(a.id, b.id)))
    }

    pub fn sub(&self, a: &Var<R>, b: &Var<R>) -> Result<Var<R>, ShapeError> {
        same_shape("sub", a.shape(), b.shape())?;
        let out = a.value().zip_map(b.value(), |x, y| x - y)?;
        Ok(self.record(&[a, b], out, || Op::Sub(a.id, b.id)))
    }

    pub fn mul(&self, a: &Var<R>, b: &Var<R>) -> Result<Var<R>, ShapeError> {
        same_shape("mul", a.shape(), b.shape())?;
        let out = a.value().zip_map(b.value(), |x, y| x * y)?;
        Ok(self.record(&[a, b], out, || Op::Mul(a.saved(), b.saved())))
    }

    pub fn div(&self, a: &Var<R>, b: &Var<R>) -> Result<Var<R>, ShapeError> {
        same_shape("div", a.shape(), b.shape())?;
        let out = a.value().zip_map(b.value(), |x, y| x / y)?;
        Ok(self.record(&[a, b], out, || Op::Div(a.saved(), b.saved())))
    }

    pub fn scale(&self, a: &Var<R>, k: R) -> Var<R> {
        let out = a.value().map(|x| x * k);
        self.record(&[a], out, || Op::Scale(a.id, k))
    }

    pub fn add_scalar(&self, a: &Var<R>, k: R) -> Var<R> {
        let out = a.value().map(|x| x + k);
        self.record(&[a], out, || Op::Identity(a.id))
    }

    /// Rounds half away from zero; the gradient passes straight through.
    pub fn round_straight_through(&self, a: &Var<R>) -> Var<R> {
        let out = a.value().map(|x| x.round());
        self.record(&[a], out, || Op::Identity(a.id))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&self, parts: &[&Var<R>]) -> Result<Var<R>, ShapeError> {
        let first = parts
            .first()
            .ok_or_else(|| ShapeError::new("concat", "no inputs"))?
            .shape();
        let mut c = 0;
        for p in parts {
            let s = p.shape();
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(ShapeError::new("concat", format!("{s} vs {first}")));
            }
            c += s.c;
        }
        let shape = first.with_channels(c);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for p in parts {
                let len = p.shape().c * first.plane();
                data.extend_from_slice(&p.value().data()[n * len..(n + 1) * len]);
            }
        }
        let out = Tensor::from_parts(shape, data);
        Ok(self.record(parts, out, || {
            Op::Concat(parts.iter().map(|p| (p.id, p.shape().c)).collect())
        }))
    }

    pub fn slice_channels(
        &self,
        a: &Var<R>,
        start: usize,
        len: usize,
    ) -> Result<Var<R>, ShapeError> {
        let s = a.shape();
        if start + len > s.c || len == 0 {
            return Err(ShapeError::new(
                "slice_channels",
                format!("channels {start}..{} outside {s}", start + len),
            ));
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&a.value().data()[base..base + len * plane]);
        }
        let out = Tensor::from_parts(s.with_channels(len), data);
        Ok(self.record(&[a], out, || Op::SliceChannels {
            a: a.id,
            start,
            in_shape: s,
        }))
    }

    pub fn leaky_relu(&self, a: &Var<R>, slope: R) -> Var<R> {
        let out = a.value().map(|x| if x > R::zero() { x } else { x * slope });
        self.record(&[a], out, || Op::LeakyRelu(a.saved(), slope))
    }

    pub fn sigmoid(&self, a: &Var<R>) -> Var<R> {
        let out = a.value().map(sigmoid);
        self.record(&[a], out.clone(), || Op::Sigmoid { a: a.id, out })
    }

    pub fn softplus(&self, a: &Var<R>) -> Var<R> {
        let out = a.value().map(softplus);
        self.record(&[a], out, || Op::Softplus(a.saved()))
    }

    /// Clamps into `[lo, hi]`; zero gradient where clamping is active.
    pub fn clamp(&self, a: &Var<R>, lo: R, hi: R) -> Var<R> {
        let out = a.value().map(|x| x.max(lo).min(hi));
        self.record(&[a], out, || Op::Clamp(a.saved(), lo, hi))
    }

    /// `x^e` for positive inputs.
    pub fn powf(&self, a: &Var<R>, e: R) -> Var<R> {
        let out = a.value().map(|x| x.powf(e));
        self.record(&[a], out, || Op::Powf(a.saved(), e))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self, a: &Var<R>) -> Var<R> {
        let out = Tensor::scalar(a.value().sum());
        self.record(&[a], out, || Op::Sum(a.id, a.shape()))
    }

    pub fn mean(&self, a: &Var<R>) -> Var<R> {
        let n = R::from_f64(a.value().numel() as f64);
        let s = self.sum(a);
        self.scale(&s, R::one() / n)
    }

    /// 2x2 average pooling with stride 2 (trailing odd row/column dropped).
    pub fn avg_pool2(&self, a: &Var<R>) -> Result<Var<R>, ShapeError> {
        let s = a.shape();
        if s.h < 2 || s.w < 2 {
            return Err(ShapeError::new(
                "avg_pool2",
                format!("{s} smaller than 2x2"),
            ));
        }
        let out_shape = s.with_spatial(s.h / 2, s.w / 2);
        let d = a.value().data();
        let quarter = R::from_f64(0.25);
        let mut out = Vec::with_capacity(out_shape.numel());
        for nc in 0..s.n * s.c {
            let base = nc * s.plane();
            for y in 0..out_shape.h {
                for x in 0..out_shape.w {
                    let i = base + 2 * y * s.w + 2 * x;
                    out.push((d[i] + d[i + 1] + d[i + s.w] + d[i + s.w + 1]) * quarter);
                }
            }
        }
        let out = Tensor::from_parts(out_shape, out);
        Ok(self.record(&[a], out, || Op::AvgPool2 {
            a: a.id,
            in_shape: s,
        }))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self, a: &Var<R>) -> Var<R> {
        let s = a.shape();
        let out_shape = s.with_spatial(s.h * 2, s.w * 2);
        let d = a.value().data();
        let mut out = Vec::with_capacity(out_shape.numel());
        for nc in 0..s.n * s.c {
            let base = nc * s.plane();
            for y in 0..out_shape.h {
                for x in 0..out_shape.w {
                    out.push(d[base + (y / 2) * s.w + x / 2]);
                }
            }
        }
        let out = Tensor::from_parts(out_shape, out);
        self.record(&[a], out, || Op::Upsample2(a.id, s))
    }

    /// Keeps the top-left `h x w` window.
    pub fn crop(&self, a: &Var<R>, h: usize, w: usize) -> Result<Var<R>, ShapeError> {
        let s = a.shape();
        if h > s.h || w > s.w {
            return Err(ShapeError::new("crop", format!("{h}x{w} larger than {s}")));
        }
        if (h, w) == (s.h, s.w) {
            return Ok(a.clone());
        }
        let d = a.value().data();
        let mut out = Vec::with_capacity(s.n * s.c * h * w);
        for nc in 0..s.n * s.c {
            for y in 0..h {
                let row = nc * s.plane() + y * s.w;
                out.extend_from_slice(&d[row..row + w]);
            }
        }
        let out = Tensor::from_parts(s.with_spatial(h, w), out);
        Ok(self.record(&[a], out, || Op::Crop {
            a: a.id,
            in_shape: s,
        }))
    }

    /// Extends to `h x w` by replicating the last row and column.
    pub fn pad_replicate(&self, a: &Var<R>, h: usize, w: usize) -> Result<Var<R>, ShapeError> {
        let s = a.shape();
        if h < s.h || w < s.w || s.h == 0 || s.w == 0 {
            return Err(ShapeError::new(
                "pad_replicate",
                format!("{h}x{w} smaller than {s}"),
            ));
        }
        if (h, w) == (s.h, s.w) {
            return Ok(a.clone());
        }
        let d = a.value().data();
        let mut out = Vec::with_capacity(s.n * s.c * h * w);
        for nc in 0..s.n * s.c {
            for y in 0..h {
                let row = nc * s.plane() + y.min(s.h - 1) * s.w;
                for x in 0..w {
                    out.push(d[row + x.min(s.w - 1)]);
                }
            }
        }
        let out = Tensor::from_parts(s.with_spatial(h, w), out);
        Ok(self.record(&[a], out, || Op::PadReplicate {
            a: a.id,
            in_shape: s,
        }))
    }

    pub fn reshape(&self, a: &Var<R>, shape: Shape) -> Result<Var<R>, ShapeError> {
        let out = a.value().reshape(shape)?;
        Ok(self.record(&[a], out, || Op::Reshape(a.id)))
    }

    /// Records an externally computed value together with the local
    /// derivative of each output element with respect to the matching element
    /// of each input (all inputs share the output shape).
    ///
    /// Used for fused elementwise functions such as likelihood models whose
    /// derivatives are cheaper to produce alongside the forward pass.
    pub fn fused_elementwise(
        &self,
        value: Tensor<R>,
        inputs: &[(&Var<R>, Vec<R>)],
    ) -> Result<Var<R>, ShapeError> {
        for (v, d) in inputs {
            if d.len() != value.numel() {
                return Err(ShapeError::new(
                    "fused",
                    format!(
                        "{} local derivatives for {} outputs",
                        d.len(),
                        value.numel()
                    ),
                ));
            }
            if v.value().numel() != value.numel() {
                return Err(ShapeError::new(
                    "fused",
                    format!("input {} vs output {}", v.shape(), value.shape()),
                ));
            }
        }
        let vars: Vec<&Var<R>> = inputs.iter().map(|(v, _)| *v).collect();
        Ok(self.record(&vars, value, || {
            Op::Fused(inputs.iter().map(|(v, d)| (v.id, d.clone())).collect())
        }))
    }

    /// Records an externally computed value whose output element `j` depends
    /// on input elements `index[j * width..(j + 1) * width]` with the matching
    /// partial derivatives in `coef`.
    pub fn sparse_jacobian(
        &self,
        value: Tensor<R>,
        inputs: &[(&Var<R>, usize, Vec<u32>, Vec<R>)],
    ) -> Result<Var<R>, ShapeError> {
        for (v, width, index, coef) in inputs {
            let n = value.numel() * width;
            if index.len() != n || coef.len() != n {
                return Err(ShapeError::new(
                    "sparse_jacobian",
                    format!("expected {n} entries, got {} / {}", index.len(), coef.len()),
                ));
            }
            let numel = v.value().numel();
            if index.iter().any(|&i| i as usize >= numel) {
                return Err(ShapeError::new(
                    "sparse_jacobian",
                    format!("index out of range for input {}", v.shape()),
                ));
            }
        }
        let vars: Vec<&Var<R>> = inputs.iter().map(|(v, ..)| *v).collect();
        Ok(self.record(&vars, value, || {
            Op::Sparse(
                inputs
                    .iter()
                    .map(|(v, width, index, coef)| SparseInput {
                        id: v.id,
                        numel: v.value().numel(),
                        width: *width,
                        index: index.clone(),
                        coef: coef.clone(),
                    })
                    .collect(),
            )
        }))
    }

    /// Reverse pass from a scalar loss. Calling it twice on the same tape
    /// yields bitwise-identical gradients.
    pub fn backward(&self, loss: &Var<R>) -> Result<Gradients<R>, ShapeError> {
        if loss.value().numel() != 1 {
            return Err(ShapeError::new(
                "backward",
                format!("loss must be scalar, got {}", loss.shape()),
            ));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<R>>> = vec![None; nodes.len()];
        let shapes = nodes.iter().map(|n| n.shape).collect();
        let Some(root) = loss.id else {
            return Ok(Gradients { grads, shapes });
        };
        grads[root] = Some(vec![R::one()]);
        for i in (0..=root).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&node.op, node.shape, &g, &mut grads);
        }
        Ok(Gradients { grads, shapes })
    }
}

#[inline]
pub(crate) fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<R: Real>(x: R) -> R {
    // log(1 + e^x) without overflow.
    x.max(R::zero()) + (-x.abs()).exp().ln_1p()
}

fn backprop<R: Real>(op: &Op<R>, out_shape: Shape, g: &[R], grads: &mut [Option<Vec<R>>]) {
    match op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, shapes } => {
            let r = kernels::conv2d_backward(
                &x.value,
                &w.value,
                shapes,
                g,
                [x.id.is_some(), w.id.is_some(), b.is_some()],
            );
            if let Some(dx) = r.dx {
                accumulate(grads, x.id, dx);
            }
            if let Some(dw) = r.dw {
                accumulate(grads, w.id, dw);
            }
            if let Some(db) = r.db {
                accumulate(grads, *b, db);
            }
        }
        Op::Deconv2d { x, w, b, shapes } => {
            let r = kernels::deconv2d_backward(
                &x.value,
                &w.value,
                shapes,
                g,
                [x.id.is_some(), w.id.is_some(), b.is_some()],
            );
            if let Some(dx) = r.dx {
                accumulate(grads, x.id, dx);
            }
            if let Some(dw) = r.dw {
                accumulate(grads, w.id, dw);
            }
            if let Some(db) = r.db {
                accumulate(grads, *b, db);
            }
        }
        Op::Warp { src, flow } => {
            let (ds, df) = kernels::warp_backward(
                &src.value,
                &flow.value,
                g,
                [src.id.is_some(), flow.id.is_some()],
            );
            if let Some(ds) = ds {
                accumulate(grads, src.id, ds);
            }
            if let Some(df) = df {
                accumulate(grads, flow.id, df);
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, *a, g);
            accumulate(grads, *b, g);
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g);
            if b.is_some() {
                let neg: Vec<R> = g.iter().map(|&v| -v).collect();
                accumulate(grads, *b, neg);
            }
        }
        Op::Mul(a, b) => {
            if a.id.is_some() {
                let d: Vec<R> = g.iter().zip(b.value.data()).map(|(&g, &y)| g * y).collect();
                accumulate(grads, a.id, d);
            }
            if b.id.is_some() {
                let d: Vec<R> = g.iter().zip(a.value.data()).map(|(&g, &x)| g * x).collect();
                accumulate(grads, b.id, d);
            }
        }
        Op::Div(a, b) => {
            if a.id.is_some() {
                let d: Vec<R> = g.iter().zip(b.value.data()).map(|(&g, &y)| g / y).collect();
                accumulate(grads, a.id, d);
            }
            if b.id.is_some() {
                let d: Vec<R> = g
                    .iter()
                    .zip(a.value.data().iter().zip(b.value.data()))
                    .map(|(&g, (&x, &y))| -g * x / (y * y))
                    .collect();
                accumulate(grads, b.id, d);
            }
        }
        Op::Scale(a, k) => {
            let d: Vec<R> = g.iter().map(|&v| v * *k).collect();
            accumulate(grads, *a, d);
        }
        Op::Identity(a) => accumulate(grads, *a, g),
        Op::Concat(parts) => {
            let plane = out_shape.plane();
            let mut offset = 0;
            for &(id, c) in parts {
                if id.is_some() {
                    let mut d = Vec::with_capacity(out_shape.n * c * plane);
                    for n in 0..out_shape.n {
                        let base = (n * out_shape.c + offset) * plane;
                        d.extend_from_slice(&g[base..base + c * plane]);
                    }
                    accumulate(grads, id, d);
                }
                offset += c;
            }
        }
        Op::SliceChannels { a, start, in_shape } => {
            let plane = in_shape.plane();
            let mut d = vec![R::zero(); in_shape.numel()];
            let len = out_shape.c * plane;
            for n in 0..in_shape.n {
                let base = (n * in_shape.c + start) * plane;
                d[base..base + len].copy_from_slice(&g[n * len..(n + 1) * len]);
            }
            accumulate(grads, *a, d);
        }
        Op::LeakyRelu(a, slope) => {
            let d: Vec<R> = g
                .iter()
                .zip(a.value.data())
                .map(|(&g, &x)| if x > R::zero() { g } else { g * *slope })
                .collect();
            accumulate(grads, a.id, d);
        }
        Op::Sigmoid { a, out } => {
            let d: Vec<R> = g
                .iter()
                .zip(out.data())
                .map(|(&g, &s)| g * s * (R::one() - s))
                .collect();
            accumulate(grads, *a, d);
        }
        Op::Softplus(a) => {
            let d: Vec<R> = g
                .iter()
                .zip(a.value.data())
                .map(|(&g, &x)| g * sigmoid(x))
                .collect();
            accumulate(grads, a.id, d);
        }
        Op::Clamp(a, lo, hi) => {
            let d: Vec<R> = g
                .iter()
                .zip(a.value.data())
                .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { R::zero() })
                .collect();
            accumulate(grads, a.id, d);
        }
        Op::Powf(a, e) => {
            let d: Vec<R> = g
                .iter()
                .zip(a.value.data())
                .map(|(&g, &x)| g * *e * x.powf(*e - R::one()))
                .collect();
            accumulate(grads, a.id, d);
        }
        Op::Sum(a, in_shape) => accumulate(grads, *a, vec![g[0]; in_shape.numel()]),
        Op::AvgPool2 { a, in_shape } => {
            let mut d = vec![R::zero(); in_shape.numel()];
            let quarter = R::from_f64(0.25);
            let (oh, ow) = (out_shape.h, out_shape.w);
            for nc in 0..in_shape.n * in_shape.c {
                let base = nc * in_shape.plane();
                for y in 0..oh {
                    for x in 0..ow {
                        let v = g[(nc * oh + y) * ow + x] * quarter;
                        let i = base + 2 * y * in_shape.w + 2 * x;
                        d[i] += v;
                        d[i + 1] += v;
                        d[i + in_shape.w] += v;
                        d[i + in_shape.w + 1] += v;
                    }
                }
            }
            accumulate(grads, *a, d);
        }
        Op::Upsample2(a, in_shape) => {
            let mut d = vec![R::zero(); in_shape.numel()];
            for nc in 0..in_shape.n * in_shape.c {
                let base = nc * in_shape.plane();
                for y in 0..out_shape.h {
                    for x in 0..out_shape.w {
                        d[base + (y / 2) * in_shape.w + x / 2] +=
                            g[(nc * out_shape.h + y) * out_shape.w + x];
                    }
                }
            }
            accumulate(grads, *a, d);
        }
        Op::Crop { a, in_shape } => {
            let mut d = vec![R::zero(); in_shape.numel()];
            let (h, w) = (out_shape.h, out_shape.w);
            for nc in 0..in_shape.n * in_shape.c {
                for y in 0..h {
                    let dst = nc * in_shape.plane() + y * in_shape.w;
                    let src = (nc * h + y) * w;
                    d[dst..dst + w].copy_from_slice(&g[src..src + w]);
                }
            }
            accumulate(grads, *a, d);
        }
        Op::PadReplicate { a, in_shape } => {
            let mut d = vec![R::zero(); in_shape.numel()];
            let (h, w) = (out_shape.h, out_shape.w);
            for nc in 0..in_shape.n * in_shape.c {
                for y in 0..h {
                    let row = nc * in_shape.plane() + y.min(in_shape.h - 1) * in_shape.w;
                    for x in 0..w {
                        d[row + x.min(in_shape.w - 1)] += g[(nc * h + y) * w + x];
                    }
                }
            }
            accumulate(grads, *a, d);
        }
        Op::Reshape(a) => accumulate(grads, *a, g),
        Op::Fused(inputs) => {
            for (id, local) in inputs {
                if id.is_some() {
                    let d: Vec<R> = g.iter().zip(local).map(|(&g, &l)| g * l).collect();
                    accumulate(grads, *id, d);
                }
            }
        }
        Op::Sparse(inputs) => {
            for inp in inputs.iter().filter(|inp| inp.id.is_some()) {
                let mut d = vec![R::zero(); inp.numel];
                for (j, &gj) in g.iter().enumerate() {
                    let row = j * inp.width..(j + 1) * inp.width;
                    for (&i, &c) in inp.index[row.clone()].iter().zip(&inp.coef[row]) {
                        d[i as usize] += gj * c;
                    }
                }
                accumulate(grads, inp.id, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_scaled_input_has_constant_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(Shape::new(1, 2, 3, 3), |_, c, y, x| {
            (c * 9 + y * 3 + x) as f64
        }));
        let loss = tape.sum(&tape.scale(&x, 2.0));
        let g = tape.backward(&loss).unwrap().wrt(&x).unwrap();
        assert!(g.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let err = tape.backward(&x).err().unwrap();
        assert_eq!(err.op, "backward");
    }

    #[test]
    fn backward_is_repeatable_bitwise() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(Shape::new(1, 3, 4, 4), |_, c, y, x| {
            ((c + 1) * (y + 2) * (x + 3)) as f32 * 0.01
        }));
        let w = tape.leaf(Tensor::from_fn(Shape::new(2, 3, 3, 3), |n, c, y, x| {
            ((n * 7 + c * 5 + y * 3 + x) % 5) as f32 * 0.1 - 0.2
        }));
        let y = tape.conv2d(&x, &w, None, 1, 1).unwrap();
        let y = tape.sigmoid(&y);
        let loss = tape.sum(&tape.mul(&y, &y).unwrap());
        let a = tape.backward(&loss).unwrap();
        let b = tape.backward(&loss).unwrap();
        assert_eq!(a.wrt(&x).unwrap(), b.wrt(&x).unwrap());
        assert_eq!(a.wrt(&w).unwrap(), b.wrt(&w).unwrap());
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::<f32>::inference();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let y = tape.add_scalar(&x, 1.0);
        assert!(!y.is_tracked());
        assert!(tape.is_empty());
    }

    #[test]
    fn concat_channel_counts_add_up() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(Shape::new(1, 64, 4, 4)));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 128, 4, 4)));
        let c = tape.constant(Tensor::zeros(Shape::new(1, 3, 4, 4)));
        assert_eq!(tape.concat(&[&a, &b, &c]).unwrap().shape().c, 195);
        let bad = tape.constant(Tensor::zeros(Shape::new(1, 3, 4, 5)));
        assert!(tape.concat(&[&a, &bad]).is_err());
    }

    #[test]
    fn elementwise_basics() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(Shape::new(1, 1, 1, 3), &[1.0, -2.0, 0.0]));
        let zero = tape.constant(Tensor::zeros(x.shape()));
        assert_eq!(tape.add(&x, &zero).unwrap().value(), x.value());
        assert_eq!(tape.sigmoid(&zero).value().data(), &[0.5, 0.5, 0.5]);
        assert_eq!(tape.leaky_relu(&x, 0.01).value().data(), &[1.0, -0.02, 0.0]);
        let bad = tape.constant(Tensor::zeros(Shape::new(1, 1, 3, 1)));
        assert!(tape.add(&x, &bad).is_err());
        assert!(tape.sub(&x, &bad).is_err());
    }

    #[test]
    fn round_ties_away_from_zero() {
        let tape = Tape::<f64>::inference();
        let x = tape.constant(t(Shape::new(1, 1, 1, 4), &[2.4, -2.5, 2.5, -0.5]));
        assert_eq!(
            tape.round_straight_through(&x).value().data(),
            &[2.0, -3.0, 3.0, -1.0]
        );
    }
}
