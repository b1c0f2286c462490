//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. [`Tape::backward`] walks the nodes once, newest
//! first, and leaves gradients on the leaves that asked for them.

use log::warn;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LogSoftmax { x: Var, outer: usize, len: usize, inner: usize },
    Exp(Var),
    Ln(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        outer: usize,
        len: usize,
        inner: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    AvgPool { x: Var, kernel: usize, stride: usize },
    AdaptivePool { x: Var, out_h: usize, out_w: usize },
    Resize { x: Var, out_h: usize, out_w: usize },
    NormalizeRows { x: Var, norms: Vec<T> },
    Pick { x: Var, indices: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2PI_INV: f64 = 0.398_942_280_401_432_7;

fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = T::lit(SQRT_2PI_INV) * (-T::lit(0.5) * x * x).exp();
    cdf + x * pdf
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Registers a trainable tensor.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.value
            .grad()
            .map(|g| Tensor::new(node.value.shape(), g.to_vec()).expect("grad matches value"))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, shape: &[usize], data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::new(shape, data).expect("op output shape");
        let op = if needs_grad { op } else { Op::Leaf };
        self.push(value, op, needs_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.value(a).dims2()?;
        let [k2, n] = self.value(b).dims2()?;
        if k != k2 {
            return dim_err("matmul", self.shape(a), self.shape(b));
        }
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.record(&[m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        if self.shape(a) != self.shape(b) {
            return dim_err(name, self.shape(a), self.shape(b));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Ok((self.shape(a).to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.record(&shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.record(&shape, out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.record(&shape, out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let last = *self.shape(x).last().expect("non-empty shape");
        if self.shape(bias) != [last] {
            return dim_err("add_bias", self.shape(x), self.shape(bias));
        }
        let b = self.data(bias);
        let out: Vec<T> = self.data(x).iter().enumerate().map(|(i, &v)| v + b[i % last]).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.record(&shape, out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.record(&shape, out, Op::Scale(x, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.record(&[1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.data(x).len() as f64);
        let s = self.data(x).iter().copied().sum::<T>() / n;
        self.record(&[1], vec![s], Op::Mean(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let shape = t.shape().to_vec();
        Ok(self.record(&shape, t.into_data(), Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return dim_err("reshape", self.shape(x), shape);
        }
        let out = self.data(x).to_vec();
        Ok(self.record(shape, out, Op::Reshape(x), &[x]))
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        let rows: usize = lead.iter().product();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return dim_err("concat", self.shape(*first), s);
            }
            width += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let w = *self.shape(p).last().unwrap();
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        Ok(self.record(&shape, out, Op::Concat(parts.to_vec()), parts))
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(kernels::axis_split(shape, axis))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis(x, axis)?;
        let out = kernels::softmax_fwd(self.data(x), outer, len, inner);
        let shape = self.shape(x).to_vec();
        Ok(self.record(&shape, out, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis(x, axis)?;
        let out = kernels::log_softmax_fwd(self.data(x), outer, len, inner);
        let shape = self.shape(x).to_vec();
        Ok(self.record(&shape, out, Op::LogSoftmax { x, outer, len, inner }, &[x]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.record(&shape, out, Op::Exp(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        self.record(&shape, out, Op::Ln(x), &[x])
    }

    /// Exact-erf GELU: `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.record(&shape, out, Op::Gelu(x), &[x])
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let axis = self.shape(x).len() - 1;
        self.layer_norm_axis(x, gain, bias, axis, eps)
    }

    /// Layer normalization over an arbitrary axis, with gain/bias sized to that axis.
    pub fn layer_norm_axis(&mut self, x: Var, gain: Var, bias: Var, axis: usize, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (outer, len, inner) = self.check_axis(x, axis)?;
        if self.shape(gain) != [len] || self.shape(bias) != [len] {
            return dim_err("layer_norm", self.shape(x), self.shape(gain));
        }
        let (xhat, inv_std) = kernels::standardize(self.data(x), outer, len, inner, eps);
        let (g, b) = (self.data(gain), self.data(bias));
        let out = xhat
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let j = (idx / inner) % len;
                v * g[j] + b[j]
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let op = Op::LayerNorm { x, gain, bias, outer, len, inner, xhat, inv_std };
        Ok(self.record(&shape, out, op, &[x, gain, bias]))
    }

    /// 2-D convolution of a C×H×W map with O×C×k×k weights and optional bias of length O.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [c, h, wd] = self.value(x).dims3()?;
        let ws = self.shape(w);
        let (o, k) = match *ws {
            [o, wc, k1, k2] if wc == c && k1 == k2 => (o, k1),
            _ => return dim_err("conv2d", self.shape(x), self.shape(w)),
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return dim_err("conv2d bias", self.shape(w), self.shape(b));
            }
        }
        if stride == 0 || k > h + 2 * pad || k > wd + 2 * pad {
            return Err(Error::Shape(format!(
                "conv2d kernel {k} stride {stride} does not fit {h}×{wd} (pad {pad})"
            )));
        }
        let geom = ConvGeom { channels: c, height: h, width: wd, kernel: k, stride, pad };
        let cols = kernels::im2col(self.data(x), &geom);
        let n = geom.out_h() * geom.out_w();
        let mut out = kernels::matmul(self.data(w), &cols, o, geom.patch_len(), n);
        if let Some(b) = b {
            let bd = self.data(b);
            for (oc, row) in out.chunks_mut(n).enumerate() {
                row.iter_mut().for_each(|v| *v += bd[oc]);
            }
        }
        let shape = [o, geom.out_h(), geom.out_w()];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let cols = if needs_grad { cols } else { Vec::new() };
        Ok(self.record(&shape, out, Op::Conv2d { x, w, b, geom, cols }, &inputs))
    }

    /// Average pooling over `kernel`×`kernel` windows.
    ///
    /// Rows and columns that do not fill a final window are dropped (with a warning).
    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let [c, h, w] = self.value(x).dims3()?;
        if kernel == 0 || stride == 0 {
            return Err(Error::Config("avg_pool2d kernel and stride must be ≥ 1".into()));
        }
        if kernel > h || kernel > w {
            return Err(Error::Shape(format!("pool kernel {kernel} larger than {h}×{w}")));
        }
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        if !(h - kernel).is_multiple_of(stride) || !(w - kernel).is_multiple_of(stride) {
            warn!("avg_pool2d: {h}×{w} not divisible by stride {stride}; trimming right/bottom");
        }
        let xd = self.data(x);
        let norm = T::lit((kernel * kernel) as f64);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = T::zero();
                    for ky in 0..kernel {
                        let row = (ch * h + oy * stride + ky) * w + ox * stride;
                        s += xd[row..row + kernel].iter().copied().sum::<T>();
                    }
                    out[(ch * oh + oy) * ow + ox] = s / norm;
                }
            }
        }
        Ok(self.record(&[c, oh, ow], out, Op::AvgPool { x, kernel, stride }, &[x]))
    }

    /// Averages into an `out_h`×`out_w` grid with windows `[⌊i·H/g⌋, ⌈(i+1)·H/g⌉)`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [c, h, w] = self.value(x).dims3()?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(Error::Shape(format!(
                "adaptive pool grid {out_h}×{out_w} does not fit {h}×{w}"
            )));
        }
        let xd = self.data(x);
        let mut out = vec![T::zero(); c * out_h * out_w];
        for ch in 0..c {
            for oy in 0..out_h {
                let (y0, y1) = kernels::adaptive_window(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = kernels::adaptive_window(ox, w, out_w);
                    let mut s = T::zero();
                    for y in y0..y1 {
                        let row = (ch * h + y) * w;
                        s += xd[row + x0..row + x1].iter().copied().sum::<T>();
                    }
                    out[(ch * out_h + oy) * out_w + ox] = s / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        Ok(self.record(&[c, out_h, out_w], out, Op::AdaptivePool { x, out_h, out_w }, &[x]))
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::Config("upsample factor must be ≥ 1".into()));
        }
        let [_, h, w] = self.value(x).dims3()?;
        self.resize_nearest(x, h * factor, w * factor)
    }

    /// Nearest-neighbor resize to `out_h`×`out_w`; source index `⌊y·H/out_h⌋`.
    pub fn resize_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [c, h, w] = self.value(x).dims3()?;
        if out_h < h || out_w < w {
            return Err(Error::Shape(format!("cannot upsample {h}×{w} to {out_h}×{out_w}")));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            for y in 0..out_h {
                let row = (ch * h + y * h / out_h) * w;
                out.extend((0..out_w).map(|xx| xd[row + xx * w / out_w]));
            }
        }
        Ok(self.record(&[c, out_h, out_w], out, Op::Resize { x, out_h, out_w }, &[x]))
    }

    /// Scales every slice along the last axis to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let last = *self.shape(x).last().unwrap();
        let xd = self.data(x);
        let norms: Vec<T> = xd
            .chunks(last)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::min_positive_value()))
            .collect();
        let out = xd
            .chunks(last)
            .zip(&norms)
            .flat_map(|(r, &n)| r.iter().map(move |&v| v / n))
            .collect();
        let shape = self.shape(x).to_vec();
        self.record(&shape, out, Op::NormalizeRows { x, norms }, &[x])
    }

    /// Gathers flat-indexed entries of `x` into a vector.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if indices.is_empty() {
            return Err(Error::Contract("pick with no indices".into()));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("index {bad} out of range for {n} elements")));
        }
        let out = indices.iter().map(|&i| self.data(x)[i]).collect();
        let op = Op::Pick { x, indices: indices.to_vec() };
        Ok(self.record(&[indices.len()], out, op, &[x]))
    }

    /// Mean per-pixel cross-entropy of K×H×W logits against class indices of length H·W.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let [k, h, w] = self.value(logits).dims3()?;
        if targets.len() != h * w {
            return dim_err("cross_entropy", self.shape(logits), &[targets.len()]);
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Shape(format!("target class {bad} ≥ class count {k}")));
        }
        let logp = kernels::log_softmax_fwd(self.data(logits), 1, k, h * w);
        let n = T::lit(targets.len() as f64);
        let loss = -targets.iter().enumerate().map(|(p, &t)| logp[t * h * w + p]).sum::<T>() / n;
        let probs = logp.iter().map(|v| v.exp()).collect();
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.record(&[1], vec![loss], op, &[logits]))
    }

    /// Populates gradients of `loss` on every leaf that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].value.set_grad(gy);
                continue;
            }
            for (input, g) in self.vjp(id, &gy) {
                if self.nodes[input.0].needs_grad {
                    accumulate(&mut grads[input.0], g);
                }
            }
        }
        // leaves that the loss never reached still get a zero gradient
        for node in &mut self.nodes {
            if node.needs_grad && matches!(node.op, Op::Leaf) && node.value.grad().is_none() {
                let n = node.value.numel();
                node.value.set_grad(vec![T::zero(); n]);
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `gy`.
    fn vjp(&self, id: usize, gy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let [m, k] = self.value(*a).dims2().unwrap();
                let n = self.shape(*b)[1];
                let mut ga = vec![T::zero(); m * k];
                kernels::gemm_a_bt_acc(gy, self.data(*b), &mut ga, m, n, k);
                let mut gb = vec![T::zero(); k * n];
                kernels::gemm_at_b_acc(self.data(*a), gy, &mut gb, m, k, n);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, gy.to_vec()), (*b, gy.to_vec())],
            Op::Sub(a, b) => vec![(*a, gy.to_vec()), (*b, gy.iter().map(|&g| -g).collect())],
            Op::Mul(a, b) => {
                let ga = gy.iter().zip(self.data(*b)).map(|(&g, &v)| g * v).collect();
                let gb = gy.iter().zip(self.data(*a)).map(|(&g, &v)| g * v).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddBias(x, b) => {
                let last = self.shape(*b)[0];
                let mut gb = vec![T::zero(); last];
                for (i, &g) in gy.iter().enumerate() {
                    gb[i % last] += g;
                }
                vec![(*x, gy.to_vec()), (*b, gb)]
            }
            Op::Scale(x, c) => vec![(*x, gy.iter().map(|&g| g * *c).collect())],
            Op::Sum(x) => vec![(*x, vec![gy[0]; self.value(*x).numel()])],
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                vec![(*x, vec![gy[0] / T::lit(n as f64); n])]
            }
            Op::Transpose(x) => {
                let [m, n] = self.value(*x).dims2().unwrap();
                let mut g = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] = gy[j * m + i];
                    }
                }
                vec![(*x, g)]
            }
            Op::Reshape(x) => vec![(*x, gy.to_vec())],
            Op::Concat(parts) => {
                let width = *node.value.shape().last().unwrap();
                let rows = gy.len() / width;
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    let mut g = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        g.extend_from_slice(&gy[r * width + offset..r * width + offset + w]);
                    }
                    offset += w;
                    out.push((p, g));
                }
                out
            }
            Op::Softmax { x, outer, len, inner } => {
                let mut g = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..*len).map(|j| gy[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            g[at(j)] = y[at(j)] * (gy[at(j)] - dot);
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::LogSoftmax { x, outer, len, inner } => {
                let mut g = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let total: T = (0..*len).map(|j| gy[at(j)]).sum();
                        for j in 0..*len {
                            g[at(j)] = gy[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::Exp(x) => vec![(*x, gy.iter().zip(y).map(|(&g, &v)| g * v).collect())],
            Op::Ln(x) => vec![(*x, gy.iter().zip(self.data(*x)).map(|(&g, &v)| g / v).collect())],
            Op::Gelu(x) => {
                let g = gy.iter().zip(self.data(*x)).map(|(&g, &v)| g * gelu_grad(v)).collect();
                vec![(*x, g)]
            }
            Op::LayerNorm { x, gain, bias, outer, len, inner, xhat, inv_std } => {
                let gd = self.data(*gain);
                let mut gx = vec![T::zero(); y.len()];
                let mut gg = vec![T::zero(); *len];
                let mut gb = vec![T::zero(); *len];
                let n = T::lit(*len as f64);
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..*len {
                            let idx = at(j);
                            gg[j] += gy[idx] * xhat[idx];
                            gb[j] += gy[idx];
                            let d = gy[idx] * gd[j];
                            sum_d += d;
                            sum_dx += d * xhat[idx];
                        }
                        let r = inv_std[o * inner + i];
                        for j in 0..*len {
                            let idx = at(j);
                            let d = gy[idx] * gd[j];
                            gx[idx] = r * (d - sum_d / n - xhat[idx] * sum_dx / n);
                        }
                    }
                }
                vec![(*x, gx), (*gain, gg), (*bias, gb)]
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let o = self.shape(*w)[0];
                let n = geom.out_h() * geom.out_w();
                let kk = geom.patch_len();
                let mut out = Vec::with_capacity(3);
                if self.nodes[x.0].needs_grad {
                    let mut gcols = vec![T::zero(); kk * n];
                    kernels::gemm_at_b_acc(self.data(*w), gy, &mut gcols, o, kk, n);
                    let mut gx = vec![T::zero(); self.value(*x).numel()];
                    kernels::col2im_acc(&gcols, geom, &mut gx);
                    out.push((*x, gx));
                }
                let mut gw = vec![T::zero(); o * kk];
                kernels::gemm_a_bt_acc(gy, cols, &mut gw, o, n, kk);
                out.push((*w, gw));
                if let Some(b) = b {
                    out.push((*b, gy.chunks(n).map(|r| r.iter().copied().sum()).collect()));
                }
                out
            }
            Op::AvgPool { x, kernel, stride } => {
                let [c, h, w] = self.value(*x).dims3().unwrap();
                let [_, oh, ow] = node.value.dims3().unwrap();
                let norm = T::lit((kernel * kernel) as f64);
                let mut g = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = gy[(ch * oh + oy) * ow + ox] / norm;
                            for ky in 0..*kernel {
                                let row = (ch * h + oy * stride + ky) * w + ox * stride;
                                g[row..row + kernel].iter_mut().for_each(|e| *e += v);
                            }
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::AdaptivePool { x, out_h, out_w } => {
                let [c, h, w] = self.value(*x).dims3().unwrap();
                let mut g = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for oy in 0..*out_h {
                        let (y0, y1) = kernels::adaptive_window(oy, h, *out_h);
                        for ox in 0..*out_w {
                            let (x0, x1) = kernels::adaptive_window(ox, w, *out_w);
                            let area = T::lit(((y1 - y0) * (x1 - x0)) as f64);
                            let v = gy[(ch * out_h + oy) * out_w + ox] / area;
                            for yy in y0..y1 {
                                let row = (ch * h + yy) * w;
                                g[row + x0..row + x1].iter_mut().for_each(|e| *e += v);
                            }
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::Resize { x, out_h, out_w } => {
                let [c, h, w] = self.value(*x).dims3().unwrap();
                let mut g = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for yy in 0..*out_h {
                        let row = (ch * h + yy * h / out_h) * w;
                        for xx in 0..*out_w {
                            g[row + xx * w / out_w] += gy[(ch * out_h + yy) * out_w + xx];
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::NormalizeRows { x, norms } => {
                let last = *node.value.shape().last().unwrap();
                let mut g = vec![T::zero(); y.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let span = r * last..(r + 1) * last;
                    let dot: T = gy[span.clone()].iter().zip(&y[span.clone()]).map(|(&a, &b)| a * b).sum();
                    for i in span {
                        g[i] = (gy[i] - y[i] * dot) / nrm;
                    }
                }
                vec![(*x, g)]
            }
            Op::Pick { x, indices } => {
                let mut g = vec![T::zero(); self.value(*x).numel()];
                for (&i, &v) in indices.iter().zip(gy) {
                    g[i] += v;
                }
                vec![(*x, g)]
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let pixels = targets.len();
                let scale = gy[0] / T::lit(pixels as f64);
                let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (p, &t) in targets.iter().enumerate() {
                    g[t * pixels + p] -= scale;
                }
                vec![(*logits, g)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1.5, -2.0, 3.0, 4.25]));
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.5, -2.0, 3.0, 4.25]);

        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[3], &[0., 0., 0.]));
        let s = tape.softmax(z, 0).unwrap();
        for &v in tape.value(s).data() {
            assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let big = tape.constant(t(&[2], &[1000., 0.]));
        let s = tape.softmax(big, 0).unwrap();
        let d = tape.value(s).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert_relative_eq!(d[0], 1.0, epsilon = 1e-12);
        assert!(d[1] < 1e-300);
        assert!(tape.softmax(big, 1).is_err());
    }

    #[test]
    fn layer_norm_hand_cases() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(t(&[3], &[5., 5., 5.]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0., 0.]);

        let g2 = tape.constant(Tensor::ones(&[2]));
        let b2 = tape.constant(Tensor::zeros(&[2]));
        let x2 = tape.constant(t(&[2], &[1., -1.]));
        let y2 = tape.layer_norm(x2, g2, b2, 1e-5).unwrap();
        let d = tape.value(y2).data();
        assert_relative_eq!(d[0], 1.0, epsilon = 1e-5);
        assert_relative_eq!(d[1], -1.0, epsilon = 1e-5);
        assert!(matches!(tape.layer_norm(x2, g2, b2, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn gelu_fixed_points_and_asymptotes() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0., 30., -30.]));
        let y = tape.gelu(x);
        let d = tape.value(y).data();
        assert_eq!(d[0], 0.0);
        assert_relative_eq!(d[1], 30.0, epsilon = 1e-12);
        assert!(d[2].abs() < 1e-12);
    }

    #[test]
    fn pooling_hand_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let p = tape.avg_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[2.5]);
        assert!(tape.avg_pool2d(x, 3, 3).is_err());

        let c = tape.constant(Tensor::full(&[2, 4, 4], 0.75));
        let p = tape.avg_pool2d(c, 2, 2).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn avg_pool_trims_non_divisible_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 5, 5], |i| i as f64));
        let p = tape.avg_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.shape(p), &[1, 2, 2]);
        // window rows 0..2, cols 0..2 of the 5×5 grid
        assert_eq!(tape.value(p).data()[0], (0. + 1. + 5. + 6.) / 4.0);
    }

    #[test]
    fn upsample_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 3], |i| i as f64));
        let same = tape.upsample_nearest(x, 1).unwrap();
        assert_eq!(tape.value(same), tape.value(x));
        assert!(tape.upsample_nearest(x, 0).is_err());

        let v = tape.constant(t(&[1, 1, 1], &[7.5]));
        let u = tape.upsample_nearest(v, 2).unwrap();
        assert_eq!(tape.shape(u), &[1, 2, 2]);
        assert_eq!(tape.value(u).data(), &[7.5; 4]);
    }

    #[test]
    fn backward_on_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1., -2., 0.5]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1., 1., 1.]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1., -2., 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2., -4., 1.]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f64>::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_never_receive_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f64>::ones(&[2]));
        let c = tape.constant(Tensor::<f64>::ones(&[2]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn unreached_parameters_get_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f64>::ones(&[2]));
        let unused = tape.param(Tensor::<f64>::ones(&[3]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_k() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::<f64>::zeros(&[4, 2, 3]));
        let ce = tape.cross_entropy(logits, &[0, 1, 2, 3, 0, 1]).unwrap();
        assert_relative_eq!(tape.value(ce).data()[0], 4f64.ln(), epsilon = 1e-14);
        assert!(tape.cross_entropy(logits, &[0, 1, 2, 3, 0, 4]).is_err());
    }
}
