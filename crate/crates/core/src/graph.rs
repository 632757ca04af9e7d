//! Recorded forward computation with exact reverse-mode gradients.
//!
//! A [`Graph`] is a tape: every primitive appends a node holding its output
//! value and whatever it needs for the backward pass. Nodes can only refer to
//! earlier nodes, so the tape is already in topological order and
//! [`Graph::backward`] simply walks it in reverse, visiting each node once.
//!
//! ```
//! use contour_saliency::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::from_f64([1, 1, 1, 3], &[-1.0, 0.5, 2.0]).unwrap());
//! let y = g.relu(x);
//! let loss = g.sum(y);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 1.0]);
//! ```

use crate::error::{Error, Result};
use crate::ops::conv::{conv2d_backward, conv2d_forward, ConvGeometry, Padding};
use crate::ops::{pool, resample};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Probabilities are clamped into `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

enum Op<E> {
    /// Constant input; never receives a gradient.
    Input,
    /// Differentiable leaf (parameter or probed input).
    Leaf,
    Conv2d {
        x: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool(Var),
    Upsample(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, E),
    Sum(Var),
    LinearCombination(Vec<(Var, E)>),
    /// `att[n,0] ⊙ x[n,c]` for every channel `c`.
    BroadcastMul {
        att: Var,
        x: Var,
    },
    /// Per-(sample, channel) spatial standardization; saves `1/σ`.
    Standardize {
        x: Var,
        inv_std: Vec<E>,
    },
    MeanChannels(Var),
    Bce {
        pred: Var,
        target: Tensor<E>,
        weight: Option<Tensor<E>>,
    },
}

impl<E> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::MaxPool { .. } => "max_pool2d",
            Op::AvgPool(_) => "avg_pool2d",
            Op::Upsample(_) => "upsample_bilinear",
            Op::Concat(_) => "concat_channels",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddScalar(_) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::LinearCombination(_) => "linear_combination",
            Op::BroadcastMul { .. } => "broadcast_mul",
            Op::Standardize { .. } => "standardize_spatial",
            Op::MeanChannels(_) => "mean_channels",
            Op::Bce { .. } => "bce",
        }
    }
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    needs_grad: bool,
}

/// Tape of primitive applications for one forward/backward step.
pub struct Graph<E: Element = f64> {
    nodes: Vec<Node<E>>,
    leaf_grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a constant that does not receive gradients.
    pub fn input(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Records a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// First node whose value contains NaN or ±∞.
    pub fn first_non_finite(&self) -> Option<Var> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(Var)
    }

    /// Hash of every discrete choice the forward pass made: ReLU input signs,
    /// pooling argmaxes, and which cross-entropy inputs hit the clamp. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let lo = E::from_f64(BCE_CLAMP);
        let hi = E::one() - lo;
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) => {
                    i.hash(&mut h);
                    for &v in self.value(*x).data() {
                        (v > E::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::Bce { pred, .. } => {
                    i.hash(&mut h);
                    for &p in self.value(*pred).data() {
                        (p < lo || p > hi).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Human-readable label such as `conv2d #17 [8, 16, 32, 32]`.
    pub fn describe(&self, v: Var) -> String {
        let n = &self.nodes[v.0];
        format!("{} #{} {:?}", n.op.name(), v.0, n.value.shape())
    }

    // ------------------------------------------------------------------
    // Primitives

    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.shape(x),
            self.shape(weight),
            self.shape(bias),
            stride,
            padding,
        )?;
        if geom.oh == 0 || geom.ow == 0 {
            return Err(Error::invalid("conv2d", "empty output"));
        }
        let out = conv2d_forward(self.value(x), self.value(weight), self.value(bias), &geom);
        let needs = self.needs(&[x, weight, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > E::zero() { v } else { E::zero() });
        let needs = self.needs(&[x]);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let needs = self.needs(&[x]);
        self.push(out, Op::Sigmoid(x), needs)
    }

    /// Adaptive max pooling to an `out_h × out_w` grid.
    pub fn max_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        pool::check_target("max_pool2d", self.shape(x), out_h, out_w)?;
        let (out, argmax) = pool::max_pool_forward(self.value(x), out_h, out_w);
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::MaxPool { x, argmax }, needs))
    }

    /// Adaptive average pooling to an `out_h × out_w` grid.
    pub fn avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        pool::check_target("avg_pool2d", self.shape(x), out_h, out_w)?;
        let out = pool::avg_pool_forward(self.value(x), out_h, out_w);
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::AvgPool(x), needs))
    }

    /// Bilinear resampling to `out_h × out_w`.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("upsample_bilinear", "output dims must be positive"));
        }
        let out = resample::upsample_forward(self.value(x), out_h, out_w);
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Upsample(x), needs))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::invalid("concat_channels", "no inputs"));
        };
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut channels = 0;
        for &v in xs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape("concat_channels", self.shape(first), self.shape(v)));
            }
            channels += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * channels * plane);
        for s in 0..n {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[s * c * plane..(s + 1) * c * plane]);
            }
        }
        let out = Tensor::new([n, channels, h, w], out)?;
        let needs = self.needs(xs);
        Ok(self.push(out, Op::Concat(xs.to_vec()), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// Elementwise product of same-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn add_scalar(&mut self, x: Var, s: E) -> Var {
        let out = self.value(x).map(|v| v + s);
        let needs = self.needs(&[x]);
        self.push(out, Op::AddScalar(x), needs)
    }

    pub fn scale(&mut self, x: Var, s: E) -> Var {
        let out = self.value(x).map(|v| v * s);
        let needs = self.needs(&[x]);
        self.push(out, Op::Scale(x, s), needs)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(&[x]);
        self.push(out, Op::Sum(x), needs)
    }

    /// `Σ wᵢ·xᵢ` over same-shaped inputs.
    pub fn linear_combination(&mut self, terms: &[(Var, E)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::invalid("linear_combination", "no terms"));
        };
        let mut out = Tensor::zeros(self.shape(first));
        for &(v, w) in terms {
            if self.shape(v) != out.shape() {
                return Err(Error::shape("linear_combination", out.shape(), self.shape(v)));
            }
            for (o, &x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += w * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let needs = self.needs(&vars);
        Ok(self.push(out, Op::LinearCombination(terms.to_vec()), needs))
    }

    /// Multiplies every channel of `x` (N×C×H×W) by the single-channel map
    /// `att` (N×1×H×W).
    pub fn broadcast_mul(&mut self, att: Var, x: Var) -> Result<Var> {
        let (an, ac, ah, aw) = self.value(att).dims4()?;
        let (n, c, h, w) = self.value(x).dims4()?;
        if ac != 1 || (an, ah, aw) != (n, h, w) {
            return Err(Error::shape("broadcast_mul", self.shape(att), self.shape(x)));
        }
        let plane = h * w;
        let a = self.value(att).data();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let map = &a[(i / c) * plane..(i / c + 1) * plane];
            chunk.iter_mut().zip(map).for_each(|(v, &m)| *v *= m);
        }
        let needs = self.needs(&[att, x]);
        Ok(self.push(out, Op::BroadcastMul { att, x }, needs))
    }

    /// `(x − μ)/√(σ² + ε)` with population statistics taken over the spatial
    /// plane of each sample and channel.
    pub fn standardize_spatial(&mut self, x: Var, eps: E) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let count = E::from_f64(plane as f64);
        let mut out = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(out.numel() / plane.max(1));
        for chunk in out.data_mut().chunks_mut(plane) {
            let mean = chunk.iter().copied().sum::<E>() / count;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / count;
            let inv = (var + eps).sqrt().recip();
            // a rounded mean can miss a constant plane by an ulp
            if chunk.iter().all(|&v| v == chunk[0]) {
                chunk.fill(E::zero());
            } else {
                chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            }
            inv_std.push(inv);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Standardize { x, inv_std }, needs))
    }

    /// Average over the channel axis, producing N×1×H×W.
    pub fn mean_channels(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let scale = E::from_f64(1.0 / c as f64);
        let src = self.value(x).data();
        let mut out = vec![E::zero(); n * plane];
        for s in 0..n {
            let dst = &mut out[s * plane..(s + 1) * plane];
            for ch in 0..c {
                let p = &src[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                dst.iter_mut().zip(p).for_each(|(o, &v)| *o += v);
            }
            dst.iter_mut().for_each(|o| *o *= scale);
        }
        let out = Tensor::new([n, 1, h, w], out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::MeanChannels(x), needs))
    }

    /// Sum-reduced binary cross entropy of `pred` against `target`, optionally
    /// weighted per element: `−Σ m·[y·ln p + (1−y)·ln(1−p)]`.
    pub fn bce(&mut self, pred: Var, target: &Tensor<E>, weight: Option<&Tensor<E>>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape("bce", self.shape(pred), target.shape()));
        }
        if let Some(m) = weight {
            if m.shape() != target.shape() {
                return Err(Error::shape("bce", target.shape(), m.shape()));
            }
        }
        let p = self.value(pred).data();
        let y = target.data();
        let lo = E::from_f64(BCE_CLAMP);
        let hi = E::one() - lo;
        let mut total = E::zero();
        for i in 0..p.len() {
            let pc = p[i].max(lo).min(hi);
            let term = y[i] * pc.ln() + (E::one() - y[i]) * (E::one() - pc).ln();
            total -= weight.map_or(E::one(), |m| m.data()[i]) * term;
        }
        let needs = self.needs(&[pred]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Bce {
                pred,
                target: target.clone(),
                weight: weight.cloned(),
            },
            needs,
        ))
    }

    // ------------------------------------------------------------------
    // Reverse pass

    /// Propagates `d root / d node` to every differentiable leaf, adding into
    /// the leaf gradients left by earlier calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<E>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::full(root_value.shape(), E::one()));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Leaf => match &mut self.leaf_grads[id] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                },
                _ => self.propagate(id, g, &mut grads),
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Tensor<E>>], to: Var, g: Tensor<E>) {
        if !self.nodes[to.0].needs_grad {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.add_assign(&g).expect("gradient shape"),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Input | Op::Leaf => unreachable!("handled by caller"),
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
            } => {
                let need_dx = self.nodes[x.0].needs_grad;
                let need_dp = self.needs(&[*weight, *bias]);
                let r = conv2d_backward(
                    self.value(*x),
                    self.value(*weight),
                    &g,
                    geom,
                    need_dx,
                    need_dp,
                );
                if let Some(dx) = r.dx {
                    self.send(grads, *x, dx);
                }
                if let Some(dw) = r.dweight {
                    self.send(grads, *weight, dw);
                }
                if let Some(db) = r.dbias {
                    self.send(grads, *bias, db);
                }
            }
            Op::Relu(x) => {
                let mut dx = g;
                for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if v <= E::zero() {
                        *d = E::zero();
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = g;
                for (d, &s) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= s * (E::one() - s);
                }
                self.send(grads, *x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let dx = pool::max_pool_backward(self.shape(*x), argmax, &g);
                self.send(grads, *x, dx);
            }
            Op::AvgPool(x) => {
                let dx = pool::avg_pool_backward(self.shape(*x), &g);
                self.send(grads, *x, dx);
            }
            Op::Upsample(x) => {
                let dx = resample::upsample_backward(self.shape(*x), &g);
                self.send(grads, *x, dx);
            }
            Op::Concat(xs) => {
                let (n, channels, h, w) = node.value.dims4().expect("concat output");
                let plane = h * w;
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.nodes[v.0].needs_grad {
                        let mut part = Vec::with_capacity(n * c * plane);
                        for s in 0..n {
                            let start = (s * channels + offset) * plane;
                            part.extend_from_slice(&g.data()[start..start + c * plane]);
                        }
                        let part = Tensor::new(self.shape(v), part).expect("concat slice");
                        self.send(grads, v, part);
                    }
                    offset += c;
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g);
            }
            Op::Mul(a, b) => {
                let times = |other: Var| {
                    let mut d = g.clone();
                    for (d, &v) in d.data_mut().iter_mut().zip(self.value(other).data()) {
                        *d *= v;
                    }
                    d
                };
                if self.nodes[a.0].needs_grad {
                    self.send(grads, *a, times(*b));
                }
                if self.nodes[b.0].needs_grad {
                    self.send(grads, *b, times(*a));
                }
            }
            Op::AddScalar(x) => self.send(grads, *x, g),
            Op::Scale(x, s) => {
                let s = *s;
                self.send(grads, *x, g.map(|v| v * s));
            }
            Op::Sum(x) => {
                let up = g.data()[0];
                self.send(grads, *x, Tensor::full(self.shape(*x), up));
            }
            Op::LinearCombination(terms) => {
                for &(v, w) in terms {
                    self.send(grads, v, g.map(|d| d * w));
                }
            }
            Op::BroadcastMul { att, x } => {
                let (n, c, h, w) = node.value.dims4().expect("broadcast output");
                let plane = h * w;
                let a = self.value(*att).data();
                let xv = self.value(*x).data();
                let gd = g.data();
                if self.nodes[att.0].needs_grad {
                    let mut da = vec![E::zero(); n * plane];
                    for s in 0..n {
                        let dst = &mut da[s * plane..(s + 1) * plane];
                        for ch in 0..c {
                            let off = (s * c + ch) * plane;
                            for p in 0..plane {
                                dst[p] += gd[off + p] * xv[off + p];
                            }
                        }
                    }
                    let da = Tensor::new([n, 1, h, w], da).expect("att grad");
                    self.send(grads, *att, da);
                }
                if self.nodes[x.0].needs_grad {
                    let mut dx = g.clone();
                    for (i, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                        let map = &a[(i / c) * plane..(i / c + 1) * plane];
                        chunk.iter_mut().zip(map).for_each(|(d, &m)| *d *= m);
                    }
                    self.send(grads, *x, dx);
                }
            }
            Op::Standardize { x, inv_std } => {
                let (_, _, h, w) = node.value.dims4().expect("standardize output");
                let plane = h * w;
                let count = E::from_f64(plane as f64);
                let z = node.value.data();
                let mut dx = g;
                for (i, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                    let zc = &z[i * plane..(i + 1) * plane];
                    let mean_g = chunk.iter().copied().sum::<E>() / count;
                    let mean_gz = chunk.iter().zip(zc).map(|(&d, &v)| d * v).sum::<E>() / count;
                    for (d, &v) in chunk.iter_mut().zip(zc) {
                        *d = inv_std[i] * (*d - mean_g - v * mean_gz);
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::MeanChannels(x) => {
                let (n, c, h, w) = self.value(*x).dims4().expect("mean input");
                let plane = h * w;
                let scale = E::from_f64(1.0 / c as f64);
                let mut dx = Vec::with_capacity(n * c * plane);
                for s in 0..n {
                    let src = &g.data()[s * plane..(s + 1) * plane];
                    for _ in 0..c {
                        dx.extend(src.iter().map(|&v| v * scale));
                    }
                }
                let dx = Tensor::new([n, c, h, w], dx).expect("mean grad");
                self.send(grads, *x, dx);
            }
            Op::Bce {
                pred,
                target,
                weight,
            } => {
                let up = g.data()[0];
                let lo = E::from_f64(BCE_CLAMP);
                let hi = E::one() - lo;
                let p = self.value(*pred).data();
                let y = target.data();
                let dp: Vec<E> = (0..p.len())
                    .map(|i| {
                        if p[i] < lo || p[i] > hi {
                            return E::zero();
                        }
                        let m = weight.as_ref().map_or(E::one(), |m| m.data()[i]);
                        -up * m * (y[i] / p[i] - (E::one() - y[i]) / (E::one() - p[i]))
                    })
                    .collect();
                let dp = Tensor::new(self.shape(*pred), dp).expect("bce grad");
                self.send(grads, *pred, dp);
            }
        }
    }
}

/// Logistic function, branching on sign so neither side overflows.
pub fn sigmoid<E: Element>(v: E) -> E {
    if v >= E::zero() {
        E::one() / (E::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([1, 1, 2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn([1, 1, 2, 2], |i| i as f64));
        let y = g.scale(x, 3.0);
        let s = g.sum(y);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0; 4]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0; 4]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.input(Tensor::full([1, 1, 1, 2], 2.0));
        let x = g.leaf(Tensor::full([1, 1, 1, 2], 1.0));
        let y = g.add(c, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        for v in [0.3f64, 2.0, 17.0] {
            assert!((sigmoid(v) + sigmoid(-v) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros([1, 1, 2, 2]));
        let b = g.input(Tensor::zeros([1, 1, 3, 2]));
        assert!(matches!(
            g.concat_channels(&[a, b]),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
