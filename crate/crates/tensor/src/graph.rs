//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order. Inputs of a node
//! always precede it, so walking the tape backwards is a reverse topological
//! traversal that visits each node once.

use crate::conv::{self, ConvShape, ConvTranspose2dSpec, ConvTransposeShape, Conv2dSpec};
use crate::element::Element;
use crate::error::{invalid, Result, TensorError};
use crate::tensor::Tensor;

/// Clamp applied to the argument of [`Graph::acos`].
pub const ACOS_CLAMP_EPS: f64 = 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-defined differentiable operation.
pub trait CustomOp<T: Element> {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// Cotangents for each input given the output cotangent. Returning `None`
    /// for an input means "no gradient".
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Element> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
        shape: ConvShape,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        spec: ConvTranspose2dSpec,
        shape: ConvTransposeShape,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<T>,
        xhat: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Square(Var),
    Log(Var),
    Acos(Var),
    Mean(Var),
    Sum(Var),
    ResizeHalf(Var),
    ConcatChannels(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    ChannelSum(Var),
    NormalizeChannels { x: Var, norms: Vec<T> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Single-owner; build one per forward/backward pass.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by graph op");
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` that is cut from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (b, c, h, wd) = self.value(x).dims4("conv2d")?;
        let (o, ci, kh, kw) = self.value(w).dims4("conv2d")?;
        if ci != c || kh != kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![o, c, kh, kh],
                got: self.value(w).shape().to_vec(),
            });
        }
        if let Some(bv) = bias {
            if self.value(bv).shape() != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    expected: vec![o],
                    got: self.value(bv).shape().to_vec(),
                });
            }
        }
        let (oh, ow) = spec.output_size(h, wd, kh)?;
        let shape = ConvShape {
            batch: b,
            in_c: c,
            h,
            w: wd,
            out_c: o,
            k: kh,
            oh,
            ow,
        };
        let y = conv::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|bv| self.value(bv).data()),
            &shape,
            &spec,
        );
        let value = Tensor::new(&[b, o, oh, ow], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                bias,
                spec,
                shape,
            },
            &inputs,
        ))
    }

    /// Transposed convolution with weights `[cin, cout, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        spec: ConvTranspose2dSpec,
    ) -> Result<Var> {
        let (b, c, h, wd) = self.value(x).dims4("conv_transpose2d")?;
        let (ci, o, kh, kw) = self.value(w).dims4("conv_transpose2d")?;
        if ci != c || kh != kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                expected: vec![c, o, kh, kh],
                got: self.value(w).shape().to_vec(),
            });
        }
        if let Some(bv) = bias {
            if self.value(bv).shape() != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv_transpose2d bias",
                    expected: vec![o],
                    got: self.value(bv).shape().to_vec(),
                });
            }
        }
        let (oh, ow) = spec.output_size(h, wd, kh)?;
        let shape = ConvTransposeShape {
            batch: b,
            in_c: c,
            h,
            w: wd,
            out_c: o,
            k: kh,
            oh,
            ow,
        };
        let y = conv::conv_transpose2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|bv| self.value(bv).data()),
            &shape,
            &spec,
        );
        let value = Tensor::new(&[b, o, oh, ow], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                x,
                w,
                bias,
                spec,
                shape,
            },
            &inputs,
        ))
    }

    /// Per-(sample, channel) standardization over the spatial axes followed by
    /// a per-channel affine map `gamma * xhat + beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("instance_norm")?;
        let n = h * w;
        if n < 2 {
            return Err(invalid("instance_norm", format!("spatial size {h}x{w} < 2")));
        }
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "instance_norm",
                    expected: vec![c],
                    got: self.value(p).shape().to_vec(),
                });
            }
        }
        let eps = T::of(eps);
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let inv_n = T::of(1.0 / n as f64);
        let mut inv_std = Vec::with_capacity(b * c);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut y = vec![T::zero(); xs.len()];
        for bc in 0..b * c {
            let ch = bc % c;
            let plane = &xs[bc * n..(bc + 1) * n];
            let mean = plane.iter().copied().sum::<T>() * inv_n;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let is = (var + eps).sqrt().recip();
            inv_std.push(is);
            for i in 0..n {
                let xh = (plane[i] - mean) * is;
                xhat[bc * n + i] = xh;
                y[bc * n + i] = xh * g[ch] + be[ch];
            }
        }
        let value = Tensor::new(&[b, c, h, w], y)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            },
            &[x, gamma, beta],
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.unary(x, move |v| if v > T::zero() { v } else { v * s }, Op::LeakyRelu(x, s))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| (T::one() + (-v).exp()).recip(), Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, move |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, move |v| v + c, Op::AddScalar(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Natural logarithm; the input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= T::zero()) {
            return Err(invalid("log", format!("non-positive input {bad:?}")));
        }
        Ok(self.unary(x, |v| v.ln(), Op::Log(x)))
    }

    /// Inputs are clamped to `[-1, 1]`; the gradient is zeroed within
    /// [`ACOS_CLAMP_EPS`] of either end.
    pub fn acos(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(-T::one()).min(T::one()).acos(), Op::Acos(x))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::of(t.numel() as f64));
        self.push(value, Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// 2x2 average pooling with stride 2.
    pub fn resize_half(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("resize_half")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("resize_half", format!("odd spatial size {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xs = self.value(x).data();
        let quarter = T::of(0.25);
        let mut y = vec![T::zero(); b * c * oh * ow];
        for bc in 0..b * c {
            let src = &xs[bc * h * w..(bc + 1) * h * w];
            let dst = &mut y[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = 2 * oy * w + 2 * ox;
                    dst[oy * ow + ox] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], y)?;
        Ok(self.push(value, Op::ResizeHalf(x), &[x]))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| invalid("concat_channels", "no inputs"))?;
        let (b, _, h, w) = self.value(first).dims4("concat_channels")?;
        let mut channels = Vec::with_capacity(xs.len());
        for &v in xs {
            let (b2, c2, h2, w2) = self.value(v).dims4("concat_channels")?;
            if (b2, h2, w2) != (b, h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    expected: vec![b, c2, h, w],
                    got: self.value(v).shape().to_vec(),
                });
            }
            channels.push(c2);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for (&v, &c) in xs.iter().zip(&channels) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let value = Tensor::new(&[b, total, h, w], data)?;
        Ok(self.push(value, Op::ConcatChannels(xs.to_vec()), xs))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("slice_channels")?;
        if start + len > c || len == 0 {
            return Err(invalid(
                "slice_channels",
                format!("range {start}..{} outside {c} channels", start + len),
            ));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            let off = (bi * c + start) * plane;
            data.extend_from_slice(&src[off..off + len * plane]);
        }
        let value = Tensor::new(&[b, len, h, w], data)?;
        Ok(self.push(value, Op::SliceChannels { x, start }, &[x]))
    }

    /// Sum over the channel axis, `[b, c, h, w] -> [b, 1, h, w]`.
    pub fn channel_sum(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("channel_sum")?;
        let plane = h * w;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); b * plane];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for (d, &s) in data[bi * plane..(bi + 1) * plane].iter_mut().zip(&src[off..off + plane]) {
                    *d += s;
                }
            }
        }
        let value = Tensor::new(&[b, 1, h, w], data)?;
        Ok(self.push(value, Op::ChannelSum(x), &[x]))
    }

    /// Scale every pixel's channel vector to unit Euclidean length.
    pub fn normalize_channels(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("normalize_channels")?;
        let plane = h * w;
        let src = self.value(x).data();
        let mut norms = vec![T::zero(); b * plane];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for (n, &s) in norms[bi * plane..(bi + 1) * plane].iter_mut().zip(&src[off..off + plane]) {
                    *n += s * s;
                }
            }
        }
        if norms.iter().any(|&n| n <= T::zero()) {
            return Err(invalid("normalize_channels", "zero-length channel vector"));
        }
        for n in norms.iter_mut() {
            *n = n.sqrt();
        }
        let mut data = src.to_vec();
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for (d, &n) in data[off..off + plane].iter_mut().zip(&norms[bi * plane..]) {
                    *d = *d / n;
                }
            }
        }
        let value = Tensor::new(&[b, c, h, w], data)?;
        Ok(self.push(value, Op::NormalizeChannels { x, norms }, &[x]))
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = op.forward(&values)?;
        Ok(self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        ))
    }

    fn inputs_of(op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, bias, .. } | Op::ConvTranspose2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(*bias);
                v
            }
            Op::InstanceNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu(x)
            | Op::LeakyRelu(x, _)
            | Op::Sigmoid(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Abs(x)
            | Op::Square(x)
            | Op::Log(x)
            | Op::Acos(x)
            | Op::Mean(x)
            | Op::Sum(x)
            | Op::ResizeHalf(x)
            | Op::SliceChannels { x, .. }
            | Op::ChannelSum(x)
            | Op::NormalizeChannels { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ConcatChannels(xs) => xs.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let inputs = Self::inputs_of(&node.op);
            if let Some(&bad) = inputs.iter().find(|v| v.0 >= i) {
                return Err(TensorError::Cycle {
                    node: i,
                    input: bad.0,
                });
            }
            let contribs = self.node_backward(node, &gout)?;
            debug_assert_eq!(contribs.len(), inputs.len());
            for (v, g) in inputs.into_iter().zip(contribs) {
                let Some(g) = g else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                debug_assert!(g.all_finite(), "non-finite gradient in backward");
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Keep only leaf gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn node_backward(&self, node: &Node<T>, gout: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let go = gout.data();
        let elementwise = |x: Var, f: &dyn Fn(T, T, T) -> T| -> Result<Vec<Option<Tensor<T>>>> {
            // f(input, output, grad_out)
            let xi = val(x).data();
            let yo = node.value.data();
            let data = (0..go.len()).map(|i| f(xi[i], yo[i], go[i])).collect();
            Ok(vec![Some(Tensor::new(val(x).shape(), data)?)])
        };
        match &node.op {
            Op::Leaf => Ok(Vec::new()),
            Op::Conv2d {
                x,
                w,
                bias,
                spec,
                shape,
            } => {
                let g = conv::conv2d_backward(
                    val(*x).data(),
                    val(*w).data(),
                    go,
                    shape,
                    spec,
                    (need(*x), need(*w), bias.is_some_and(need)),
                );
                let mut out = vec![
                    g.dx.map(|d| Tensor::new(val(*x).shape(), d)).transpose()?,
                    g.dweight.map(|d| Tensor::new(val(*w).shape(), d)).transpose()?,
                ];
                if let Some(bv) = bias {
                    out.push(g.dbias.map(|d| Tensor::new(val(*bv).shape(), d)).transpose()?);
                }
                Ok(out)
            }
            Op::ConvTranspose2d {
                x,
                w,
                bias,
                spec,
                shape,
            } => {
                let g = conv::conv_transpose2d_backward(
                    val(*x).data(),
                    val(*w).data(),
                    go,
                    shape,
                    spec,
                    (need(*x), need(*w), bias.is_some_and(need)),
                );
                let mut out = vec![
                    g.dx.map(|d| Tensor::new(val(*x).shape(), d)).transpose()?,
                    g.dweight.map(|d| Tensor::new(val(*w).shape(), d)).transpose()?,
                ];
                if let Some(bv) = bias {
                    out.push(g.dbias.map(|d| Tensor::new(val(*bv).shape(), d)).transpose()?);
                }
                Ok(out)
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta: _,
                inv_std,
                xhat,
            } => {
                let (b, c, h, w) = val(*x).dims4("instance_norm")?;
                let n = h * w;
                let g = val(*gamma).data();
                let mut dx = vec![T::zero(); b * c * n];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let inv_n = T::of(1.0 / n as f64);
                for bc in 0..b * c {
                    let ch = bc % c;
                    let gp = &go[bc * n..(bc + 1) * n];
                    let xh = &xhat[bc * n..(bc + 1) * n];
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for i in 0..n {
                        sum_g += gp[i];
                        sum_gx += gp[i] * xh[i];
                    }
                    dgamma[ch] += sum_gx;
                    dbeta[ch] += sum_g;
                    // dxhat = g * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                    let k = g[ch] * inv_std[bc];
                    let mg = sum_g * inv_n;
                    let mgx = sum_gx * inv_n;
                    for i in 0..n {
                        dx[bc * n + i] = k * (gp[i] - mg - xh[i] * mgx);
                    }
                }
                Ok(vec![
                    Some(Tensor::new(val(*x).shape(), dx)?),
                    Some(Tensor::new(&[c], dgamma)?),
                    Some(Tensor::new(&[c], dbeta)?),
                ])
            }
            Op::Relu(x) => elementwise(*x, &|xi, _, g| if xi > T::zero() { g } else { T::zero() }),
            Op::LeakyRelu(x, s) => {
                let s = *s;
                elementwise(*x, &move |xi, _, g| if xi > T::zero() { g } else { g * s })
            }
            Op::Sigmoid(x) => elementwise(*x, &|_, y, g| g * y * (T::one() - y)),
            Op::Scale(x, c) => {
                let c = *c;
                elementwise(*x, &move |_, _, g| g * c)
            }
            Op::AddScalar(x) => elementwise(*x, &|_, _, g| g),
            Op::Abs(x) => elementwise(*x, &|xi, _, g| {
                if xi > T::zero() {
                    g
                } else if xi < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            }),
            Op::Square(x) => elementwise(*x, &|xi, _, g| T::of(2.0) * xi * g),
            Op::Log(x) => elementwise(*x, &|xi, _, g| g / xi),
            Op::Acos(x) => {
                let lim = T::one() - T::of(ACOS_CLAMP_EPS);
                elementwise(*x, &move |xi, _, g| {
                    if xi.abs() > lim {
                        T::zero()
                    } else {
                        -g / (T::one() - xi * xi).sqrt()
                    }
                })
            }
            Op::Add(_, _) => Ok(vec![Some(gout.clone()), Some(gout.clone())]),
            Op::Sub(_, _) => Ok(vec![Some(gout.clone()), Some(gout.map(|v| -v))]),
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let da = go.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                let db = go.iter().zip(av).map(|(&g, &x)| g * x).collect();
                Ok(vec![
                    Some(Tensor::new(val(*a).shape(), da)?),
                    Some(Tensor::new(val(*b).shape(), db)?),
                ])
            }
            Op::Mean(x) => {
                let t = val(*x);
                let g = go[0] / T::of(t.numel() as f64);
                Ok(vec![Some(Tensor::full(t.shape(), g))])
            }
            Op::Sum(x) => Ok(vec![Some(Tensor::full(val(*x).shape(), go[0]))]),
            Op::ResizeHalf(x) => {
                let (b, c, h, w) = val(*x).dims4("resize_half")?;
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let mut dx = vec![T::zero(); b * c * h * w];
                for bc in 0..b * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = go[bc * oh * ow + oy * ow + ox] * quarter;
                            let i = bc * h * w + 2 * oy * w + 2 * ox;
                            dx[i] = g;
                            dx[i + 1] = g;
                            dx[i + w] = g;
                            dx[i + w + 1] = g;
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(val(*x).shape(), dx)?)])
            }
            Op::ConcatChannels(xs) => {
                let (b, total, h, w) = node.value.dims4("concat_channels")?;
                let plane = h * w;
                let mut offset = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &v in xs {
                    let c = val(v).shape()[1];
                    let mut d = Vec::with_capacity(b * c * plane);
                    for bi in 0..b {
                        let start = (bi * total + offset) * plane;
                        d.extend_from_slice(&go[start..start + c * plane]);
                    }
                    offset += c;
                    out.push(Some(Tensor::new(val(v).shape(), d)?));
                }
                Ok(out)
            }
            Op::SliceChannels { x, start } => {
                let (b, c, h, w) = val(*x).dims4("slice_channels")?;
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut dx = vec![T::zero(); b * c * plane];
                for bi in 0..b {
                    let dst = (bi * c + start) * plane;
                    dx[dst..dst + len * plane]
                        .copy_from_slice(&go[bi * len * plane..(bi + 1) * len * plane]);
                }
                Ok(vec![Some(Tensor::new(val(*x).shape(), dx)?)])
            }
            Op::ChannelSum(x) => {
                let (b, c, h, w) = val(*x).dims4("channel_sum")?;
                let plane = h * w;
                let mut dx = Vec::with_capacity(b * c * plane);
                for bi in 0..b {
                    for _ in 0..c {
                        dx.extend_from_slice(&go[bi * plane..(bi + 1) * plane]);
                    }
                }
                Ok(vec![Some(Tensor::new(val(*x).shape(), dx)?)])
            }
            Op::NormalizeChannels { x, norms } => {
                // y = x / |x|;  dx = (g - y * <g, y>) / |x|
                let (b, c, h, w) = val(*x).dims4("normalize_channels")?;
                let plane = h * w;
                let y = node.value.data();
                let mut dots = vec![T::zero(); b * plane];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        for p in 0..plane {
                            dots[bi * plane + p] += go[off + p] * y[off + p];
                        }
                    }
                }
                let mut dx = vec![T::zero(); b * c * plane];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        for p in 0..plane {
                            let q = bi * plane + p;
                            dx[off + p] = (go[off + p] - y[off + p] * dots[q]) / norms[q];
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(val(*x).shape(), dx)?)])
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let out = op.backward(&values, &node.value, gout)?;
                if out.len() != inputs.len() {
                    return Err(invalid(
                        "custom",
                        format!("{} returned {} gradients for {} inputs", op.name(), out.len(), inputs.len()),
                    ));
                }
                for (g, v) in out.iter().zip(&values) {
                    if let Some(g) = g {
                        same_shape(op.name(), v, g)?;
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T: Element> {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of `v`, or `None` if no path from the loss reaches it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when unreachable.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}
