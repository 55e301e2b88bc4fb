//! Reverse-mode computation tape.

use super::ops::{self, ConvGeom};
use super::{cast, Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local gradient rule for operations defined outside the tape.
pub trait CustomBackward<T: Real> {
    fn name(&self) -> &'static str;

    /// Gradient contribution for each input given the upstream gradient of
    /// the output. `None` means no contribution.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Exp(Var),
    Relu(Var),
    Softplus(Var),
    Sum(Var),
    SumLast(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    MaxLast {
        input: Var,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool2d(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    IndexSelect {
        input: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
    Bilinear(Var),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// An append-only record of operations; replaying it backwards yields
/// gradients for every leaf created with `requires_grad`.
///
/// Records are pushed in creation order, so inputs always precede the
/// operations that consume them.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    checked: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `[.., H, W]` into `(planes, H, W)`.
fn planes_hw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return shape_err(op, format!("need at least 2 axes, got {shape:?}"));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    Ok((shape[..shape.len() - 2].iter().product(), h, w))
}

fn is_suffix(full: &[usize], part: &[usize]) -> bool {
    part.len() <= full.len() && full[full.len() - part.len()..] == *part
}

/// Sums a full-shape gradient down onto a suffix-broadcast operand.
fn reduce_broadcast<T: Real>(g: &[T], small: usize) -> Vec<T> {
    let mut out = vec![T::zero(); small];
    for chunk in g.chunks(small) {
        out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            checked: false,
        }
    }

    /// In checked mode every operation rejects NaN inputs.
    pub fn checked() -> Self {
        Tape {
            checked: true,
            ..Self::new()
        }
    }

    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Tape::backward`]; `None` if the leaf does
    /// not require a gradient or was unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, op: &'static str, inputs: &[Var]) -> Result<()> {
        if self.checked && inputs.iter().any(|v| self.nodes[v.0].value.has_nan()) {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.check(name, &[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return shape_err(name, format!("{sb:?} does not broadcast onto {sa:?}"));
        }
        let bd = self.data(b);
        let n = bd.len();
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % n]))
            .collect();
        Tensor::new(sa, data)
    }

    /// Elementwise `a + b`; `b` may have a suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        self.check("scale", &[a])?;
        let v = self.value(a).map(|x| x * k);
        Ok(self.push(v, Op::Scale(a, k), &[a]))
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Result<Var> {
        self.check("add_scalar", &[a])?;
        let v = self.value(a).map(|x| x + k);
        Ok(self.push(v, Op::Shift(a), &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check("exp", &[a])?;
        let v = self.value(a).map(|x| x.exp());
        Ok(self.push(v, Op::Exp(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check("relu", &[a])?;
        let v = self.value(a).map(|x| x.max(T::zero()));
        Ok(self.push(v, Op::Relu(a), &[a]))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.check("softplus", &[a])?;
        let v = self
            .value(a)
            .map(|x| x.max(T::zero()) + (-x.abs()).exp().ln_1p());
        Ok(self.push(v, Op::Softplus(a), &[a]))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check("sum", &[a])?;
        let s = self.data(a).iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, T::one() / cast(n as f64))
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        self.check("sum_last", &[a])?;
        let shape = self.shape(a).to_vec();
        let Some((&last, lead)) = shape.split_last() else {
            return shape_err("sum_last", "scalar input");
        };
        let data = self
            .data(a)
            .chunks(last)
            .map(|c| c.iter().copied().sum())
            .collect();
        let v = Tensor::new(lead, data)?;
        Ok(self.push(v, Op::SumLast(a), &[a]))
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("matmul", &[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.data(a),
            (k as isize, 1),
            self.data(b),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// 2-D convolution (cross-correlation). `input` is `[C, H, W]` or
    /// `[N, C, H, W]`; `kernel` is `[C_out, C, kh, kw]`; `bias` is `[C_out]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        self.check("conv2d", &deps)?;
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        let (batch, c_in, h, w, batched) = match *si.as_slice() {
            [c, h, w] => (1, c, h, w, false),
            [n, c, h, w] => (n, c, h, w, true),
            _ => {
                return shape_err(
                    "conv2d",
                    format!("input must be [C,H,W] or [N,C,H,W], got {si:?}"),
                )
            }
        };
        let [c_out, kc, kh, kw] = *sk.as_slice() else {
            return shape_err(
                "conv2d",
                format!("kernel must be [C_out,C_in,kh,kw], got {sk:?}"),
            );
        };
        if kc != c_in {
            return shape_err(
                "conv2d",
                format!("input has {c_in} channels, kernel expects {kc}"),
            );
        }
        if stride == 0 {
            return shape_err("conv2d", "stride must be positive");
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return shape_err(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} exceeds padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            );
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return shape_err(
                    "conv2d",
                    format!("bias must be [{c_out}], got {:?}", self.shape(b)),
                );
            }
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad: padding,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (w + 2 * padding - kw) / stride + 1,
        };
        let out = ops::conv2d_forward(
            self.data(input),
            self.data(kernel),
            bias.map(|b| self.data(b)),
            &geom,
        );
        let shape: Vec<usize> = if batched {
            vec![batch, c_out, geom.h_out, geom.w_out]
        } else {
            vec![c_out, geom.h_out, geom.w_out]
        };
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &deps,
        ))
    }

    fn norm_dims(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(input);
        if s.len() < 2 {
            return shape_err("batch_norm", format!("need [N, C, ..], got {s:?}"));
        }
        let (n, c) = (s[0], s[1]);
        let spatial = s[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("batch_norm", format!("affine parameters must be [{c}]"));
        }
        Ok((n, c, spatial))
    }

    /// Batch normalization with batch statistics over all axes but the
    /// channel axis 1. Returns the output plus the batch mean and unbiased
    /// variance for running-statistic updates.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        self.check("batch_norm", &[input, gamma, beta])?;
        let dims = self.norm_dims(input, gamma, beta)?;
        let (n, _, spatial) = dims;
        let (mean, var) = ops::channel_stats(self.data(input), dims.0, dims.1, dims.2);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = ops::batch_norm_apply(
            self.data(input),
            dims,
            &mean,
            &inv_std,
            self.data(gamma),
            self.data(beta),
        );
        let count = n * spatial;
        let unbiased = if count > 1 {
            let k: T = cast(count as f64 / (count - 1) as f64);
            var.iter().map(|&v| v * k).collect()
        } else {
            var
        };
        let v = Tensor::new(self.shape(input), y)?;
        let out = self.push(
            v,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            &[input, gamma, beta],
        );
        Ok((out, mean, unbiased))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        self.check("batch_norm", &[input, gamma, beta])?;
        let dims = self.norm_dims(input, gamma, beta)?;
        if mean.len() != dims.1 || var.len() != dims.1 {
            return shape_err(
                "batch_norm",
                "running statistics do not match channel count",
            );
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = ops::batch_norm_apply(
            self.data(input),
            dims,
            mean,
            &inv_std,
            self.data(gamma),
            self.data(beta),
        );
        let v = Tensor::new(self.shape(input), y)?;
        Ok(self.push(
            v,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            &[input, gamma, beta],
        ))
    }

    /// Max pooling on the trailing two axes.
    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.check("max_pool2d", &[input])?;
        let shape = self.shape(input).to_vec();
        let (planes, h, w) = planes_hw(&shape, "max_pool2d")?;
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return shape_err(
                "max_pool2d",
                format!("window {kernel} stride {stride} on {h}x{w}"),
            );
        }
        let (out, argmax) = ops::max_pool2d(self.data(input), planes, h, w, kernel, stride);
        let mut oshape = shape.clone();
        let n = oshape.len();
        oshape[n - 2] = (h - kernel) / stride + 1;
        oshape[n - 1] = (w - kernel) / stride + 1;
        let v = Tensor::new(&oshape, out)?;
        Ok(self.push(v, Op::MaxPool2d { input, argmax }, &[input]))
    }

    /// Maximum over the trailing `axes` axes (global max pooling when
    /// `axes = 2`). Gradient flows to the lowest-index maximum.
    pub fn max_last(&mut self, input: Var, axes: usize) -> Result<Var> {
        self.check("max_last", &[input])?;
        let shape = self.shape(input).to_vec();
        if axes == 0 || axes > shape.len() {
            return shape_err(
                "max_last",
                format!("cannot reduce {axes} axes of {shape:?}"),
            );
        }
        let split = shape.len() - axes;
        let group: usize = shape[split..].iter().product();
        let (out, argmax) = ops::max_groups(self.data(input), group);
        let v = Tensor::new(&shape[..split], out)?;
        Ok(self.push(v, Op::MaxLast { input, argmax }, &[input]))
    }

    /// Adaptive average pooling of the trailing two axes to `out_h × out_w`.
    pub fn adaptive_avg_pool2d(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.check("adaptive_avg_pool2d", &[input])?;
        let shape = self.shape(input).to_vec();
        let (planes, h, w) = planes_hw(&shape, "adaptive_avg_pool2d")?;
        if out_h == 0 || out_w == 0 {
            return shape_err("adaptive_avg_pool2d", "target must be at least 1x1");
        }
        let out = ops::adaptive_avg_pool2d(self.data(input), planes, h, w, out_h, out_w);
        let mut oshape = shape.clone();
        let n = oshape.len();
        oshape[n - 2] = out_h;
        oshape[n - 1] = out_w;
        let v = Tensor::new(&oshape, out)?;
        Ok(self.push(v, Op::AdaptiveAvgPool2d(input), &[input]))
    }

    /// Bilinear resampling (half-pixel centers) of the trailing two axes.
    pub fn bilinear_upsample(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.check("bilinear_upsample", &[input])?;
        let shape = self.shape(input).to_vec();
        let (planes, h, w) = planes_hw(&shape, "bilinear_upsample")?;
        if out_h == 0 || out_w == 0 {
            return shape_err("bilinear_upsample", "target must be at least 1x1");
        }
        let out = ops::bilinear(self.data(input), planes, h, w, out_h, out_w);
        let mut oshape = shape.clone();
        let n = oshape.len();
        oshape[n - 2] = out_h;
        oshape[n - 1] = out_w;
        let v = Tensor::new(&oshape, out)?;
        Ok(self.push(v, Op::Bilinear(input), &[input]))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.check("concat", inputs)?;
        let Some(&first) = inputs.first() else {
            return shape_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != base[i])
            {
                return shape_err(
                    "concat",
                    format!("{s:?} incompatible with {base:?} on axis {axis}"),
                );
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Gathers slices along axis 0; indices may repeat.
    pub fn index_select(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        self.check("index_select", &[input])?;
        let shape = self.shape(input).to_vec();
        if shape.is_empty() || indices.is_empty() {
            return shape_err(
                "index_select",
                "need a non-scalar input and at least one index",
            );
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return shape_err(
                "index_select",
                format!("index {bad} out of range {}", shape[0]),
            );
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.data(input);
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut oshape = shape;
        oshape[0] = indices.len();
        let v = Tensor::new(&oshape, out)?;
        Ok(self.push(
            v,
            Op::IndexSelect {
                input,
                indices: indices.to_vec(),
            },
            &[input],
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(input).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(input), &[input]))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        rule: Box<dyn CustomBackward<T>>,
    ) -> Result<Var> {
        self.check(rule.name(), inputs)?;
        Ok(self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            inputs,
        ))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    /// Back-propagates from a scalar `loss`, replacing any previous leaf
    /// gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            );
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let nb = self.value(*b).numel();
                    let gb = if nb == g.len() {
                        g.clone()
                    } else {
                        reduce_broadcast(&g, nb)
                    };
                    let gb = if matches!(node.op, Op::Sub(..)) {
                        gb.into_iter().map(|x| -x).collect()
                    } else {
                        gb
                    };
                    self.accumulate(&mut grads, *b, gb);
                    self.accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (da, db) = (self.data(*a), self.data(*b));
                    let nb = db.len();
                    if self.requires_grad(*b) {
                        let full: Vec<T> = g.iter().zip(da).map(|(&g, &x)| g * x).collect();
                        let gb = if nb == full.len() {
                            full
                        } else {
                            reduce_broadcast(&full, nb)
                        };
                        self.accumulate(&mut grads, *b, gb);
                    }
                    if self.requires_grad(*a) {
                        let ga = g.iter().enumerate().map(|(k, &g)| g * db[k % nb]).collect();
                        self.accumulate(&mut grads, *a, ga);
                    }
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    self.accumulate(&mut grads, *a, g.into_iter().map(|x| x * k).collect());
                }
                Op::Shift(a) => self.accumulate(&mut grads, *a, g),
                Op::Exp(a) => {
                    let y = node.value.data();
                    self.accumulate(
                        &mut grads,
                        *a,
                        g.iter().zip(y).map(|(&g, &y)| g * y).collect(),
                    );
                }
                Op::Relu(a) => {
                    let x = self.data(*a);
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect();
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let x = self.data(*a);
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| g / (T::one() + (-x).exp()))
                        .collect();
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    self.accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::SumLast(a) => {
                    let shape = self.shape(*a);
                    let last = shape[shape.len() - 1];
                    let ga = g
                        .iter()
                        .flat_map(|&x| std::iter::repeat_n(x, last))
                        .collect();
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    if self.requires_grad(*a) {
                        let mut ga = vec![T::zero(); m * k];
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g,
                            (n as isize, 1),
                            self.data(*b),
                            (1, n as isize),
                            T::zero(),
                            &mut ga,
                            (k as isize, 1),
                        );
                        self.accumulate(&mut grads, *a, ga);
                    }
                    if self.requires_grad(*b) {
                        let mut gb = vec![T::zero(); k * n];
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            self.data(*a),
                            (1, k as isize),
                            &g,
                            (n as isize, 1),
                            T::zero(),
                            &mut gb,
                            (n as isize, 1),
                        );
                        self.accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    let want = (
                        self.requires_grad(*input),
                        self.requires_grad(*kernel),
                        bias.is_some_and(|b| self.requires_grad(b)),
                    );
                    let cg =
                        ops::conv2d_backward(self.data(*input), self.data(*kernel), &g, geom, want);
                    if let Some(gi) = cg.input {
                        self.accumulate(&mut grads, *input, gi);
                    }
                    if let Some(gk) = cg.kernel {
                        self.accumulate(&mut grads, *kernel, gk);
                    }
                    if let (Some(b), Some(gb)) = (bias, cg.bias) {
                        self.accumulate(&mut grads, *b, gb);
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let s = self.shape(*input);
                    let dims = (s[0], s[1], s[2..].iter().product());
                    let ng = ops::batch_norm_backward(
                        &g,
                        xhat,
                        dims,
                        inv_std,
                        self.data(*gamma),
                        *batch_stats,
                    );
                    self.accumulate(&mut grads, *input, ng.input);
                    self.accumulate(&mut grads, *gamma, ng.gamma);
                    self.accumulate(&mut grads, *beta, ng.beta);
                }
                Op::MaxPool2d { input, argmax } | Op::MaxLast { input, argmax } => {
                    let mut gi = vec![T::zero(); self.value(*input).numel()];
                    for (&src, &gv) in argmax.iter().zip(&g) {
                        gi[src] += gv;
                    }
                    self.accumulate(&mut grads, *input, gi);
                }
                Op::AdaptiveAvgPool2d(input) => {
                    let (planes, h, w) = planes_hw(self.shape(*input), "adaptive_avg_pool2d")?;
                    let os = node.value.shape();
                    let (ho, wo) = (os[os.len() - 2], os[os.len() - 1]);
                    let gi = ops::adaptive_avg_pool2d_backward(&g, planes, h, w, ho, wo);
                    self.accumulate(&mut grads, *input, gi);
                }
                Op::Bilinear(input) => {
                    let (planes, h, w) = planes_hw(self.shape(*input), "bilinear_upsample")?;
                    let os = node.value.shape();
                    let (ho, wo) = (os[os.len() - 2], os[os.len() - 1]);
                    let gi = ops::bilinear_backward(&g, planes, h, w, ho, wo);
                    self.accumulate(&mut grads, *input, gi);
                }
                Op::Concat { inputs, axis } => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let row = shape[*axis] * inner;
                    let mut offset = 0;
                    for &v in inputs {
                        let len = self.shape(v)[*axis] * inner;
                        if self.requires_grad(v) {
                            let mut gv = Vec::with_capacity(outer * len);
                            for o in 0..outer {
                                gv.extend_from_slice(&g[o * row + offset..o * row + offset + len]);
                            }
                            self.accumulate(&mut grads, v, gv);
                        }
                        offset += len;
                    }
                }
                Op::IndexSelect { input, indices } => {
                    let inner: usize = self.shape(*input)[1..].iter().product();
                    let mut gi = vec![T::zero(); self.value(*input).numel()];
                    for (k, &src) in indices.iter().enumerate() {
                        gi[src * inner..(src + 1) * inner]
                            .iter_mut()
                            .zip(&g[k * inner..(k + 1) * inner])
                            .for_each(|(a, &b)| *a += b);
                    }
                    self.accumulate(&mut grads, *input, gi);
                }
                Op::Reshape(input) => self.accumulate(&mut grads, *input, g),
                Op::Custom { inputs, rule } => {
                    let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                    let parts = rule.backward(&values, &node.value, &g);
                    for (&v, part) in inputs.iter().zip(parts) {
                        if let Some(part) = part {
                            self.accumulate(&mut grads, v, part);
                        }
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn relu_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[2], &[-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
    }

    #[test]
    fn relu_of_negative_is_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::scalar(-2.5));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).item().unwrap(), 0.0);
    }

    #[test]
    fn global_max_pool_picks_largest() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[2, 2], &[0.1, 0.9, 0.4, 0.2]));
        let m = tape.max_last(x, 2).unwrap();
        assert_eq!(tape.value(m).item().unwrap(), 0.9);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[4], &[0.5, 0.7, 0.7, 0.1]));
        let m = tape.max_last(x, 1).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.value(y).item().unwrap(), 9.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let x = tape.constant(t(&[1, 4, 5], &data));
        let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = tape.conv2d(x, k, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
        let big = tape.constant(Tensor::zeros(&[1, 2, 7, 7]));
        assert!(tape.conv2d(x, big, None, 1, 1).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::zeros(&[3]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn checked_mode_rejects_nan() {
        let mut tape = Tape::<f32>::checked();
        let x = tape.constant(Tensor::scalar(f32::NAN));
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { op: "exp" })));
        let mut lax = Tape::<f32>::new();
        let x = lax.constant(Tensor::scalar(f32::NAN));
        assert!(lax.exp(x).is_ok());
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut tape = Tape::new();
        let a = tape.variable(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.variable(t(&[3], &[10.0, 20.0, 30.0]));
        let c = tape.mul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[5.0, 7.0, 9.0]);
        assert_eq!(tape.grad(a).unwrap(), &[10.0, 20.0, 30.0, 10.0, 20.0, 30.0]);
        assert!(tape.add(b, a).is_err());
    }

    #[test]
    fn reused_variable_accumulates() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        let z = tape.mul(y, x).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn concat_and_index_select_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(&[2, 1, 2], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[2, 2, 2], |i| 10.0 + i as f64));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(
            tape.value(c).data()[..6],
            [0.0, 1.0, 10.0, 11.0, 12.0, 13.0]
        );
        let s = tape.index_select(c, &[1, 1, 0]).unwrap();
        assert_eq!(tape.shape(s), &[3, 3, 2]);
        assert_eq!(tape.value(s).get(&[2, 1, 0]), 10.0);
    }
}
