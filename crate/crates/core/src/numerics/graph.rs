//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one training step in creation
//! order, which is a valid topological order. [`Graph::backward`] walks the
//! tape once in reverse. Gradients of leaves accumulate across calls until
//! [`Graph::zero_grad`] or [`Graph::reset`].

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, ConvGeometry};
use crate::numerics::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        c_out: usize,
        cols: Vec<T>,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        arg: Vec<usize>,
    },
    Upsample2(Var),
    Bilinear(Var),
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Concat(Vec<Var>),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    SumSpatial(Var),
    Dot(Var, Var),
    Softmax(Var),
    LogSoftmax {
        x: Var,
        probs: Vec<T>,
    },
    MaskedMean {
        x: Var,
        weights: Vec<T>,
        count: T,
    },
    L2Normalize {
        x: Var,
        norm: T,
    },
    LogSumExp(Var),
    Index(Var, usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded operation.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_unary(&mut self, x: Var, dims: &[usize], data: Vec<T>, op: Op<T>) -> Var {
        let needs = self.nodes[x.0].needs_grad;
        let value = Tensor::from_vec(dims, data).expect("kernel output matches dims");
        self.push(value, op, needs)
    }

    /// Leaf whose gradient is tracked, typically a trainable parameter.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let mut value = t.clone();
        value.grad = None;
        value.requires_grad = true;
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.grad = None;
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    /// Leaf honouring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::Shape {
                op,
                detail: format!("{da:?} vs {db:?}"),
            });
        }
        Ok(())
    }

    /// Single-image cross-correlation: `[c_in,H,W] * [c_out,c_in,k,k] -> [c_out,H',W']`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (c_in, h, wd) = self.value(x).chw()?;
        let (c_out, wc_in, k) = match *self.dims(w) {
            [o, i, k1, k2] if k1 == k2 => (o, i, k1),
            [_, _, k1, k2] => {
                return Err(Error::Dimension {
                    op: "conv2d",
                    axis: "kernel width",
                    expected: k1,
                    got: k2,
                })
            }
            _ => {
                return Err(Error::Shape {
                    op: "conv2d",
                    detail: format!("weight must be rank 4, got {:?}", self.dims(w)),
                })
            }
        };
        if wc_in != c_in {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "input channels",
                expected: wc_in,
                got: c_in,
            });
        }
        if k % 2 == 0 {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("kernel size {k} must be odd"),
            });
        }
        if stride == 0 {
            return Err(Error::Shape {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        if let Some(b) = b {
            let nb = self.value(b).len();
            if nb != c_out {
                return Err(Error::Dimension {
                    op: "conv2d",
                    axis: "bias",
                    expected: c_out,
                    got: nb,
                });
            }
        }
        for (axis, ext) in [("height", h), ("width", wd)] {
            if ext + 2 * pad < k || (ext + 2 * pad - k) % stride != 0 {
                return Err(Error::Shape {
                    op: "conv2d",
                    detail: format!(
                        "{axis} {ext} with pad {pad}, kernel {k}, stride {stride} is not integral"
                    ),
                });
            }
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
        };
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            c_out,
            &geom,
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::from_vec(&[c_out, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                c_out,
                cols,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v.max(T::zero()))
            .collect();
        let dims = self.dims(x).to_vec();
        self.push_unary(x, &dims, data, Op::Relu(x))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if h < 2 || w < 2 {
            return Err(Error::Shape {
                op: "max_pool2",
                detail: format!("spatial extent {h}x{w} below 2"),
            });
        }
        let (out, arg) = kernels::max_pool2(self.value(x).data(), c, h, w);
        Ok(self.push_unary(x, &[c, h / 2, w / 2], out, Op::MaxPool2 { x, arg }))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let out = kernels::upsample_nearest2(self.value(x).data(), c, h, w);
        Ok(self.push_unary(x, &[c, 2 * h, 2 * w], out, Op::Upsample2(x)))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Shape {
                op: "bilinear_resize",
                detail: "target extent must be positive".into(),
            });
        }
        let out = kernels::bilinear_resize(self.value(x).data(), c, h, w, out_h, out_w);
        Ok(self.push_unary(x, &[c, out_h, out_w], out, Op::Bilinear(x)))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        for (axis, v) in [("gamma", gamma), ("beta", beta)] {
            let n = self.value(v).len();
            if n != c {
                return Err(Error::Dimension {
                    op: "instance_norm",
                    axis,
                    expected: c,
                    got: n,
                });
            }
        }
        let (y, xhat, inv_std) = kernels::instance_norm(
            self.value(x).data(),
            c,
            h * w,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::from_vec(&[c, h, w], y)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        node: Op<T>,
    ) -> Result<Var> {
        self.same_dims(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::from_vec(self.dims(a), data)?;
        Ok(self.push(value, node, needs))
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * s).collect();
        let dims = self.dims(x).to_vec();
        self.push_unary(x, &dims, data, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let data = self.value(x).data().iter().map(|&v| v + s).collect();
        let dims = self.dims(x).to_vec();
        self.push_unary(x, &dims, data, Op::AddScalar(x))
    }

    /// Concatenation along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let tail = self.dims(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let d = self.dims(p);
            if d[1..] != tail[..] {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("trailing extents {:?} vs {:?}", &d[1..], tail),
                });
            }
            lead += d[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut dims = vec![lead];
        dims.extend_from_slice(&tail);
        let needs = parts.iter().any(|&p| self.needs(p));
        let value = Tensor::from_vec(&dims, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), needs))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| v.ln()).collect();
        let dims = self.dims(x).to_vec();
        self.push_unary(x, &dims, data, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| v.exp()).collect();
        let dims = self.dims(x).to_vec();
        self.push_unary(x, &dims, data, Op::Exp(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push_unary(x, &[1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::from_usize(t.len()).unwrap();
        self.push_unary(x, &[1], vec![s], Op::Mean(x))
    }

    /// Sums every axis but the first: `[C, ...] -> [C]`.
    pub fn sum_spatial(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.dims()[0];
        let inner = t.len() / c;
        let data = t
            .data()
            .chunks(inner)
            .map(|ch| ch.iter().copied().sum())
            .collect();
        self.push_unary(x, &[c], data, Op::SumSpatial(x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::Dimension {
                op: "dot",
                axis: "length",
                expected: self.value(a).len(),
                got: self.value(b).len(),
            });
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), needs))
    }

    /// Softmax over the leading (class) axis at every spatial position.
    pub fn softmax_channel(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let dims = t.dims().to_vec();
        let probs = softmax_leading(t.data(), dims[0]);
        self.push_unary(x, &dims, probs, Op::Softmax(x))
    }

    /// Log-softmax over the leading axis, stabilised by max subtraction.
    pub fn log_softmax_channel(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let dims = t.dims().to_vec();
        let k = dims[0];
        let probs = softmax_leading(t.data(), k);
        let hw = t.len() / k;
        let mut out = vec![T::zero(); t.len()];
        for p in 0..hw {
            let m = (0..k)
                .map(|c| t.data()[c * hw + p])
                .fold(T::neg_infinity(), T::max);
            let lse = m
                + (0..k)
                    .map(|c| (t.data()[c * hw + p] - m).exp())
                    .sum::<T>()
                    .ln();
            for c in 0..k {
                out[c * hw + p] = t.data()[c * hw + p] - lse;
            }
        }
        self.push_unary(x, &dims, out, Op::LogSoftmax { x, probs })
    }

    /// Mean of the `[c]` columns of `x: [c, h, w]` selected by nonzero
    /// `weights` (length `h*w`). The selection is a constant.
    pub fn masked_mean(&mut self, x: Var, weights: &[bool]) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if weights.len() != h * w {
            return Err(Error::Dimension {
                op: "masked_mean",
                axis: "spatial",
                expected: h * w,
                got: weights.len(),
            });
        }
        let count = weights.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::Contract(
                "masked_mean over an empty selection".into(),
            ));
        }
        let count = T::from_usize(count).unwrap();
        let wts: Vec<T> = weights
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect();
        let xs = self.value(x).data();
        let data = (0..c)
            .map(|ch| {
                let mut s = T::zero();
                for (i, &wi) in wts.iter().enumerate() {
                    if wi > T::zero() {
                        s += xs[ch * h * w + i];
                    }
                }
                s / count
            })
            .collect();
        Ok(self.push_unary(
            x,
            &[c],
            data,
            Op::MaskedMean {
                x,
                weights: wts,
                count,
            },
        ))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let norm = t
            .data()
            .iter()
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
            .max(T::from_f64_lossy(1e-12));
        let data = t.data().iter().map(|&v| v / norm).collect();
        let dims = t.dims().to_vec();
        self.push_unary(x, &dims, data, Op::L2Normalize { x, norm })
    }

    pub fn logsumexp(&mut self, x: Var) -> Var {
        let xs = self.value(x).data();
        let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
        let s = m + xs.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        self.push_unary(x, &[1], vec![s], Op::LogSumExp(x))
    }

    pub fn index(&mut self, x: Var, i: usize) -> Var {
        let v = self.value(x).data()[i];
        self.push_unary(x, &[1], vec![v], Op::Index(x, i))
    }

    /// Sum of a list of scalars (or equal-shape tensors).
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut it = terms.iter().copied();
        let mut acc = it
            .next()
            .ok_or_else(|| Error::Contract("add_all of nothing".into()))?;
        for t in it {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse pass from a scalar. Leaf gradients are added to whatever
    /// the leaves already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            } else {
                self.propagate(i, &g, &mut adj);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // Lazily allocated adjoint of an input, or None when it needs no gradient.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].needs_grad {
                    let n = self.nodes[v.0].value.len();
                    Some(
                        adj[v.0]
                            .get_or_insert_with(|| vec![T::zero(); n])
                            .as_mut_slice(),
                    )
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                c_out,
                cols,
            } => {
                let weight = self.nodes[w.0].value.data();
                if let Some(dw) = slot!(*w) {
                    kernels::conv2d_backward(g, weight, cols, *c_out, geom, None, Some(dw), None);
                }
                if let Some(b) = b {
                    if let Some(db) = slot!(*b) {
                        kernels::conv2d_backward(
                            g,
                            weight,
                            cols,
                            *c_out,
                            geom,
                            None,
                            None,
                            Some(db),
                        );
                    }
                }
                if let Some(dx) = slot!(*x) {
                    kernels::conv2d_backward(g, weight, cols, *c_out, geom, Some(dx), None, None);
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = slot!(*x) {
                    for ((d, &gi), &o) in dx.iter_mut().zip(g).zip(out) {
                        if o > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::MaxPool2 { x, arg } => {
                if let Some(dx) = slot!(*x) {
                    for (&a, &gi) in arg.iter().zip(g) {
                        dx[a] += gi;
                    }
                }
            }
            Op::Upsample2(x) => {
                let (c, h, w) = self.nodes[x.0].value.chw().unwrap();
                if let Some(dx) = slot!(*x) {
                    kernels::upsample_nearest2_backward(g, c, h, w, dx);
                }
            }
            Op::Bilinear(x) => {
                let (c, h, w) = self.nodes[x.0].value.chw().unwrap();
                let (_, oh, ow) = node.value.chw().unwrap();
                if let Some(dx) = slot!(*x) {
                    kernels::bilinear_resize_backward(g, c, h, w, oh, ow, dx);
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (c, h, w) = node.value.chw().unwrap();
                let gm = self.nodes[gamma.0].value.data();
                if let Some(dg) = slot!(*gamma) {
                    kernels::instance_norm_backward(
                        g,
                        xhat,
                        inv_std,
                        gm,
                        c,
                        h * w,
                        None,
                        Some(dg),
                        None,
                    );
                }
                if let Some(db) = slot!(*beta) {
                    kernels::instance_norm_backward(
                        g,
                        xhat,
                        inv_std,
                        gm,
                        c,
                        h * w,
                        None,
                        None,
                        Some(db),
                    );
                }
                if let Some(dx) = slot!(*x) {
                    kernels::instance_norm_backward(
                        g,
                        xhat,
                        inv_std,
                        gm,
                        c,
                        h * w,
                        Some(dx),
                        None,
                        None,
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = slot!(v) {
                        d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = slot!(*a) {
                    d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                }
                if let Some(d) = slot!(*b) {
                    d.iter_mut().zip(g).for_each(|(d, &gi)| *d -= gi);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if let Some(d) = slot!(*a) {
                    for j in 0..d.len() {
                        d[j] += g[j] * bv[j];
                    }
                }
                if let Some(d) = slot!(*b) {
                    for j in 0..d.len() {
                        d[j] += g[j] * av[j];
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = self.nodes[b.0].value.data();
                if let Some(d) = slot!(*a) {
                    for j in 0..d.len() {
                        d[j] += g[j] / bv[j];
                    }
                }
                if let Some(d) = slot!(*b) {
                    for j in 0..d.len() {
                        d[j] -= g[j] * out[j] / bv[j];
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = slot!(*x) {
                    d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * *s);
                }
            }
            Op::AddScalar(x) => {
                if let Some(d) = slot!(*x) {
                    d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    if let Some(d) = slot!(p) {
                        d.iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(d, &gi)| *d += gi);
                    }
                    off += n;
                }
            }
            Op::Log(x) => {
                let xv = self.nodes[x.0].value.data();
                if let Some(d) = slot!(*x) {
                    for j in 0..d.len() {
                        d[j] += g[j] / xv[j];
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(d) = slot!(*x) {
                    for j in 0..d.len() {
                        d[j] += g[j] * out[j];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = slot!(*x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.nodes[x.0].value.len()).unwrap();
                if let Some(d) = slot!(*x) {
                    let gi = g[0] / n;
                    d.iter_mut().for_each(|d| *d += gi);
                }
            }
            Op::SumSpatial(x) => {
                if let Some(d) = slot!(*x) {
                    let inner = d.len() / g.len();
                    for (c, chunk) in d.chunks_mut(inner).enumerate() {
                        chunk.iter_mut().for_each(|d| *d += g[c]);
                    }
                }
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if let Some(d) = slot!(*a) {
                    for j in 0..d.len() {
                        d[j] += g[0] * bv[j];
                    }
                }
                if let Some(d) = slot!(*b) {
                    for j in 0..d.len() {
                        d[j] += g[0] * av[j];
                    }
                }
            }
            Op::Softmax(x) => {
                let k = node.value.dims()[0];
                let hw = out.len() / k;
                if let Some(d) = slot!(*x) {
                    for p in 0..hw {
                        let dotp: T = (0..k).map(|c| g[c * hw + p] * out[c * hw + p]).sum();
                        for c in 0..k {
                            let j = c * hw + p;
                            d[j] += out[j] * (g[j] - dotp);
                        }
                    }
                }
            }
            Op::LogSoftmax { x, probs } => {
                let k = node.value.dims()[0];
                let hw = out.len() / k;
                if let Some(d) = slot!(*x) {
                    for p in 0..hw {
                        let gs: T = (0..k).map(|c| g[c * hw + p]).sum();
                        for c in 0..k {
                            let j = c * hw + p;
                            d[j] += g[j] - probs[j] * gs;
                        }
                    }
                }
            }
            Op::MaskedMean { x, weights, count } => {
                let c = node.value.len();
                let hw = weights.len();
                if let Some(d) = slot!(*x) {
                    for ch in 0..c {
                        let gi = g[ch] / *count;
                        for (i, &wi) in weights.iter().enumerate() {
                            if wi > T::zero() {
                                d[ch * hw + i] += gi;
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { x, norm } => {
                if let Some(d) = slot!(*x) {
                    let yg: T = out.iter().zip(g).map(|(&y, &gi)| y * gi).sum();
                    for j in 0..d.len() {
                        d[j] += (g[j] - out[j] * yg) / *norm;
                    }
                }
            }
            Op::LogSumExp(x) => {
                let xv = self.nodes[x.0].value.data();
                if let Some(d) = slot!(*x) {
                    for j in 0..d.len() {
                        d[j] += g[0] * (xv[j] - out[0]).exp();
                    }
                }
            }
            Op::Index(x, idx) => {
                if let Some(d) = slot!(*x) {
                    d[*idx] += g[0];
                }
            }
        }
    }
}

/// Softmax along the leading axis of a `[K, ...]` buffer.
pub fn softmax_leading<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let hw = x.len() / k;
    let mut out = vec![T::zero(); x.len()];
    for p in 0..hw {
        let m = (0..k)
            .map(|c| x[c * hw + p])
            .fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for c in 0..k {
            let e = (x[c * hw + p] - m).exp();
            out[c * hw + p] = e;
            s += e;
        }
        for c in 0..k {
            out[c * hw + p] /= s;
        }
    }
    out
}
