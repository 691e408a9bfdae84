use super::element::Element;
use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable primitive and its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Broadcasting elementwise ops.
    Add,
    Sub,
    Mul,
    Div,
    /// `scale * x + shift`.
    Affine {
        scale: f64,
        shift: f64,
    },
    /// `[M,K]@[K,N]`, `[..,M,K]@[K,N]` or batched `[B,M,K]@[B,K,N]`.
    MatMul,
    /// Inputs `x (N,C,H,W)`, `w (O,C,k,k)` and optional bias `(O)`.
    Conv2d {
        stride: usize,
        pad: usize,
    },
    /// Inputs `x (N,C,H,W)`, `w (C,O,k,k)` and optional bias `(O)`.
    /// Output extent is `(H - 1) * stride - 2 * pad + k`.
    ConvTranspose2d {
        stride: usize,
        pad: usize,
    },
    Relu,
    Sigmoid,
    /// Over the last axis.
    Softmax,
    /// Over the last axis.
    LogSoftmax,
    /// `(N,C,H,W) -> (N,C)`.
    GlobalAvgPool,
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
    /// Swaps the last two axes.
    Transpose,
    Concat {
        axis: usize,
    },
    /// Empty `axes` reduces everything to shape `[1]`.
    Sum {
        axes: Vec<usize>,
        keepdim: bool,
    },
    Mean {
        axes: Vec<usize>,
        keepdim: bool,
    },
    Square,
    Sqrt,
    Pow {
        exponent: f64,
    },
    Exp,
    Log,
    /// Euclidean norm over one axis, which is removed.
    L2Norm {
        axis: usize,
    },
    /// `(N,D) -> (N,N)` Euclidean distances between rows.
    PairwiseDistance,
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Picks flat element indices into a rank-1 result.
    Gather {
        indices: Vec<usize>,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Affine { .. } => "scalar-mul",
            Primitive::MatMul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::ConvTranspose2d { .. } => "transposed-conv2d",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log-softmax",
            Primitive::GlobalAvgPool => "global-average-pool",
            Primitive::AvgPool { .. } => "average-pool",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Transpose => "transpose",
            Primitive::Concat { .. } => "concat",
            Primitive::Sum { .. } => "sum",
            Primitive::Mean { .. } => "mean",
            Primitive::Square => "square",
            Primitive::Sqrt => "sqrt",
            Primitive::Pow { .. } => "pow",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::L2Norm { .. } => "l2-norm",
            Primitive::PairwiseDistance => "euclidean-pairwise-distance",
            Primitive::Slice { .. } => "slice",
            Primitive::Gather { .. } => "gather",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    prim: Option<Primitive>,
    inputs: Vec<Var>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by one backward pass, for leaves only.
#[derive(Debug)]
pub struct Gradients<T = f32> {
    leaves: Vec<(Var, Option<ParamId>, Tensor<T>)>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves
            .iter()
            .find(|(x, _, _)| *x == v)
            .map(|(_, _, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.leaves.iter().filter_map(|(_, p, g)| p.map(|p| (p, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

/// Define-by-run record of one forward pass.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
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

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            prim: None,
            inputs: Vec::new(),
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// A leaf that optionally collects a gradient.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad, None)
    }

    /// Records a parameter; frozen parameters enter as constants.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        let trainable = params.is_trainable(id);
        self.push_leaf(params.value(id).clone(), trainable, Some(id))
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

    /// Applies `prim` to recorded inputs and records the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::DeadTape);
        }
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = forward(&prim, &vals)?;
        if !value.is_finite() {
            return Err(Error::NumericOverflow { op: prim.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            prim: Some(prim),
            inputs: inputs.to_vec(),
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar `loss`. The tape cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::DeadTape);
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaves = Vec::new();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { leaves });
        }
        grads[loss.0] = Some(Tensor::ones(&shape));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(prim) = &node.prim else {
                leaves.push((Var(i), node.param, g));
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = backward_rule(prim, &inputs, &node.value, &g, &need)?;
            for ((&inp, gi), needed) in node.inputs.iter().zip(input_grads).zip(need) {
                let Some(gi) = gi else { continue };
                if !needed {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&gi)?,
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        leaves.reverse();
        Ok(Gradients { leaves })
    }

    // Convenience wrappers, one per primitive.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(
            Primitive::Affine {
                scale: s,
                shift: 0.0,
            },
            &[a],
        )
    }
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.apply(Primitive::Affine { scale, shift }, &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let mut ins = vec![x, w];
        ins.extend(b);
        self.apply(Primitive::Conv2d { stride, pad }, &ins)
    }
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let mut ins = vec![x, w];
        ins.extend(b);
        self.apply(Primitive::ConvTranspose2d { stride, pad }, &ins)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[a])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::LogSoftmax, &[a])
    }
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::GlobalAvgPool, &[a])
    }
    pub fn avg_pool(&mut self, a: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.apply(Primitive::AvgPool { kernel, stride }, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[a])
    }
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, xs)
    }
    pub fn sum(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.apply(
            Primitive::Sum {
                axes: axes.to_vec(),
                keepdim,
            },
            &[a],
        )
    }
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.sum(a, &[], false)
    }
    pub fn mean(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.apply(
            Primitive::Mean {
                axes: axes.to_vec(),
                keepdim,
            },
            &[a],
        )
    }
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.mean(a, &[], false)
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Square, &[a])
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sqrt, &[a])
    }
    pub fn pow(&mut self, a: Var, exponent: f64) -> Result<Var> {
        self.apply(Primitive::Pow { exponent }, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::L2Norm { axis }, &[a])
    }
    pub fn pairwise_distance(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::PairwiseDistance, &[a])
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, len }, &[a])
    }
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Gather { indices }, &[a])
    }
}

fn arity(op: &'static str, inputs: usize, allowed: &[usize]) -> Result<()> {
    if allowed.contains(&inputs) {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("expected {allowed:?} inputs, got {inputs}"),
        ))
    }
}

fn t<T: Element>(x: f64) -> T {
    T::from_f64_lossy(x)
}

/// Evaluates a primitive without recording it.
pub fn forward<T: Element>(prim: &Primitive, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let op = prim.name();
    match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            arity(op, x.len(), &[2])?;
            let f: fn(T, T) -> T = match prim {
                Primitive::Add => |a, b| a + b,
                Primitive::Sub => |a, b| a - b,
                Primitive::Mul => |a, b| a * b,
                _ => |a, b| a / b,
            };
            binary(op, x[0], x[1], f)
        }
        Primitive::Affine { scale, shift } => {
            arity(op, x.len(), &[1])?;
            let (s, c) = (t::<T>(*scale), t::<T>(*shift));
            Ok(x[0].map(|v| v * s + c))
        }
        Primitive::MatMul => {
            arity(op, x.len(), &[2])?;
            matmul_forward(x[0], x[1])
        }
        Primitive::Conv2d { stride, pad } => {
            arity(op, x.len(), &[2, 3])?;
            let (n, g, cout) = conv_geom(x, *stride, *pad)?;
            let out = kernels::conv2d_forward(
                x[0].data(),
                n,
                &g,
                x[1].data(),
                cout,
                x.get(2).map(|b| b.data()),
            );
            Ok(Tensor::from_parts(vec![n, cout, g.oh, g.ow], out))
        }
        Primitive::ConvTranspose2d { stride, pad } => {
            arity(op, x.len(), &[2, 3])?;
            let (n, cin, g) = conv_t_geom(x, *stride, *pad)?;
            let out = kernels::conv_transpose2d_forward(
                x[0].data(),
                n,
                cin,
                &g,
                x[1].data(),
                x.get(2).map(|b| b.data()),
            );
            Ok(Tensor::from_parts(vec![n, g.c, g.h, g.w], out))
        }
        Primitive::Relu => Ok(x[0].map(|v| if v > T::zero() { v } else { T::zero() })),
        Primitive::Sigmoid => Ok(x[0].map(sigmoid)),
        Primitive::Softmax | Primitive::LogSoftmax => {
            let last = *x[0].shape().last().unwrap();
            let mut out = x[0].data().to_vec();
            let log = matches!(prim, Primitive::LogSoftmax);
            for row in out.chunks_mut(last) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = *v - m;
                    s = s + v.exp();
                }
                if log {
                    let ls = s.ln();
                    row.iter_mut().for_each(|v| *v = *v - ls);
                } else {
                    row.iter_mut().for_each(|v| *v = v.exp() / s);
                }
            }
            Ok(Tensor::from_parts(x[0].shape().to_vec(), out))
        }
        Primitive::GlobalAvgPool => {
            let s = rank_is(op, x[0], 4)?;
            let hw = s[2] * s[3];
            let inv = t::<T>(1.0 / hw as f64);
            let data = x[0]
                .data()
                .chunks(hw)
                .map(|p| p.iter().copied().sum::<T>() * inv)
                .collect();
            Ok(Tensor::from_parts(vec![s[0], s[1]], data))
        }
        Primitive::AvgPool { kernel, stride } => {
            let s = rank_is(op, x[0], 4)?;
            let (oh, ow) = pool_dims(op, s, *kernel, *stride)?;
            let out = kernels::avg_pool_forward(
                x[0].data(),
                s[0] * s[1],
                s[2],
                s[3],
                *kernel,
                *stride,
                oh,
                ow,
            );
            Ok(Tensor::from_parts(vec![s[0], s[1], oh, ow], out))
        }
        Primitive::Reshape { shape } => {
            let n: usize = shape.iter().product();
            if n != x[0].len() || shape.contains(&0) {
                return Err(Error::shape(
                    op,
                    format!("{:?} -> {:?}", x[0].shape(), shape),
                ));
            }
            Ok(Tensor::from_parts(shape.clone(), x[0].data().to_vec()))
        }
        Primitive::Transpose => {
            let s = x[0].shape();
            if s.len() < 2 {
                return Err(Error::shape(op, format!("rank {} < 2", s.len())));
            }
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            let mut shape = s.to_vec();
            let rank = shape.len();
            shape.swap(rank - 2, rank - 1);
            Ok(Tensor::from_parts(
                shape,
                transpose_last2(x[0].data(), r, c),
            ))
        }
        Primitive::Concat { axis } => concat_forward(op, x, *axis),
        Primitive::Sum { axes, keepdim } | Primitive::Mean { axes, keepdim } => {
            let (out_shape, keep_shape, count) = reduce_shapes(op, x[0].shape(), axes, *keepdim)?;
            let mut acc = vec![T::zero(); keep_shape.iter().product()];
            let strides = kernels::broadcast_strides(&keep_shape, x[0].shape());
            let zeros = vec![0; strides.len()];
            let src = x[0].data();
            kernels::for_each_broadcast(x[0].shape(), &strides, &zeros, |i, o, _| {
                acc[o] = acc[o] + src[i]
            });
            if matches!(prim, Primitive::Mean { .. }) {
                let inv = t::<T>(1.0 / count as f64);
                acc.iter_mut().for_each(|v| *v = *v * inv);
            }
            Ok(Tensor::from_parts(out_shape, acc))
        }
        Primitive::Square => Ok(x[0].map(|v| v * v)),
        Primitive::Sqrt => Ok(x[0].map(|v| v.sqrt())),
        Primitive::Pow { exponent } => {
            let e = t::<T>(*exponent);
            Ok(x[0].map(|v| v.powf(e)))
        }
        Primitive::Exp => Ok(x[0].map(|v| v.exp())),
        Primitive::Log => Ok(x[0].map(|v| v.ln())),
        Primitive::L2Norm { axis } => {
            let (out_shape, keep_shape, _) = reduce_shapes(op, x[0].shape(), &[*axis], false)?;
            let mut acc = vec![T::zero(); keep_shape.iter().product()];
            let strides = kernels::broadcast_strides(&keep_shape, x[0].shape());
            let zeros = vec![0; strides.len()];
            let src = x[0].data();
            kernels::for_each_broadcast(x[0].shape(), &strides, &zeros, |i, o, _| {
                acc[o] = acc[o] + src[i] * src[i]
            });
            acc.iter_mut().for_each(|v| *v = v.sqrt());
            Ok(Tensor::from_parts(out_shape, acc))
        }
        Primitive::PairwiseDistance => {
            let s = rank_is(op, x[0], 2)?;
            let (n, d) = (s[0], s[1]);
            let a = x[0].data();
            let mut out = vec![T::zero(); n * n];
            for i in 0..n {
                for j in (i + 1)..n {
                    let mut acc = T::zero();
                    for k in 0..d {
                        let diff = a[i * d + k] - a[j * d + k];
                        acc = acc + diff * diff;
                    }
                    let dist = acc.sqrt();
                    out[i * n + j] = dist;
                    out[j * n + i] = dist;
                }
            }
            Ok(Tensor::from_parts(vec![n, n], out))
        }
        Primitive::Slice { axis, start, len } => {
            let s = x[0].shape();
            if *axis >= s.len() || *len == 0 || start + len > s[*axis] {
                return Err(Error::shape(
                    op,
                    format!("axis {axis} range {start}..{} of {s:?}", start + len),
                ));
            }
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let src = x[0].data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * s[*axis] * inner;
                out.extend_from_slice(&src[base + start * inner..base + (start + len) * inner]);
            }
            let mut shape = s.to_vec();
            shape[*axis] = *len;
            Ok(Tensor::from_parts(shape, out))
        }
        Primitive::Gather { indices } => {
            let src = x[0].data();
            if indices.is_empty() || indices.iter().any(|&i| i >= src.len()) {
                return Err(Error::shape(
                    op,
                    format!("indices out of range for {:?}", x[0].shape()),
                ));
            }
            Ok(Tensor::from_parts(
                vec![indices.len()],
                indices.iter().map(|&i| src[i]).collect(),
            ))
        }
    }
}

fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn rank_is<'a, T: Element>(op: &'static str, x: &'a Tensor<T>, rank: usize) -> Result<&'a [usize]> {
    if x.rank() != rank {
        return Err(Error::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", x.shape()),
        ));
    }
    Ok(x.shape())
}

fn pool_dims(op: &'static str, s: &[usize], k: usize, stride: usize) -> Result<(usize, usize)> {
    if k == 0 || stride == 0 || s[2] < k || s[3] < k {
        return Err(Error::shape(
            op,
            format!("kernel {k} stride {stride} on {s:?}"),
        ));
    }
    Ok(((s[2] - k) / stride + 1, (s[3] - k) / stride + 1))
}

fn binary<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = kernels::broadcast_shape(op, a.shape(), b.shape())?;
    let sa = kernels::broadcast_strides(a.shape(), &out);
    let sb = kernels::broadcast_strides(b.shape(), &out);
    let mut data = vec![T::zero(); out.iter().product()];
    let (da, db) = (a.data(), b.data());
    kernels::for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
    Ok(Tensor::from_parts(out, data))
}

fn transpose_last2<T: Element>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (bi, block) in src.chunks(r * c).enumerate() {
        let dst = &mut out[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = block[i * c + j];
            }
        }
    }
    out
}

/// `(out_shape, keepdim_shape, reduced_count)`.
fn reduce_shapes(
    op: &'static str,
    shape: &[usize],
    axes: &[usize],
    keepdim: bool,
) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    if axes.iter().any(|&a| a >= shape.len()) {
        return Err(Error::shape(
            op,
            format!("axes {axes:?} out of range for {shape:?}"),
        ));
    }
    let all = axes.is_empty();
    let reduced = |i: usize| all || axes.contains(&i);
    let keep: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if reduced(i) { 1 } else { d })
        .collect();
    let count = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| reduced(*i))
        .map(|(_, &d)| d)
        .product();
    let out = if keepdim {
        keep.clone()
    } else {
        let v: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !reduced(*i))
            .map(|(_, &d)| d)
            .collect();
        if v.is_empty() {
            vec![1]
        } else {
            v
        }
    };
    Ok((out, keep, count))
}

fn concat_forward<T: Element>(
    op: &'static str,
    x: &[&Tensor<T>],
    axis: usize,
) -> Result<Tensor<T>> {
    let first = x
        .first()
        .ok_or_else(|| Error::shape(op, "no inputs"))?
        .shape();
    if axis >= first.len() {
        return Err(Error::shape(
            op,
            format!("axis {axis} for rank {}", first.len()),
        ));
    }
    for t in x {
        let s = t.shape();
        let same = s.len() == first.len()
            && s.iter()
                .zip(first)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(Error::shape(
                op,
                format!("{s:?} vs {first:?} along axis {axis}"),
            ));
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total: usize = x.iter().map(|t| t.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in x {
            let n = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * n..(o + 1) * n]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

enum MatMulKind {
    /// Leading dims of `a` folded into M.
    Flat { m: usize, k: usize, n: usize },
    Batched {
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
}

fn matmul_kind<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(MatMulKind, Vec<usize>)> {
    let (sa, sb) = (a.shape(), b.shape());
    let bad = || Error::shape("matmul", format!("{sa:?} @ {sb:?}"));
    if sa.len() < 2 || sb.len() < 2 {
        return Err(bad());
    }
    let k = sa[sa.len() - 1];
    if sb.len() == 2 {
        if sb[0] != k {
            return Err(bad());
        }
        let m = a.len() / k;
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(sb[1]);
        return Ok((MatMulKind::Flat { m, k, n: sb[1] }, shape));
    }
    if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] || sb[sb.len() - 2] != k {
        return Err(bad());
    }
    let bdim: usize = sa[..sa.len() - 2].iter().product();
    let (m, n) = (sa[sa.len() - 2], sb[sb.len() - 1]);
    let mut shape = sa[..sa.len() - 1].to_vec();
    shape.push(n);
    Ok((MatMulKind::Batched { b: bdim, m, k, n }, shape))
}

fn matmul_forward<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (kind, shape) = matmul_kind(a, b)?;
    let out = match kind {
        MatMulKind::Flat { m, k, n } => {
            let mut c = vec![T::zero(); m * n];
            kernels::matmul_into(m, k, n, a.data(), false, b.data(), false, &mut c, false);
            c
        }
        MatMulKind::Batched { b: nb, m, k, n } => {
            let mut c = vec![T::zero(); nb * m * n];
            for i in 0..nb {
                kernels::matmul_into(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    false,
                    &mut c[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            c
        }
    };
    Ok(Tensor::from_parts(shape, out))
}

fn conv_geom<T: Element>(
    x: &[&Tensor<T>],
    stride: usize,
    pad: usize,
) -> Result<(usize, ConvGeom, usize)> {
    let op = "conv2d";
    let s = rank_is(op, x[0], 4)?;
    let w = rank_is(op, x[1], 4)?;
    if w[1] != s[1] || w[2] != w[3] {
        return Err(Error::shape(op, format!("input {s:?} with weight {w:?}")));
    }
    if let Some(b) = x.get(2) {
        if b.shape() != [w[0]] {
            return Err(Error::shape(
                op,
                format!("bias {:?} for {} output channels", b.shape(), w[0]),
            ));
        }
    }
    let g = ConvGeom::new(s[1], s[2], s[3], w[2], stride, pad).ok_or_else(|| {
        Error::shape(
            op,
            format!("kernel {} stride {stride} pad {pad} on {s:?}", w[2]),
        )
    })?;
    Ok((s[0], g, w[0]))
}

fn conv_t_geom<T: Element>(
    x: &[&Tensor<T>],
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, ConvGeom)> {
    let op = "transposed-conv2d";
    let s = rank_is(op, x[0], 4)?;
    let w = rank_is(op, x[1], 4)?;
    if w[0] != s[1] || w[2] != w[3] || stride == 0 {
        return Err(Error::shape(op, format!("input {s:?} with weight {w:?}")));
    }
    let (cout, k) = (w[1], w[2]);
    if let Some(b) = x.get(2) {
        if b.shape() != [cout] {
            return Err(Error::shape(
                op,
                format!("bias {:?} for {cout} output channels", b.shape()),
            ));
        }
    }
    let out_dim = |n: usize| {
        ((n - 1) * stride + k)
            .checked_sub(2 * pad)
            .filter(|&d| d > 0)
    };
    let (oh, ow) = match (out_dim(s[2]), out_dim(s[3])) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::shape(op, format!("pad {pad} too large for {s:?}"))),
    };
    let g = ConvGeom::new(cout, oh, ow, k, stride, pad)
        .filter(|g| g.oh == s[2] && g.ow == s[3])
        .ok_or_else(|| Error::shape(op, format!("inconsistent geometry for {s:?}")))?;
    Ok((s[0], s[1], g))
}

fn backward_rule<T: Element>(
    prim: &Primitive,
    x: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
    need: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let like = |src: &Tensor<T>, data: Vec<T>| Tensor::from_parts(src.shape().to_vec(), data);
    let zip = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Tensor<T> {
        like(
            a,
            a.data()
                .iter()
                .zip(g.data())
                .map(|(&u, &v)| f(u, v))
                .collect(),
        )
    };
    let zip_out = |f: &dyn Fn(T, T) -> T| -> Tensor<T> {
        like(
            out,
            out.data()
                .iter()
                .zip(g.data())
                .map(|(&u, &v)| f(u, v))
                .collect(),
        )
    };
    let res = match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            let (a, b) = (x[0], x[1]);
            let oshape = out.shape();
            let (sa, sb) = (
                kernels::broadcast_strides(a.shape(), oshape),
                kernels::broadcast_strides(b.shape(), oshape),
            );
            let (da, db, go) = (a.data(), b.data(), g.data());
            let n = go.len();
            let mut ga = vec![T::zero(); if need[0] { n } else { 0 }];
            let mut gb = vec![T::zero(); if need[1] { n } else { 0 }];
            kernels::for_each_broadcast(oshape, &sa, &sb, |o, ia, ib| {
                let (u, v, gg) = (da[ia], db[ib], go[o]);
                let (pa, pb) = match prim {
                    Primitive::Add => (gg, gg),
                    Primitive::Sub => (gg, -gg),
                    Primitive::Mul => (gg * v, gg * u),
                    _ => (gg / v, -gg * u / (v * v)),
                };
                if need[0] {
                    ga[o] = pa;
                }
                if need[1] {
                    gb[o] = pb;
                }
            });
            vec![
                need[0].then(|| like(a, kernels::reduce_to_shape(&ga, oshape, a.shape()))),
                need[1].then(|| like(b, kernels::reduce_to_shape(&gb, oshape, b.shape()))),
            ]
        }
        Primitive::Affine { scale, .. } => {
            let s = t::<T>(*scale);
            vec![Some(g.map(|v| v * s))]
        }
        Primitive::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (kind, _) = matmul_kind(a, b)?;
            match kind {
                MatMulKind::Flat { m, k, n } => {
                    let ga = need[0].then(|| {
                        let mut d = vec![T::zero(); m * k];
                        kernels::matmul_into(
                            m,
                            n,
                            k,
                            g.data(),
                            false,
                            b.data(),
                            true,
                            &mut d,
                            false,
                        );
                        like(a, d)
                    });
                    let gb = need[1].then(|| {
                        let mut d = vec![T::zero(); k * n];
                        kernels::matmul_into(
                            k,
                            m,
                            n,
                            a.data(),
                            true,
                            g.data(),
                            false,
                            &mut d,
                            false,
                        );
                        like(b, d)
                    });
                    vec![ga, gb]
                }
                MatMulKind::Batched { b: nb, m, k, n } => {
                    let mut ga = vec![T::zero(); nb * m * k];
                    let mut gb = vec![T::zero(); nb * k * n];
                    for i in 0..nb {
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        if need[0] {
                            let bi = &b.data()[i * k * n..(i + 1) * k * n];
                            let dst = &mut ga[i * m * k..(i + 1) * m * k];
                            kernels::matmul_into(m, n, k, gi, false, bi, true, dst, false);
                        }
                        if need[1] {
                            let ai = &a.data()[i * m * k..(i + 1) * m * k];
                            let dst = &mut gb[i * k * n..(i + 1) * k * n];
                            kernels::matmul_into(k, m, n, ai, true, gi, false, dst, false);
                        }
                    }
                    vec![need[0].then(|| like(a, ga)), need[1].then(|| like(b, gb))]
                }
            }
        }
        Primitive::Conv2d { stride, pad } => {
            let (n, geom, cout) = conv_geom(x, *stride, *pad)?;
            let want_b = need.get(2).copied().unwrap_or(false);
            let (dx, dw, db) = kernels::conv2d_backward(
                x[0].data(),
                n,
                &geom,
                x[1].data(),
                cout,
                g.data(),
                (need[0], need[1], want_b),
            );
            let mut v = vec![dx.map(|d| like(x[0], d)), dw.map(|d| like(x[1], d))];
            if x.len() == 3 {
                v.push(db.map(|d| like(x[2], d)));
            }
            v
        }
        Primitive::ConvTranspose2d { stride, pad } => {
            let (n, cin, geom) = conv_t_geom(x, *stride, *pad)?;
            let want_b = need.get(2).copied().unwrap_or(false);
            let (dx, dw, db) = kernels::conv_transpose2d_backward(
                x[0].data(),
                n,
                cin,
                &geom,
                x[1].data(),
                g.data(),
                (need[0], need[1], want_b),
            );
            let mut v = vec![dx.map(|d| like(x[0], d)), dw.map(|d| like(x[1], d))];
            if x.len() == 3 {
                v.push(db.map(|d| like(x[2], d)));
            }
            v
        }
        Primitive::Relu => vec![Some(zip(x[0], &|u, v| {
            if u > T::zero() {
                v
            } else {
                T::zero()
            }
        }))],
        Primitive::Sigmoid => vec![Some(zip_out(&|y, v| v * y * (T::one() - y)))],
        Primitive::Softmax => {
            let last = *out.shape().last().unwrap();
            let mut d = vec![T::zero(); out.len()];
            for ((y, go), dst) in out
                .data()
                .chunks(last)
                .zip(g.data().chunks(last))
                .zip(d.chunks_mut(last))
            {
                let dot: T = y.iter().zip(go).map(|(&a, &b)| a * b).sum();
                for ((o, &yy), &gg) in dst.iter_mut().zip(y).zip(go) {
                    *o = yy * (gg - dot);
                }
            }
            vec![Some(like(out, d))]
        }
        Primitive::LogSoftmax => {
            let last = *out.shape().last().unwrap();
            let mut d = vec![T::zero(); out.len()];
            for ((y, go), dst) in out
                .data()
                .chunks(last)
                .zip(g.data().chunks(last))
                .zip(d.chunks_mut(last))
            {
                let s: T = go.iter().copied().sum();
                for ((o, &ly), &gg) in dst.iter_mut().zip(y).zip(go) {
                    *o = gg - ly.exp() * s;
                }
            }
            vec![Some(like(out, d))]
        }
        Primitive::GlobalAvgPool => {
            let s = x[0].shape();
            let hw = s[2] * s[3];
            let inv = t::<T>(1.0 / hw as f64);
            let d = g
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v * inv, hw))
                .collect();
            vec![Some(like(x[0], d))]
        }
        Primitive::AvgPool { kernel, stride } => {
            let s = x[0].shape();
            let (oh, ow) = pool_dims("average-pool", s, *kernel, *stride)?;
            let d = kernels::avg_pool_backward(
                g.data(),
                s[0] * s[1],
                s[2],
                s[3],
                *kernel,
                *stride,
                oh,
                ow,
            );
            vec![Some(like(x[0], d))]
        }
        Primitive::Reshape { .. } => vec![Some(like(x[0], g.data().to_vec()))],
        Primitive::Transpose => {
            let s = out.shape();
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            vec![Some(like(x[0], transpose_last2(g.data(), r, c)))]
        }
        Primitive::Concat { axis } => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[axis + 1..].iter().product();
            let total = out.shape()[*axis] * inner;
            let mut offset = 0;
            let mut v = Vec::with_capacity(x.len());
            for (xi, &needed) in x.iter().zip(need) {
                let n = xi.shape()[*axis] * inner;
                if needed {
                    let mut d = Vec::with_capacity(xi.len());
                    for o in 0..outer {
                        d.extend_from_slice(&g.data()[o * total + offset..o * total + offset + n]);
                    }
                    v.push(Some(like(xi, d)));
                } else {
                    v.push(None);
                }
                offset += n;
            }
            v
        }
        Primitive::Sum { axes, keepdim } | Primitive::Mean { axes, keepdim } => {
            let (_, keep, count) = reduce_shapes("sum", x[0].shape(), axes, *keepdim)?;
            let scale = if matches!(prim, Primitive::Mean { .. }) {
                t::<T>(1.0 / count as f64)
            } else {
                T::one()
            };
            let strides = kernels::broadcast_strides(&keep, x[0].shape());
            let zeros = vec![0; strides.len()];
            let mut d = vec![T::zero(); x[0].len()];
            let go = g.data();
            kernels::for_each_broadcast(x[0].shape(), &strides, &zeros, |i, o, _| {
                d[i] = go[o] * scale
            });
            vec![Some(like(x[0], d))]
        }
        Primitive::Square => vec![Some(zip(x[0], &|u, v| v * (u + u)))],
        Primitive::Sqrt => vec![Some(zip_out(&|y, v| {
            if y > T::zero() {
                v / (y + y)
            } else {
                T::zero()
            }
        }))],
        Primitive::Pow { exponent } => {
            let e = t::<T>(*exponent);
            vec![Some(zip(x[0], &|u, v| {
                let d = e * u.powf(e - T::one());
                if d.is_finite() {
                    v * d
                } else {
                    T::zero()
                }
            }))]
        }
        Primitive::Exp => vec![Some(zip_out(&|y, v| v * y))],
        Primitive::Log => vec![Some(zip(x[0], &|u, v| v / u))],
        Primitive::L2Norm { axis } => {
            let (_, keep, _) = reduce_shapes("l2-norm", x[0].shape(), &[*axis], false)?;
            let strides = kernels::broadcast_strides(&keep, x[0].shape());
            let zeros = vec![0; strides.len()];
            let (src, y, go) = (x[0].data(), out.data(), g.data());
            let mut d = vec![T::zero(); x[0].len()];
            kernels::for_each_broadcast(x[0].shape(), &strides, &zeros, |i, o, _| {
                if y[o] > T::zero() {
                    d[i] = go[o] * src[i] / y[o];
                }
            });
            vec![Some(like(x[0], d))]
        }
        Primitive::PairwiseDistance => {
            let (n, dim) = (x[0].shape()[0], x[0].shape()[1]);
            let (a, y, go) = (x[0].data(), out.data(), g.data());
            let mut d = vec![T::zero(); a.len()];
            for i in 0..n {
                for j in 0..n {
                    let dist = y[i * n + j];
                    if i == j || dist <= T::zero() {
                        continue;
                    }
                    let c = (go[i * n + j] + go[j * n + i]) / dist;
                    for k in 0..dim {
                        d[i * dim + k] = d[i * dim + k] + c * (a[i * dim + k] - a[j * dim + k]);
                    }
                }
            }
            vec![Some(like(x[0], d))]
        }
        Primitive::Slice { axis, start, len } => {
            let s = x[0].shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let mut d = vec![T::zero(); x[0].len()];
            for o in 0..outer {
                let base = o * s[*axis] * inner + start * inner;
                d[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(like(x[0], d))]
        }
        Primitive::Gather { indices } => {
            let mut d = vec![T::zero(); x[0].len()];
            for (&i, &v) in indices.iter().zip(g.data()) {
                d[i] = d[i] + v;
            }
            vec![Some(like(x[0], d))]
        }
    };
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tens(shape: &[usize], v: &[f32]) -> Tensor<f32> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f32>::new();
        let i = tape.input(tens(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.input(tens(&[2, 2], &[1.5, -2.0, 3.25, 4.0]));
        let y = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -2.0, 3.25, 4.0]);
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::from_vec(vec![-1.0, 0.0, 2.5]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn conv_of_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.input(Tensor::ones(&[1, 1, 2, 2]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true);
        let sq = tape.square(x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_has_no_gradients() {
        let mut tape = Tape::<f32>::new();
        let c = tape.input(Tensor::scalar(3.0));
        let loss = tape.scale(c, 2.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.params().count(), 0);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn unreachable_leaf_is_untouched() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::scalar(2.0), true);
        let b = tape.leaf(Tensor::scalar(5.0), true);
        let _unused = tape.square(b).unwrap();
        let loss = tape.square(a).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().item(), 4.0);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::scalar(2.0), true);
        let loss = tape.square(a).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::DeadTape)));
        assert!(matches!(tape.square(a), Err(Error::DeadTape)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn overflow_is_reported() {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(Tensor::from_vec(vec![100.0]));
        assert!(matches!(
            tape.exp(a),
            Err(Error::NumericOverflow { op: "exp" })
        ));
        let z = tape.input(Tensor::from_vec(vec![0.0]));
        assert!(matches!(
            tape.log(z),
            Err(Error::NumericOverflow { op: "log" })
        ));
    }

    #[test]
    fn transposed_conv_upsamples() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::ones(&[2, 3, 4, 5]));
        let w = tape.input(Tensor::ones(&[3, 2, 2, 2]));
        let y = tape.conv_transpose2d(x, w, None, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 8, 10]);
        assert!(tape.value(y).data().iter().all(|&v| v == 3.0));
    }
}
