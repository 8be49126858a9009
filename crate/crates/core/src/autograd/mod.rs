//! Define-by-run reverse-mode differentiation.
//!
//! Every operation on a [`Tape`] computes its value eagerly and appends a
//! node; nodes are only ever appended, so walking the tape from the end
//! backwards visits them in reverse topological order.

mod adam;
mod gradcheck;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{central_difference, grad_check, grad_check_at, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::{self, ConvSpec, NormMode, PoolMode, Scalar, Shape4, Tensor4};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Pool {
        x: Var,
        mode: PoolMode,
        k: usize,
        stride: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Resize(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Tensor4<T>,
        inv_std: Vec<T>,
        mode: NormMode,
    },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Var, Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    BceWithLogits {
        z: Var,
        target: Tensor4<T>,
    },
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
}

/// Recorded computation. Single owner; rebuilt for every forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf of the tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor4<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor4<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor4<T>>, g: Tensor4<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

fn bias_tensor<T: Scalar>(gb: Vec<T>) -> Tensor4<T> {
    let c = gb.len();
    Tensor4::from_parts(Shape4::new(1, c, 1, 1), gb)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every piecewise choice made during the forward pass: the
    /// sign of each ReLU input and the winning index of each max pool.
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.nodes[x.0].value.data() {
                        h.write_u8(u8::from(*v > T::zero()));
                    }
                }
                Op::Pool {
                    mode: PoolMode::Max,
                    argmax,
                    ..
                } => {
                    for &i in argmax {
                        h.write_usize(i);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Autograd(format!("variable {} is not on this tape", v.0)))
        }
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    /// Convolution; `b` (if given) must hold `out_ch` elements.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let bias = match b {
            Some(b) => {
                self.check(b)?;
                Some(self.value(b).data())
            }
            None => None,
        };
        let y = tensor::conv2d(self.value(x), self.value(w), bias, &spec)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, spec }))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let bias = match b {
            Some(b) => {
                self.check(b)?;
                Some(self.value(b).data())
            }
            None => None,
        };
        let y = tensor::conv_transpose2d(self.value(x), self.value(w), bias, stride)?;
        Ok(self.push(y, Op::ConvTranspose2d { x, w, b, stride }))
    }

    pub fn pool2d(&mut self, x: Var, mode: PoolMode, k: usize, stride: usize) -> Result<Var> {
        self.check(x)?;
        let (y, argmax) = tensor::pool2d_with_argmax(self.value(x), mode, k, stride)?;
        Ok(self.push(
            y,
            Op::Pool {
                x,
                mode,
                k,
                stride,
                argmax,
            },
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = tensor::global_avg_pool(self.value(x));
        Ok(self.push(y, Op::GlobalAvgPool(x)))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.check(x)?;
        let y = tensor::bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(y, Op::Resize(x)))
    }

    /// Batch normalisation. `gamma`/`beta` are leaves holding C elements;
    /// the returned pair carries the updated running statistics in train mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        for v in [x, gamma, beta] {
            self.check(v)?;
        }
        let out = tensor::batchnorm2d(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            tensor::BN_EPS,
            mode,
            running_mean,
            running_var,
        )?;
        let var = self.push(
            out.output,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat: out.x_hat,
                inv_std: out.inv_std,
                mode,
            },
        );
        Ok((var, out.running))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = tensor::relu(self.value(x));
        Ok(self.push(y, Op::Relu(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = tensor::sigmoid(self.value(x));
        Ok(self.push(y, Op::Sigmoid(x)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = tensor::softmax_rows(self.value(x));
        Ok(self.push(y, Op::SoftmaxRows(x)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let y = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = tensor::transpose_last2(self.value(x));
        Ok(self.push(y, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Shape4>) -> Result<Var> {
        self.check(x)?;
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let y = tensor::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat(a, b)))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let y = tensor::slice_channels(self.value(x), start, len)?;
        Ok(self.push(y, Op::SliceChannels { x, start }))
    }

    /// `a + b` with `b` broadcast against `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let y = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    /// `a ⊙ b` with `b` broadcast against `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let y = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.check(x)?;
        let y = tensor::scale(self.value(x), factor);
        Ok(self.push(y, Op::Scale(x, factor)))
    }

    /// Sum of all elements, as a (1,1,1,1) scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = Tensor4::scalar(self.value(x).sum());
        Ok(self.push(y, Op::Sum(x)))
    }

    /// Mean binary cross-entropy of logits `z` against `target`.
    pub fn bce_with_logits(&mut self, z: Var, target: &Tensor4<T>) -> Result<Var> {
        self.check(z)?;
        let loss = crate::loss::bce_with_logits(self.value(z), target)?;
        Ok(self.push(
            Tensor4::scalar(loss),
            Op::BceWithLogits {
                z,
                target: target.clone(),
            },
        ))
    }

    /// Reverse sweep from the scalar `loss`, seeded with d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Autograd(format!(
                "backward needs a scalar loss, got shape {}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::from_parts(self.value(loss).shape(), vec![T::one()]));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (var, contrib) in self.vjp(node, &g)? {
                accumulate(&mut grads[var.0], contrib);
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector–Jacobian products of one node with respect to its operands.
    fn vjp(&self, node: &Node<T>, g: &Tensor4<T>) -> Result<Vec<(Var, Tensor4<T>)>> {
        let val = |v: Var| self.value(v);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, spec } => {
                let (gx, gw, gb) = tensor::conv2d_backward(val(*x), val(*w), g, spec)?;
                let mut out = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    out.push((*b, bias_tensor(gb).reshape(val(*b).shape())?));
                }
                out
            }
            Op::ConvTranspose2d { x, w, b, stride } => {
                let (gx, gw, gb) =
                    tensor::conv_transpose2d_backward(val(*x), val(*w), g, *stride)?;
                let mut out = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    out.push((*b, bias_tensor(gb).reshape(val(*b).shape())?));
                }
                out
            }
            Op::Pool {
                x,
                mode,
                k,
                stride,
                argmax,
            } => vec![(
                *x,
                tensor::pool2d_backward(val(*x).shape(), g, *mode, *k, *stride, argmax)?,
            )],
            Op::GlobalAvgPool(x) => {
                vec![(*x, tensor::global_avg_pool_backward(val(*x).shape(), g))]
            }
            Op::Resize(x) => vec![(*x, tensor::bilinear_resize_backward(val(*x).shape(), g))],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                mode,
            } => {
                let (gx, dg, db) =
                    tensor::batchnorm2d_backward(g, x_hat, inv_std, val(*gamma).data(), *mode);
                let gs = val(*gamma).shape();
                let bs = val(*beta).shape();
                vec![
                    (*x, gx),
                    (*gamma, Tensor4::from_parts(gs, dg)),
                    (*beta, Tensor4::from_parts(bs, db)),
                ]
            }
            Op::Relu(x) => {
                // subgradient at 0 is 0
                let gx = val(*x).zip_map(g, |xv, gv| if xv > T::zero() { gv } else { T::zero() })?;
                vec![(*x, gx)]
            }
            Op::Sigmoid(x) => {
                let gx = node.value.zip_map(g, |y, gv| gv * y * (T::one() - y))?;
                vec![(*x, gx)]
            }
            Op::SoftmaxRows(x) => vec![(*x, tensor::softmax_rows_backward(&node.value, g))],
            Op::Matmul(a, b) => {
                let (ga, gb) = tensor::matmul_backward(val(*a), val(*b), g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(x) => vec![(*x, tensor::transpose_last2(g))],
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape())?)],
            Op::Concat(a, b) => {
                let ca = val(*a).shape().c;
                let cb = val(*b).shape().c;
                vec![
                    (*a, tensor::slice_channels(g, 0, ca)?),
                    (*b, tensor::slice_channels(g, ca, cb)?),
                ]
            }
            Op::SliceChannels { x, start } => {
                let xs = val(*x).shape();
                let len = g.shape().c;
                let p = xs.plane();
                let mut gx = vec![T::zero(); xs.numel()];
                for n in 0..xs.n {
                    let dst = &mut gx[(n * xs.c + start) * p..(n * xs.c + start + len) * p];
                    dst.copy_from_slice(g.sample(n));
                }
                vec![(*x, Tensor4::from_parts(xs, gx))]
            }
            Op::Add(a, b) => {
                let gb = tensor::broadcast_reduce(g, val(*b).shape())?;
                vec![(*a, g.clone()), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let ga = tensor::mul(g, val(*b))?;
                let gfull = g.zip_map(val(*a), |gv, av| gv * av)?;
                let gb = tensor::broadcast_reduce(&gfull, val(*b).shape())?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, f) => vec![(*x, tensor::scale(g, *f))],
            Op::Sum(x) => {
                let gv = g.item()?;
                vec![(*x, Tensor4::full(val(*x).shape(), gv)?)]
            }
            Op::BceWithLogits { z, target } => {
                let gv = g.item()?;
                let inv_n = T::one() / T::of(target.numel() as f64);
                let gz = val(*z).zip_map(target, |zv, tv| {
                    gv * (tensor::sigmoid_scalar(zv) - tv) * inv_n
                })?;
                vec![(*z, gz)]
            }
        })
    }
}
