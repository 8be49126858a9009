//! Pointwise maps, broadcasting arithmetic, row softmax, batched matmul and
//! channel bookkeeping.

use super::{gemm, MatRef, Scalar, Shape4, Tensor4};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[inline]
pub(crate) fn relu_scalar<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Logistic function evaluated on the branch that never overflows.
#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Scalar>(input: &Tensor4<T>, kind: Activation) -> Tensor4<T> {
    match kind {
        Activation::Relu => input.map(relu_scalar),
        Activation::Sigmoid => input.map(sigmoid_scalar),
    }
}

pub fn relu<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    activation(input, Activation::Relu)
}

pub fn sigmoid<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    activation(input, Activation::Sigmoid)
}

pub fn scale<T: Scalar>(input: &Tensor4<T>, factor: T) -> Tensor4<T> {
    input.map(|v| v * factor)
}

/// Softmax along the last axis; every (n, c, h) row is normalised.
pub fn softmax_rows<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    let w = input.shape().w;
    let mut out = Vec::with_capacity(input.numel());
    for row in input.data().chunks(w) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    Tensor4::from_parts(input.shape(), out)
}

/// `dx = y ⊙ (dy − Σ dy ⊙ y)` row by row.
pub(crate) fn softmax_rows_backward<T: Scalar>(output: &Tensor4<T>, grad_out: &Tensor4<T>) -> Tensor4<T> {
    let w = output.shape().w;
    let mut gx = Vec::with_capacity(output.numel());
    for (y, g) in output.data().chunks(w).zip(grad_out.data().chunks(w)) {
        let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
        gx.extend(y.iter().zip(g).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor4::from_parts(output.shape(), gx)
}

/// Batched matrix product over the trailing two axes:
/// (n, c, m, k) · (n, c, k, p) → (n, c, m, p).
pub fn matmul<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.c != sb.c || sa.w != sb.h {
        return Err(shape_err!("matmul of {sa} and {sb}"));
    }
    let (m, k, p) = (sa.h, sa.w, sb.w);
    let os = Shape4::new(sa.n, sa.c, m, p);
    let mut out = vec![T::zero(); os.numel()];
    for i in 0..sa.n * sa.c {
        gemm(
            MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k),
            MatRef::new(&b.data()[i * k * p..(i + 1) * k * p], k, p),
            &mut out[i * m * p..(i + 1) * m * p],
            T::zero(),
        );
    }
    Ok(Tensor4::from_parts(os, out))
}

pub(crate) fn matmul_backward<T: Scalar>(
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>) {
    let (sa, sb) = (a.shape(), b.shape());
    let (m, k, p) = (sa.h, sa.w, sb.w);
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    for i in 0..sa.n * sa.c {
        let g = MatRef::new(&grad_out.data()[i * m * p..(i + 1) * m * p], m, p);
        let am = MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k);
        let bm = MatRef::new(&b.data()[i * k * p..(i + 1) * k * p], k, p);
        gemm(g, bm.t(), &mut ga[i * m * k..(i + 1) * m * k], T::zero());
        gemm(am.t(), g, &mut gb[i * k * p..(i + 1) * k * p], T::zero());
    }
    (Tensor4::from_parts(sa, ga), Tensor4::from_parts(sb, gb))
}

/// Swaps the trailing two axes.
pub fn transpose_last2<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    let s = input.shape();
    let os = Shape4::new(s.n, s.c, s.w, s.h);
    let mut out = Vec::with_capacity(s.numel());
    for plane in input.data().chunks(s.plane()) {
        for j in 0..s.w {
            for i in 0..s.h {
                out.push(plane[i * s.w + j]);
            }
        }
    }
    Tensor4::from_parts(os, out)
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(shape_err!("concat_channels of {sa} and {sb}"));
    }
    let os = Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..sa.n {
        out.extend_from_slice(a.sample(n));
        out.extend_from_slice(b.sample(n));
    }
    Ok(Tensor4::from_parts(os, out))
}

/// Channels `start..start + len` of every sample.
pub fn slice_channels<T: Scalar>(input: &Tensor4<T>, start: usize, len: usize) -> Result<Tensor4<T>> {
    let s = input.shape();
    if len == 0 || start + len > s.c {
        return Err(shape_err!("channel slice {start}..{} of {s}", start + len));
    }
    let os = Shape4::new(s.n, len, s.h, s.w);
    let p = s.plane();
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..s.n {
        out.extend_from_slice(&input.sample(n)[start * p..(start + len) * p]);
    }
    Ok(Tensor4::from_parts(os, out))
}

fn broadcast_strides(lhs: Shape4, rhs: Shape4) -> Result<[usize; 4]> {
    let l = lhs.dims();
    let r = rhs.dims();
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for axis in (0..4).rev() {
        if r[axis] == l[axis] {
            strides[axis] = if r[axis] == 1 { 0 } else { acc };
        } else if r[axis] == 1 {
            strides[axis] = 0;
        } else {
            return Err(shape_err!("{rhs} does not broadcast against {lhs}"));
        }
        acc *= r[axis];
    }
    Ok(strides)
}

fn broadcast_zip<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>, f: impl Fn(T, T) -> T) -> Result<Tensor4<T>> {
    let s = a.shape();
    if b.shape() == s {
        return a.zip_map(b, f);
    }
    let st = broadcast_strides(s, b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(s.numel());
    let mut i = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for h in 0..s.h {
                let base = n * st[0] + c * st[1] + h * st[2];
                for w in 0..s.w {
                    out.push(f(ad[i], bd[base + w * st[3]]));
                    i += 1;
                }
            }
        }
    }
    Ok(Tensor4::from_parts(s, out))
}

/// `a + b`, where every axis of `b` either matches `a` or is 1.
pub fn add<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    broadcast_zip(a, b, |x, y| x + y)
}

/// `a ⊙ b`, where every axis of `b` either matches `a` or is 1.
pub fn mul<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    broadcast_zip(a, b, |x, y| x * y)
}

/// Sums a full-shape gradient down onto a broadcast operand's shape.
pub(crate) fn broadcast_reduce<T: Scalar>(grad: &Tensor4<T>, target: Shape4) -> Result<Tensor4<T>> {
    let s = grad.shape();
    if s == target {
        return Ok(grad.clone());
    }
    let st = broadcast_strides(s, target)?;
    let mut out = vec![T::zero(); target.numel()];
    let gd = grad.data();
    let mut i = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for h in 0..s.h {
                let base = n * st[0] + c * st[1] + h * st[2];
                for w in 0..s.w {
                    out[base + w * st[3]] += gd[i];
                    i += 1;
                }
            }
        }
    }
    Ok(Tensor4::from_parts(target, out))
}
