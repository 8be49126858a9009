use super::{Scalar, Shape4, Tensor4};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

fn pooled_shape(s: Shape4, k: usize, stride: usize) -> Result<Shape4> {
    if k == 0 || stride == 0 {
        return Err(Error::InvalidArgument("pool window and stride must be >= 1".into()));
    }
    if k > s.h || k > s.w {
        return Err(shape_err!("pool window {k} larger than input {s}"));
    }
    if k == stride && (s.h % stride != 0 || s.w % stride != 0) {
        return Err(shape_err!(
            "spatial dims of {s} are not divisible by pool stride {stride}"
        ));
    }
    Ok(Shape4::new(s.n, s.c, (s.h - k) / stride + 1, (s.w - k) / stride + 1))
}

/// Windowed max or mean pooling with window `k` and stride `stride`.
pub fn pool2d<T: Scalar>(
    input: &Tensor4<T>,
    mode: PoolMode,
    k: usize,
    stride: usize,
) -> Result<Tensor4<T>> {
    pool2d_with_argmax(input, mode, k, stride).map(|(t, _)| t)
}

/// Pooling that also returns, for max mode, the flat input index chosen
/// for each output cell. Ties resolve to the first maximal element in
/// row-major window order.
pub(crate) fn pool2d_with_argmax<T: Scalar>(
    input: &Tensor4<T>,
    mode: PoolMode,
    k: usize,
    stride: usize,
) -> Result<(Tensor4<T>, Vec<usize>)> {
    let s = input.shape();
    let os = pooled_shape(s, k, stride)?;
    let data = input.data();
    let mut out = Vec::with_capacity(os.numel());
    let mut argmax = Vec::with_capacity(if mode == PoolMode::Max { os.numel() } else { 0 });
    let inv = T::one() / T::of((k * k) as f64);
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let (y0, x0) = (oy * stride, ox * stride);
                    match mode {
                        PoolMode::Max => {
                            let mut best = s.index(n, c, y0, x0);
                            for dy in 0..k {
                                for dx in 0..k {
                                    let i = s.index(n, c, y0 + dy, x0 + dx);
                                    if data[i] > data[best] {
                                        best = i;
                                    }
                                }
                            }
                            out.push(data[best]);
                            argmax.push(best);
                        }
                        PoolMode::Avg => {
                            let mut acc = T::zero();
                            for dy in 0..k {
                                for dx in 0..k {
                                    acc += data[s.index(n, c, y0 + dy, x0 + dx)];
                                }
                            }
                            out.push(acc * inv);
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor4::from_parts(os, out), argmax))
}

pub(crate) fn pool2d_backward<T: Scalar>(
    input_shape: Shape4,
    grad_out: &Tensor4<T>,
    mode: PoolMode,
    k: usize,
    stride: usize,
    argmax: &[usize],
) -> Result<Tensor4<T>> {
    let os = pooled_shape(input_shape, k, stride)?;
    if grad_out.shape() != os {
        return Err(shape_err!("pool grad_out has shape {}", grad_out.shape()));
    }
    let mut gx = vec![T::zero(); input_shape.numel()];
    let gy = grad_out.data();
    match mode {
        PoolMode::Max => {
            for (&i, &g) in argmax.iter().zip(gy) {
                gx[i] += g;
            }
        }
        PoolMode::Avg => {
            let inv = T::one() / T::of((k * k) as f64);
            let mut o = 0;
            for n in 0..os.n {
                for c in 0..os.c {
                    for oy in 0..os.h {
                        for ox in 0..os.w {
                            let g = gy[o] * inv;
                            o += 1;
                            for dy in 0..k {
                                for dx in 0..k {
                                    gx[input_shape.index(n, c, oy * stride + dy, ox * stride + dx)] +=
                                        g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor4::from_parts(input_shape, gx))
}

/// Per-channel mean over all spatial positions; output is (n, c, 1, 1).
pub fn global_avg_pool<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    let s = input.shape();
    let inv = T::one() / T::of(s.plane() as f64);
    let out = input
        .data()
        .chunks(s.plane())
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor4::from_parts(Shape4::new(s.n, s.c, 1, 1), out)
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(
    input_shape: Shape4,
    grad_out: &Tensor4<T>,
) -> Tensor4<T> {
    let p = input_shape.plane();
    let inv = T::one() / T::of(p as f64);
    let mut gx = Vec::with_capacity(input_shape.numel());
    for &g in grad_out.data() {
        gx.extend(std::iter::repeat(g * inv).take(p));
    }
    Tensor4::from_parts(input_shape, gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_window() {
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pool2d(&x, PoolMode::Max, 2, 2).unwrap().data(), &[4.0]);
        assert_eq!(pool2d(&x, PoolMode::Avg, 2, 2).unwrap().data(), &[2.5]);
    }

    #[test]
    fn constant_and_identity() {
        let x = Tensor4::full([1, 1, 4, 4], 5.0).unwrap();
        for mode in [PoolMode::Max, PoolMode::Avg] {
            let y = pool2d(&x, mode, 2, 2).unwrap();
            assert_eq!(y.shape(), Shape4::new(1, 1, 2, 2));
            assert!(y.data().iter().all(|&v| v == 5.0));
        }
        let r = Tensor4::from_fn([1, 2, 3, 3], |_, c, h, w| (c * 9 + h * 3 + w) as f64).unwrap();
        assert_eq!(pool2d(&r, PoolMode::Max, 1, 1).unwrap(), r);
        assert_eq!(pool2d(&r, PoolMode::Avg, 1, 1).unwrap(), r);
    }

    #[test]
    fn rejects_odd_dims() {
        let x = Tensor4::<f64>::zeros([1, 1, 5, 4]).unwrap();
        assert!(pool2d(&x, PoolMode::Max, 2, 2).is_err());
    }

    #[test]
    fn max_ties_route_to_first() {
        let x = Tensor4::full([1, 1, 2, 2], 1.0).unwrap();
        let (_, idx) = pool2d_with_argmax(&x, PoolMode::Max, 2, 2).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn gap_values() {
        let x = Tensor4::from_vec([1, 2, 2, 2], vec![1., 2., 3., 4., 7., 7., 7., 7.]).unwrap();
        let y = global_avg_pool(&x);
        assert_eq!(y.shape(), Shape4::new(1, 2, 1, 1));
        assert_eq!(y.data(), &[2.5, 7.0]);
        let z = global_avg_pool(&Tensor4::<f64>::zeros([2, 3, 4, 4]).unwrap());
        assert!(z.data().iter().all(|&v| v == 0.0));
    }
}
