use super::{Scalar, Shape4, Tensor4};
use crate::error::{Error, Result};

/// One output coordinate's two source taps and the weight of the upper one.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-centre sampling with edge clamping:
/// `src = (dst + 0.5) * in/out − 0.5`, clamped to `[0, in − 1]`.
fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of every `(n, c)` plane to `out_h × out_w`.
pub fn bilinear_resize<T: Scalar>(
    input: &Tensor4<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor4<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be >= 1".into()));
    }
    let s = input.shape();
    if (out_h, out_w) == (s.h, s.w) {
        return Ok(input.clone());
    }
    let ty = taps(s.h, out_h);
    let tx = taps(s.w, out_w);
    let os = Shape4::new(s.n, s.c, out_h, out_w);
    let mut out = Vec::with_capacity(os.numel());
    for plane in input.data().chunks(s.plane()) {
        for y in &ty {
            let fy = T::of(y.frac);
            let r0 = &plane[y.lo * s.w..(y.lo + 1) * s.w];
            let r1 = &plane[y.hi * s.w..(y.hi + 1) * s.w];
            for x in &tx {
                let fx = T::of(x.frac);
                // lerp form keeps constant planes exactly constant
                let top = r0[x.lo] + (r0[x.hi] - r0[x.lo]) * fx;
                let bot = r1[x.lo] + (r1[x.hi] - r1[x.lo]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    Ok(Tensor4::from_parts(os, out))
}

pub(crate) fn bilinear_resize_backward<T: Scalar>(
    input_shape: Shape4,
    grad_out: &Tensor4<T>,
) -> Tensor4<T> {
    let s = input_shape;
    let os = grad_out.shape();
    if (os.h, os.w) == (s.h, s.w) {
        return grad_out.clone();
    }
    let ty = taps(s.h, os.h);
    let tx = taps(s.w, os.w);
    let mut gx = vec![T::zero(); s.numel()];
    for (plane, gplane) in gx.chunks_mut(s.plane()).zip(grad_out.data().chunks(os.plane())) {
        for (oy, y) in ty.iter().enumerate() {
            let (fy, gy) = (T::of(y.frac), T::of(1.0 - y.frac));
            for (ox, x) in tx.iter().enumerate() {
                let (fx, gxw) = (T::of(x.frac), T::of(1.0 - x.frac));
                let g = gplane[oy * os.w + ox];
                plane[y.lo * s.w + x.lo] += g * gy * gxw;
                plane[y.lo * s.w + x.hi] += g * gy * fx;
                plane[y.hi * s.w + x.lo] += g * fy * gxw;
                plane[y.hi * s.w + x.hi] += g * fy * fx;
            }
        }
    }
    Tensor4::from_parts(s, gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stretches_two_to_three() {
        let x = Tensor4::<f64>::from_vec([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let y = bilinear_resize(&x, 1, 3).unwrap();
        let expect = [0.0, 1.0, 2.0];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn identity_at_equal_size() {
        let x = Tensor4::from_fn([2, 3, 5, 4], |n, c, h, w| (n * 7 + c * 3 + h * w) as f64 * 0.1)
            .unwrap();
        assert_eq!(bilinear_resize(&x, 5, 4).unwrap(), x);
    }

    #[test]
    fn constants_stay_constant() {
        let x = Tensor4::full([1, 2, 5, 7], 0.375).unwrap();
        for (h, w) in [(1, 1), (3, 11), (10, 14), (17, 2)] {
            let y = bilinear_resize(&x, h, w).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.375));
        }
    }
}
