use super::{Scalar, Tensor4};
use crate::error::{shape_err, Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether batch statistics (training) or running statistics (inference)
/// normalise the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

pub struct BatchNormOutput<T> {
    pub output: Tensor4<T>,
    /// Normalised input `(x − μ)/√(σ² + eps)`, kept for the backward pass.
    pub x_hat: Tensor4<T>,
    /// Per-channel `1/√(σ² + eps)`.
    pub inv_std: Vec<T>,
    /// Updated `(running_mean, running_var)` in train mode.
    pub running: Option<(Vec<T>, Vec<T>)>,
}

/// Per-channel batch normalisation over (n, h, w).
///
/// Train mode normalises with the biased batch variance and blends the
/// unbiased one into the running variance with momentum [`BN_MOMENTUM`].
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<T: Scalar>(
    input: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
    mode: NormMode,
    running_mean: &[T],
    running_var: &[T],
) -> Result<BatchNormOutput<T>> {
    let s = input.shape();
    for (name, len) in [
        ("gamma", gamma.len()),
        ("beta", beta.len()),
        ("running_mean", running_mean.len()),
        ("running_var", running_var.len()),
    ] {
        if len != s.c {
            return Err(shape_err!("batchnorm {name} has {len} entries for {} channels", s.c));
        }
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("batchnorm eps must be > 0".into()));
    }
    let count = s.n * s.plane();
    let (mean, var) = match mode {
        NormMode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        NormMode::Train => {
            let mut mean = vec![T::zero(); s.c];
            let mut var = vec![T::zero(); s.c];
            let inv = T::one() / T::of(count as f64);
            for c in 0..s.c {
                let mut acc = T::zero();
                for n in 0..s.n {
                    acc += input.plane(n, c).iter().copied().sum::<T>();
                }
                mean[c] = acc * inv;
                let mut sq = T::zero();
                for n in 0..s.n {
                    for &v in input.plane(n, c) {
                        let d = v - mean[c];
                        sq += d * d;
                    }
                }
                var[c] = sq * inv;
            }
            (mean, var)
        }
    };
    let eps_t = T::of(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let mut x_hat = Vec::with_capacity(s.numel());
    let mut out = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            for &v in input.plane(n, c) {
                let xh = (v - mean[c]) * inv_std[c];
                x_hat.push(xh);
                out.push(gamma[c] * xh + beta[c]);
            }
        }
    }
    let running = (mode == NormMode::Train).then(|| {
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        let unbias = if count > 1 {
            T::of(count as f64 / (count - 1) as f64)
        } else {
            T::one()
        };
        let rm = running_mean
            .iter()
            .zip(&mean)
            .map(|(&r, &b)| keep * r + m * b)
            .collect();
        let rv = running_var
            .iter()
            .zip(&var)
            .map(|(&r, &b)| keep * r + m * b * unbias)
            .collect();
        (rm, rv)
    });
    Ok(BatchNormOutput {
        output: Tensor4::from_parts(s, out),
        x_hat: Tensor4::from_parts(s, x_hat),
        inv_std,
        running,
    })
}

/// Gradients with respect to input, gamma and beta. In train mode the
/// batch statistics are differentiated through.
pub(crate) fn batchnorm2d_backward<T: Scalar>(
    grad_out: &Tensor4<T>,
    x_hat: &Tensor4<T>,
    inv_std: &[T],
    gamma: &[T],
    mode: NormMode,
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let s = grad_out.shape();
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            for (&g, &xh) in grad_out.plane(n, c).iter().zip(x_hat.plane(n, c)) {
                dbeta[c] += g;
                dgamma[c] += g * xh;
            }
        }
    }
    let count = T::of((s.n * s.plane()) as f64);
    let mut gx = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = gamma[c] * inv_std[c];
            for (&g, &xh) in grad_out.plane(n, c).iter().zip(x_hat.plane(n, c)) {
                gx.push(match mode {
                    NormMode::Eval => g * scale,
                    NormMode::Train => {
                        scale * (g - dbeta[c] / count - xh * dgamma[c] / count)
                    }
                });
            }
        }
    }
    (Tensor4::from_parts(s, gx), dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bn(x: &Tensor4<f64>, gamma: f64, beta: f64) -> BatchNormOutput<f64> {
        let c = x.shape().c;
        batchnorm2d(
            x,
            &vec![gamma; c],
            &vec![beta; c],
            BN_EPS,
            NormMode::Train,
            &vec![0.0; c],
            &vec![1.0; c],
        )
        .unwrap()
    }

    #[test]
    fn zero_gamma_yields_beta() {
        let x = Tensor4::from_fn([2, 1, 3, 3], |n, _, h, w| (n * 9 + h * 3 + w) as f64).unwrap();
        let out = bn(&x, 0.0, 0.7);
        assert!(out.output.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn constant_channel_maps_near_zero() {
        let x = Tensor4::full([2, 1, 4, 4], 3.25).unwrap();
        let out = bn(&x, 1.0, 0.0);
        assert!(out.output.data().iter().all(|&v| v.abs() < 1e-2));
    }

    #[test]
    fn standardised_channel_is_unchanged() {
        // eight values with mean 0 and biased variance 1
        let v = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let x = Tensor4::from_vec([2, 1, 2, 2], v.to_vec()).unwrap();
        let out = bn(&x, 1.0, 0.0);
        for (a, b) in out.output.data().iter().zip(v) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let x = Tensor4::from_vec([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let out = bn(&x, 1.0, 0.0);
        let (rm, rv) = out.running.unwrap();
        // batch mean 2, unbiased variance 2
        assert!((rm[0] - 0.2).abs() < 1e-15);
        assert!((rv[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn eval_uses_running_stats() {
        let x = Tensor4::<f64>::from_vec([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let out = batchnorm2d(&x, &[2.0], &[1.0], BN_EPS, NormMode::Eval, &[1.0], &[4.0]).unwrap();
        let s = 2.0 / (4.0f64 + BN_EPS).sqrt();
        assert!((out.output.data()[0] - 1.0).abs() < 1e-15);
        assert!((out.output.data()[1] - (1.0 + 2.0 * s)).abs() < 1e-12);
        assert!(out.running.is_none());
    }
}
