//! Nested-loop reference implementations. Nothing here is fast and nothing
//! here shares code with the kernels it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wmka_core::tensor::PoolMode;
use wmka_core::Tensor4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small integers in `-r..=r`, so every sum of products is exact in f64.
pub fn int_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], r: i32) -> Tensor4<f64> {
    let n = shape.iter().product();
    Tensor4::from_vec(shape, (0..n).map(|_| f64::from(rng.gen_range(-r..=r))).collect()).unwrap()
}

pub fn real_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4<f64> {
    let n = shape.iter().product();
    Tensor4::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dims(t: &Tensor4<f64>) -> [usize; 4] {
    let s = t.shape();
    [s.n, s.c, s.h, s.w]
}

/// Cross-correlation with zero padding, written as seven nested loops.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &Tensor4<f64>,
    w: &Tensor4<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    dil: usize,
) -> Tensor4<f64> {
    let [n, cin, h, wd] = dims(x);
    let [cout, _, kh, kw] = dims(w);
    let ho = (h + 2 * pad_h - ((kh - 1) * dil + 1)) / stride + 1;
    let wo = (wd + 2 * pad_w - ((kw - 1) * dil + 1)) / stride + 1;
    let mut out = Tensor4::zeros([n, cout, ho, wo]).unwrap();
    for b in 0..n {
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias.map_or(0.0, |bv| bv[o]);
                    for c in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (i * stride + u * dil) as isize - pad_h as isize;
                                let q = (j * stride + v * dil) as isize - pad_w as isize;
                                if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < wd {
                                    acc += x.at(b, c, r as usize, q as usize) * w.at(o, c, u, v);
                                }
                            }
                        }
                    }
                    out.set(b, o, i, j, acc);
                }
            }
        }
    }
    out
}

/// Transposed convolution by scattering every input tap; weight is
/// (in_ch, out_ch, kh, kw).
pub fn conv_transpose2d(x: &Tensor4<f64>, w: &Tensor4<f64>, bias: Option<&[f64]>, stride: usize) -> Tensor4<f64> {
    let [n, cin, h, wd] = dims(x);
    let [_, cout, kh, kw] = dims(w);
    let (ho, wo) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
    let mut out = Tensor4::zeros([n, cout, ho, wo]).unwrap();
    for b in 0..n {
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    out.set(b, o, i, j, bias.map_or(0.0, |bv| bv[o]));
                }
            }
        }
        for c in 0..cin {
            for i in 0..h {
                for j in 0..wd {
                    for o in 0..cout {
                        for u in 0..kh {
                            for v in 0..kw {
                                let (r, q) = (i * stride + u, j * stride + v);
                                let cur = out.at(b, o, r, q);
                                out.set(b, o, r, q, cur + x.at(b, c, i, j) * w.at(c, o, u, v));
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn pool2d(x: &Tensor4<f64>, mode: PoolMode, k: usize, stride: usize) -> Tensor4<f64> {
    let [n, c, h, w] = dims(x);
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Tensor4::zeros([n, c, ho, wo]).unwrap();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut window = Vec::new();
                    for u in 0..k {
                        for v in 0..k {
                            window.push(x.at(b, ch, i * stride + u, j * stride + v));
                        }
                    }
                    let v = match mode {
                        PoolMode::Max => window.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        PoolMode::Avg => window.iter().sum::<f64>() / window.len() as f64,
                    };
                    out.set(b, ch, i, j, v);
                }
            }
        }
    }
    out
}

pub fn global_avg_pool(x: &Tensor4<f64>) -> Tensor4<f64> {
    let [n, c, h, w] = dims(x);
    let mut out = Tensor4::zeros([n, c, 1, 1]).unwrap();
    for b in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += x.at(b, ch, i, j);
                }
            }
            out.set(b, ch, 0, 0, acc / (h * w) as f64);
        }
    }
    out
}

/// Row softmax over the last axis of every (n, c) matrix.
pub fn softmax_rows(x: &Tensor4<f64>) -> Tensor4<f64> {
    let [n, c, h, w] = dims(x);
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                let m = (0..w).map(|j| x.at(b, ch, i, j)).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..w).map(|j| (x.at(b, ch, i, j) - m).exp()).sum();
                for j in 0..w {
                    out.set(b, ch, i, j, (x.at(b, ch, i, j) - m).exp() / z);
                }
            }
        }
    }
    out
}

/// Batched product of the trailing (h, w) matrices.
pub fn matmul(a: &Tensor4<f64>, b: &Tensor4<f64>) -> Tensor4<f64> {
    let [n, c, m, k] = dims(a);
    let p = dims(b)[3];
    let mut out = Tensor4::zeros([n, c, m, p]).unwrap();
    for bn in 0..n {
        for ch in 0..c {
            for i in 0..m {
                for j in 0..p {
                    let mut acc = 0.0;
                    for t in 0..k {
                        acc += a.at(bn, ch, i, t) * b.at(bn, ch, t, j);
                    }
                    out.set(bn, ch, i, j, acc);
                }
            }
        }
    }
    out
}

/// Dense non-local attention for a single image: `out[c, p] = Σ_q v[c, q]·a[p, q]`
/// with `a[p, ·] = softmax_q(Σ_c q[c, p]·k[c, q])`.
pub fn dense_attention(q: &Tensor4<f64>, k: &Tensor4<f64>, v: &Tensor4<f64>) -> Tensor4<f64> {
    let [_, cq, h, w] = dims(q);
    let cv = dims(v)[1];
    let hw = h * w;
    let flat = |t: &Tensor4<f64>, c: usize, p: usize| t.at(0, c, p / w, p % w);
    let mut out = Tensor4::zeros([1, cv, h, w]).unwrap();
    for p in 0..hw {
        let logits: Vec<f64> = (0..hw).map(|s| (0..cq).map(|c| flat(q, c, p) * flat(k, c, s)).sum()).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for c in 0..cv {
            let acc: f64 = (0..hw).map(|s| flat(v, c, s) * (logits[s] - m).exp() / z).sum();
            out.set(0, c, p / w, p % w, acc);
        }
    }
    out
}

/// (tp, fp, fn, tn) by a plain pixel loop.
pub fn confusion(pred: &[f64], gt: &[f64], fov: Option<&[f64]>) -> (u64, u64, u64, u64) {
    let mut t = (0, 0, 0, 0);
    for i in 0..pred.len() {
        if fov.is_some_and(|f| f[i] == 0.0) {
            continue;
        }
        match (pred[i] == 1.0, gt[i] == 1.0) {
            (true, true) => t.0 += 1,
            (true, false) => t.1 += 1,
            (false, true) => t.2 += 1,
            (false, false) => t.3 += 1,
        }
    }
    t
}

/// `(z, g, loss)` rows of the textbook form `-[g·ln σ(z) + (1−g)·ln(1−σ(z))]`
/// evaluated at 50 digits for z in [−30, 30] (see `scripts/bce_reference.py`).
/// Evaluating that form in f64 loses up to 1e-3 relative accuracy near z = 30
/// because 1 − σ(z) cancels, so the high-precision table is the reference.
pub fn bce_reference() -> Vec<(f64, f64, f64)> {
    include_str!("../data/bce_reference.csv")
        .lines()
        .skip(1)
        .map(|line| {
            let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            (f[0], f[1], f[2])
        })
        .collect()
}

/// Plain Adam on a flat vector, one update per gradient in `grads`.
pub fn adam_reference(p0: &[f64], grads: &[Vec<f64>], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let mut p = p0.to_vec();
    let (mut m, mut v) = (vec![0.0; p.len()], vec![0.0; p.len()]);
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    p
}

/// Global histogram equalisation of 8-bit samples: `cdf(v) / N`.
pub fn global_equalize(samples: &[u8]) -> Vec<f64> {
    let mut hist = [0u64; 256];
    for &s in samples {
        hist[s as usize] += 1;
    }
    let mut cdf = [0u64; 256];
    let mut acc = 0;
    for (i, h) in hist.iter().enumerate() {
        acc += h;
        cdf[i] = acc;
    }
    samples.iter().map(|&s| cdf[s as usize] as f64 / samples.len() as f64).collect()
}
