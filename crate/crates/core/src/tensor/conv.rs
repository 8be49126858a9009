//! 2-D convolution (cross-correlation) and its transpose, via im2col + GEMM.

use super::{gemm, MatRef, Scalar, Shape4, Tensor4};
use crate::error::{shape_err, Error, Result};

/// Stride, zero padding and dilation of a 2-D convolution. The kernel
/// extent is taken from the weight tensor `(out_ch, in_ch, kh, kw)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dilation: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self::new(1, 0, 1)
    }
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            pad_h: padding,
            pad_w: padding,
            dilation,
        }
    }

    pub const fn with_padding(mut self, pad_h: usize, pad_w: usize) -> Self {
        self.pad_h = pad_h;
        self.pad_w = pad_w;
        self
    }

    /// Output extent along one axis, or `None` if the dilated kernel does not
    /// fit in the padded input.
    pub fn output_len(&self, input: usize, kernel: usize, pad: usize) -> Option<usize> {
        let extent = (kernel - 1) * self.dilation + 1;
        let padded = input + 2 * pad;
        (extent <= padded).then(|| (padded - extent) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    dil: usize,
}

impl Geom {
    fn new(input: Shape4, weight: Shape4, spec: &ConvSpec) -> Result<Self> {
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::InvalidArgument(
                "conv stride and dilation must be >= 1".into(),
            ));
        }
        if input.c != weight.c {
            return Err(shape_err!(
                "conv input has {} channels but weight {} expects {}",
                input.c,
                weight,
                weight.c
            ));
        }
        let ho = spec.output_len(input.h, weight.h, spec.pad_h);
        let wo = spec.output_len(input.w, weight.w, spec.pad_w);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(shape_err!(
                "effective kernel of {} with dilation {} exceeds padded input {}",
                weight,
                spec.dilation,
                input
            ));
        };
        Ok(Self {
            cin: input.c,
            h: input.h,
            w: input.w,
            cout: weight.n,
            kh: weight.h,
            kw: weight.w,
            ho,
            wo,
            stride: spec.stride,
            ph: spec.pad_h,
            pw: spec.pad_w,
            dil: spec.dilation,
        })
    }

    /// Rows of the column matrix: cin·kh·kw.
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Columns of the column matrix: ho·wo.
    fn l(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.ph == 0 && self.pw == 0
    }

    /// Input column touched by output column `ox` and tap `kj`.
    #[inline]
    fn src_col(&self, ox: usize, kj: usize) -> Option<usize> {
        let ix = (ox * self.stride + kj * self.dil) as isize - self.pw as isize;
        (ix >= 0 && (ix as usize) < self.w).then_some(ix as usize)
    }

    #[inline]
    fn src_row(&self, oy: usize, ki: usize) -> Option<usize> {
        let iy = (oy * self.stride + ki * self.dil) as isize - self.ph as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geom, cols: &mut [T]) {
    let l = g.l();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match g.src_row(oy, ki) {
                        None => drow.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d = match g.src_col(ox, kj) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column matrix back onto an input-shaped buffer.
fn col2im<T: Scalar>(cols: &[T], g: &Geom, x: &mut [T]) {
    let l = g.l();
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let Some(iy) = g.src_row(oy, ki) else { continue };
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in 0..g.wo {
                        if let Some(ix) = g.src_col(ox, kj) {
                            dst[ix] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T>(bias: Option<&[T]>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(shape_err!(
            "bias has {} entries, expected {channels}",
            b.len()
        )),
        _ => Ok(()),
    }
}

/// Cross-correlation of `input` (n, in_ch, H, W) with `weight`
/// (out_ch, in_ch, kh, kw). Zero padding; no kernel flip.
pub fn conv2d<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    let g = Geom::new(input.shape(), weight.shape(), spec)?;
    check_bias(bias, g.cout)?;
    let n = input.shape().n;
    let (k, l) = (g.k(), g.l());
    let wmat = MatRef::new(weight.data(), g.cout, k);
    let mut out = vec![T::zero(); n * g.cout * l];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * l] };
    for s in 0..n {
        let x = input.sample(s);
        let out_s = &mut out[s * g.cout * l..(s + 1) * g.cout * l];
        if let Some(b) = bias {
            for (row, &bv) in out_s.chunks_mut(l).zip(b) {
                row.fill(bv);
            }
        }
        let colmat = if g.pointwise() {
            MatRef::new(x, k, l)
        } else {
            im2col(x, &g, &mut cols);
            MatRef::new(&cols, k, l)
        };
        gemm(wmat, colmat, out_s, T::one());
    }
    Ok(Tensor4::from_parts(Shape4::new(n, g.cout, g.ho, g.wo), out))
}

/// Gradients of `conv2d` with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    spec: &ConvSpec,
) -> Result<(Tensor4<T>, Tensor4<T>, Vec<T>)> {
    let g = Geom::new(input.shape(), weight.shape(), spec)?;
    let n = input.shape().n;
    let (k, l) = (g.k(), g.l());
    if grad_out.shape() != Shape4::new(n, g.cout, g.ho, g.wo) {
        return Err(shape_err!("conv2d grad_out has shape {}", grad_out.shape()));
    }
    let wmat = MatRef::new(weight.data(), g.cout, k);
    let mut gx = vec![T::zero(); input.numel()];
    let mut gw = vec![T::zero(); weight.numel()];
    let mut gb = vec![T::zero(); g.cout];
    let mut cols = vec![T::zero(); k * l];
    let mut gcols = vec![T::zero(); k * l];
    let in_len = g.cin * g.h * g.w;
    for s in 0..n {
        let gy = grad_out.sample(s);
        for (row, b) in gy.chunks(l).zip(gb.iter_mut()) {
            *b += row.iter().copied().sum::<T>();
        }
        let gymat = MatRef::new(gy, g.cout, l);
        let gx_s = &mut gx[s * in_len..(s + 1) * in_len];
        if g.pointwise() {
            let x = MatRef::new(input.sample(s), k, l);
            gemm(gymat, x.t(), &mut gw, T::one());
            gemm(wmat.t(), gymat, gx_s, T::zero());
        } else {
            im2col(input.sample(s), &g, &mut cols);
            gemm(gymat, MatRef::new(&cols, k, l).t(), &mut gw, T::one());
            gemm(wmat.t(), gymat, &mut gcols, T::zero());
            col2im(&gcols, &g, gx_s);
        }
    }
    Ok((
        Tensor4::from_parts(input.shape(), gx),
        Tensor4::from_parts(weight.shape(), gw),
        gb,
    ))
}

fn transpose_geom(input: Shape4, weight: Shape4, stride: usize) -> Result<Geom> {
    if stride == 0 {
        return Err(Error::InvalidArgument("conv_transpose stride must be >= 1".into()));
    }
    if input.c != weight.n {
        return Err(shape_err!(
            "conv_transpose input has {} channels but weight {} expects {}",
            input.c,
            weight,
            weight.n
        ));
    }
    let oh = (input.h - 1) * stride + weight.h;
    let ow = (input.w - 1) * stride + weight.w;
    // Geometry of the forward convolution that maps the transposed output
    // back to the input: its input has `weight.c` channels, its weight is
    // laid out (in_ch, out_ch, kh, kw) exactly like ours.
    let fwd_in = Shape4::new(input.n, weight.c, oh, ow);
    let fwd_w = Shape4::new(weight.n, weight.c, weight.h, weight.w);
    let g = Geom::new(fwd_in, fwd_w, &ConvSpec::new(stride, 0, 1))?;
    debug_assert_eq!((g.ho, g.wo), (input.h, input.w));
    Ok(g)
}

/// Transposed convolution of `input` (n, in_ch, H, W) with `weight`
/// (in_ch, out_ch, kh, kw), no padding. Output is (n, out_ch, (H−1)s+kh, (W−1)s+kw).
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    stride: usize,
) -> Result<Tensor4<T>> {
    let g = transpose_geom(input.shape(), weight.shape(), stride)?;
    check_bias(bias, g.cin)?;
    let n = input.shape().n;
    let (k, l) = (g.k(), g.l());
    let wmat = MatRef::new(weight.data(), g.cout, k);
    let out_len = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); n * out_len];
    let mut cols = vec![T::zero(); k * l];
    for s in 0..n {
        let x = MatRef::new(input.sample(s), g.cout, l);
        gemm(wmat.t(), x, &mut cols, T::zero());
        let out_s = &mut out[s * out_len..(s + 1) * out_len];
        if let Some(b) = bias {
            for (plane, &bv) in out_s.chunks_mut(g.h * g.w).zip(b) {
                plane.fill(bv);
            }
        }
        col2im(&cols, &g, out_s);
    }
    Ok(Tensor4::from_parts(Shape4::new(n, g.cin, g.h, g.w), out))
}

/// Gradients of `conv_transpose2d` with respect to input, weight and bias.
pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    stride: usize,
) -> Result<(Tensor4<T>, Tensor4<T>, Vec<T>)> {
    let g = transpose_geom(input.shape(), weight.shape(), stride)?;
    let n = input.shape().n;
    let (k, l) = (g.k(), g.l());
    if grad_out.shape() != Shape4::new(n, g.cin, g.h, g.w) {
        return Err(shape_err!(
            "conv_transpose2d grad_out has shape {}",
            grad_out.shape()
        ));
    }
    let wmat = MatRef::new(weight.data(), g.cout, k);
    let mut gx = vec![T::zero(); input.numel()];
    let mut gw = vec![T::zero(); weight.numel()];
    let mut gb = vec![T::zero(); g.cin];
    let mut cols = vec![T::zero(); k * l];
    let plane = g.h * g.w;
    for s in 0..n {
        let gy = grad_out.sample(s);
        for (p, b) in gy.chunks(plane).zip(gb.iter_mut()) {
            *b += p.iter().copied().sum::<T>();
        }
        im2col(gy, &g, &mut cols);
        let colmat = MatRef::new(&cols, k, l);
        gemm(wmat, colmat, &mut gx[s * g.cout * l..(s + 1) * g.cout * l], T::zero());
        let x = MatRef::new(input.sample(s), g.cout, l);
        gemm(x, colmat.t(), &mut gw, T::one());
    }
    Ok((
        Tensor4::from_parts(input.shape(), gx),
        Tensor4::from_parts(weight.shape(), gw),
        gb,
    ))
}
