//! Fundus preprocessing: grayscale, min-max normalisation, CLAHE, gamma,
//! channel replication and bilinear resize.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{bilinear_resize, Scalar, Tensor4};

/// 8-bit image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(h: usize, w: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("images have 1 or 3 channels, got {channels}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!("empty image {h}x{w}")));
        }
        if data.len() != h * w * channels {
            return Err(shape_err!(
                "image data has {} bytes, expected {h}x{w}x{channels}",
                data.len()
            ));
        }
        Ok(Self { h, w, channels, data })
    }

    /// Samples of one pixel.
    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let i = (y * self.w + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// `round(0.299·R + 0.587·G + 0.114·B)`.
pub fn to_grayscale(img: &ImageU8) -> Result<ImageU8> {
    if img.channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "grayscale conversion needs 3 channels, got {}",
            img.channels
        )));
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| {
            let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
            y.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    ImageU8::new(img.h, img.w, 1, data)
}

/// Min-max scaling of a single-channel image to [0,1], as a (1,1,h,w)
/// map. Constant images map to zeros.
pub fn normalize_unit(img: &ImageU8) -> Result<Tensor4<f64>> {
    if img.channels != 1 {
        return Err(Error::InvalidArgument(format!(
            "normalisation needs 1 channel, got {}",
            img.channels
        )));
    }
    let lo = *img.data.iter().min().expect("non-empty") as f64;
    let hi = *img.data.iter().max().expect("non-empty") as f64;
    let span = hi - lo;
    let data = img
        .data
        .iter()
        .map(|&v| if span > 0.0 { (v as f64 - lo) / span } else { 0.0 })
        .collect();
    Tensor4::from_vec([1, 1, img.h, img.w], data)
}

pub const CLAHE_BINS: usize = 256;

fn bin_of(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * 255.0).round() as usize).min(CLAHE_BINS - 1)
}

/// Row ranges of `parts` near-equal consecutive segments of `0..len`.
fn segments(len: usize, parts: usize) -> Vec<(usize, usize)> {
    (0..parts).map(|i| (i * len / parts, (i + 1) * len / parts)).collect()
}

/// Intensity mapping of one tile: clipped histogram, excess spread
/// uniformly over all bins, then the inclusive CDF divided by the tile size.
fn tile_mapping(values: impl Iterator<Item = f64>, clip_limit: f64) -> [f64; CLAHE_BINS] {
    let mut hist = [0.0f64; CLAHE_BINS];
    let mut n = 0usize;
    for v in values {
        hist[bin_of(v)] += 1.0;
        n += 1;
    }
    if clip_limit.is_finite() {
        let limit = clip_limit * n as f64 / CLAHE_BINS as f64;
        let mut excess = 0.0;
        for h in hist.iter_mut() {
            if *h > limit {
                excess += *h - limit;
                *h = limit;
            }
        }
        let share = excess / CLAHE_BINS as f64;
        for h in hist.iter_mut() {
            *h += share;
        }
    }
    let mut map = [0.0f64; CLAHE_BINS];
    let mut acc = 0.0;
    for (m, h) in map.iter_mut().zip(hist) {
        acc += h;
        *m = (acc / n as f64).min(1.0);
    }
    map
}

/// Contrast-limited adaptive histogram equalisation of a (1,1,h,w) map in
/// [0,1]. `tiles` is (across, down). `clip_limit` is relative to the
/// uniform bin height; `f64::INFINITY` disables clipping.
pub fn clahe(img: &Tensor4<f64>, clip_limit: f64, tiles: (usize, usize)) -> Result<Tensor4<f64>> {
    let s = img.shape();
    if s.n != 1 || s.c != 1 {
        return Err(shape_err!("CLAHE works on a single (1,1,h,w) map, got {s}"));
    }
    if !(clip_limit > 0.0) {
        return Err(Error::InvalidArgument(format!("clip limit must be > 0, got {clip_limit}")));
    }
    let (tx, ty) = tiles;
    if tx == 0 || ty == 0 {
        return Err(Error::InvalidArgument("tile grid must be at least 1x1".into()));
    }
    if s.h < ty || s.w < tx {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} is smaller than the {tx}x{ty} tile grid",
            s.h, s.w
        )));
    }
    let (rows, cols) = (segments(s.h, ty), segments(s.w, tx));
    let data = img.data();
    let mut maps = Vec::with_capacity(tx * ty);
    for &(r0, r1) in &rows {
        for &(c0, c1) in &cols {
            let vals = (r0..r1).flat_map(|y| data[y * s.w + c0..y * s.w + c1].iter().copied());
            maps.push(tile_mapping(vals, clip_limit));
        }
    }
    let centre = |seg: &[(usize, usize)]| -> Vec<f64> {
        seg.iter().map(|&(a, b)| (a + b - 1) as f64 / 2.0).collect()
    };
    let (cy, cx) = (centre(&rows), centre(&cols));
    // Neighbouring tile indices and the weight of the second one.
    let locate = |centres: &[f64], p: f64| -> (usize, usize, f64) {
        let last = centres.len() - 1;
        if p <= centres[0] {
            return (0, 0, 0.0);
        }
        if p >= centres[last] {
            return (last, last, 0.0);
        }
        let i = centres.partition_point(|&c| c <= p) - 1;
        (i, i + 1, (p - centres[i]) / (centres[i + 1] - centres[i]))
    };
    let xs: Vec<_> = (0..s.w).map(|x| locate(&cx, x as f64)).collect();
    let mut out = Vec::with_capacity(s.numel());
    for y in 0..s.h {
        let (i0, i1, fy) = locate(&cy, y as f64);
        for (x, &(j0, j1, fx)) in xs.iter().enumerate() {
            let b = bin_of(data[y * s.w + x]);
            let m = |i: usize, j: usize| maps[i * tx + j][b];
            let top = m(i0, j0) * (1.0 - fx) + m(i0, j1) * fx;
            let bot = m(i1, j0) * (1.0 - fx) + m(i1, j1) * fx;
            out.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
        }
    }
    Tensor4::from_vec(s, out)
}

/// `img^gamma` elementwise.
pub fn gamma_correct(img: &Tensor4<f64>, gamma: f64) -> Result<Tensor4<f64>> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be > 0, got {gamma}")));
    }
    Ok(img.map(|v| v.powf(gamma)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskResize {
    Bilinear,
    Nearest,
}

impl std::str::FromStr for MaskResize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Self::Bilinear),
            "nearest" => Ok(Self::Nearest),
            other => Err(Error::Config(format!("unknown mask resize {other:?} (bilinear|nearest)"))),
        }
    }
}

impl std::fmt::Display for MaskResize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Bilinear => "bilinear",
            Self::Nearest => "nearest",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub clip_limit: f64,
    pub tiles: (usize, usize),
    pub gamma: f64,
    /// Output (h, w); `None` keeps the source size.
    pub target: Option<(usize, usize)>,
    pub mask_resize: MaskResize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            clip_limit: 2.0,
            tiles: (8, 8),
            gamma: 1.2,
            target: Some((512, 512)),
            mask_resize: MaskResize::Bilinear,
        }
    }
}

/// Full pipeline for a colour fundus image, returning (1,3,H,W) with three
/// identical channels.
pub fn preprocess_pipeline<T: Scalar>(img: &ImageU8, cfg: &PreprocessConfig) -> Result<Tensor4<T>> {
    let gray = to_grayscale(img)?;
    let unit = normalize_unit(&gray)?;
    let eq = clahe(&unit, cfg.clip_limit, cfg.tiles)?;
    let g = gamma_correct(&eq, cfg.gamma)?;
    let (h, w) = cfg.target.unwrap_or((img.h, img.w));
    let resized = bilinear_resize(&g, h, w)?;
    let plane = resized.data();
    let mut data = Vec::with_capacity(3 * plane.len());
    for _ in 0..3 {
        data.extend(plane.iter().map(|&v| T::of(v.clamp(0.0, 1.0))));
    }
    Tensor4::from_vec([1, 3, h, w], data)
}

/// Ground-truth mask as a (1,1,H,W) {0,1} tensor: samples scaled to [0,1],
/// resized, then thresholded at 0.5.
pub fn preprocess_mask<T: Scalar>(img: &ImageU8, cfg: &PreprocessConfig) -> Result<Tensor4<T>> {
    let gray = if img.channels == 3 { to_grayscale(img)? } else { img.clone() };
    let unit = Tensor4::from_vec(
        [1, 1, gray.h, gray.w],
        gray.data.iter().map(|&v| v as f64 / 255.0).collect(),
    )?;
    let (h, w) = cfg.target.unwrap_or((img.h, img.w));
    let resized = match cfg.mask_resize {
        MaskResize::Bilinear => bilinear_resize(&unit, h, w)?,
        MaskResize::Nearest => nearest_resize(&unit, h, w)?,
    };
    Ok(resized.map(|v| if v > 0.5 { 1.0 } else { 0.0 }).cast())
}

/// Nearest-neighbour resize with half-pixel centres.
pub fn nearest_resize(img: &Tensor4<f64>, out_h: usize, out_w: usize) -> Result<Tensor4<f64>> {
    let s = img.shape();
    let pick = |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    Tensor4::from_fn([s.n, s.c, out_h, out_w], |n, c, y, x| {
        img.at(n, c, pick(y, out_h, s.h), pick(x, out_w, s.w))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> u8) -> ImageU8 {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        ImageU8::new(h, w, 1, data).unwrap()
    }

    #[test]
    fn luma_hand_values() {
        let img = ImageU8::new(1, 3, 3, vec![255, 0, 0, 0, 0, 0, 77, 77, 77]).unwrap();
        assert_eq!(to_grayscale(&img).unwrap().data, vec![76, 0, 77]);
        assert!(to_grayscale(&gray(1, 1, |_, _| 0)).is_err());
    }

    #[test]
    fn gray_fixed_point_for_all_levels() {
        let data: Vec<u8> = (0..=255u8).flat_map(|g| [g, g, g]).collect();
        let img = ImageU8::new(1, 256, 3, data).unwrap();
        let out = to_grayscale(&img).unwrap();
        assert!(out.data.iter().enumerate().all(|(i, &v)| v as usize == i));
    }

    #[test]
    fn normalisation_cases() {
        let n = normalize_unit(&gray(1, 2, |_, x| [50, 150][x])).unwrap();
        assert_eq!(n.data(), &[0.0, 1.0]);
        let c = normalize_unit(&gray(2, 2, |_, _| 9)).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        let full = normalize_unit(&gray(16, 16, |y, x| (y * 16 + x) as u8)).unwrap();
        assert!(full.data().iter().enumerate().all(|(i, &v)| v == i as f64 / 255.0));
    }

    #[test]
    fn clahe_constant_stays_constant() {
        let img = Tensor4::full([1, 1, 32, 32], 0.4).unwrap();
        let out = clahe(&img, 2.0, (8, 8)).unwrap();
        let first = out.data()[0];
        assert!(out.data().iter().all(|&v| v == first));
        assert!((0.0..=1.0).contains(&first));
    }

    #[test]
    fn clahe_rejects_small_images_and_bad_args() {
        let img = Tensor4::full([1, 1, 4, 4], 0.4).unwrap();
        assert!(clahe(&img, 2.0, (8, 8)).is_err());
        assert!(clahe(&img, 0.0, (2, 2)).is_err());
        assert!(clahe(&img, 2.0, (0, 2)).is_err());
    }

    #[test]
    fn gamma_values() {
        let t = Tensor4::from_vec([1, 1, 1, 3], vec![0.0, 0.25, 1.0]).unwrap();
        assert_eq!(gamma_correct(&t, 2.0).unwrap().data(), &[0.0, 0.0625, 1.0]);
        assert_eq!(gamma_correct(&t, 1.0).unwrap(), t);
        assert!(gamma_correct(&t, 0.0).is_err());
    }

    #[test]
    fn pipeline_shape_and_channels() {
        let data = (0..40 * 36 * 3).map(|i| ((i * 37) % 251) as u8).collect();
        let img = ImageU8::new(40, 36, 3, data).unwrap();
        let cfg = PreprocessConfig {
            target: Some((32, 32)),
            ..PreprocessConfig::default()
        };
        let t: Tensor4<f32> = preprocess_pipeline(&img, &cfg).unwrap();
        assert_eq!(t.shape().dims(), [1, 3, 32, 32]);
        assert_eq!(t.plane(0, 0), t.plane(0, 1));
        assert_eq!(t.plane(0, 0), t.plane(0, 2));
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn mask_resize_binary() {
        let m = gray(8, 8, |y, _| if y < 4 { 255 } else { 0 });
        for mode in [MaskResize::Bilinear, MaskResize::Nearest] {
            let cfg = PreprocessConfig {
                target: Some((4, 4)),
                mask_resize: mode,
                ..PreprocessConfig::default()
            };
            let t: Tensor4<f64> = preprocess_mask(&m, &cfg).unwrap();
            assert_eq!(t.data()[..8], [1.0; 8]);
            assert_eq!(t.data()[8..], [0.0; 8]);
        }
    }
}
