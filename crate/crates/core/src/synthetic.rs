//! Seeded vessel-like test images: a vignetted bright disc crossed by
//! dark, curved, branching strokes of varying width.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Scalar, Tensor4};

/// Returns `(image (1,3,h,w) in [0,1], mask (1,1,h,w) in {0,1})`.
pub fn vessel_image<T: Scalar>(h: usize, w: usize, seed: u64) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![0u8; h * w];
    let scale = h.min(w) as f64;

    let trunks = 3 + (h * w / 2048).min(5);
    for _ in 0..trunks {
        let mut x = rng.gen_range(0.0..w as f64);
        let mut y = rng.gen_range(0.0..h as f64);
        let mut heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut radius = rng.gen_range(0.8..1.8);
        let steps = (scale * 1.5) as usize;
        for step in 0..steps {
            paint_disc(&mut mask, h, w, x, y, radius);
            heading += rng.gen_range(-0.25..0.25);
            x += heading.cos();
            y += heading.sin();
            if step % 12 == 11 && rng.gen_bool(0.35) {
                let (bx, by, bh) = (x, y, heading + rng.gen_range(0.5..1.1) * sign(&mut rng));
                draw_branch(&mut mask, h, w, bx, by, bh, radius * 0.7, scale * 0.4, &mut rng);
            }
            radius = (radius * 0.995).max(0.6);
            if x < -4.0 || y < -4.0 || x > w as f64 + 4.0 || y > h as f64 + 4.0 {
                break;
            }
        }
    }

    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut img = Vec::with_capacity(3 * h * w);
    let tints = [0.85, 0.55, 0.3];
    let mut luma = vec![0.0f64; h * w];
    for i in 0..h {
        for j in 0..w {
            let r = (((i as f64 - cy) / h as f64).powi(2) + ((j as f64 - cx) / w as f64).powi(2)).sqrt();
            let bg = 0.75 - 0.6 * r;
            let vessel = if mask[i * w + j] == 1 { 0.35 } else { 0.0 };
            luma[i * w + j] = bg - vessel + rng.gen_range(-0.03..0.03);
        }
    }
    for tint in tints {
        img.extend(luma.iter().map(|&v| T::of((v * tint / 0.85).clamp(0.0, 1.0))));
    }
    let image = Tensor4::from_vec([1, 3, h, w], img)?;
    let mask = Tensor4::from_vec([1, 1, h, w], mask.iter().map(|&m| T::of(m as f64)).collect())?;
    Ok((image, mask))
}

/// Bright 3-pixel-wide diagonal stripes on a dark noisy background, with a
/// seeded period and offset. Returns the same layout as [`vessel_image`].
pub fn diagonal_lines<T: Scalar>(h: usize, w: usize, seed: u64) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = rng.gen_range(11..17usize);
    let offset = rng.gen_range(0..period);
    let mut mask = Vec::with_capacity(h * w);
    let mut luma = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let on = (i + j + offset) % period < 3;
            mask.push(T::of(if on { 1.0 } else { 0.0 }));
            let base = if on { 0.8 } else { 0.2 };
            luma.push(base + rng.gen_range(-0.05..0.05));
        }
    }
    let mut img = Vec::with_capacity(3 * h * w);
    for tint in [1.0, 0.8, 0.6] {
        img.extend(luma.iter().map(|&v: &f64| T::of((v * tint).clamp(0.0, 1.0))));
    }
    Ok((Tensor4::from_vec([1, 3, h, w], img)?, Tensor4::from_vec([1, 1, h, w], mask)?))
}

fn sign(rng: &mut ChaCha8Rng) -> f64 {
    if rng.gen_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

#[allow(clippy::too_many_arguments)]
fn draw_branch(
    mask: &mut [u8],
    h: usize,
    w: usize,
    mut x: f64,
    mut y: f64,
    mut heading: f64,
    radius: f64,
    len: f64,
    rng: &mut ChaCha8Rng,
) {
    for _ in 0..len as usize {
        paint_disc(mask, h, w, x, y, radius.max(0.5));
        heading += rng.gen_range(-0.3..0.3);
        x += heading.cos();
        y += heading.sin();
    }
}

fn paint_disc(mask: &mut [u8], h: usize, w: usize, x: f64, y: f64, r: f64) {
    let (i0, i1) = ((y - r).floor().max(0.0) as isize, (y + r).ceil() as isize);
    let (j0, j1) = ((x - r).floor().max(0.0) as isize, (x + r).ceil() as isize);
    for i in i0..=i1.min(h as isize - 1) {
        for j in j0..=j1.min(w as isize - 1) {
            let (dy, dx) = (i as f64 - y, j as f64 - x);
            if dy * dy + dx * dx <= r * r {
                mask[i as usize * w + j as usize] = 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sparse() {
        let (a, ma) = vessel_image::<f32>(64, 64, 5).unwrap();
        let (b, mb) = vessel_image::<f32>(64, 64, 5).unwrap();
        assert_eq!((a.clone(), ma.clone()), (b, mb));
        let frac = ma.sum() / ma.numel() as f32;
        assert!(frac > 0.03 && frac < 0.4, "vessel fraction {frac}");
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn diagonal_stripes_are_three_pixels_wide() {
        let (img, mask) = diagonal_lines::<f64>(64, 64, 9).unwrap();
        for i in 0..64 {
            let row: Vec<bool> = (0..64).map(|j| mask.at(0, 0, i, j) == 1.0).collect();
            let runs: Vec<usize> = row
                .split(|&on| !on)
                .map(<[bool]>::len)
                .filter(|&n| n > 0)
                .collect();
            let interior = &runs[usize::from(row[0])..runs.len() - usize::from(row[63])];
            assert!(interior.iter().all(|&n| n == 3), "row {i}: {runs:?}");
        }
        for i in 0..64 {
            for j in 0..64 {
                assert_eq!(img.at(0, 0, i, j) > 0.5, mask.at(0, 0, i, j) == 1.0);
            }
        }
    }
}
