use proptest::prelude::*;
use rand::Rng;
use wmka_core::preprocess::*;
use wmka_core::Tensor4;
use wmka_testkit as oracle;

fn random_rgb(h: usize, w: usize, seed: u64) -> ImageU8 {
    let mut rng = oracle::rng(seed);
    ImageU8::new(h, w, 3, (0..h * w * 3).map(|_| rng.gen()).collect()).unwrap()
}

fn unit_map(samples: &[u8], h: usize, w: usize) -> Tensor4<f64> {
    Tensor4::from_vec([1, 1, h, w], samples.iter().map(|&v| f64::from(v) / 255.0).collect()).unwrap()
}

#[test]
fn grayscale_cases() {
    let img = ImageU8::new(1, 4, 3, vec![255, 0, 0, 0, 0, 0, 77, 77, 77, 255, 255, 255]).unwrap();
    assert_eq!(to_grayscale(&img).unwrap().data, vec![76, 0, 77, 255]);
    assert!(to_grayscale(&ImageU8::new(1, 1, 1, vec![3]).unwrap()).is_err());
}

#[test]
fn normalisation_cases() {
    let full = ImageU8::new(16, 16, 1, (0..=255).collect()).unwrap();
    let n = normalize_unit(&full).unwrap();
    assert!(n.data().iter().enumerate().all(|(v, &x)| x == v as f64 / 255.0));
    let two = ImageU8::new(1, 2, 1, vec![50, 150]).unwrap();
    assert_eq!(normalize_unit(&two).unwrap().data(), &[0.0, 1.0]);
    let flat = ImageU8::new(3, 3, 1, vec![9; 9]).unwrap();
    assert!(normalize_unit(&flat).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn gamma_cases() {
    let x = Tensor4::from_vec([1, 1, 1, 4], vec![0.0, 0.25, 0.6, 1.0]).unwrap();
    assert_eq!(gamma_correct(&x, 1.0).unwrap(), x);
    assert_eq!(gamma_correct(&x, 2.0).unwrap().data()[1], 0.0625);
    for g in [0.3, 1.2, 5.0] {
        let y = gamma_correct(&x, g).unwrap();
        assert_eq!((y.data()[0], y.data()[3]), (0.0, 1.0));
    }
    assert!(gamma_correct(&x, 0.0).is_err());
}

#[test]
fn clahe_single_tile_without_clipping_is_global_equalisation() {
    let mut rng = oracle::rng(21);
    for (h, w) in [(7, 9), (32, 32), (50, 31)] {
        let samples: Vec<u8> = (0..h * w).map(|_| rng.gen_range(20..200)).collect();
        let got = clahe(&unit_map(&samples, h, w), f64::INFINITY, (1, 1)).unwrap();
        assert_eq!(got.data(), oracle::global_equalize(&samples).as_slice());
    }
}

#[test]
fn clahe_mappings_are_monotone() {
    let mut rng = oracle::rng(22);
    let (h, w) = (64, 48);
    let samples: Vec<u8> = (0..h * w).map(|_| rng.gen()).collect();
    let img = unit_map(&samples, h, w);
    let check = |out: &Tensor4<f64>, pixels: &[(usize, usize)]| {
        let mut pairs: Vec<(f64, f64)> = pixels.iter().map(|&(y, x)| (img.at(0, 0, y, x), out.at(0, 0, y, x))).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(pairs.windows(2).all(|p| p[0].1 <= p[1].1));
    };
    let all: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect();
    check(&clahe(&img, 2.0, (1, 1)).unwrap(), &all);
    // pixels before the first tile centre on both axes use tile (0,0) alone
    let corner: Vec<(usize, usize)> = (0..4).flat_map(|y| (0..3).map(move |x| (y, x))).collect();
    check(&clahe(&img, 2.0, (8, 8)).unwrap(), &corner);
}

#[test]
fn clahe_constant_and_error_cases() {
    let flat = Tensor4::full([1, 1, 16, 16], 0.4).unwrap();
    let out = clahe(&flat, 2.0, (4, 4)).unwrap();
    assert!(out.data().iter().all(|&v| v == out.data()[0]));
    assert!(clahe(&Tensor4::zeros([1, 1, 4, 4]).unwrap(), 2.0, (8, 8)).is_err());
    assert!(clahe(&flat, 0.0, (2, 2)).is_err());
    assert!(clahe(&flat, 2.0, (0, 2)).is_err());
}

#[test]
fn drive_sized_image_becomes_network_input() {
    let img = random_rgb(584, 565, 23);
    let cfg = PreprocessConfig::default();
    let x = preprocess_pipeline::<f32>(&img, &cfg).unwrap();
    assert_eq!(x.shape(), [1, 3, 512, 512].into());
    assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(x.plane(0, 0) == x.plane(0, 1) && x.plane(0, 1) == x.plane(0, 2));
    let again = preprocess_pipeline::<f32>(&img, &cfg).unwrap();
    assert_eq!(x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), again.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn native_size_skips_the_resize() {
    let img = random_rgb(32, 48, 24);
    let native = PreprocessConfig { target: None, ..Default::default() };
    let same = PreprocessConfig { target: Some((32, 48)), ..Default::default() };
    assert_eq!(preprocess_pipeline::<f64>(&img, &native).unwrap(), preprocess_pipeline::<f64>(&img, &same).unwrap());
}

#[test]
fn masks_are_binary_after_resize() {
    let mut rng = oracle::rng(25);
    let mask = ImageU8::new(40, 30, 1, (0..1200).map(|_| if rng.gen_bool(0.2) { 255 } else { 0 }).collect()).unwrap();
    for mode in [MaskResize::Bilinear, MaskResize::Nearest] {
        let cfg = PreprocessConfig { target: Some((32, 32)), mask_resize: mode, ..Default::default() };
        let m = preprocess_mask::<f32>(&mask, &cfg).unwrap();
        assert_eq!(m.shape(), [1, 1, 32, 32].into());
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
    let id = PreprocessConfig { target: None, ..Default::default() };
    let m = preprocess_mask::<f64>(&mask, &id).unwrap();
    assert!(m.data().iter().zip(&mask.data).all(|(&v, &s)| v == f64::from(u8::from(s == 255))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_stage_stays_in_unit_range(seed in any::<u64>(), gamma in 0.2..4.0f64, clip in 0.5..6.0f64) {
        let img = random_rgb(24, 20, seed);
        let unit = normalize_unit(&to_grayscale(&img).unwrap()).unwrap();
        let eq = clahe(&unit, clip, (3, 2)).unwrap();
        let g = gamma_correct(&eq, gamma).unwrap();
        for t in [&unit, &eq, &g] {
            prop_assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn gamma_is_strictly_monotone(a in 0.001..0.999f64, b in 0.001..0.999f64, gamma in 0.05..8.0f64) {
        prop_assume!((a - b).abs() > 1e-6);
        let x = Tensor4::from_vec([1, 1, 1, 2], vec![a, b]).unwrap();
        let y = gamma_correct(&x, gamma).unwrap();
        prop_assert_eq!(a < b, y.data()[0] < y.data()[1]);
    }
}
