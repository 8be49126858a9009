//! Manifest records to network-ready tensors.

use std::fs;
use std::path::Path;
use std::thread;

use wmka_core::dataio::{load_manifest, read_image, write_image, DatasetManifest, ManifestRecord, Split};
use wmka_core::network::SPATIAL_MULTIPLE;
use wmka_core::preprocess::{preprocess_mask, preprocess_pipeline, to_grayscale, ImageU8, PreprocessConfig};
use wmka_core::Tensor4;

use crate::config::{InputKind, RunConfig};
use crate::error::{invalid, CliError, Result};

/// One image (1,C,H,W) in [0,1] with its (1,1,H,W) binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: Tensor4<f32>,
    pub mask: Tensor4<f32>,
}

/// Maps `f` over `items` on up to `available_parallelism` threads, keeping order.
pub fn par_map<I: Sync, O: Send>(items: &[I], f: impl Fn(usize, &I) -> Result<O> + Sync) -> Result<Vec<O>> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(items.len()).max(1);
    let chunk = items.len().div_ceil(workers).max(1);
    let f = &f;
    let parts: Vec<Result<Vec<O>>> = thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(ci, part)| {
                s.spawn(move || part.iter().enumerate().map(|(j, it)| f(ci * chunk + j, it)).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn select_channels(x: Tensor4<f32>, in_channels: usize) -> Result<Tensor4<f32>> {
    if in_channels == x.shape().c {
        return Ok(x);
    }
    let s = x.shape();
    Ok(Tensor4::from_vec([1, 1, s.h, s.w], x.plane(0, 0).to_vec())?)
}

/// Network input for a decoded image under `cfg`.
pub fn image_tensor(cfg: &RunConfig, img: &ImageU8) -> Result<Tensor4<f32>> {
    let c = cfg.network.in_channels;
    match cfg.input {
        InputKind::Raw => select_channels(preprocess_pipeline(img, &cfg.preprocess)?, c),
        InputKind::Preprocessed => {
            let gray = if img.channels == 1 { img.clone() } else { to_grayscale(img)? };
            let plane: Vec<f32> = gray.data.iter().map(|&v| f32::from(v) / 255.0).collect();
            let data = (0..c).flat_map(|_| plane.iter().copied()).collect();
            Ok(Tensor4::from_vec([1, c, gray.h, gray.w], data)?)
        }
    }
}

fn mask_config(cfg: &RunConfig) -> PreprocessConfig {
    match cfg.input {
        InputKind::Raw => cfg.preprocess.clone(),
        InputKind::Preprocessed => PreprocessConfig { target: None, ..cfg.preprocess.clone() },
    }
}

pub fn load_sample(cfg: &RunConfig, rec: &ManifestRecord) -> Result<Sample> {
    let image = image_tensor(cfg, &read_image(&rec.image)?)?;
    let mask = preprocess_mask(&read_image(&rec.mask)?, &mask_config(cfg))?;
    let (si, sm) = (image.shape(), mask.shape());
    if (si.h, si.w) != (sm.h, sm.w) {
        return Err(invalid(format!(
            "{}: image is {}x{} but mask {} is {}x{}",
            rec.image.display(),
            si.h,
            si.w,
            rec.mask.display(),
            sm.h,
            sm.w
        )));
    }
    if si.h % SPATIAL_MULTIPLE != 0 || si.w % SPATIAL_MULTIPLE != 0 {
        return Err(invalid(format!(
            "{}: network input {}x{} is not a multiple of {SPATIAL_MULTIPLE}; set target",
            rec.image.display(),
            si.h,
            si.w
        )));
    }
    Ok(Sample { name: stem(&rec.image), image, mask })
}

pub fn manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let path = cfg.manifest.as_ref().ok_or_else(|| invalid("no manifest configured (set manifest = PATH)"))?;
    Ok(load_manifest(path)?)
}

pub fn load_split(cfg: &RunConfig, manifest: &DatasetManifest, split: Split) -> Result<Vec<Sample>> {
    let records: Vec<&ManifestRecord> = manifest.split(split);
    if records.is_empty() {
        return Err(invalid(format!("manifest {:?} has no {split} records", manifest.name)));
    }
    par_map(&records, |_, r| load_sample(cfg, r))
}

/// Concatenates single-image tensors along the batch axis.
pub fn stack(items: &[&Tensor4<f32>]) -> Result<Tensor4<f32>> {
    let first = items.first().ok_or_else(|| invalid("empty batch"))?.shape();
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first {
            return Err(CliError::Validation(format!(
                "cannot batch images of shapes {first} and {}; set a common target size",
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    Ok(Tensor4::from_vec([items.len() * first.n, first.c, first.h, first.w], data)?)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Runs the preprocessing pipeline over every manifest record and writes
/// gray images, binary masks and a manifest pointing at them into `out`.
pub fn preprocess_manifest(cfg: &RunConfig, manifest: &DatasetManifest, out: &Path) -> Result<usize> {
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| invalid(format!("{}: {e}", d.display())))?;
    }
    let raw = RunConfig { input: InputKind::Raw, ..cfg.clone() };
    let lines = par_map(&manifest.records, |i, rec| {
        let s = load_sample(&raw, rec)?;
        let sh = s.image.shape();
        let name = format!("{i:03}_{}.png", s.name);
        let img = ImageU8::new(sh.h, sh.w, 1, s.image.plane(0, 0).iter().map(|&v| to_u8(v)).collect())?;
        let mask = ImageU8::new(sh.h, sh.w, 1, s.mask.data().iter().map(|&v| to_u8(v)).collect())?;
        write_image(&out.join("images").join(&name), &img)?;
        write_image(&out.join("masks").join(&name), &mask)?;
        Ok(format!("images/{name}\tmasks/{name}\t{}\n", rec.split))
    })?;
    let mut text = format!("# preprocessed from {}\n", manifest.name);
    text.extend(lines);
    let path = out.join("manifest.tsv");
    fs::write(&path, text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok(manifest.records.len())
}
