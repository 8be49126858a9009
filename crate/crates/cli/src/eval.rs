//! Per-image and pooled metrics, and single-image prediction.

use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use wmka_core::dataio::{read_image, write_prediction, Checkpoint, Split};
use wmka_core::loss::{binarize, confusion_counts, ConfusionCounts, MetricReport, CSV_HEADER};
use wmka_core::network::{init_params, Network, NetworkConfig};
use wmka_core::params::ParamStore;
use wmka_core::tensor::bilinear_resize;

use crate::config::RunConfig;
use crate::data::{self, Sample};
use crate::error::{invalid, Result};
use crate::train::META_CONFIG;

/// Errors unless `store` holds exactly the tensors `cfg` declares.
pub fn check_layout(cfg: &NetworkConfig, store: &ParamStore<f32>) -> Result<()> {
    let want = init_params::<f32>(cfg, 0)?;
    let groups = [("parameter", &want.params, &store.params), ("buffer", &want.buffers, &store.buffers)];
    for (what, want, have) in groups {
        for (name, t) in want {
            match have.get(name) {
                None => return Err(invalid(format!("checkpoint lacks {what} {name}"))),
                Some(h) if h.shape() != t.shape() => {
                    return Err(invalid(format!(
                        "checkpoint {what} {name} has shape {} but the config needs {}",
                        h.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = have.keys().find(|k| !want.contains_key(*k)) {
            return Err(invalid(format!("checkpoint has unexpected {what} {extra}")));
        }
    }
    Ok(())
}

pub fn load_model(cfg: &NetworkConfig, ck: &Checkpoint) -> Result<(Network, ParamStore<f32>)> {
    let store = ck.to_store::<f32>()?;
    check_layout(cfg, &store)?;
    Ok((Network::new(cfg)?, store))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEval {
    pub name: String,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub images: Vec<ImageEval>,
    /// From the summed counts of every image.
    pub pooled: MetricReport,
}

impl EvalSummary {
    pub fn csv(&self) -> String {
        let mut out = format!("image,{CSV_HEADER}\n");
        for im in &self.images {
            writeln!(out, "{},{}", im.name, im.report.csv_row()).unwrap();
        }
        writeln!(out, "pooled,{}", self.pooled.csv_row()).unwrap();
        out
    }
}

/// Eval-mode forward on each sample, binarised at `threshold`.
pub fn evaluate_samples(
    net: &Network,
    store: &ParamStore<f32>,
    samples: &[Sample],
    threshold: f64,
) -> Result<EvalSummary> {
    let mut pooled = ConfusionCounts::default();
    let mut images = Vec::with_capacity(samples.len());
    for s in samples {
        let prob = net.predict(store, &s.image)?;
        let counts = confusion_counts(&binarize(&prob, threshold), &s.mask, None)?;
        pooled = pooled.merge(&counts);
        images.push(ImageEval { name: s.name.clone(), report: counts.report() });
    }
    Ok(EvalSummary { images, pooled: pooled.report() })
}

/// Evaluates a checkpoint on one manifest split and writes
/// `out_dir/eval_<split>.csv`.
pub fn evaluate_split(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<(EvalSummary, PathBuf)> {
    cfg.validate()?;
    let (net, store) = load_model(&cfg.network, &Checkpoint::load(checkpoint)?)?;
    let manifest = data::manifest(cfg)?;
    let samples = data::load_split(cfg, &manifest, split)?;
    let summary = evaluate_samples(&net, &store, &samples, cfg.network.threshold)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| invalid(format!("{}: {e}", cfg.out_dir.display())))?;
    let path = cfg.out_dir.join(format!("eval_{split}.csv"));
    fs::write(&path, summary.csv()).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok((summary, path))
}

/// Segments one image with the settings stored in the checkpoint. Writes
/// `<stem>_prob.png` and `<stem>_mask.png` at the source resolution.
pub fn predict(checkpoint: &Path, image: &Path, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let ck = Checkpoint::load(checkpoint)?;
    let text = ck
        .meta
        .get(META_CONFIG)
        .ok_or_else(|| invalid("checkpoint carries no run config"))?;
    let cfg = RunConfig::parse(text, Path::new("/"))?;
    cfg.validate()?;
    let (net, store) = load_model(&cfg.network, &ck)?;
    let img = read_image(image)?;
    let x = data::image_tensor(&cfg, &img)?;
    let prob = net.predict(&store, &x)?.cast::<f64>();
    let prob = bilinear_resize(&prob, img.h, img.w)?.map(|p| p.clamp(0.0, 1.0));
    fs::create_dir_all(out).map_err(|e| invalid(format!("{}: {e}", out.display())))?;
    let stem = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    let (pp, pm) = (out.join(format!("{stem}_prob.png")), out.join(format!("{stem}_mask.png")));
    write_prediction(&prob, cfg.network.threshold, &pp, &pm)?;
    Ok((pp, pm))
}
