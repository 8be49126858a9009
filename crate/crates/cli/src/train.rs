//! Seeded mini-batch training with Adam on mean BCE.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wmka_core::autograd::AdamConfig;
use wmka_core::dataio::{Checkpoint, Split};
use wmka_core::loss::{binarize, confusion_counts, ConfusionCounts};
use wmka_core::network::{init_params, Network};
use wmka_core::params::ParamStore;

use crate::config::RunConfig;
use crate::data::{self, stack, Sample};
use crate::error::{invalid, Result};

pub const LOG_HEADER: &str = "epoch,mean_loss,train_f1";
pub const META_CONFIG: &str = "run.config";
pub const META_EPOCH: &str = "run.epoch";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Per-image mean of the batch losses.
    pub mean_loss: f64,
    /// Pooled over the epoch's train-mode forward passes.
    pub train_f1: Option<f64>,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let f1 = self.train_f1.map_or("undefined".to_string(), |v| format!("{v:.6}"));
        format!("{},{:.8},{f1}", self.epoch, self.mean_loss)
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub net: Network,
    pub store: ParamStore<f32>,
    /// Epochs completed so far.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Network::new(&cfg.network)?;
        let mut store = init_params::<f32>(&cfg.network, cfg.seed)?;
        store.reset_optimizer(AdamConfig { lr: cfg.lr, ..AdamConfig::default() })?;
        Ok(Self { cfg: cfg.clone(), net, store, epoch: 0 })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`]. Every
    /// setting except the schedule length and paths must match.
    pub fn resume(cfg: &RunConfig, ck: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let saved = ck
            .meta
            .get(META_CONFIG)
            .ok_or_else(|| invalid("checkpoint carries no run config; cannot resume"))?;
        let saved = RunConfig::parse(saved, Path::new("/"))?;
        let (want, have) = (saved.resume_identity(), cfg.resume_identity());
        if want != have {
            let diff: Vec<String> = want
                .lines()
                .zip(have.lines())
                .filter(|(a, b)| a != b)
                .map(|(a, b)| format!("checkpoint `{a}` vs config `{b}`"))
                .collect();
            return Err(invalid(format!("checkpoint does not match config: {}", diff.join("; "))));
        }
        let epoch = ck
            .meta
            .get(META_EPOCH)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| invalid("checkpoint has no epoch counter"))?;
        let net = Network::new(&cfg.network)?;
        let store = ck.to_store::<f32>()?;
        crate::eval::check_layout(&cfg.network, &store)?;
        Ok(Self { cfg: cfg.clone(), net, store, epoch })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store);
        ck.meta.insert(META_CONFIG.into(), self.cfg.dump());
        ck.meta.insert(META_EPOCH.into(), self.epoch.to_string());
        ck
    }

    /// Visiting order for `epoch` (1-based): a shuffle drawn from the
    /// run seed on a stream of its own, so resumed runs see the same order.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One pass over `samples` in batches of `batch_size`; the last batch
    /// may be smaller.
    pub fn run_epoch(&mut self, samples: &[Sample]) -> Result<EpochLog> {
        if samples.is_empty() {
            return Err(invalid("no training samples"));
        }
        let epoch = self.epoch + 1;
        let order = self.epoch_order(epoch, samples.len());
        let mut loss_sum = 0.0;
        let mut counts = ConfusionCounts::default();
        for batch in order.chunks(self.cfg.batch_size) {
            let images = stack(&batch.iter().map(|&i| &samples[i].image).collect::<Vec<_>>())?;
            let masks = stack(&batch.iter().map(|&i| &samples[i].mask).collect::<Vec<_>>())?;
            let (loss, prob) = self.net.train_step(&mut self.store, &images, &masks)?;
            loss_sum += loss * batch.len() as f64;
            let pred = binarize(&prob, self.cfg.network.threshold);
            counts = counts.merge(&confusion_counts(&pred, &masks, None)?);
        }
        self.epoch = epoch;
        Ok(EpochLog {
            epoch,
            mean_loss: loss_sum / samples.len() as f64,
            train_f1: counts.report().f1,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub epochs: Vec<EpochLog>,
}

fn io_err(path: &Path, e: std::io::Error) -> crate::error::CliError {
    invalid(format!("{}: {e}", path.display()))
}

/// Trains on the manifest's train split for `cfg.epochs` epochs in total,
/// appending to `out_dir/train_log.csv` and saving checkpoints.
pub fn train_loop(cfg: &RunConfig, resume: Option<&Path>, quiet: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let manifest = data::manifest(cfg)?;
    let samples = data::load_split(cfg, &manifest, Split::Train)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg)?,
    };
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    let log_path = cfg.out_dir.join("train_log.csv");
    let mut log = if resume.is_some() && log_path.exists() {
        OpenOptions::new().append(true).open(&log_path).map_err(|e| io_err(&log_path, e))?
    } else {
        let mut f = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
        writeln!(f, "{LOG_HEADER}").map_err(|e| io_err(&log_path, e))?;
        f
    };
    let cfg_path = cfg.out_dir.join("run_config.txt");
    fs::write(&cfg_path, cfg.dump()).map_err(|e| io_err(&cfg_path, e))?;

    let mut epochs = Vec::new();
    while trainer.epoch < cfg.epochs {
        let row = trainer.run_epoch(&samples)?;
        writeln!(log, "{}", row.csv_row()).map_err(|e| io_err(&log_path, e))?;
        if !quiet {
            println!(
                "epoch {}/{} loss {:.6} train F1 {}",
                row.epoch,
                cfg.epochs,
                row.mean_loss,
                row.train_f1.map_or("undefined".into(), |v| format!("{v:.4}"))
            );
        }
        if cfg.save_interval > 0 && row.epoch % cfg.save_interval == 0 {
            trainer.checkpoint().save(&cfg.out_dir.join(format!("epoch_{:04}.wmka", row.epoch)))?;
        }
        epochs.push(row);
    }
    let checkpoint = cfg.checkpoint_path();
    if let Some(dir) = checkpoint.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    trainer.checkpoint().save(&checkpoint)?;
    Ok(TrainSummary { checkpoint, log: log_path, epochs })
}
