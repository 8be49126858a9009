//! Argument parsing and command dispatch.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use wmka_core::dataio::Split;
use wmka_core::gradsuite::{block_checks, network_check_config, network_checks, primitive_checks, GradCase};

use crate::ablate::{ablate, ablation_csv, format_table};
use crate::config::RunConfig;
use crate::data;
use crate::error::{invalid, CliError, Result};
use crate::eval::{evaluate_split, predict};
use crate::train::train_loop;

#[derive(Debug, Parser)]
#[command(name = "wmka", version, about = "Retinal vessel segmentation: preprocess, train, evaluate, predict")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key = value` config file
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one setting; repeatable, applied after the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Published schedule: 1500 epochs, batch 4, lr 1e-4
    #[arg(long)]
    pub paper_recipe: bool,
}

impl ConfigArgs {
    /// File, then the recipe flag, then `--set` overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if self.paper_recipe {
            cfg.apply_paper_recipe();
        }
        for kv in &self.set {
            cfg.apply_override(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the preprocessing pipeline over a manifest
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on the manifest's train split
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from this checkpoint
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a manifest split
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Segment one image
    Predict {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Component ablation and dilation sweep on the test split
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Train every configuration first
        #[arg(long)]
        train: bool,
    },
    /// Central-difference checks of primitives, blocks and the network
    Gradcheck {
        /// Sampled coordinates per parameter tensor
        #[arg(long, default_value_t = 2)]
        per_param: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the effective configuration
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run_gradcheck(per_param: usize, seed: u64) -> Result<()> {
    let mut cases: Vec<GradCase> = primitive_checks()?;
    cases.extend(block_checks(per_param)?);
    cases.extend(network_checks(&network_check_config(), seed, per_param)?);
    let mut failed = 0;
    for c in &cases {
        println!("{c}");
        failed += usize::from(!c.passed());
    }
    println!("{} cases, {failed} failed", cases.len());
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} gradient checks above tolerance")));
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess { manifest, out, cfg } => {
            let cfg = cfg.resolve()?;
            let m = wmka_core::dataio::load_manifest(&manifest)?;
            let n = data::preprocess_manifest(&cfg, &m, &out)?;
            println!("preprocessed {n} records into {}", out.display());
        }
        Command::Train { cfg, resume } => {
            let cfg = cfg.resolve()?;
            let s = train_loop(&cfg, resume.as_deref(), false)?;
            println!("checkpoint {}\nlog {}", s.checkpoint.display(), s.log.display());
        }
        Command::Eval { cfg, checkpoint, split } => {
            let cfg = cfg.resolve()?;
            let split: Split = split.parse()?;
            let (s, path) = evaluate_split(&cfg, &checkpoint, split)?;
            for im in &s.images {
                println!("{:<24} {}", im.name, im.report);
            }
            println!("{:<24} {}\nwrote {}", "pooled", s.pooled, path.display());
        }
        Command::Predict { checkpoint, image, out } => {
            let (p, m) = predict(&checkpoint, &image, &out)?;
            println!("{}\n{}", p.display(), m.display());
        }
        Command::Ablate { cfg, train } => {
            let cfg = cfg.resolve()?;
            let results = ablate(&cfg, train, false)?;
            let table = format_table(&results);
            print!("{table}");
            let write = |name: &str, text: String| {
                let p = cfg.out_dir.join(name);
                fs::write(&p, text).map_err(|e| invalid(format!("{}: {e}", p.display())))
            };
            write("ablation.txt", table)?;
            write("ablation.csv", ablation_csv(&results))?;
        }
        Command::Gradcheck { per_param, seed } => run_gradcheck(per_param, seed)?,
        Command::Config { cfg } => print!("{}", cfg.resolve()?.dump()),
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code:
/// 0 on success, 1 on invalid input, 2 when a numeric check fails.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
