//! `key = value` run configuration.

use std::collections::HashSet;
use std::fmt::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use wmka_core::blocks::FusionMode;
use wmka_core::network::{NetworkConfig, SPATIAL_MULTIPLE};
use wmka_core::preprocess::{MaskResize, PreprocessConfig};

use crate::error::{invalid, Result};

/// Whether manifest images still need the preprocessing pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    Raw,
    /// Output of the `preprocess` command: gray images used as is.
    Preprocessed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 saves only at the end.
    pub save_interval: usize,
    pub manifest: Option<PathBuf>,
    /// Final checkpoint path; defaults to `out_dir/model.wmka`.
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub input: InputKind,
    pub preprocess: PreprocessConfig,
}

pub const DESK_EPOCHS: usize = 5;
pub const RECIPE_EPOCHS: usize = 1500;
pub const RECIPE_BATCH: usize = 4;
pub const RECIPE_LR: f64 = 1e-4;

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            lr: RECIPE_LR,
            batch_size: RECIPE_BATCH,
            epochs: DESK_EPOCHS,
            seed: 0,
            save_interval: 0,
            manifest: None,
            checkpoint: None,
            out_dir: PathBuf::from("out"),
            input: InputKind::Raw,
            preprocess: PreprocessConfig::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "in_channels",
    "channels",
    "bottleneck",
    "dilations",
    "fusion",
    "use_mkdc",
    "use_attention",
    "use_apf",
    "threshold",
    "reduction",
    "lr",
    "batch_size",
    "epochs",
    "seed",
    "save_interval",
    "manifest",
    "checkpoint",
    "out_dir",
    "input",
    "clip_limit",
    "tiles",
    "gamma",
    "target",
    "mask_resize",
];

/// Keys that may differ between a checkpoint and the run resuming it.
const RESUMABLE_KEYS: &[&str] = &["epochs", "save_interval", "manifest", "checkpoint", "out_dir"];

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| invalid(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let items: Vec<usize> = v.split(',').map(|s| parse_num(key, s.trim())).collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| invalid(format!("{key}: expected {N} comma-separated values, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(invalid(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_dims(key: &str, v: &str) -> Result<(usize, usize)> {
    let (a, b) = v.split_once('x').ok_or_else(|| invalid(format!("{key}: expected AxB, got {v:?}")))?;
    Ok((parse_num(key, a.trim())?, parse_num(key, b.trim())?))
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn resolve(base: &Path, v: &str) -> PathBuf {
    let p = PathBuf::from(v);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Applies one setting. Relative paths are taken against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let n = &mut self.network;
        let p = &mut self.preprocess;
        match key {
            "in_channels" => n.in_channels = parse_num(key, value)?,
            "channels" => n.channels = parse_list(key, value)?,
            "bottleneck" => n.bottleneck = parse_num(key, value)?,
            "dilations" => n.dilations = parse_list(key, value)?,
            "fusion" => n.fusion = value.parse::<FusionMode>()?,
            "use_mkdc" => n.use_mkdc = parse_bool(key, value)?,
            "use_attention" => n.use_attention = parse_bool(key, value)?,
            "use_apf" => n.use_apf = parse_bool(key, value)?,
            "threshold" => n.threshold = parse_num(key, value)?,
            "reduction" => n.reduction = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "save_interval" => self.save_interval = parse_num(key, value)?,
            "manifest" => self.manifest = (!value.is_empty()).then(|| resolve(base, value)),
            "checkpoint" => self.checkpoint = (!value.is_empty()).then(|| resolve(base, value)),
            "out_dir" => self.out_dir = resolve(base, value),
            "input" => {
                self.input = match value {
                    "raw" => InputKind::Raw,
                    "preprocessed" => InputKind::Preprocessed,
                    _ => return Err(invalid(format!("input: expected raw or preprocessed, got {value:?}"))),
                }
            }
            "clip_limit" => p.clip_limit = parse_num(key, value)?,
            "tiles" => p.tiles = parse_dims(key, value)?,
            "gamma" => p.gamma = parse_num(key, value)?,
            "target" => p.target = if value == "native" { None } else { Some(parse_dims(key, value)?) },
            "mask_resize" => p.mask_resize = value.parse::<MaskResize>()?,
            _ => return Err(invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// `key=value` override as given on the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| invalid(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim(), Path::new(""))
    }

    /// Parses config text on top of the defaults. `#` starts a comment line;
    /// a key may appear only once.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(invalid(format!("line {}: key {k:?} given twice", i + 1)));
            }
            cfg.set(k, v.trim(), base).map_err(|e| invalid(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    /// Sets the published training schedule.
    pub fn apply_paper_recipe(&mut self) {
        self.epochs = RECIPE_EPOCHS;
        self.batch_size = RECIPE_BATCH;
        self.lr = RECIPE_LR;
    }

    pub fn value(&self, key: &str) -> String {
        let n = &self.network;
        let p = &self.preprocess;
        let path = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "in_channels" => n.in_channels.to_string(),
            "channels" => join(&n.channels),
            "bottleneck" => n.bottleneck.to_string(),
            "dilations" => join(&n.dilations),
            "fusion" => n.fusion.to_string(),
            "use_mkdc" => n.use_mkdc.to_string(),
            "use_attention" => n.use_attention.to_string(),
            "use_apf" => n.use_apf.to_string(),
            "threshold" => n.threshold.to_string(),
            "reduction" => n.reduction.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "save_interval" => self.save_interval.to_string(),
            "manifest" => path(&self.manifest),
            "checkpoint" => path(&self.checkpoint),
            "out_dir" => self.out_dir.display().to_string(),
            "input" => match self.input {
                InputKind::Raw => "raw".into(),
                InputKind::Preprocessed => "preprocessed".into(),
            },
            "clip_limit" => p.clip_limit.to_string(),
            "tiles" => format!("{}x{}", p.tiles.0, p.tiles.1),
            "gamma" => p.gamma.to_string(),
            "target" => match p.target {
                Some((h, w)) => format!("{h}x{w}"),
                None => "native".into(),
            },
            "mask_resize" => p.mask_resize.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Every setting, one `key = value` line each, in a fixed order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            writeln!(out, "{k} = {}", self.value(k)).unwrap();
        }
        out
    }

    /// The settings a resumed run must share with its checkpoint.
    pub fn resume_identity(&self) -> String {
        let mut out = String::new();
        for k in KEYS.iter().filter(|k| !RESUMABLE_KEYS.contains(k)) {
            writeln!(out, "{k} = {}", self.value(k)).unwrap();
        }
        out
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.wmka"))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if !matches!(self.network.in_channels, 1 | 3) {
            return Err(invalid("in_channels must be 1 or 3 for fundus input"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        let p = &self.preprocess;
        if !(p.clip_limit > 0.0) || !(p.gamma > 0.0) || p.tiles.0 == 0 || p.tiles.1 == 0 {
            return Err(invalid("clip_limit and gamma must be > 0 and tiles >= 1x1"));
        }
        if let Some((h, w)) = p.target {
            if h == 0 || w == 0 || h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
                return Err(invalid(format!(
                    "target {h}x{w} must be a positive multiple of {SPATIAL_MULTIPLE} on both sides"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_survive_dump_and_parse() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.dump(), Path::new("")).unwrap(), cfg);
    }

    #[test]
    fn comments_blank_lines_and_duplicates() {
        let cfg = RunConfig::parse("# c\n\nlr = 0.5\n  epochs=3 \n", Path::new(".")).unwrap();
        assert_eq!((cfg.lr, cfg.epochs), (0.5, 3));
        let e = RunConfig::parse("lr = 1\nlr = 2\n", Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("given twice"));
        assert!(RunConfig::parse("lr 1\n", Path::new(".")).is_err());
    }

    #[test]
    fn relative_paths_resolve_against_the_config_directory() {
        let cfg = RunConfig::parse("manifest = data/m.tsv\nout_dir = /abs\n", Path::new("/cfg")).unwrap();
        assert_eq!(cfg.manifest.unwrap(), PathBuf::from("/cfg/data/m.tsv"));
        assert_eq!(cfg.out_dir, PathBuf::from("/abs"));
    }
}
