#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wmka_core::dataio::write_image;
use wmka_core::preprocess::ImageU8;
use wmka_core::synthetic::vessel_image;

pub const TINY_NETWORK: &str = "channels = 4,8,16,32\nbottleneck = 64\nreduction = 4\n";

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `n_train + n_test` synthetic fundus-like PNGs with masks and a
/// manifest listing them; returns the manifest path.
pub fn dataset(dir: &Path, size: usize, n_train: usize, n_test: usize) -> PathBuf {
    let mut manifest = String::from("# synthetic\n");
    for i in 0..n_train + n_test {
        let (img, mask) = vessel_image::<f64>(size, size, 100 + i as u64).unwrap();
        let mut rgb = Vec::with_capacity(size * size * 3);
        for p in 0..size * size {
            for c in 0..3 {
                rgb.push(to_u8(img.data()[c * size * size + p]));
            }
        }
        let name = format!("{i:02}");
        write_image(&dir.join(format!("{name}_img.png")), &ImageU8::new(size, size, 3, rgb).unwrap()).unwrap();
        let m = mask.data().iter().map(|&v| to_u8(v)).collect();
        write_image(&dir.join(format!("{name}_mask.png")), &ImageU8::new(size, size, 1, m).unwrap()).unwrap();
        let split = if i < n_train { "train" } else { "test" };
        manifest.push_str(&format!("{name}_img.png\t{name}_mask.png\t{split}\n"));
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest).unwrap();
    path
}

/// Config file for a narrow network on native-size images; `extra` lines
/// replace defaults with the same key.
pub fn config(dir: &Path, manifest: &Path, out: &str, extra: &str) -> PathBuf {
    let base = format!(
        "{TINY_NETWORK}manifest = {}\nout_dir = {out}\ntarget = native\ntiles = 2x2\nepochs = 2\nbatch_size = 2\nlr = 0.001\nseed = 3\n",
        manifest.display()
    );
    let key = |l: &str| l.split('=').next().unwrap().trim().to_string();
    let overrides: Vec<&str> = extra.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut text: String = base
        .lines()
        .filter(|l| !overrides.iter().any(|o| key(o) == key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    for o in overrides {
        text.push_str(&format!("{o}\n"));
    }
    let path = dir.join(format!("{out}.cfg"));
    std::fs::write(&path, text).unwrap();
    path
}

pub fn wmka(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wmka")).args(args).output().unwrap()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}
