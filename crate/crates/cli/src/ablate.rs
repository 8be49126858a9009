//! Component ablation and dilation-rate sweep.

use std::collections::HashMap;
use std::fmt::Write;
use std::fs;

use wmka_core::dataio::{Checkpoint, Split};
use wmka_core::loss::MetricReport;
use wmka_core::network::NetworkConfig;

use crate::config::RunConfig;
use crate::data;
use crate::error::{invalid, Result};
use crate::eval::{evaluate_samples, load_model};
use crate::train::{EpochLog, Trainer};

pub const COMPONENT_TABLE: &str = "components";
pub const DILATION_TABLE: &str = "dilations";
pub const DILATION_SETS: [[usize; 4]; 3] = [[1, 3, 7, 11], [1, 3, 5, 7], [3, 5, 7, 11]];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub table: &'static str,
    pub label: String,
    /// File stem of the row's checkpoint.
    pub slug: String,
    pub network: NetworkConfig,
}

/// Four component rows (baseline with APF and weighted fusion, +MKDC,
/// +affinity attention, everything) and three dilation sets on the full
/// model.
pub fn ablation_rows(base: &NetworkConfig) -> Vec<AblationRow> {
    let with = |mkdc: bool, att: bool| NetworkConfig { use_mkdc: mkdc, use_attention: att, use_apf: true, ..base.clone() };
    let mut rows = vec![
        ("Baseline", "baseline", with(false, false)),
        ("Baseline+MKDC", "baseline_mkdc", with(true, false)),
        ("Baseline+AffinityAttention", "baseline_attention", with(false, true)),
        ("Full model", "full", with(true, true)),
    ]
    .into_iter()
    .map(|(label, slug, network)| AblationRow { table: COMPONENT_TABLE, label: label.into(), slug: slug.into(), network })
    .collect::<Vec<_>>();
    for d in DILATION_SETS {
        rows.push(AblationRow {
            table: DILATION_TABLE,
            label: d.map(|v| v.to_string()).join(", "),
            slug: format!("dilations_{}", d.map(|v| v.to_string()).join("_")),
            network: NetworkConfig { dilations: d, ..with(true, true) },
        });
    }
    rows
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub row: AblationRow,
    pub report: MetricReport,
}

/// Evaluates every row on the test split. With `train`, each distinct
/// configuration is first trained from scratch under `cfg`; otherwise the
/// checkpoints must already exist in `out_dir/ablation/`. Rows with the
/// same configuration share one checkpoint, named after the first of them.
pub fn ablate(cfg: &RunConfig, train: bool, quiet: bool) -> Result<Vec<AblationResult>> {
    cfg.validate()?;
    let manifest = data::manifest(cfg)?;
    let test = data::load_split(cfg, &manifest, Split::Test)?;
    let train_set = if train { data::load_split(cfg, &manifest, Split::Train)? } else { Vec::new() };
    let dir = cfg.out_dir.join("ablation");
    fs::create_dir_all(&dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))?;

    let mut done: HashMap<String, MetricReport> = HashMap::new();
    let mut slugs: HashMap<String, String> = HashMap::new();
    let mut out = Vec::new();
    for row in ablation_rows(&cfg.network) {
        let mut row_cfg = cfg.clone();
        row_cfg.network = row.network.clone();
        row_cfg.validate()?;
        let key = row_cfg.resume_identity();
        let slug = slugs.entry(key.clone()).or_insert_with(|| row.slug.clone()).clone();
        if let Some(r) = done.get(&key) {
            out.push(AblationResult { row, report: *r });
            continue;
        }
        let path = dir.join(format!("{slug}.wmka"));
        if train {
            let mut t = Trainer::new(&row_cfg)?;
            let mut log = format!("{}\n", crate::train::LOG_HEADER);
            while t.epoch < row_cfg.epochs {
                let e: EpochLog = t.run_epoch(&train_set)?;
                writeln!(log, "{}", e.csv_row()).unwrap();
            }
            t.checkpoint().save(&path)?;
            let lp = dir.join(format!("{slug}_log.csv"));
            fs::write(&lp, log).map_err(|e| invalid(format!("{}: {e}", lp.display())))?;
        } else if !path.exists() {
            return Err(invalid(format!("missing {}; train it first or pass --train", path.display())));
        }
        let (net, store) = load_model(&row_cfg.network, &Checkpoint::load(&path)?)?;
        let report = evaluate_samples(&net, &store, &test, cfg.network.threshold)?.pooled;
        if !quiet {
            println!("{:<28} {report}", row.label);
        }
        done.insert(key, report);
        out.push(AblationResult { row, report });
    }
    Ok(out)
}

fn cell(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

/// Aligned text with one block per table, columns Se, Sp, F1, Acc.
pub fn format_table(results: &[AblationResult]) -> String {
    let mut out = String::new();
    for (table, head) in [(COMPONENT_TABLE, "Method"), (DILATION_TABLE, "Dilation rates")] {
        writeln!(out, "{:<28} {:>7} {:>7} {:>7} {:>7}", head, "Se", "Sp", "F1", "Acc").unwrap();
        for r in results.iter().filter(|r| r.row.table == table) {
            let m = &r.report;
            writeln!(out, "{:<28} {:>7} {:>7} {:>7} {:>7}", r.row.label, cell(m.se), cell(m.sp), cell(m.f1), cell(m.acc))
                .unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut out = String::from("table,row,se,sp,f1,acc\n");
    for r in results {
        let m = &r.report;
        let f = |v: Option<f64>| v.map_or("undefined".into(), |v| format!("{v:.6}"));
        writeln!(out, "{},\"{}\",{},{},{},{}", r.row.table, r.row.label, f(m.se), f(m.sp), f(m.f1), f(m.acc)).unwrap();
    }
    out
}
