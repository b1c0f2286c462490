//! CSV output and console tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::Interp;
use crate::error::Result;
use crate::experiments::ResultTable;

pub const METRICS_HEADER: &str = "variant,map,recall,iou,interp,seed";

/// `metrics.csv` body for a result table.
pub fn metrics_csv(table: &ResultTable, iou: f64, interp: Interp, seed: u64) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in &table.rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.variant, r.map, r.recall, iou, interp, seed);
    }
    s
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    s
}

pub fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), body)?;
    Ok(())
}

/// Aligned text table with reference values as trailing annotations.
pub fn render_table(title: &str, table: &ResultTable) -> String {
    let width = table.rows.iter().map(|r| r.variant.len()).max().unwrap_or(7).max(7);
    let mut s = format!("{title} (split {})\n", &table.split_hash[..16.min(table.split_hash.len())]);
    let _ = writeln!(s, "{:<width$}  {:>7}  {:>7}  reference mAP (HRSC2016 / DOTA, not compared)", "variant", "mAP", "recall");
    for r in &table.rows {
        let note = r.reference.map_or_else(|| "-".to_string(), |(a, b)| format!("{a:.2} / {b:.2}"));
        let _ = writeln!(s, "{:<width$}  {:>7.4}  {:>7.4}  {note}", r.variant, r.map, r.recall);
    }
    s
}
