//! Long-format CSV report and per-condition JSON summaries.

use std::io::Write;
use std::path::{Path, PathBuf};

use super::ConditionSummary;
use crate::dataset::format_value;
use crate::error::Result;

pub const REPORT_HEADER: [&str; 11] =
    ["condition_id", "n", "mechanism", "mr", "dist", "method", "parameter", "rb_percent", "mse", "n_reps", "failures"];

fn number(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        format_value(v)
    }
}

/// One row per (condition, method, parameter). Timing is left out so that
/// reruns produce identical bytes.
pub fn write_report_csv<W: Write>(summaries: &[ConditionSummary], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(REPORT_HEADER)?;
    for s in summaries {
        let c = &s.condition;
        for m in &s.methods {
            for r in &m.metrics {
                w.write_record([
                    s.condition_id.to_string(),
                    c.n.to_string(),
                    c.mechanism.label().to_string(),
                    format_value(c.mr),
                    c.dist.label().to_string(),
                    m.method.label().to_string(),
                    r.parameter.clone(),
                    number(r.rb),
                    number(r.mse),
                    r.n_reps.to_string(),
                    m.failures.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn report_csv_string(summaries: &[ConditionSummary]) -> Result<String> {
    let mut buf = Vec::new();
    write_report_csv(summaries, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub fn summary_file_name(condition_id: usize) -> String {
    format!("condition_{condition_id:03}.json")
}

/// Writes `condition_NNN.json` per summary into `dir`.
pub fn write_summaries(summaries: &[ConditionSummary], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    summaries
        .iter()
        .map(|s| {
            let path = dir.join(summary_file_name(s.condition_id));
            serde_json::to_writer_pretty(std::fs::File::create(&path)?, s)?;
            Ok(path)
        })
        .collect()
}

/// Reads every `condition_*.json` in `dir`, ordered by condition id.
pub fn read_summaries(dir: &Path) -> Result<Vec<ConditionSummary>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("condition_") && name.ends_with(".json") {
            let summary: ConditionSummary = serde_json::from_reader(std::fs::File::open(&path)?)?;
            out.push(summary);
        }
    }
    out.sort_by_key(|s| s.condition_id);
    Ok(out)
}
