//! CSV files written and read by the harness.
//!
//! Every file starts with a provenance comment
//! `# slfv <version> config_hash=<sha256> [key=value ...]`, followed by a
//! column header row.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use slfv_core::analysis::{IdentityScale, IdentityTable};
use slfv_core::predict::ThetaMatrix;
use slfv_core::SiteFunction;

use crate::config::hex_digest;
use crate::HarnessError;

pub const TOOL_NAME: &str = "slfv";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn provenance(config_hash: &str, extra: &[(&str, String)]) -> String {
    let mut line = format!("# {TOOL_NAME} {VERSION} config_hash={config_hash}");
    for (k, v) in extra {
        line.push_str(&format!(" {k}={v}"));
    }
    line
}

/// Shortest round-trip decimal form; non-finite values become `NA`.
pub fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "NA".into()
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Runtime(format!("{}: {e}", path.display()))
}

/// Opens a CSV writer whose first line is the provenance comment.
pub fn csv_writer(path: &Path, header: &str) -> Result<csv::Writer<BufWriter<File>>, HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut f = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    writeln!(f, "{header}").map_err(|e| io_err(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(true).from_writer(f))
}

fn finish<W: Write>(path: &Path, w: csv::Writer<W>) -> Result<(), HarnessError> {
    let mut inner = w.into_inner().map_err(|e| io_err(path, e))?;
    inner.flush().map_err(|e| io_err(path, e))
}

/// Writes serializable rows below a provenance header.
pub fn write_rows<T: Serialize>(path: &Path, header: &str, rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv_writer(path, header)?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    finish(path, w)
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| HarnessError::Validation(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| HarnessError::Validation(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub site: usize,
    pub mass: f64,
}

pub fn write_profile(path: &Path, header: &str, profile: &[f64]) -> Result<(), HarnessError> {
    let rows: Vec<ProfileRow> = profile
        .iter()
        .enumerate()
        .map(|(site, &mass)| ProfileRow { site, mass })
        .collect();
    write_rows(path, header, &rows)
}

pub fn read_profile(path: &Path) -> Result<SiteFunction, HarnessError> {
    let rows: Vec<ProfileRow> = read_rows(path)?;
    if rows.iter().enumerate().any(|(i, r)| r.site != i) {
        return Err(HarnessError::Validation(format!("{}: sites out of order", path.display())));
    }
    Ok(SiteFunction(rows.into_iter().map(|r| r.mass).collect()))
}

/// Short hash of a profile's bit patterns, used to tie a kernel to its input.
pub fn profile_hash(profile: &[f64]) -> String {
    let bytes: Vec<u8> = profile.iter().flat_map(|v| v.to_bits().to_le_bytes()).collect();
    hex_digest(&bytes)[..16].to_owned()
}

/// Writes the kernel as an `L x L` table with a leading `site` column.
pub fn write_theta(path: &Path, header: &str, theta: &ThetaMatrix) -> Result<(), HarnessError> {
    let dim = theta.dim();
    let mut w = csv_writer(path, header)?;
    let mut cols = vec!["site".to_owned()];
    cols.extend((0..dim).map(|j| j.to_string()));
    w.write_record(&cols).map_err(|e| io_err(path, e))?;
    for i in 0..dim {
        let mut rec = vec![i.to_string()];
        rec.extend((0..dim).map(|j| fmt_num(theta.get(i, j))));
        w.write_record(&rec).map_err(|e| io_err(path, e))?;
    }
    finish(path, w)
}

pub fn read_theta(path: &Path) -> Result<Vec<Vec<f64>>, HarnessError> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| HarnessError::Validation(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| HarnessError::Validation(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| HarnessError::Validation(format!("{}: {e}", path.display())))?;
        out.push(row);
    }
    Ok(out)
}

pub fn scale_tag(scale: IdentityScale) -> String {
    match scale {
        IdentityScale::Raw => "raw".into(),
        IdentityScale::Aligned { n, delta } => format!("aligned:N={n}:delta={delta}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCsvRow {
    pub ref_site: usize,
    pub x: usize,
    pub mean: f64,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
    pub p05: f64,
    pub p95: f64,
    pub n_replicates: usize,
    pub scale: String,
}

pub fn identity_rows(table: &IdentityTable) -> Vec<IdentityCsvRow> {
    let tag = scale_tag(table.scale);
    table
        .rows
        .iter()
        .map(|r| IdentityCsvRow {
            ref_site: r.ref_site,
            x: r.x,
            mean: r.mean,
            median: r.median,
            p25: r.p25,
            p75: r.p75,
            p05: r.p05,
            p95: r.p95,
            n_replicates: r.n_replicates,
            scale: tag.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateIdentityRow {
    pub replicate: usize,
    pub ref_site: usize,
    pub x: usize,
    pub identity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub ref_site: usize,
    pub x: usize,
    /// Kernel value on its own scale.
    pub theta: f64,
    /// `theta / (N delta)`: predicted raw identity probability.
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub ref_site: usize,
    pub x: usize,
    pub sim_mean: f64,
    pub sim_median: f64,
    pub sim_p05: f64,
    pub sim_p25: f64,
    pub sim_p75: f64,
    pub sim_p95: f64,
    pub prediction: f64,
    pub log10_sim_mean: String,
    pub log10_sim_median: String,
    pub log10_prediction: String,
    /// `1`/`0`, or `NA` when the band is undefined.
    pub covered: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyValue {
    pub key: String,
    pub value: String,
}

impl KeyValue {
    pub fn new(key: impl Into<String>, value: impl ToString) -> Self {
        KeyValue {
            key: key.into(),
            value: value.to_string(),
        }
    }
}

pub fn log10_or_na(v: f64) -> String {
    if v > 0.0 {
        fmt_num(v.log10())
    } else {
        "NA".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let prof = vec![1.0, 0.1 + 0.2, 3.5e-300];
        write_profile(&p, &provenance("abc", &[]), &prof).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# slfv "));
        assert!(text.lines().nth(1).unwrap() == "site,mass");
        assert_eq!(read_profile(&p).unwrap().0, prof);
    }

    #[test]
    fn na_formatting() {
        assert_eq!(fmt_num(f64::NAN), "NA");
        assert_eq!(log10_or_na(0.0), "NA");
        assert_eq!(log10_or_na(100.0), "2");
    }
}
