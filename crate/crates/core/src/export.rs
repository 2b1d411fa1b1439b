//! CSV and JSON-lines writers for results.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::isac_rx::{PhaseEstimate, RatioSeries};

/// CSV with a header taken from the row type.
pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

/// One JSON object per line.
pub fn json_lines_bytes<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Pretty-printed JSON with a trailing newline.
pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_bytes(path, &csv_bytes(rows)?)
}

pub fn write_json_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_bytes(path, &json_lines_bytes(items)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &json_bytes(value)?)
}

/// Named output files held in memory until a run has fully succeeded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Artifacts {
    pub files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    /// Creates `dir` and writes every file into it.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            write_bytes(&dir.join(name), bytes)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioRow {
    pub node_id: u32,
    pub timestamp: f64,
    pub re: f64,
    pub im: f64,
    pub magnitude: f64,
    pub phase: f64,
}

pub fn ratio_rows(node_id: u32, series: &RatioSeries) -> Vec<RatioRow> {
    series
        .iter()
        .map(|(timestamp, v)| RatioRow {
            node_id,
            timestamp,
            re: v.re,
            im: v.im,
            magnitude: v.norm(),
            phase: v.arg(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseRow {
    pub timestamp: f64,
    pub delta_phi: f64,
    pub drift_slope: f64,
    pub quality: f64,
}

impl PhaseRow {
    pub fn new(timestamp: f64, est: &PhaseEstimate) -> Self {
        PhaseRow {
            timestamp,
            delta_phi: est.delta_phi_wrapped,
            drift_slope: est.drift_slope,
            quality: est.quality,
        }
    }
}
