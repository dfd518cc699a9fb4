//! CSV and JSON result files. Floating-point values are written with six
//! significant digits; missing values are empty CSV cells or JSON nulls.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Number, Value};

use super::config::OutputFormat;
use super::monte_carlo::McRow;
use crate::error::{Error, Result};

/// A result row with a fixed column order.
pub trait Row: Serialize {
    fn header(dim: usize) -> Vec<String>;
}

fn names(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

impl Row for McRow {
    fn header(_: usize) -> Vec<String> {
        names(&[
            "sweep_value",
            "k",
            "rmse_phi_ns",
            "rmse_Tu_ns",
            "rmse_Tm_ns",
            "rmse_x_m",
            "bound_phi_ns",
            "bound_Tu_ns",
            "bound_Tm_ns",
            "trials",
        ])
    }
}

/// One cell of a bound map.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct MapRow {
    pub x1_m: f64,
    pub x2_m: f64,
    pub sqrt_bound_phi_ns: Option<f64>,
}

impl Row for MapRow {
    fn header(_: usize) -> Vec<String> {
        names(&["x1_m", "x2_m", "sqrt_bound_phi_ns"])
    }
}

/// Root bounds at one epoch count.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct BoundRow {
    pub k: usize,
    pub bound_phi_ns: Option<f64>,
    #[serde(rename = "bound_Tu_ns")]
    pub bound_tu_ns: Option<f64>,
    #[serde(rename = "bound_Tm_ns")]
    pub bound_tm_ns: Option<f64>,
}

impl Row for BoundRow {
    fn header(_: usize) -> Vec<String> {
        names(&["k", "bound_phi_ns", "bound_Tu_ns", "bound_Tm_ns"])
    }
}

/// One simulated epoch; relay intervals are empty for master-only epochs.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct MeasurementRow {
    pub trial: usize,
    pub k: usize,
    pub mode: String,
    pub y_phi: f64,
    pub y_u: f64,
    pub y_m: f64,
    pub y_1: Option<f64>,
    pub y_2: Option<f64>,
    pub y_3: Option<f64>,
}

impl Row for MeasurementRow {
    fn header(_: usize) -> Vec<String> {
        names(&["trial", "k", "mode", "y_phi", "y_u", "y_m", "y_1", "y_2", "y_3"])
    }
}

/// Combined estimate after one epoch of an online run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub trial: usize,
    pub k: usize,
    pub phi_hat: f64,
    #[serde(rename = "Tu_hat")]
    pub tu_hat: f64,
    #[serde(rename = "Tm_hat")]
    pub tm_hat: f64,
    #[serde(flatten)]
    pub x_hat: std::collections::BTreeMap<String, f64>,
    pub sigma_hat: f64,
    pub provisional: bool,
}

impl Row for TrajectoryRow {
    fn header(dim: usize) -> Vec<String> {
        let mut h = names(&["trial", "k", "phi_hat", "Tu_hat", "Tm_hat"]);
        h.extend((1..=dim).map(|i| format!("x{i}_hat")));
        h.extend(names(&["sigma_hat", "provisional"]));
        h
    }
}

/// `v` rounded to six significant digits.
pub fn sig6(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.5e}").parse().expect("formatted float parses")
}

fn round_value(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let r = sig6(n.as_f64().unwrap());
            Number::from_f64(r).map_or(Value::Null, Value::Number)
        }
        other => other,
    }
}

fn to_objects<T: Row>(rows: &[T]) -> Result<Vec<Map<String, Value>>> {
    rows.iter()
        .map(|r| match serde_json::to_value(r)? {
            Value::Object(m) => Ok(m.into_iter().map(|(k, v)| (k, round_value(v))).collect()),
            _ => Err(Error::InvalidParameter("result rows must serialize to objects".into())),
        })
        .collect()
}

fn cell(v: Option<&Value>) -> String {
    match v {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    }
}

/// Writes rows in the given format. `dim` sizes the position columns.
pub fn write_rows<T: Row, W: Write>(rows: &[T], dim: usize, format: OutputFormat, out: W) -> Result<()> {
    let objects = to_objects(rows)?;
    let header = T::header(dim);
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(&header)?;
            for o in &objects {
                w.write_record(header.iter().map(|h| cell(o.get(h))))?;
            }
            w.flush()?;
        }
        OutputFormat::Json => {
            let ordered: Vec<Value> = objects
                .into_iter()
                .map(|mut o| {
                    let mut m = Map::new();
                    for h in &header {
                        m.insert(h.clone(), o.remove(h).unwrap_or(Value::Null));
                    }
                    Value::Object(m)
                })
                .collect();
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, &ordered)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Writes rows to `path`, or to stdout when `path` is `None`.
pub fn emit_results<T: Row>(rows: &[T], dim: usize, format: OutputFormat, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            let mut f = BufWriter::new(File::create(p)?);
            write_rows(rows, dim, format, &mut f)?;
            f.flush()?;
        }
        None => {
            let stdout = io::stdout();
            write_rows(rows, dim, format, stdout.lock())?;
        }
    }
    Ok(())
}
