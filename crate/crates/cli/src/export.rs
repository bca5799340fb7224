//! CSV trace export.
//!
//! Column order: `k, t, px, py, theta, d1..dm, y1, y2, y3`, then per filter
//! `<label>_px, <label>_py, <label>_theta`, followed for `is-ekf` by the clip
//! levels `is-ekf_bound1..3`. Values use the shortest text that round-trips
//! the f64; a failed filter writes `nan`.

use std::io::Write;
use std::path::Path;

use isekf::scenario::SimulationTrace;

use crate::error::{HarnessError, Result};

const STATE_NAMES: [&str; 3] = ["px", "py", "theta"];
/// Outlier width assumed when an empty trace carries no sample.
const DEFAULT_OUTLIER_DIM: usize = 2;
const MEASUREMENT_DIM: usize = 3;

fn has_bounds(label: &str) -> bool {
    label == "is-ekf"
}

pub fn header(trace: &SimulationTrace) -> Vec<String> {
    let m = trace.records.first().map_or(DEFAULT_OUTLIER_DIM, |r| r.d.len());
    let mut cols: Vec<String> = ["k", "t", "px", "py", "theta"].iter().map(|s| s.to_string()).collect();
    cols.extend((1..=m).map(|i| format!("d{i}")));
    cols.extend((1..=MEASUREMENT_DIM).map(|i| format!("y{i}")));
    for label in &trace.filter_labels {
        cols.extend(STATE_NAMES.iter().map(|s| format!("{label}_{s}")));
        if has_bounds(label) {
            cols.extend((1..=MEASUREMENT_DIM).map(|i| format!("{label}_bound{i}")));
        }
    }
    cols
}

fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        v.to_string()
    }
}

pub fn write_csv<W: Write>(trace: &SimulationTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(trace))?;
    for rec in &trace.records {
        let mut row = vec![rec.k.to_string(), num(rec.t), num(rec.truth.px), num(rec.truth.py), num(rec.truth.theta)];
        row.extend(rec.d.iter().copied().map(num));
        row.extend(rec.y.iter().copied().map(num));
        for (label, f) in trace.filter_labels.iter().zip(&rec.filters) {
            match &f.estimate {
                Some(x) => row.extend(x.iter().copied().map(num)),
                None => row.extend(std::iter::repeat_n(num(f64::NAN), 3)),
            }
            if has_bounds(label) {
                match &f.bounds {
                    Some(b) => row.extend(b.iter().copied().map(num)),
                    None => row.extend(std::iter::repeat_n(num(f64::NAN), MEASUREMENT_DIM)),
                }
            }
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| HarnessError::Csv(e.into()))?;
    Ok(())
}

pub fn export_csv(trace: &SimulationTrace, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    write_csv(trace, std::io::BufWriter::new(file))
}
