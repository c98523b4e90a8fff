//! Path files: CSV with header `t,phi1_1..phi1_d,phi2_1..phi2_m`, optionally
//! followed by `dphi1_1..dphi1_d,dphi2_1..dphi2_m`. Without derivative
//! columns the derivatives are finite-differenced.

use std::path::Path;

use omkit::path::{DerivativeSource, ReferencePath};
use omkit::system::DegenerateSystem;

use crate::error::{CliError, CliResult, Context};

pub fn header(d: usize, m: usize, derivatives: bool) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    let prefixes: &[&str] = if derivatives { &["phi", "dphi"] } else { &["phi"] };
    for pre in prefixes {
        h.extend((1..=d).map(|i| format!("{pre}1_{i}")));
        h.extend((1..=m).map(|j| format!("{pre}2_{j}")));
    }
    h
}

pub fn read_path(file: &Path, sys: &DegenerateSystem) -> CliResult<ReferencePath> {
    let (d, m) = (sys.d(), sys.m());
    let mut rdr = csv::Reader::from_path(file).map_err(|e| CliError::io(file, e))?;
    let found: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::io(file, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let derivatives = if found == header(d, m, false) {
        false
    } else if found == header(d, m, true) {
        true
    } else {
        return Err(CliError::io(
            file,
            format!("expected header `{}` (derivative columns optional)", header(d, m, false).join(",")),
        ));
    };
    let n = d + m;
    let mut times = Vec::new();
    let mut phi = Vec::new();
    let mut phidot = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::io(file, e))?;
        let vals = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::io(file, format!("row {}: {e}", row + 1)))?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(CliError::io(file, format!("row {}: non-finite value", row + 1)));
        }
        times.push(vals[0]);
        phi.push(vals[1..1 + n].to_vec());
        if derivatives {
            phidot.push(vals[1 + n..1 + 2 * n].to_vec());
        }
    }
    if times.len() < 3 {
        return Err(CliError::io(file, "a path needs at least 3 rows"));
    }
    let steps = times.len() - 1;
    let t_end = times[steps];
    let dt = t_end / steps as f64;
    for (k, t) in times.iter().enumerate() {
        if (t - k as f64 * dt).abs() > 1e-9 * (1.0 + t_end) {
            return Err(CliError::io(file, format!("row {}: times must be uniform from 0", k + 1)));
        }
    }
    let what = format!("path {}", file.display());
    if derivatives {
        ReferencePath::from_samples_with_derivatives(sys, t_end, phi, phidot).context(what)
    } else {
        ReferencePath::from_samples(sys, t_end, phi).context(what)
    }
}

pub fn write_path(file: &Path, path: &ReferencePath) -> CliResult<()> {
    let derivatives = path.source() == DerivativeSource::Analytic;
    let mut w = csv::Writer::from_path(file).map_err(|e| CliError::io(file, e))?;
    w.write_record(header(path.d(), path.m(), derivatives)).map_err(|e| CliError::io(file, e))?;
    for k in 0..=path.steps() {
        let mut row = vec![path.time(k)];
        row.extend_from_slice(&path.phi()[k]);
        if derivatives {
            row.extend_from_slice(&path.phidot()[k]);
        }
        w.write_record(row.iter().map(f64::to_string)).map_err(|e| CliError::io(file, e))?;
    }
    w.flush().map_err(|e| CliError::io(file, e))
}

/// Writes a numeric table with the given header.
pub fn write_table(file: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(file).map_err(|e| CliError::io(file, e))?;
    w.write_record(header).map_err(|e| CliError::io(file, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| CliError::io(file, e))?;
    }
    w.flush().map_err(|e| CliError::io(file, e))
}
