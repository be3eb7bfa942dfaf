//! The `STGRID 1` text format.
//!
//! ```text
//! STGRID 1
//! rows=<r> cols=<c> attributes=<C> timesteps=<T> interval_min=<m>
//! <name_0>,<name_1>,...
//! t=<t> a=<a> v_0,v_1,...,v_{r·c-1}
//! ```
//!
//! Data lines run over `t` then `a`, each holding one attribute's grid in
//! row-major order. Values are written with shortest round-trip precision.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::GridSeries;
use crate::error::DataError;

const MAGIC: &str = "STGRID";
const VERSION: &str = "1";

pub fn load_grid_csv(path: impl AsRef<Path>) -> Result<GridSeries, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_grid(&text)
}

pub fn save_grid_csv(series: &GridSeries, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let text = write_grid(series)?;
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_grid(series: &GridSeries) -> Result<String, DataError> {
    if let Some(bad) = series
        .attribute_names
        .iter()
        .find(|n| n.contains([',', '\n', '\r']) || n.is_empty())
    {
        return Err(DataError::Invalid(format!(
            "attribute name {bad:?} cannot be stored"
        )));
    }
    let (n, c, steps) = (series.regions(), series.attributes(), series.timesteps());
    let mut out = String::with_capacity(steps * c * n * 8);
    out.push_str(&format!("{MAGIC} {VERSION}\n"));
    out.push_str(&format!(
        "rows={} cols={} attributes={c} timesteps={steps} interval_min={}\n",
        series.rows, series.cols, series.interval_minutes
    ));
    out.push_str(&series.attribute_names.join(","));
    out.push('\n');
    for t in 0..steps {
        for a in 0..c {
            let _ = write!(out, "t={t} a={a} ");
            for r in 0..n {
                if r > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", series.get(t, r, a));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

struct Header {
    rows: usize,
    cols: usize,
    attributes: usize,
    timesteps: usize,
    interval: u32,
}

fn parse_header(line: &str) -> Result<Header, DataError> {
    let bad = |message: String| DataError::Header { line: 2, message };
    let mut fields = std::collections::HashMap::new();
    for part in line.split_whitespace() {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, found {part:?}")))?;
        if fields.insert(key, value).is_some() {
            return Err(bad(format!("duplicate key {key}")));
        }
    }
    let mut get = |key: &str| -> Result<usize, DataError> {
        let raw = fields
            .remove(key)
            .ok_or_else(|| bad(format!("missing {key}")))?;
        raw.parse()
            .map_err(|_| bad(format!("{key}={raw:?} is not a count")))
    };
    let header = Header {
        rows: get("rows")?,
        cols: get("cols")?,
        attributes: get("attributes")?,
        timesteps: get("timesteps")?,
        interval: get("interval_min")? as u32,
    };
    if let Some(key) = fields.keys().next() {
        return Err(bad(format!("unknown key {key}")));
    }
    if header.rows == 0 || header.cols == 0 || header.attributes == 0 {
        return Err(bad("rows, cols and attributes must be positive".into()));
    }
    Ok(header)
}

pub fn parse_grid(text: &str) -> Result<GridSeries, DataError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (_, magic) = lines.next().ok_or(DataError::Header {
        line: 1,
        message: "empty file".into(),
    })?;
    let mut parts = magic.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(DataError::Header {
            line: 1,
            message: format!("expected {MAGIC} magic"),
        });
    }
    match parts.next() {
        Some(VERSION) => {}
        Some(v) => {
            return Err(DataError::Version {
                line: 1,
                version: v.to_string(),
            })
        }
        None => {
            return Err(DataError::Header {
                line: 1,
                message: "missing version".into(),
            })
        }
    }

    let (_, header_line) = lines.next().ok_or(DataError::Header {
        line: 2,
        message: "missing dimensions line".into(),
    })?;
    let header = parse_header(header_line)?;

    let (_, names_line) = lines.next().ok_or(DataError::Header {
        line: 3,
        message: "missing attribute names".into(),
    })?;
    let names: Vec<String> = names_line
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    if names.len() != header.attributes {
        return Err(DataError::Header {
            line: 3,
            message: format!(
                "{} attribute names for attributes={}",
                names.len(),
                header.attributes
            ),
        });
    }

    let regions = header.rows * header.cols;
    let (c, steps) = (header.attributes, header.timesteps);
    let mut values = vec![0.0; steps * regions * c];
    let expected_lines = steps * c;
    let mut seen = 0;
    let mut last_line = 3;
    for (line, text) in lines {
        last_line = line;
        if text.trim().is_empty() {
            continue;
        }
        if seen == expected_lines {
            return Err(DataError::RowCount {
                line,
                expected: expected_lines,
                found: seen + 1,
            });
        }
        let (t, a) = (seen / c, seen % c);
        let mut fields = text.splitn(3, ' ');
        let record_ok =
            fields.next() == Some(&format!("t={t}")) && fields.next() == Some(&format!("a={a}"));
        if !record_ok {
            return Err(DataError::BadRecord { line, t, a });
        }
        let body = fields.next().unwrap_or("");
        let cells: Vec<&str> = body.split(',').collect();
        if cells.len() != regions {
            return Err(DataError::RowLength {
                line,
                expected: regions,
                found: cells.len(),
            });
        }
        for (r, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| DataError::BadValue {
                line,
                text: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::BadValue {
                    line,
                    text: cell.to_string(),
                });
            }
            if v < 0.0 {
                return Err(DataError::Negative { line, value: v });
            }
            values[(t * regions + r) * c + a] = v;
        }
        seen += 1;
    }
    if seen != expected_lines {
        return Err(DataError::RowCount {
            line: last_line,
            expected: expected_lines,
            found: seen,
        });
    }
    GridSeries::new(header.rows, header.cols, header.interval, names, values)
}
