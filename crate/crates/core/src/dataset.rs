//! Plain CSV point files: one point per line, comma-separated, no header.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{DataPoint, RealDataset};

pub fn load_dataset(path: &Path, d: usize) -> Result<RealDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let points = parse_points(&text, d, path)?;
    RealDataset::new(points).map_err(|_| Error::Parse {
        path: path.into(),
        line: 0,
        message: "file contains no points".into(),
    })
}

pub fn parse_points(text: &str, d: usize, path: &Path) -> Result<Vec<DataPoint>> {
    let mut points = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.into(),
            line: line_no,
            message,
        };
        let coords = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(format!("not a number: {:?}", tok.trim())))
            })
            .collect::<Result<Vec<f64>>>()?;
        if coords.len() != d {
            return Err(parse_err(format!(
                "expected {d} values, found {}",
                coords.len()
            )));
        }
        points.push(DataPoint::new(coords).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(points)
}

pub fn format_points<'a>(points: impl IntoIterator<Item = &'a DataPoint>) -> String {
    let mut out = String::new();
    for p in points {
        for (j, c) in p.coords().iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{c}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn save_points<'a>(path: &Path, points: impl IntoIterator<Item = &'a DataPoint>) -> Result<()> {
    std::fs::write(path, format_points(points)).map_err(|e| Error::io(path, e))
}
