//! Debug dump: `bevgrid 1` header, a spec line
//! (`rows cols channels resolution h_min w_min layer`), then one line of
//! channel values per cell in row-major order.

use std::fmt::Write as _;
use std::path::Path;

use super::BevGrid;
use crate::geometry::GridSpec;
use crate::{fmt_f64, Error, Result};

const MAGIC: &str = "bevgrid 1";

pub fn write_grid(grid: &BevGrid) -> String {
    let s = grid.spec;
    let mut out = String::with_capacity(32 + grid.data.len() * 25);
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(
        out,
        "{} {} {} {} {} {} {}",
        s.rows,
        s.cols,
        grid.channels,
        fmt_f64(s.resolution),
        fmt_f64(s.h_min),
        fmt_f64(s.w_min),
        grid.layer
    );
    for cell in grid.data.chunks(grid.channels.max(1)) {
        let vals: Vec<String> = cell.iter().map(|v| fmt_f64(*v)).collect();
        let _ = writeln!(out, "{}", vals.join(" "));
    }
    out
}

pub fn parse_grid(text: &str) -> Result<BevGrid> {
    let mut lines = text.lines().enumerate();
    let perr = |line: usize, message: String| Error::Parse { line: line + 1, message };
    match lines.next() {
        Some((_, l)) if l.trim() == MAGIC => {}
        _ => return Err(perr(0, format!("expected `{MAGIC}`"))),
    }
    let (n, header) = lines.next().ok_or_else(|| perr(1, "missing spec line".into()))?;
    let f: Vec<&str> = header.split_whitespace().collect();
    if f.len() != 7 {
        return Err(perr(n, "spec line needs 7 fields".into()));
    }
    let us = |k: usize| f[k].parse::<usize>().map_err(|e| perr(n, e.to_string()));
    let fl = |k: usize| f[k].parse::<f64>().map_err(|e| perr(n, e.to_string()));
    let spec = GridSpec {
        rows: us(0)?,
        cols: us(1)?,
        resolution: fl(3)?,
        h_min: fl(4)?,
        w_min: fl(5)?,
    };
    let channels = us(2)?;
    let layer = us(6)?;
    let mut data = Vec::with_capacity(spec.cells() * channels);
    for (n, l) in lines {
        for v in l.split_whitespace() {
            data.push(v.parse::<f64>().map_err(|e| perr(n, e.to_string()))?);
        }
    }
    BevGrid::new(spec, channels, layer, data)
}

pub fn save_grid(grid: &BevGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_grid(grid)).map_err(|e| Error::io(path, e))
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<BevGrid> {
    let path = path.as_ref();
    parse_grid(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
