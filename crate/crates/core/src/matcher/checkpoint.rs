//! Text checkpoints: a versioned header, the dims, then one named shaped
//! array per tensor.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{MatcherDims, MatcherParams};
use crate::{fmt_f64, Error, Result, Tensor};

const MAGIC: &str = "vecmatch-params";
const VERSION: u32 = 1;

pub fn write_params(p: &MatcherParams) -> String {
    let d = &p.dims;
    let mut out = format!("{MAGIC} {VERSION}\n");
    let _ = writeln!(
        out,
        "dims {} {} {} {} {} {} {} {} {} {}",
        d.channels,
        d.heads,
        d.points,
        d.layers,
        d.ffn_hidden,
        d.score_dim,
        d.score_hidden,
        d.level_channels[0],
        d.level_channels[1],
        d.level_channels[2]
    );
    for (name, t) in p.iter() {
        let _ = writeln!(out, "tensor {name} {} {}", t.rows, t.cols);
        let vals: Vec<String> = t.data.iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
    out
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub fn parse_params(text: &str) -> Result<MatcherParams> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    let (n, header) = lines.next().ok_or_else(|| parse_err(1, "empty checkpoint"))?;
    if header != format!("{MAGIC} {VERSION}") {
        return Err(parse_err(n, format!("expected header '{MAGIC} {VERSION}', got '{header}'")));
    }
    let (n, dims_line) = lines.next().ok_or_else(|| parse_err(n + 1, "missing dims line"))?;
    let fields: Vec<&str> = dims_line.split_whitespace().collect();
    if fields.len() != 11 || fields[0] != "dims" {
        return Err(parse_err(n, "dims line needs 10 integers"));
    }
    let v: Vec<usize> = fields[1..]
        .iter()
        .map(|f| f.parse().map_err(|_| parse_err(n, format!("bad integer '{f}'"))))
        .collect::<Result<_>>()?;
    let dims = MatcherDims {
        channels: v[0],
        heads: v[1],
        points: v[2],
        layers: v[3],
        ffn_hidden: v[4],
        score_dim: v[5],
        score_hidden: v[6],
        level_channels: [v[7], v[8], v[9]],
    };
    let mut tensors = BTreeMap::new();
    while let Some((n, head)) = lines.next() {
        let f: Vec<&str> = head.split_whitespace().collect();
        if f.len() != 4 || f[0] != "tensor" {
            return Err(parse_err(n, "expected 'tensor <name> <rows> <cols>'"));
        }
        let rows: usize = f[2].parse().map_err(|_| parse_err(n, "bad row count"))?;
        let cols: usize = f[3].parse().map_err(|_| parse_err(n, "bad column count"))?;
        let data: Vec<f64> = if rows * cols == 0 {
            Vec::new()
        } else {
            let (m, body) = lines.next().ok_or_else(|| parse_err(n + 1, "missing tensor values"))?;
            body.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| parse_err(m, format!("bad number '{t}'"))))
                .collect::<Result<_>>()?
        };
        if data.len() != rows * cols {
            return Err(parse_err(n, format!("tensor {} expects {} values, got {}", f[1], rows * cols, data.len())));
        }
        if tensors.insert(f[1].to_string(), Tensor::from_vec(rows, cols, data)).is_some() {
            return Err(parse_err(n, format!("duplicate tensor {}", f[1])));
        }
    }
    MatcherParams::from_parts(dims, tensors)
}

pub fn save_params(p: &MatcherParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_params(p)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<MatcherParams> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_params(&text)
}
