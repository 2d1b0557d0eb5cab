//! Line-oriented map file format.
//!
//! ```text
//! vecmap 1
//! origin <x> <y>
//! bbox <xmin> <ymin> <xmax> <ymax>
//! <type> <g0> <g1> <g2> <g3> <g4> <g5> <g6> <g7> [<id>]
//! ```
//!
//! Numbers are written with 17 significant digits so a save/load cycle is
//! exact. Blank lines and lines starting with `#` are ignored on load.
//! Records without an id get the next unused id in file order.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use super::{Aabb, Geometry, MapElement, SemanticType, VectorMap, DESCRIPTOR_LEN, MAP_FORMAT_VERSION};
use crate::{fmt_f64, Error, Result};

const MAGIC: &str = "vecmap";

pub fn load_map(path: impl AsRef<Path>) -> Result<VectorMap> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_map(&text)
}

pub fn save_map(map: &VectorMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_map(map)).map_err(|e| Error::io(path, e))
}

pub fn write_map(map: &VectorMap) -> String {
    let mut out = String::with_capacity(64 + map.len() * 200);
    let _ = writeln!(out, "{MAGIC} {}", map.version());
    let o = map.origin();
    let _ = writeln!(out, "origin {} {}", fmt_f64(o[0]), fmt_f64(o[1]));
    let b = map.bbox();
    let _ = writeln!(
        out,
        "bbox {} {} {} {}",
        fmt_f64(b.min[0]),
        fmt_f64(b.min[1]),
        fmt_f64(b.max[0]),
        fmt_f64(b.max[1])
    );
    for e in map.elements() {
        out.push_str(e.sem.tag());
        for v in e.descriptor() {
            out.push(' ');
            out.push_str(&fmt_f64(v));
        }
        let _ = writeln!(out, " {}", e.id);
    }
    out
}

fn parse_numbers<const N: usize>(fields: &[&str], line: usize) -> Result<[f64; N]> {
    if fields.len() != N {
        return Err(Error::Parse {
            line,
            message: format!("expected {N} numbers, found {}", fields.len()),
        });
    }
    let mut out = [0.0; N];
    for (slot, f) in out.iter_mut().zip(fields) {
        *slot = f.parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid number {f:?}"),
        })?;
    }
    Ok(out)
}

pub fn parse_map(text: &str) -> Result<VectorMap> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (line, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    match fields.as_slice() {
        [MAGIC, v] if v.parse::<u32>() == Ok(MAP_FORMAT_VERSION) => {}
        _ => {
            return Err(Error::Parse {
                line,
                message: format!("expected `{MAGIC} {MAP_FORMAT_VERSION}`, found {header:?}"),
            })
        }
    }

    let mut origin = None;
    let mut bbox = None;
    let mut records: Vec<(usize, SemanticType, [f64; DESCRIPTOR_LEN], Option<u64>)> = Vec::new();
    for (line, text) in lines {
        let fields: Vec<&str> = text.split_whitespace().collect();
        match fields[0] {
            "origin" => origin = Some(parse_numbers::<2>(&fields[1..], line)?),
            "bbox" => {
                let b = parse_numbers::<4>(&fields[1..], line)?;
                bbox = Some(Aabb {
                    min: [b[0], b[1]],
                    max: [b[2], b[3]],
                });
            }
            tag => {
                let sem = SemanticType::from_tag(tag).ok_or_else(|| Error::Parse {
                    line,
                    message: format!("unknown record type {tag:?}"),
                })?;
                let (geom, id) = match fields.len() {
                    9 => (&fields[1..9], None),
                    10 => {
                        let id = fields[9].parse::<u64>().map_err(|_| Error::Parse {
                            line,
                            message: format!("invalid id {:?}", fields[9]),
                        })?;
                        (&fields[1..9], Some(id))
                    }
                    n => {
                        return Err(Error::Parse {
                            line,
                            message: format!("expected 8 geometry slots and optional id, found {} fields", n - 1),
                        })
                    }
                };
                records.push((line, sem, parse_numbers::<DESCRIPTOR_LEN>(geom, line)?, id));
            }
        }
    }

    let origin = origin.unwrap_or([0.0, 0.0]);
    let used: HashSet<u64> = records.iter().filter_map(|r| r.3).collect();
    let mut next_id = 0u64;
    let mut elements = Vec::with_capacity(records.len());
    for (_, sem, desc, id) in records {
        let id = id.unwrap_or_else(|| {
            while used.contains(&next_id) {
                next_id += 1;
            }
            next_id += 1;
            next_id - 1
        });
        let geom = Geometry::from_descriptor(sem.kind(), &desc);
        if geom.descriptor() != desc {
            return Err(Error::Validation {
                id,
                message: "nonzero padding slots in geometry descriptor".into(),
            });
        }
        elements.push(MapElement { id, sem, geom });
    }
    match bbox {
        Some(b) => VectorMap::with_bbox(origin, b, elements),
        None => VectorMap::new(origin, elements),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MapSizeReport {
    pub bytes: usize,
    pub road_length_km: f64,
    pub bytes_per_km: f64,
}

/// Serialized size of `map` per kilometer of road.
pub fn map_size_report(map: &VectorMap, road_length_km: f64) -> Result<MapSizeReport> {
    if !(road_length_km > 0.0 && road_length_km.is_finite()) {
        return Err(Error::arg(format!("road length must be > 0 km, got {road_length_km}")));
    }
    let bytes = write_map(map).len();
    Ok(MapSizeReport {
        bytes,
        road_length_km,
        bytes_per_km: bytes as f64 / road_length_km,
    })
}
