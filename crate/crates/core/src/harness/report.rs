use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::metrics::{compute_metrics, FrameRecord, MetricsReport, AXES};
use crate::{fmt_f64, Error, Result};

pub const CSV_HEADER: &str = "frame_id,status,true_dx,true_dy,true_dpsi,est_dx,est_dy,est_dpsi,err_lon_m,err_lat_m,err_yaw_deg,sigma_xx,sigma_yy,sigma_psipsi,level_err_0,level_err_1,level_err_2";

/// Per-frame CSV, one row per trial in trial order. Floats round-trip
/// exactly.
pub fn write_csv(records: &[FrameRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let status = if r.is_ok() { "ok" } else { "failed" };
        let nums: Vec<String> = r
            .true_offset
            .iter()
            .chain(&r.estimate)
            .chain(&r.errors)
            .chain(&r.sigma_diag)
            .chain(&r.level_errors)
            .map(|&v| fmt_f64(v))
            .collect();
        let _ = writeln!(out, "{},{status},{}", r.id, nums.join(","));
    }
    out
}

/// Inverse of [`write_csv`]. Failure messages are not stored in the CSV,
/// so failed rows come back with an empty message.
pub fn parse_csv(text: &str) -> Result<Vec<FrameRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::Parse { line: 1, message: "missing or unexpected CSV header".into() }),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: String| Error::Parse { line: i + 1, message: m };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 17 {
            return Err(err(format!("expected 17 fields, got {}", f.len())));
        }
        let id = f[0].parse().map_err(|e| err(format!("frame id: {e}")))?;
        let mut v = [0.0; 15];
        for (slot, s) in v.iter_mut().zip(&f[2..]) {
            *slot = s.parse().map_err(|e| err(format!("'{s}': {e}")))?;
        }
        let failure = match f[1] {
            "ok" => None,
            "failed" => Some(String::new()),
            s => return Err(err(format!("unknown status '{s}'"))),
        };
        let take = |k: usize| [v[k], v[k + 1], v[k + 2]];
        out.push(FrameRecord {
            id,
            failure,
            true_offset: take(0),
            estimate: take(3),
            errors: take(6),
            sigma_diag: take(9),
            level_errors: take(12),
        });
    }
    Ok(out)
}

/// Metrics recomputed from a per-frame CSV alone.
pub fn recompute_from_csv(text: &str) -> Result<MetricsReport> {
    Ok(compute_metrics(&parse_csv(text)?))
}

/// Machine-readable summary table: one `key value` pair per line after a
/// comment header.
pub fn write_summary(m: &MetricsReport) -> String {
    let mut out = String::from("# metric value\n");
    let _ = writeln!(out, "trials {}", m.trials);
    let _ = writeln!(out, "evaluated {}", m.evaluated);
    let _ = writeln!(out, "failures {}", m.failures);
    for (a, name) in AXES.iter().enumerate() {
        let _ = writeln!(out, "mae_{name} {}", fmt_f64(m.mae[a]));
        let _ = writeln!(out, "rmse_{name} {}", fmt_f64(m.rmse[a]));
        for k in 0..3 {
            let _ = writeln!(out, "below{k}_{name} {}", fmt_f64(m.below[a][k]));
        }
    }
    let _ = writeln!(out, "available_ratio {}", fmt_f64(m.available_ratio));
    let _ = writeln!(out, "monotone {}", fmt_f64(m.monotone));
    out
}

pub fn parse_summary(text: &str) -> Result<MetricsReport> {
    let mut kv = std::collections::BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once(' ').ok_or(Error::Parse { line: i + 1, message: "expected 'key value'".into() })?;
        kv.insert(k.to_string(), (i + 1, v.trim().to_string()));
    }
    let num = |k: &str| -> Result<f64> {
        let (line, v) = kv.get(k).ok_or(Error::Parse { line: 0, message: format!("missing key {k}") })?;
        v.parse().map_err(|e| Error::Parse { line: *line, message: format!("{k}: {e}") })
    };
    let mut m = MetricsReport {
        trials: num("trials")? as usize,
        evaluated: num("evaluated")? as usize,
        failures: num("failures")? as usize,
        mae: [0.0; 3],
        rmse: [0.0; 3],
        below: [[0.0; 3]; 3],
        available_ratio: num("available_ratio")?,
        monotone: num("monotone")?,
    };
    for (a, name) in AXES.iter().enumerate() {
        m.mae[a] = num(&format!("mae_{name}"))?;
        m.rmse[a] = num(&format!("rmse_{name}"))?;
        for k in 0..3 {
            m.below[a][k] = num(&format!("below{k}_{name}"))?;
        }
    }
    Ok(m)
}

/// Human-readable table of a report.
pub fn format_table(m: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "trials {}  evaluated {}  failures {}", m.trials, m.evaluated, m.failures);
    let _ = writeln!(out, "{:<5}{:>12}{:>12}{:>9}{:>9}{:>9}", "axis", "MAE", "RMSE", "<t1 %", "<t2 %", "<t3 %");
    for (a, name) in AXES.iter().enumerate() {
        let b = m.below[a];
        let _ = writeln!(out, "{name:<5}{:>12.5}{:>12.5}{:>9.1}{:>9.1}{:>9.1}", m.mae[a], m.rmse[a], b[0], b[1], b[2]);
    }
    let _ = writeln!(out, "thresholds: 0.1/0.2/0.3 m, 0.1/0.3/0.6 deg; yaw errors in degrees");
    let _ = writeln!(out, "available ratio {:.1} %  monotone levels {:.1} %", m.available_ratio, m.monotone);
    out
}

/// Files written by [`emit_report`].
pub const CSV_FILE: &str = "frames.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const TABLE_FILE: &str = "summary_table.txt";
pub const FAILURES_FILE: &str = "failures.txt";
pub const HISTOGRAM_DIR: &str = "histograms";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the per-frame CSV, the summary, the failure list and one score
/// histogram file per `(frame id, text)` pair into `dir`.
pub fn emit_report(report: &MetricsReport, records: &[FrameRecord], histograms: &[(usize, String)], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(CSV_FILE), &write_csv(records))?;
    write(&dir.join(SUMMARY_FILE), &write_summary(report))?;
    write(&dir.join(TABLE_FILE), &format_table(report))?;
    let failures: String = records
        .iter()
        .filter_map(|r| r.failure.as_ref().map(|m| format!("{} {m}\n", r.id)))
        .collect();
    write(&dir.join(FAILURES_FILE), &failures)?;
    let hdir = dir.join(HISTOGRAM_DIR);
    fs::create_dir_all(&hdir).map_err(|e| Error::io(&hdir, e))?;
    for (id, text) in histograms {
        write(&hdir.join(format!("frame_{id:05}.txt")), text)?;
    }
    Ok(())
}
