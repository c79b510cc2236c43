//! Text helpers for the command-line file formats.
//!
//! Floats are written with 17 significant digits so parsing the text
//! recovers the exact bit pattern; every writer is deterministic, so
//! re-running a command reproduces its output files byte for byte.

use gfnn::{Error, Result};
use gfnn::state::{PhaseState, Trajectory};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

pub fn parse_f64(s: &str, path: &Path, context: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::malformed(path, format!("{context}: bad float {s:?}")))
}

/// One `key=value` token for the stdout summary line. Values with
/// spaces are double-quoted so the line stays splittable on spaces.
pub fn kv(key: &str, value: impl AsRef<str>) -> String {
    let v = value.as_ref();
    if v.contains(' ') {
        format!("{key}=\"{v}\"")
    } else {
        format!("{key}={v}")
    }
}

/// Writes a rollout as CSV: columns `idx, t, p.., q..` plus, when
/// `iters` is given, a trailing `iters` column holding the implicit
/// solver's iteration count for the solve that produced each row
/// (0 on the initial row, which required no solve).
pub fn write_run_csv(traj: &Trajectory, iters: Option<&[usize]>, path: &Path) -> Result<()> {
    if let Some(it) = iters {
        if it.len() + 1 != traj.len() {
            return Err(Error::DimensionMismatch {
                context: "iteration counts vs rollout steps",
                expected: traj.len().saturating_sub(1),
                got: it.len(),
            });
        }
    }
    let d = traj.dim();
    let mut out = String::new();
    out.push_str("# format: trajectory v1\n");
    out.push_str(&format!("# dim: {d}\n"));
    out.push_str(&format!("# h: {}\n", fmt_f64(traj.h)));
    out.push_str(&format!("# t0: {}\n", fmt_f64(traj.t0)));
    out.push_str("idx,t");
    for i in 1..=d {
        out.push_str(&format!(",p{i}"));
    }
    for i in 1..=d {
        out.push_str(&format!(",q{i}"));
    }
    if iters.is_some() {
        out.push_str(",iters");
    }
    out.push('\n');
    for (i, s) in traj.states.iter().enumerate() {
        out.push_str(&format!("{i},{}", fmt_f64(traj.time(i))));
        for v in s.p.iter().chain(s.q.iter()) {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        if let Some(it) = iters {
            out.push(',');
            out.push_str(&if i == 0 { 0 } else { it[i - 1] }.to_string());
        }
        out.push('\n');
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a trajectory CSV, accepting both the plain `idx, t, p.., q..`
/// layout and the variant with a trailing `iters` column.
pub fn read_run_csv(path: &Path) -> Result<Trajectory> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut dim = None;
    let mut h = None;
    let mut t0 = 0.0;
    let mut has_iters = false;
    let mut saw_columns = false;
    let mut states = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let ctx = format!("line {}", lineno + 1);
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((key, value)) = rest.trim().split_once(':') {
                match key.trim() {
                    "dim" => {
                        dim = Some(value.trim().parse::<usize>().map_err(|_| {
                            Error::malformed(path, format!("{ctx}: bad dim {value:?}"))
                        })?)
                    }
                    "h" => h = Some(parse_f64(value, path, &ctx)?),
                    "t0" => t0 = parse_f64(value, path, &ctx)?,
                    _ => {}
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !saw_columns {
            saw_columns = true;
            has_iters = line.trim_end().ends_with(",iters");
            continue;
        }
        let d = dim.ok_or_else(|| Error::malformed(path, "missing dim header"))?;
        let expected = 2 + 2 * d + usize::from(has_iters);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected {
            return Err(Error::malformed(
                path,
                format!("{ctx}: expected {expected} columns, got {}", fields.len()),
            ));
        }
        let values: Result<Vec<f64>> = fields[2..2 + 2 * d]
            .iter()
            .map(|f| parse_f64(f, path, &ctx))
            .collect();
        states.push(PhaseState::from_flat(&values?)?);
    }
    Ok(Trajectory::new(
        h.ok_or_else(|| Error::malformed(path, "missing h header"))?,
        t0,
        states,
    ))
}
