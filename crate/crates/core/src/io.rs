//! Persistence helpers: CSV matrices with full floating-point precision,
//! flat binary tensors with a small integer header, and a stable hash for
//! cache keys and run manifests.
//!
//! Numeric CSV output always carries 17 significant digits so that written
//! values round-trip bit-exactly through parsing.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{GridMeasure, SpaceTimeField, TimeGrid};
use crate::mfg::MfgSolution;

/// FNV-1a over raw bytes; stable across platforms and Rust versions, which
/// is what cache keys and manifest hashes need.
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Hash of a float slice through its bit patterns.
pub fn hash_f64s(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
    }
    h
}

pub fn hash_hex(h: u64) -> String {
    format!("{h:016x}")
}

/// Writes a numeric matrix as CSV, one row per line.
pub fn write_matrix_csv<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = &'a [f64]>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                write!(w, ",")?;
            }
            write!(w, "{v:.16e}")?;
            first = false;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|tok| tok.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| {
            invalid(format!("{}:{}: bad number: {e}", path.display(), lineno + 1))
        })?);
    }
    Ok(rows)
}

/// Writes a node-indexed field as `index,value` CSV.
pub fn write_node_csv(path: &Path, values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "node,value")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(w, "{i},{v:.16e}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_node_csv(path: &Path) -> Result<Vec<f64>> {
    let reader = BufReader::new(File::open(path)?);
    let mut values = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let tok = line
            .split(',')
            .nth(1)
            .ok_or_else(|| invalid(format!("{}:{}: missing value", path.display(), lineno + 1)))?;
        values.push(tok.trim().parse::<f64>().map_err(|e| {
            invalid(format!("{}:{}: bad number: {e}", path.display(), lineno + 1))
        })?);
    }
    Ok(values)
}

/// Flat binary layout: `header.len()` little-endian u64 values, then the
/// payload as little-endian f64, row-major.
pub fn write_flat_binary(path: &Path, header: &[u64], data: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for h in header {
        w.write_all(&h.to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_flat_binary(path: &Path, header_len: usize) -> Result<(Vec<u64>, Vec<f64>)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let head_bytes = header_len * 8;
    if bytes.len() < head_bytes || (bytes.len() - head_bytes) % 8 != 0 {
        return Err(invalid(format!("{} is not a flat binary tensor", path.display())));
    }
    let header: Vec<u64> = (0..header_len)
        .map(|i| u64::from_le_bytes(bytes[i * 8..(i + 1) * 8].try_into().unwrap()))
        .collect();
    let data: Vec<f64> = bytes[head_bytes..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, data))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, value)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct MfgSidecar {
    t_start: f64,
    t_end: f64,
    n_steps: usize,
    iterations_used: usize,
    final_gap: f64,
    max_mass_error: f64,
    gap_history: Vec<f64>,
}

/// Persists a solution as `<stem>_u.csv` and `<stem>_m.csv` (rows = time
/// slices, columns = nodes) plus `<stem>.json` with iteration diagnostics.
pub fn write_mfg_solution(dir: &Path, stem: &str, sol: &MfgSolution) -> Result<()> {
    fs::create_dir_all(dir)?;
    let rows_u: Vec<&[f64]> = (0..=sol.time_grid.n_steps).map(|k| sol.u.slice(k)).collect();
    write_matrix_csv(&dir.join(format!("{stem}_u.csv")), rows_u)?;
    let rows_m: Vec<&[f64]> = sol.m.iter().map(|m| m.weights()).collect();
    write_matrix_csv(&dir.join(format!("{stem}_m.csv")), rows_m)?;
    write_json(
        &dir.join(format!("{stem}.json")),
        &MfgSidecar {
            t_start: sol.time_grid.t_start,
            t_end: sol.time_grid.t_end,
            n_steps: sol.time_grid.n_steps,
            iterations_used: sol.iterations_used,
            final_gap: sol.final_gap,
            max_mass_error: sol.max_mass_error,
            gap_history: sol.gap_history.clone(),
        },
    )
}

pub fn read_mfg_solution(dir: &Path, stem: &str) -> Result<MfgSolution> {
    let sidecar: MfgSidecar = read_json(&dir.join(format!("{stem}.json")))?;
    let time_grid = TimeGrid::new(sidecar.t_start, sidecar.t_end, sidecar.n_steps)?;
    let rows_u = read_matrix_csv(&dir.join(format!("{stem}_u.csv")))?;
    let rows_m = read_matrix_csv(&dir.join(format!("{stem}_m.csv")))?;
    let n_slices = sidecar.n_steps + 1;
    if rows_u.len() != n_slices || rows_m.len() != n_slices || rows_u[0].is_empty() {
        return Err(invalid("solution CSV does not match its sidecar"));
    }
    let n_nodes = rows_u[0].len();
    let u = SpaceTimeField::from_fn(n_slices, n_nodes, |k, i| rows_u[k][i]);
    let m = rows_m
        .into_iter()
        .map(GridMeasure::from_weights)
        .collect::<Result<Vec<_>>>()?;
    Ok(MfgSolution {
        time_grid,
        u,
        m,
        iterations_used: sidecar.iterations_used,
        final_gap: sidecar.final_gap,
        gap_history: sidecar.gap_history,
        max_mass_error: sidecar.max_mass_error,
    })
}

impl From<std::num::ParseFloatError> for Error {
    fn from(e: std::num::ParseFloatError) -> Self {
        invalid(format!("bad number: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::mfg::{solve_mfg, MfgParams};
    use crate::model::{DiscreteModel, ModelConfig};

    #[test]
    fn csv_matrices_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = [
            vec![1.0, std::f64::consts::PI, 1e-300],
            vec![-2.5e17, 0.1 + 0.2, f64::MIN_POSITIVE],
        ];
        write_matrix_csv(&path, rows.iter().map(|r| r.as_slice())).unwrap();
        let back = read_matrix_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (row, orig) in back.iter().zip(&rows) {
            for (a, b) in row.iter().zip(orig) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn flat_binary_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let header = [3u64, 41, 100];
        let data: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        write_flat_binary(&path, &header, &data).unwrap();
        let (h, d) = read_flat_binary(&path, 3).unwrap();
        assert_eq!(h, header);
        assert_eq!(d, data);
    }

    #[test]
    fn binary_layout_is_little_endian_with_u64_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.bin");
        write_flat_binary(&path, &[2, 9], &[1.5]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..8], &2u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &9u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &1.5f64.to_le_bytes());
    }

    #[test]
    fn mfg_solution_round_trips_through_disk() {
        let grid = build_grid(16, (0.0, 1.0)).unwrap();
        let model = DiscreteModel::new(ModelConfig::default(), grid).unwrap();
        let tg = TimeGrid::new(0.0, 0.5, 20).unwrap();
        let m0 = GridMeasure::uniform(&model.grid);
        let sol = solve_mfg(&model, &tg, &m0, &MfgParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_mfg_solution(dir.path(), "sol", &sol).unwrap();
        let back = read_mfg_solution(dir.path(), "sol").unwrap();
        assert_eq!(back.u.data(), sol.u.data());
        assert_eq!(back.iterations_used, sol.iterations_used);
        for (a, b) in back.m.iter().zip(&sol.m) {
            for (x, y) in a.weights().iter().zip(b.weights()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hash_is_stable() {
        // Frozen values guard against accidental algorithm changes, which
        // would silently invalidate on-disk caches.
        assert_eq!(hash_bytes(b""), 0xcbf29ce484222325);
        assert_eq!(hash_bytes(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(hash_f64s(&[1.0, 2.0]), hash_f64s(&[1.0, 2.0]));
        assert_ne!(hash_f64s(&[1.0, 2.0]), hash_f64s(&[2.0, 1.0]));
    }
}
