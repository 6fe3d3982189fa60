//! Golden-file comparison for regression runs.
//!
//! Every file under the golden directory must exist in the run directory
//! and agree: CSV cells and JSON numbers within a relative tolerance,
//! binary artifacts bitwise. Two carve-outs keep the comparison meaningful:
//! keys describing the run environment (wall time, worker count, output
//! directory) are skipped, and a numeric JSON key with an `_se` sibling
//! (or a `value`/`std_error` pair) is a Monte Carlo estimate, so it is
//! compared within three combined standard errors instead of `rtol`.

use std::path::{Path, PathBuf};

use serde_json::Value;

use reflected_mfg::io;
use reflected_mfg::{Error, Result};

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

#[derive(Debug)]
pub struct GoldenReport {
    pub files_checked: usize,
    pub failures: Vec<String>,
}

impl GoldenReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn close(a: f64, b: f64, rtol: f64) -> bool {
    a == b || (a - b).abs() <= rtol * a.abs().max(b.abs())
}

fn walk(root: &Path, prefix: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(root.join(prefix))? {
        let entry = entry?;
        let rel = prefix.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            walk(root, &rel, out)?;
        } else {
            out.push(rel);
        }
    }
    Ok(())
}

pub fn golden_compare(run_dir: &Path, golden_dir: &Path, rtol: f64) -> Result<GoldenReport> {
    if !golden_dir.is_dir() {
        return Err(invalid(format!("golden directory {} does not exist", golden_dir.display())));
    }
    if !run_dir.is_dir() {
        return Err(invalid(format!("run directory {} does not exist", run_dir.display())));
    }
    if !(rtol >= 0.0) {
        return Err(invalid("rtol must be nonnegative"));
    }
    let mut rels = Vec::new();
    walk(golden_dir, Path::new(""), &mut rels)?;
    rels.sort();

    let mut failures = Vec::new();
    for rel in &rels {
        let run_path = run_dir.join(rel);
        let golden_path = golden_dir.join(rel);
        if !run_path.is_file() {
            failures.push(format!("{}: missing from the run directory", rel.display()));
            continue;
        }
        let outcome = match rel.extension().and_then(|e| e.to_str()) {
            Some("csv") => compare_csv(&run_path, &golden_path, rtol),
            Some("json") => compare_json(&run_path, &golden_path, rtol),
            _ => compare_bytes(&run_path, &golden_path),
        };
        match outcome {
            Ok(None) => {}
            Ok(Some(detail)) => failures.push(format!("{}: {detail}", rel.display())),
            Err(e) => failures.push(format!("{}: unreadable ({e})", rel.display())),
        }
    }
    Ok(GoldenReport { files_checked: rels.len(), failures })
}

fn compare_bytes(run: &Path, golden: &Path) -> Result<Option<String>> {
    let a = std::fs::read(run)?;
    let b = std::fs::read(golden)?;
    if a == b {
        Ok(None)
    } else {
        Ok(Some("binary contents differ".to_string()))
    }
}

fn compare_csv(run: &Path, golden: &Path, rtol: f64) -> Result<Option<String>> {
    let a = io::read_matrix_csv(run)?;
    let b = io::read_matrix_csv(golden)?;
    if a.len() != b.len() {
        return Ok(Some(format!("{} rows, golden has {}", a.len(), b.len())));
    }
    for (r, (ra, rb)) in a.iter().zip(b.iter()).enumerate() {
        if ra.len() != rb.len() {
            return Ok(Some(format!("row {r}: {} columns, golden has {}", ra.len(), rb.len())));
        }
        for (c, (&va, &vb)) in ra.iter().zip(rb.iter()).enumerate() {
            if !close(va, vb, rtol) {
                return Ok(Some(format!("row {r} col {c}: {va:e} vs golden {vb:e}")));
            }
        }
    }
    Ok(None)
}

fn compare_json(run: &Path, golden: &Path, rtol: f64) -> Result<Option<String>> {
    let a: Value = io::read_json(run)?;
    let b: Value = io::read_json(golden)?;
    let mut failures = Vec::new();
    compare_value(&a, &b, rtol, "$", None, &mut failures);
    if failures.is_empty() {
        Ok(None)
    } else {
        Ok(Some(failures.join("; ")))
    }
}

/// Keys recording the run environment (timing, worker count, landing
/// directory) rather than results; two equivalent runs may differ here.
fn is_environment_key(key: &str) -> bool {
    key.contains("wall_seconds") || key == "timestamp" || key == "jobs" || key == "directory"
}

fn is_error_bar_key(key: &str) -> bool {
    key.ends_with("_se") || key == "std_error"
}

/// Standard error paired with `key` inside the same object, if any.
fn sibling_se(object: &serde_json::Map<String, Value>, key: &str) -> Option<f64> {
    let name = if key == "value" { "std_error".to_string() } else { format!("{key}_se") };
    object.get(&name).and_then(Value::as_f64)
}

fn compare_value(
    a: &Value,
    b: &Value,
    rtol: f64,
    path: &str,
    band: Option<f64>,
    failures: &mut Vec<String>,
) {
    match (a, b) {
        (Value::Object(oa), Value::Object(ob)) => {
            for key in ob.keys() {
                if !oa.contains_key(key) {
                    failures.push(format!("{path}.{key}: missing"));
                }
            }
            for (key, va) in oa {
                let Some(vb) = ob.get(key) else {
                    failures.push(format!("{path}.{key}: not in golden"));
                    continue;
                };
                if is_environment_key(key) {
                    continue;
                }
                let band = if is_error_bar_key(key) {
                    // Error bars of independent runs scatter on their own
                    // scale; only order-of-magnitude agreement is checked.
                    Some(3.0 * (num(va).abs() + num(vb).abs()))
                } else {
                    match (sibling_se(oa, key), sibling_se(ob, key)) {
                        (Some(sa), Some(sb)) => Some(3.0 * (sa + sb)),
                        _ => None,
                    }
                };
                compare_value(va, vb, rtol, &format!("{path}.{key}"), band, failures);
            }
        }
        (Value::Array(aa), Value::Array(ab)) => {
            if aa.len() != ab.len() {
                failures.push(format!("{path}: length {} vs golden {}", aa.len(), ab.len()));
                return;
            }
            for (i, (va, vb)) in aa.iter().zip(ab.iter()).enumerate() {
                compare_value(va, vb, rtol, &format!("{path}[{i}]"), band, failures);
            }
        }
        (Value::Number(_), Value::Number(_)) => {
            let (na, nb) = (num(a), num(b));
            let ok = match band {
                Some(width) => (na - nb).abs() <= width + rtol * na.abs().max(nb.abs()),
                None => close(na, nb, rtol),
            };
            if !ok {
                failures.push(format!("{path}: {na:e} vs golden {nb:e}"));
            }
        }
        _ => {
            if a != b {
                failures.push(format!("{path}: {a} vs golden {b}"));
            }
        }
    }
}

fn num(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn write(path: &Path, text: &str) {
        std::fs::write(path, text).unwrap();
    }

    #[test]
    fn a_directory_matches_itself() {
        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("a.csv"), "1.0,2.0\n3.0,4.0\n");
        write(&dir.path().join("b.json"), r#"{"x": 1.25, "wall_seconds": 9.0}"#);
        std::fs::write(dir.path().join("c.bin"), [1u8, 2, 3]).unwrap();
        let report = golden_compare(dir.path(), dir.path(), 1e-9).unwrap();
        assert_eq!(report.files_checked, 3);
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn perturbed_values_are_flagged_by_name() {
        let run = tempfile::tempdir().unwrap();
        let gold = tempfile::tempdir().unwrap();
        write(&run.path().join("v.csv"), "1.0,2.0\n");
        write(&gold.path().join("v.csv"), "1.0,2.00001\n");
        let report = golden_compare(run.path(), gold.path(), 1e-9).unwrap();
        assert_eq!(report.failures.len(), 1);
        assert!(report.failures[0].contains("v.csv"), "{:?}", report.failures);
        assert!(report.failures[0].contains("col 1"));

        // The same perturbation passes under a loose tolerance.
        let report = golden_compare(run.path(), gold.path(), 1e-3).unwrap();
        assert!(report.passed());
    }

    #[test]
    fn environment_keys_are_ignored_and_missing_files_reported() {
        let run = tempfile::tempdir().unwrap();
        let gold = tempfile::tempdir().unwrap();
        write(
            &run.path().join("m.json"),
            r#"{"x": 1.0, "wall_seconds": 5.0, "jobs": 2, "directory": "a"}"#,
        );
        write(
            &gold.path().join("m.json"),
            r#"{"x": 1.0, "wall_seconds": 125.0, "jobs": null, "directory": "b"}"#,
        );
        write(&gold.path().join("extra.csv"), "1.0\n");
        let report = golden_compare(run.path(), gold.path(), 1e-9).unwrap();
        assert_eq!(report.failures.len(), 1);
        assert!(report.failures[0].contains("extra.csv"));
        assert!(report.failures[0].contains("missing"));
    }

    #[test]
    fn monte_carlo_estimates_compare_by_band() {
        let run = tempfile::tempdir().unwrap();
        let gold = tempfile::tempdir().unwrap();
        // Gap differs by 0.04 with standard errors 0.01 each: inside the
        // 3 sigma combined band. The deterministic twin must still fail.
        let a = json!({"gap": 1.00, "gap_se": 0.01, "det": 1.00});
        let b = json!({"gap": 1.04, "gap_se": 0.011, "det": 1.04});
        write(&run.path().join("r.json"), &a.to_string());
        write(&gold.path().join("r.json"), &b.to_string());
        let report = golden_compare(run.path(), gold.path(), 1e-9).unwrap();
        assert_eq!(report.failures.len(), 1, "{:?}", report.failures);
        assert!(report.failures[0].contains(".det"));

        // Beyond the band the estimate fails too.
        let b = json!({"gap": 1.10, "gap_se": 0.011, "det": 1.00});
        write(&gold.path().join("r.json"), &b.to_string());
        write(&run.path().join("r.json"), &json!({"gap": 1.00, "gap_se": 0.01, "det": 1.00}).to_string());
        let report = golden_compare(run.path(), gold.path(), 1e-9).unwrap();
        assert_eq!(report.failures.len(), 1);
        assert!(report.failures[0].contains(".gap"));
    }

    #[test]
    fn value_and_std_error_pairs_use_the_band_inside_arrays() {
        let run = tempfile::tempdir().unwrap();
        let gold = tempfile::tempdir().unwrap();
        let a = json!({"trajectory": [{"value": 0.50, "std_error": 0.02}]});
        let b = json!({"trajectory": [{"value": 0.55, "std_error": 0.021}]});
        write(&run.path().join("g.json"), &a.to_string());
        write(&gold.path().join("g.json"), &b.to_string());
        let report = golden_compare(run.path(), gold.path(), 1e-9).unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn structural_json_changes_are_failures() {
        let run = tempfile::tempdir().unwrap();
        let gold = tempfile::tempdir().unwrap();
        write(&run.path().join("s.json"), r#"{"rows": [1, 2], "name": "a"}"#);
        write(&gold.path().join("s.json"), r#"{"rows": [1, 2, 3], "name": "b"}"#);
        let report = golden_compare(run.path(), gold.path(), 1e-9).unwrap();
        let joined = report.failures.join("\n");
        assert!(joined.contains("rows"), "{joined}");
        assert!(joined.contains("name"), "{joined}");
    }

    #[test]
    fn binary_artifacts_must_match_bitwise() {
        let run = tempfile::tempdir().unwrap();
        let gold = tempfile::tempdir().unwrap();
        std::fs::write(run.path().join("e.bin"), [0u8, 1, 2]).unwrap();
        std::fs::write(gold.path().join("e.bin"), [0u8, 1, 3]).unwrap();
        let report = golden_compare(run.path(), gold.path(), 1e-9).unwrap();
        assert_eq!(report.failures.len(), 1);
        assert!(report.failures[0].contains("e.bin"));
    }

    #[test]
    fn bad_directories_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let err = golden_compare(dir.path(), &dir.path().join("nope"), 1e-9).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
