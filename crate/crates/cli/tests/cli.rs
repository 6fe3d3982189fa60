//! End-to-end tests of the installed binary: flag handling, exit codes,
//! artifact layout, determinism and the golden comparison loop. Instances
//! are kept tiny so every command finishes in seconds.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_reflected-mfg")
}

fn run(dir: &Path, args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(bin());
    cmd.current_dir(dir).args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary should launch")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL_CONFIG: &str = r#"
[grid]
n_cells = 8
n_steps = 6

[experiment]
N_list = [2, 3]
n_players = 2
n_paths = 16
seed = 3
mc_budget = 16
n_random_configs = 4
n_t_slices = 2
lattice_stride = 4
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn small_config(dir: &Path) -> PathBuf {
    write_config(dir, "config.toml", SMALL_CONFIG)
}

#[test]
fn help_and_version_exit_zero_and_usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--help"], &[]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("reflected-mfg"));
    assert!(stdout(&out).contains("converge"));

    let out = run(dir.path(), &["--version"], &[]);
    assert_eq!(code(&out), 0);

    let out = run(dir.path(), &["--bogus-flag", "check"], &[]);
    assert_eq!(code(&out), 1);

    let out = run(dir.path(), &["not-a-command"], &[]);
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_config_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--config", "no_such_file.toml", "converge"], &[]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("no_such_file.toml"));
}

#[test]
fn unknown_config_keys_exit_one_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "bad.toml", "[experiment]\ngamma = 1.5\n");
    let out = run(dir.path(), &["--config", config.to_str().unwrap(), "converge"], &[]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("gamma"), "stderr: {}", stderr(&out));
}

#[test]
fn out_of_range_player_lists_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "range.toml", "[experiment]\nN_list = [5]\n");
    let out = run(dir.path(), &["--config", config.to_str().unwrap(), "converge"], &[]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("2..=4"), "stderr: {}", stderr(&out));
}

#[test]
fn converge_writes_report_csvs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = run(
        dir.path(),
        &["--config", config.to_str().unwrap(), "--out", "run1", "converge"],
        &[],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("slopes"), "stdout: {}", stdout(&out));

    let run_dir = dir.path().join("run1");
    let report_text = std::fs::read_to_string(run_dir.join("report.json")).unwrap();
    for key in ["value_gap", "w_gap", "trajectory_gap", "instance", "rates"] {
        assert!(report_text.contains(key), "report.json lacks {key}");
    }
    for file in ["value_gap.csv", "w_gap.csv", "trajectories.csv"] {
        assert!(run_dir.join(file).is_file(), "{file} missing");
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "converge");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 16);
    assert_eq!(manifest["config"]["grid"]["n_cells"], 8);
    assert!(manifest["wall_seconds"].as_f64().unwrap() > 0.0);
}

#[test]
fn identical_runs_match_bitwise_and_golden_compare_flags_perturbations() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    for (out_dir, jobs) in [("a", "2"), ("b", "1")] {
        let out = run(
            dir.path(),
            &[
                "--config",
                config.to_str().unwrap(),
                "--out",
                out_dir,
                "--jobs",
                jobs,
                "converge",
            ],
            &[],
        );
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    }
    // Deterministic artifacts agree bitwise even across thread counts.
    for file in ["value_gap.csv", "w_gap.csv", "trajectories.csv"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }

    let out = run(dir.path(), &["golden-compare", "a", "b"], &[]);
    assert_eq!(code(&out), 0, "stdout: {}", stdout(&out));
    assert!(stdout(&out).contains("0 mismatches"));

    // Perturb one value beyond the tolerance and expect a named failure.
    let target = dir.path().join("b").join("value_gap.csv");
    let text = std::fs::read_to_string(&target).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut fields: Vec<f64> =
        lines[0].split(',').map(|f| f.parse().unwrap()).collect();
    fields[1] *= 1.0 + 1e-6;
    lines[0] = format!("{:?},{:?}", fields[0], fields[1]);
    std::fs::write(&target, lines.join("\n") + "\n").unwrap();

    let out = run(dir.path(), &["golden-compare", "a", "b"], &[]);
    assert_eq!(code(&out), 4);
    assert!(stdout(&out).contains("value_gap.csv"), "stdout: {}", stdout(&out));

    let out = run(dir.path(), &["golden-compare", "a", "missing"], &[]);
    assert_eq!(code(&out), 1);
}

#[test]
fn four_players_need_the_expensive_flag_and_a_coarse_grid() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "four.toml",
        "[grid]\nn_cells = 8\nn_steps = 4\n[experiment]\nN_list = [2, 4]\nn_paths = 8\nmc_budget = 8\nn_random_configs = 2\nn_t_slices = 1\nlattice_stride = 4\n",
    );
    let out = run(
        dir.path(),
        &["--config", config.to_str().unwrap(), "--out", "gated", "converge"],
        &[],
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("expensive"), "stderr: {}", stderr(&out));

    let coarse_cap = write_config(
        dir.path(),
        "cap.toml",
        "[grid]\nn_cells = 31\n[experiment]\nN_list = [2, 4]\n",
    );
    let out = run(
        dir.path(),
        &[
            "--config",
            coarse_cap.to_str().unwrap(),
            "--out",
            "capped",
            "--expensive",
            "converge",
        ],
        &[],
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("21"), "stderr: {}", stderr(&out));

    // On a coarse grid with the flag the four-player run goes through.
    let out = run(
        dir.path(),
        &[
            "--config",
            config.to_str().unwrap(),
            "--out",
            "full",
            "--expensive",
            "converge",
        ],
        &[],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("full").join("report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["n_list"], serde_json::json!([2, 4]));
    assert_eq!(report["rows"][1]["n_players"], 4);
}

#[test]
fn simulate_respects_the_memory_budget_with_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "budget.toml",
        "[grid]\nn_cells = 8\nn_steps = 6\n[experiment]\nn_paths = 16\nmemory_budget_bytes = 1024\n",
    );
    let out = run(
        dir.path(),
        &["--config", config.to_str().unwrap(), "--out", "sim", "simulate"],
        &[],
    );
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
}

#[test]
fn simulate_writes_ensemble_gaps_and_is_seed_keyed() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    for out_dir in ["s1", "s2"] {
        let out = run(
            dir.path(),
            &["--config", config.to_str().unwrap(), "--out", out_dir, "simulate"],
            &[],
        );
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    }
    let s1 = dir.path().join("s1");
    for file in ["ensemble.bin", "ensemble.json", "ensemble_summary.csv", "gaps.json"] {
        assert!(s1.join(file).is_file(), "{file} missing");
    }
    let gaps: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(s1.join("gaps.json")).unwrap()).unwrap();
    assert_eq!(gaps["trajectory"].as_array().unwrap().len(), 2);
    assert!(gaps["trajectory"][0]["std_error"].is_number());
    assert!(gaps["feedback_control"][0]["value"].as_f64().unwrap().is_finite());

    // Same seed, same bytes; a different seed changes the ensemble.
    let a = std::fs::read(s1.join("ensemble.bin")).unwrap();
    let b = std::fs::read(dir.path().join("s2").join("ensemble.bin")).unwrap();
    assert_eq!(a, b);

    let out = run(
        dir.path(),
        &[
            "--config",
            config.to_str().unwrap(),
            "--out",
            "s3",
            "--seed",
            "4",
            "simulate",
        ],
        &[],
    );
    assert_eq!(code(&out), 0);
    let c = std::fs::read(dir.path().join("s3").join("ensemble.bin")).unwrap();
    assert_ne!(a, c, "seed override did not change the ensemble");
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("s3").join("manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["seed"], 4);
}

#[test]
fn solve_mfg_and_solve_nash_store_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = run(
        dir.path(),
        &["--config", config.to_str().unwrap(), "--out", "mfg", "solve-mfg"],
        &[],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    for file in ["mfg_u.csv", "mfg_m.csv", "mfg.json", "manifest.json"] {
        assert!(dir.path().join("mfg").join(file).is_file(), "{file} missing");
    }

    let out = run(
        dir.path(),
        &["--config", config.to_str().unwrap(), "--out", "nash", "solve-nash"],
        &[],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let sidecar: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("nash").join("nash.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(sidecar["n_players"], 2);
    assert!(dir.path().join("nash").join("nash_value.bin").is_file());
}

#[test]
fn eval_master_honors_the_cache_env_and_the_expensive_flag() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let cache = dir.path().join("cache");
    std::fs::create_dir_all(&cache).unwrap();

    let out = run(
        dir.path(),
        &["--config", config.to_str().unwrap(), "--out", "m1", "eval-master"],
        &[("REFLECTED_MFG_CACHE", cache.to_str().unwrap())],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(dir.path().join("m1").join("master_u0.csv").is_file());
    assert!(!dir.path().join("m1").join("master_kernel.csv").exists());
    let cached = std::fs::read_dir(&cache).unwrap().count();
    assert!(cached > 0, "cache directory stayed empty");

    let out = run(
        dir.path(),
        &[
            "--config",
            config.to_str().unwrap(),
            "--out",
            "m2",
            "--expensive",
            "eval-master",
        ],
        &[("REFLECTED_MFG_CACHE", cache.to_str().unwrap())],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let kernel = std::fs::read_to_string(dir.path().join("m2").join("master_kernel.csv")).unwrap();
    assert_eq!(kernel.lines().count(), 8, "kernel should be 8 x 8");
}

#[test]
fn check_passes_on_the_default_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--out", "chk", "check"], &[]);
    assert_eq!(code(&out), 0, "stdout: {}\nstderr: {}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    for name in [
        "null-mfg",
        "null-nash",
        "null-master-gaps",
        "null-particles",
        "mass-conservation",
        "two-player-symmetry",
        "empirical-normalization",
        "coupling-monotonicity",
    ] {
        assert!(text.contains(&format!("check {name}: ok")), "missing {name}: {text}");
    }
    assert!(dir.path().join("chk").join("manifest.json").is_file());
}
