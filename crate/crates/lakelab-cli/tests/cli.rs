use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

struct Run {
    dir: TempDir,
}

impl Run {
    fn new() -> Self {
        Run {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn cache(&self) -> PathBuf {
        self.dir.path().join("cache")
    }

    fn config(&self, text: &str) -> PathBuf {
        let p = self.dir.path().join("run.toml");
        fs::write(&p, text).unwrap();
        p
    }

    fn lakelab(&self, args: &[&str], config: Option<&Path>) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_lakelab"));
        cmd.args(args)
            .arg("--out")
            .arg(self.out())
            .env("LAKELAB_CACHE", self.cache());
        if let Some(c) = config {
            cmd.arg("--config").arg(c);
        }
        cmd.output().unwrap()
    }

    fn read(&self, name: &str) -> String {
        fs::read_to_string(self.out().join(name)).unwrap()
    }
}

fn data_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn meta<'a>(csv: &'a str, key: &str) -> &'a str {
    let prefix = format!("# {key}: ");
    csv.lines()
        .find_map(|l| l.strip_prefix(prefix.as_str()))
        .unwrap_or_else(|| panic!("no header entry {key}"))
}

#[test]
fn invalid_config_exits_2_and_writes_nothing() {
    let run = Run::new();
    for text in [
        "[params]\nb = -0.65\n",
        "[params]\nbee = 0.65\n",
        "not toml [",
    ] {
        let cfg = run.config(text);
        let out = run.lakelab(&["equilibria"], Some(&cfg));
        assert_eq!(out.status.code(), Some(2), "{text}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
        assert!(!run.out().exists());
    }
}

#[test]
fn equilibria_of_the_reference_lake() {
    let run = Run::new();
    let out = run.lakelab(&["equilibria", "--quiet"], None);
    assert_eq!(out.status.code(), Some(0));
    let csv = run.read("equilibria.csv");
    let rows = data_rows(&csv);
    let kinds: Vec<&str> = rows.iter().map(|r| r[4].as_str()).collect();
    assert_eq!(kinds, ["saddle", "vortex", "saddle"]);
    let x0: f64 = rows[0][0].parse().unwrap();
    assert!((x0 - 0.4506958497605776).abs() < 1e-10);
    // the omitted x_max is resolved and echoed
    assert!(csv.contains("#   x_max = 20.0"));
    assert!(csv.starts_with("# lakelab "));
}

#[test]
fn hjb_is_cached_and_reproducible() {
    let run = Run::new();
    let first = run.lakelab(&["hjb"], None);
    assert_eq!(first.status.code(), Some(0));
    let a = run.read("value_function.csv");
    assert!(fs::read_dir(run.cache()).unwrap().count() == 1);

    let second = run.lakelab(&["hjb"], None);
    assert_eq!(second.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&second.stderr).contains("loaded from cache"));
    assert_eq!(a, run.read("value_function.csv"));

    let rows = data_rows(&a);
    assert_eq!(rows.len(), 4096);
    assert_eq!(rows[0].len(), 5);
    let identity: f64 = meta(&a, "boundary_identity").parse().unwrap();
    assert!(identity.abs() < 1e-6);
}

#[test]
fn corrupt_cache_is_recomputed() {
    let run = Run::new();
    assert_eq!(run.lakelab(&["hjb"], None).status.code(), Some(0));
    let a = run.read("value_function.csv");
    for entry in fs::read_dir(run.cache()).unwrap() {
        fs::write(entry.unwrap().path(), "{ truncated").unwrap();
    }
    let again = run.lakelab(&["hjb"], None);
    assert_eq!(again.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&again.stderr).contains("corrupt"));
    assert_eq!(a, run.read("value_function.csv"));
}

#[test]
fn unusable_cache_dir_exits_4() {
    let run = Run::new();
    fs::write(run.cache(), "a file, not a directory").unwrap();
    let out = run.lakelab(&["hjb"], None);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn hjb_needs_noise() {
    let run = Run::new();
    let cfg = run.config("[params]\nsigma = 0.0\n");
    assert_eq!(run.lakelab(&["hjb"], Some(&cfg)).status.code(), Some(2));
}

#[test]
fn deterministic_paths_split_at_the_skiba_point() {
    let run = Run::new();
    let cfg = run.config("[params]\nsigma = 0.0\n[mc]\nx_starts = [0.90, 0.96]\n");
    let out = run.lakelab(&["simulate"], Some(&cfg));
    assert_eq!(out.status.code(), Some(0));
    let low: f64 = meta(&run.read("paths_0.csv"), "x_final").parse().unwrap();
    let high: f64 = meta(&run.read("paths_1.csv"), "x_final").parse().unwrap();
    assert!((low - 0.4506958497605776).abs() < 1e-4, "{low}");
    assert!((high - 1.4141248238109552).abs() < 1e-4, "{high}");
}

#[test]
fn seed_flag_overrides_config() {
    let run = Run::new();
    let cfg = run.config("[params]\nsigma = 0.0\n[mc]\nseed = 5\n");
    run.lakelab(&["equilibria", "--seed", "9"], Some(&cfg));
    let csv = run.read("equilibria.csv");
    assert!(csv.contains("#   seed = 9\n"));
}

#[test]
fn value_reports_the_skiba_point() {
    let run = Run::new();
    assert_eq!(run.lakelab(&["value"], None).status.code(), Some(0));
    let csv = run.read("value.csv");
    let x: f64 = meta(&csv, "skiba_x").parse().unwrap();
    assert!((x - 0.9311459564823634).abs() < 1e-6);
    let rows = data_rows(&csv);
    let xs: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert!(xs.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(xs[0], 0.0);
}

#[test]
fn arrhenius_ladder_approaches_the_barrier() {
    let run = Run::new();
    assert_eq!(run.lakelab(&["arrhenius"], None).status.code(), Some(0));
    let csv = run.read("ladder.csv");
    let delta: f64 = meta(&csv, "delta_f0").parse().unwrap();
    let eps_log_tau: Vec<f64> = data_rows(&csv)
        .iter()
        .map(|r| r[5].parse().unwrap())
        .collect();
    assert_eq!(eps_log_tau.len(), 4);
    assert!(eps_log_tau.windows(2).all(|w| w[1] < w[0]));
    assert!(eps_log_tau.iter().all(|v| *v > delta));
    assert_eq!(meta(&csv, "strictly_decreasing"), "true");
}

#[test]
fn exit_time_without_simulation() {
    let run = Run::new();
    let cfg = run.config("[mc]\nn_paths = 0\n");
    assert_eq!(
        run.lakelab(&["exit-time"], Some(&cfg)).status.code(),
        Some(0)
    );
    let rows = data_rows(&run.read("exit_time.csv"));
    assert_eq!(rows.len(), 1);
    let tau: f64 = rows[0][2].parse().unwrap();
    assert!(tau > 100.0 && tau < 5000.0, "{tau}");
    assert_eq!(rows[0][3], "");
}
