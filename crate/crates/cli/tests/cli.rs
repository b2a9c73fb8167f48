use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use seqkrr::config::Config;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_seqkrr"));
    c.env_remove("SEQKRR_OUT_DIR");
    c
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const LINEAR: &str = r#"
[kernel]
depth = 1
sigma_w_sq = 1.0
input_dim = 3

[spectrum]
k_max = 6
r = 64

[experiment]
protocol = "single"
n = [1, 2]
"#;

#[test]
fn smoke_simulation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["simulate", "--config", "smoke"], out);
        assert_eq!(code(&o), 0, "{}", text(&o));
    }
    let ra = fs::read(a.join("report.csv")).unwrap();
    assert_eq!(ra, fs::read(b.join("report.csv")).unwrap());
    assert!(String::from_utf8(ra).unwrap().lines().count() > 1);

    // A different seed changes the draws.
    let c = dir.path().join("c");
    let o = run(&["simulate", "--config", "smoke", "--seed", "99"], &c);
    assert_eq!(code(&o), 0);
    assert_ne!(fs::read(a.join("report.csv")).unwrap(), fs::read(c.join("report.csv")).unwrap());
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run(&["simulate", "--config", "smoke", "--threads", "1"], &a)), 0);
    assert_eq!(code(&run(&["simulate", "--config", "smoke", "--threads", "2"], &b)), 0);
    assert_eq!(fs::read(a.join("report.csv")).unwrap(), fs::read(b.join("report.csv")).unwrap());
}

#[test]
fn linear_kernel_has_one_level() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "linear.cfg", LINEAR);
    let o = run(&["spectrum", "--config", &cfg], dir.path());
    assert_eq!(code(&o), 0, "{}", text(&o));
    let csv = fs::read_to_string(dir.path().join("spectrum.csv")).unwrap();
    let nonzero: Vec<&str> = csv
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap().abs() > 1e-12)
        .collect();
    assert_eq!(nonzero.len(), 1, "{csv}");
    let f: Vec<f64> = nonzero[0].split(',').map(|v| v.parse().unwrap()).collect();
    // Θ(z) = z on S²: η₁ = 1/3 with multiplicity 3.
    assert_eq!(f[0], 1.0);
    assert!((f[1] - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(f[2], 3.0);
}

#[test]
fn manifest_records_a_valid_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["theory", "--config", "fig1a", "--seed", "5"], dir.path());
    assert_eq!(code(&o), 0, "{}", text(&o));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("theory.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config_source"], "bundled:fig1a");
    let cfg: Config = serde_json::from_value(m["config"].clone()).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.experiment.seed, 5);
    assert!(fs::read_to_string(dir.path().join("theory.csv")).unwrap().lines().count() > 10);
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from-env");
    let o = bin()
        .args(["spectrum", "--config", "smoke"])
        .env("SEQKRR_OUT_DIR", &out)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(out.join("spectrum.csv").exists());
    assert!(out.join("spectrum.manifest.json").exists());
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad_dim = write_cfg(dir.path(), "d1.cfg", &LINEAR.replace("input_dim = 3", "input_dim = 1"));
    let o = run(&["spectrum", "--config", &bad_dim], dir.path());
    assert_eq!(code(&o), 2, "{}", text(&o));

    // At most 49 modes up to k = 6 on S², fewer than the 100 samples asked for.
    let deficit = write_cfg(dir.path(), "deficit.cfg", &LINEAR.replace("n = [1, 2]", "n = [100]"));
    let o = run(&["theory", "--config", &deficit], dir.path());
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(text(&o).contains("mode"), "{}", text(&o));

    let o = run(&["theory", "--config", "no-such-config"], dir.path());
    assert_eq!(code(&o), 2);
    let o = run(&["theory", "--config", "smoke", "--threads", "0"], dir.path());
    assert_eq!(code(&o), 2);

    // Too few levels for the kernel trace is a numerical failure instead.
    let short = write_cfg(
        dir.path(),
        "short.cfg",
        &LINEAR
            .replace("depth = 1", "depth = 3")
            .replace("sigma_w_sq = 1.0", "sigma_w_sq = 2.0")
            .replace("k_max = 6", "k_max = 4"),
    );
    let o = run(&["spectrum", "--config", &short], dir.path());
    assert_eq!(code(&o), 3, "{}", text(&o));
    let unknown = write_cfg(dir.path(), "unknown.cfg", &format!("{LINEAR}\nbogus = 1\n"));
    let o = run(&["theory", "--config", &unknown], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn corrupted_spectrum_file_fails_its_invariant() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("levels.csv"), "k,eta,mult\n0,0.0,1\n1,0.1,3\n2,0.01,4\n").unwrap();
    let cfg = write_cfg(
        dir.path(),
        "file.cfg",
        &LINEAR.replace("r = 64", "r = 64\nfile = \"levels.csv\""),
    );
    let o = run(&["check", "--fast", "--config", &cfg], dir.path());
    assert_eq!(code(&o), 4, "{}", text(&o));
    let out = text(&o);
    assert!(out.contains("FAIL [S] spectrum file invariants"), "{out}");
    assert!(out.contains("multiplicity"), "{out}");

    // Repaired multiplicities pass.
    fs::write(dir.path().join("levels.csv"), "k,eta,mult\n0,0.0,1\n1,0.1,3\n2,0.01,5\n").unwrap();
    let o = run(&["check", "--fast", "--config", &cfg], dir.path());
    assert_eq!(code(&o), 0, "{}", text(&o));
}

#[test]
fn fast_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["check", "--fast"], dir.path());
    assert_eq!(code(&o), 0, "{}", text(&o));
    let out = text(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 8, "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("SKIP")).count(), 2, "{out}");
}
