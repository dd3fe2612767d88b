use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SCALAR: &str = "model.name = scalar_linear
model.k = 0.4
model.c = 0.3
mu = 0.3
epsilon = 0.02
sigma = 0.5
noise.modes = 1
samples.count = 5
seeds.count = 2
";

fn run(config: &str, dir: &Path, extra: &[&str]) -> Output {
    let cfg = dir.join("run.conf");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_slowfold"))
        .arg("--config")
        .arg(&cfg)
        .args(extra)
        .env_remove("SLOWFOLD_OUT")
        .output()
        .unwrap()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn passing_run_writes_csv_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = run(SCALAR, tmp.path(), &["--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let names: Vec<String> = read_dir_sorted(&out).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["manifold.csv", "summary.json"]);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pass"], true);
    assert!(summary["constants"]["kappa"].as_f64().unwrap() < 1.0);
    let csv = fs::read_to_string(out.join("manifold.csv")).unwrap();
    assert!(csv.starts_with("seed,epsilon,sample_id,block,mode_index"));
    // 2 seeds x 5 samples x (1 slow + 1 fast) rows plus the header
    assert_eq!(csv.lines().count(), 21);
}

#[test]
fn output_is_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let cfg = format!("{SCALAR}experiment = tracking\nsamples.count = 3\n").replace("samples.count = 5\n", "");
    assert_eq!(run(&cfg, tmp.path(), &["--out", a.to_str().unwrap(), "--threads", "1"]).status.code(), Some(0));
    assert_eq!(run(&cfg, tmp.path(), &["--out", b.to_str().unwrap()]).status.code(), Some(0));
    assert_eq!(read_dir_sorted(&a), read_dir_sorted(&b));
}

#[test]
fn gap_violation_exits_2_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = run(
        "model.k = 0.9\nmodel.c = 0\nmu = 0.3\n",
        tmp.path(),
        &["--out", out.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("(A3)"), "{err}");
    assert!(err.contains("γ₁−μ > K violated: 0.7 ≤ 0.9"), "{err}");
    assert!(!out.exists());
}

#[test]
fn malformed_config_names_line_and_key() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run("mu = 0.3\nsolver.tol = tiny\n", tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2") && err.contains("solver.tol"), "{err}");
}

#[test]
fn env_var_overrides_out_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let flag = tmp.path().join("flag");
    let env = tmp.path().join("env");
    let cfg = tmp.path().join("run.conf");
    fs::write(&cfg, SCALAR).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_slowfold"))
        .args(["--config", cfg.to_str().unwrap(), "--out", flag.to_str().unwrap(), "--seeds", "1"])
        .env("SLOWFOLD_OUT", &env)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(env.join("summary.json").exists());
    assert!(!flag.exists());
}

#[test]
fn strict_turns_warnings_into_failure() {
    // a single sample per seed leaves the Lipschitz quotient unmeasured
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SCALAR.replace("samples.count = 5", "samples.count = 1");
    let lax = run(&cfg, tmp.path(), &["--out", tmp.path().join("lax").to_str().unwrap()]);
    assert_eq!(lax.status.code(), Some(0));
    let strict = run(&cfg, tmp.path(), &["--out", tmp.path().join("strict").to_str().unwrap(), "--strict"]);
    assert_eq!(strict.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&strict.stdout).contains("WARN"));
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("strict/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pass"], false);
}
