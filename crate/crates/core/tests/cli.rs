use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const MINIMAL: &str = "seed = 3\n[grid]\nnx = [17]\nnt = 17\n[weights]\nlambdas = [1.0]\ns_values = [2.0, 4.0]\n";

fn mfg_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfg-lab")).args(args).output().expect("binary runs")
}

fn run_with(dir: &Path, cmd: &str, toml: &str, out: &Path) -> Output {
    let cfg = dir.join("config.toml");
    fs::write(&cfg, toml).unwrap();
    mfg_lab(&[cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

#[test]
fn verify_weights_writes_report_and_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("w");
    let o = run_with(tmp.path(), "verify-weights", MINIMAL, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(first_line(&out.join("weights.csv")), "lambda,s,identity,value,tolerance,passed");
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["experiment"], "verify-weights");
    assert_eq!(report["config"]["seed"], 3);
    assert_eq!(report["config"]["grid"]["nt"], 17);
    let hash = report["content_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    for f in report["outputs"].as_array().unwrap() {
        assert!(out.join(f["name"].as_str().unwrap()).is_file());
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let toml = "seed = 5\n[grid]\nnx = [17]\nnt = 17\n[ensemble]\nmembers = 3\n[state]\nrefine = false\n";
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = run_with(tmp.path(), "state-det", toml, out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["ceps.csv", "ceps_curve.csv", "ceps_curve.dat", "ceps_rhs.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let hash = |d: &Path| {
        let r: serde_json::Value = serde_json::from_slice(&fs::read(d.join("report.json")).unwrap()).unwrap();
        r["content_hash"].as_str().unwrap().to_string()
    };
    assert_eq!(hash(&a), hash(&b));
    assert_eq!(first_line(&a.join("ceps.csv")), "epsilon,member,lhs,rhs,ratio");
}

#[test]
fn seed_flag_overrides_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("s");
    let cfg = tmp.path().join("config.toml");
    fs::write(&cfg, MINIMAL).unwrap();
    let o = mfg_lab(&["verify-weights", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "42"]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seed"], 42);
}

#[test]
fn even_time_count_is_rejected_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let o = run_with(tmp.path(), "verify-weights", "seed = 1\n[grid]\nnx = [17]\nnt = 16\n", &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid.nt"));
    assert!(!out.join("report.json").exists());
}

#[test]
fn unknown_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let o = run_with(tmp.path(), "verify-weights", "seed = 1\n[grid]\nnx = [17]\nntt = 17\n", &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid.ntt"));
}

#[test]
fn missing_seed_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let o = run_with(tmp.path(), "lemma3", "[grid]\nnx = [17]\nnt = 17\n", &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn unwritable_output_fails_before_any_file_is_written() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let out = blocker.join("sub");
    let o = run_with(tmp.path(), "verify-weights", MINIMAL, &out);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("output directory"));
    assert!(!out.exists());
    assert_eq!(fs::read_to_string(&blocker).unwrap(), "not a directory");
}

#[test]
fn table_headers_are_fixed() {
    let tmp = tempfile::tempdir().unwrap();
    let toml = "seed = 2\n[grid]\nnx = [17]\nnt = 17\n[weights]\nlambdas = [1.0]\ns_values = [1.0, 2.0]\n\
                [ensemble]\nmembers = 2\n[carleman]\nrefine = false\n[lemma3]\np = [0]\n";
    let cases = [
        ("verify-carleman", "carleman.csv", "kind,lambda,s,member,lhs,rhs,ratio"),
        ("lemma3", "lemma3.csv", "kind,lambda,s,member,lhs,rhs,ratio"),
        ("reconstruct", "history.csv", "iteration,residual_sq"),
    ];
    for (cmd, file, header) in cases {
        let out = tmp.path().join(cmd);
        let o = run_with(tmp.path(), cmd, toml, &out);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(first_line(&out.join(file)), header, "{cmd}");
    }
    let dat = fs::read_to_string(tmp.path().join("reconstruct/history.dat")).unwrap();
    assert!(dat.starts_with("# iteration residual_sq"));
}
