use std::path::Path;
use std::process::{Command, Output};

use omkit_cli::config::parse_config;
use omkit_cli::manifest::{config_hash, sha256_hex};
use serde_json::Value;

fn omkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omkit")).args(args).output().unwrap()
}

fn error_of(o: &Output) -> Value {
    let v: Value = serde_json::from_slice(&o.stderr).unwrap_or_else(|_| panic!("stderr: {}", String::from_utf8_lossy(&o.stderr)));
    v["error"].clone()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn linear_path(dir: &Path) -> String {
    let mut s = String::from("t,phi1_1,phi2_1\n");
    for k in 0..=100 {
        let t = k as f64 / 100.0;
        s += &format!("{t},{},{t}\n", t * t / 2.0);
    }
    write(dir, "lin.csv", &s)
}

#[test]
fn usage_errors_exit_with_two() {
    let o = omkit(&["mpp", "--preset", "ou", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_of(&o)["category"], "usage");

    let o = omkit(&["action", "--preset", "ou", "--config", "x.toml", "--path", "p.csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn schema_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "p = \"x2\"\nq = \"-x2\"\nsigma = 2\n");
    let path = linear_path(dir.path());
    let o = omkit(&["action", "--config", &cfg, "--path", &path]);
    assert_eq!(o.status.code(), Some(1));
    let e = error_of(&o);
    assert_eq!(e["category"], "schema");
    assert_eq!(e["key"], "sigma");

    let cfg = write(dir.path(), "moment.toml", "p = \"x2\"\nq = \"-M3\"\nmoments = 1\n");
    let e = error_of(&omkit(&["action", "--config", &cfg, "--path", &path]));
    assert_eq!(e["category"], "schema");
    assert_eq!(e["key"], "q[0]");

    let cfg = write(dir.path(), "syntax.toml", "p = \"x2\"\nq = [\n");
    let e = error_of(&omkit(&["action", "--config", &cfg, "--path", &path]));
    assert_eq!(e["category"], "schema");
    assert!(e["offset"].is_u64());
}

#[test]
fn unknown_preset_and_missing_files() {
    let e = error_of(&omkit(&["simulate", "--preset", "nope"]));
    assert_eq!(e["category"], "schema");
    let o = omkit(&["action", "--preset", "ou", "--path", "/nonexistent/p.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_of(&o)["category"], "io");
}

#[test]
fn core_errors_keep_their_category() {
    let dir = tempfile::tempdir().unwrap();
    let path = linear_path(dir.path());
    let o = omkit(&["tube", "--preset", "ou-degenerate", "--path", &path, "--eps", "0.5", "--norm", "lp:0.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_of(&o)["category"], "usage");
    let o = omkit(&["action", "--preset", "ou-degenerate", "--path", &path, "--form", "nondegenerate"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_of(&o)["category"], "unsupported");
}

#[test]
fn failed_checks_report_on_stderr() {
    let o = omkit(&["pinv-check", "--trials", "20", "--tol", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_of(&o)["category"], "check");
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v.is_object());
}

#[test]
fn hand_integrable_action_from_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = linear_path(dir.path());
    let o = omkit(&["action", "--preset", "ou-degenerate", "--path", &path]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["total"].as_f64().unwrap() + 2.0 / 3.0).abs() < 1e-3);
    let g: Value = serde_json::from_slice(&omkit(&["action", "--preset", "ou-degenerate", "--path", &path, "--form", "global"]).stdout).unwrap();
    assert!((g["total"].as_f64().unwrap() - v["total"].as_f64().unwrap()).abs() < 1e-10);
}

#[test]
fn manifest_lists_every_output_with_its_hash() {
    let dir = tempfile::tempdir().unwrap();
    let text = "p = \"x2\"\nq = \"-x2 + 0.5*sin(x1)\"\nx0 = [0.0, 0.2]\nT = 0.5\n";
    let cfg = write(dir.path(), "p.toml", text);
    let out = dir.path().join("run");
    let o = omkit(&["simulate", "--config", &cfg, "--particles", "50", "--seed", "3", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let m: Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["subcommand"], "simulate");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(m["parameters"]["particles"], 50);
    assert_eq!(m["config_hash"], config_hash(&parse_config(text).unwrap()));

    let mut listed: Vec<String> = Vec::new();
    for f in m["outputs"].as_array().unwrap() {
        let name = f["name"].as_str().unwrap();
        let bytes = std::fs::read(out.join(name)).unwrap();
        assert_eq!(f["sha256"], sha256_hex(&bytes), "{name}");
        listed.push(name.to_string());
    }
    for e in std::fs::read_dir(&out).unwrap() {
        let name = e.unwrap().file_name().into_string().unwrap();
        assert!(name == "manifest.json" || listed.contains(&name), "{name} not listed");
    }
    assert!(listed.iter().any(|n| n == "moments.csv"));
}

#[test]
fn worker_count_does_not_change_results() {
    let run = |w: &str| omkit(&["simulate", "--preset", "ou-degenerate", "--particles", "64", "--horizon", "0.3", "--workers", w]).stdout;
    assert_eq!(run("1"), run("4"));
}

#[test]
fn mpp_output_feeds_back_into_action() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mpp");
    let o = omkit(&["mpp", "--preset", "ou-degenerate", "--end", "0.3,0.1", "--steps", "200", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let best = v["best"]["action"]["total"].as_f64().unwrap();
    let path = out.join("mpp_path.csv");
    let a: Value = serde_json::from_slice(&omkit(&["action", "--preset", "ou-degenerate", "--path", path.to_str().unwrap()]).stdout).unwrap();
    assert!((a["total"].as_f64().unwrap() - best).abs() < 1e-6 * (1.0 + best.abs()), "{a} vs {best}");
}
