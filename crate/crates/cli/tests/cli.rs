use std::path::Path;
use std::process::{Command, Output};

fn normclash(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_normclash"))
        .args(args)
        .env_remove("NORMCLASH_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_errors() {
    let o = normclash(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("geometry"));
    assert_eq!(normclash(&["geometry", "radius", "--bogus"]).status.code(), Some(2));
    assert_eq!(normclash(&["frobnicate"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"eps_infinity": 0.1}"#).unwrap();
    let o = normclash(&["--config", path(&cfg), "--out", path(dir.path()), "geometry", "radius"]);
    assert_eq!(o.status.code(), Some(2));
    let o = normclash(&["--out", path(dir.path()), "train", "--eps-inf", "-1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn radius_and_table_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = normclash(&["--out", path(dir.path()), "geometry", "radius", "--d", "3072"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "26.8628");
    assert!(dir.path().join("radius.json").exists());
    assert!(dir.path().join("manifest.json").exists());

    let o = normclash(&["--out", path(dir.path()), "geometry", "table", "--samples", "20000"]);
    assert!(o.status.success());
    let printed = stdout(&o);
    let row: Vec<&str> = printed.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "2");
    assert!(row[5].parse::<f64>().unwrap() > 0.85);
    let table = std::fs::read_to_string(dir.path().join("dimension_table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].starts_with("# config_digest="));
    assert_eq!(lines.len(), 2 + 4);
    // Monte Carlo only where it can resolve the ratio
    let mc: Vec<bool> = lines[2..].iter().map(|l| !l.split(',').nth(5).unwrap().is_empty()).collect();
    assert_eq!(mc, [true, false, false, false]);
}

#[test]
fn seed_comes_from_flag_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed_env: Option<&str>, extra: &[&str]| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_normclash"));
        c.env_remove("NORMCLASH_SEED");
        if let Some(s) = seed_env {
            c.env("NORMCLASH_SEED", s);
        }
        let mut args = vec!["--out", path(dir.path())];
        args.extend_from_slice(extra);
        args.extend(["geometry", "mc", "--samples", "20000"]);
        stdout(&c.args(&args).output().unwrap())
    };
    let env5 = run(Some("5"), &[]);
    assert_eq!(env5, run(None, &["--seed", "5"]));
    assert_ne!(env5, run(None, &[]));
    assert_eq!(run(Some("5"), &["--seed", "6"]), run(None, &["--seed", "6"]));
    let o = Command::new(env!("CARGO_BIN_EXE_normclash"))
        .env("NORMCLASH_SEED", "abc")
        .args(["--out", path(dir.path()), "geometry", "radius"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad");
    std::fs::write(&bad, [0u8, 0, 8, 1, 0, 0, 0, 0]).unwrap();
    let spec = format!("idx:{0},{0},{0},{0}", path(&bad));
    let o = normclash(&["--out", path(dir.path()), "train", "--data", &spec]);
    assert_eq!(o.status.code(), Some(3));
    let missing = dir.path().join("nope.json");
    let o = normclash(&["--out", path(dir.path()), "eval", "--checkpoint", path(&missing)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = normclash(&[
        "--out",
        path(dir.path()),
        "train",
        "--data",
        "blobs:d=10,n=100",
        "--lr",
        "1e300",
        "--epochs",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn train_attack_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path());
    let data = "blobs:d=10,n=200,test=40,margin=0.6";
    let o = normclash(&["--out", out, "train", "--data", data, "--epochs", "3", "--defense", "at-l2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let ckpt = dir.path().join("model.json");

    let o = normclash(&["--out", out, "attack", "--checkpoint", path(&ckpt), "--data", data, "--attack", "pgd-linf"]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(dir.path().join("attack.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# config_digest="));
    assert_eq!(lines[1], "sample_id,attack,norm,epsilon,success,l2,linf,loss,iters");
    assert_eq!(lines.len(), 2 + 40);

    let o = normclash(&["--out", out, "eval", "--checkpoint", path(&ckpt), "--data", data, "--attack", "none"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("accuracy"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "eval");
    assert_eq!(manifest["inputs"]["checkpoint"].as_str().unwrap().len(), 64);
}

#[test]
fn calotte_writes_two_dat_panels() {
    let dir = tempfile::tempdir().unwrap();
    let o = normclash(&[
        "--out",
        path(dir.path()),
        "experiment",
        "calotte",
        "--data",
        "blobs:d=10,n=200,test=20",
        "--epochs",
        "2",
        "--repeats",
        "1",
        "--cw-samples",
        "6",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["calotte_before.dat", "calotte_after.dat"] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[2], "eps linf_ball callote outside");
        assert_eq!(lines.len(), 3 + 16);
        for l in &lines[3..] {
            assert_eq!(l.split_whitespace().count(), 4);
        }
    }
}
