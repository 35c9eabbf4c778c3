use std::path::Path;
use std::process::Command;

fn dart(out: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dart"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("DART_SEED")
        .output()
        .expect("binary runs")
}

fn run_dirs(out: &Path) -> Vec<std::path::PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn gen_data_twice_gives_identical_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    for _ in 0..2 {
        let o = dart(tmp.path(), &["--seed", "42", "gen-data", "--scale", "0.03"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let dirs = run_dirs(tmp.path());
    assert_eq!(dirs.len(), 2);
    let a = std::fs::read_to_string(dirs[0].join("manifest.json")).unwrap();
    let b = std::fs::read_to_string(dirs[1].join("manifest.json")).unwrap();
    assert_eq!(a, b);
    let m: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["seed"], 42);
    let outputs = m["outputs"].as_array().unwrap();
    // Every listed artifact exists.
    for o in outputs {
        assert!(dirs[0].join(o["path"].as_str().unwrap()).is_file());
    }
    assert!(outputs.iter().any(|o| o["path"] == "data/dataset.json"));
}

#[test]
fn env_seed_is_a_fallback() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dart"))
        .arg("--out")
        .arg(tmp.path())
        .args(["gen-data", "--scale", "0.03"])
        .env("DART_SEED", "7")
        .output()
        .unwrap();
    assert!(o.status.success());
    let dir = &run_dirs(tmp.path())[0];
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 7);
}

#[test]
fn usage_errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(!dart(tmp.path(), &["no-such-command"]).status.success());
    assert!(!dart(tmp.path(), &["gen-data", "--bogus-flag"]).status.success());
    let o = dart(tmp.path(), &["--set", "vit_dim", "gen-data"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("KEY=VALUE"));
    let o = dart(tmp.path(), &["--set", "no_such_key=1", "gen-data"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
}

#[test]
fn missing_input_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent.jsonl");
    let o = dart(tmp.path(), &["eval-severity", "--embeddings", missing.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.jsonl"));
    let o = dart(tmp.path(), &["embed", "--checkpoint", "nowhere.ckpt"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.ckpt"));
}
