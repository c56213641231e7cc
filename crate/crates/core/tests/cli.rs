use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

use mobilepipe::synthetic::{generate, Layout};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mobilepipe"));
    cmd.env_remove("MOBILEPIPE_OUT").env("RUST_LOG", "warn");
    cmd
}

fn workdir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// A small, quick configuration over a freshly generated synthetic set.
fn setup(name: &str, layout: Layout, arch: &str) -> (PathBuf, PathBuf) {
    let dir = workdir(name);
    let data = dir.join("data");
    generate(layout, 30, 40, 3).write(&data).unwrap();
    let config = dir.join("config.json");
    let json = serde_json::json!({
        "dataset_root": data,
        "sizes": [30],
        "k": 3,
        "archs": [arch],
        "generators": ["G1"],
        "train": {"batch_size": 10, "epochs": 30, "learning_rate": 0.01},
        "reduction": {"max_filters": 2, "max_neurons": 2, "stride": [1, 1], "tolerance": 1.0, "cv": false},
        "out_dir": dir.join("out"),
    });
    fs::write(&config, serde_json::to_string_pretty(&json).unwrap()).unwrap();
    (dir, config)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tree_hash(root: &Path) -> String {
    fn walk(dir: &Path, root: &Path, h: &mut Sha256) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            h.update(p.strip_prefix(root).unwrap().to_string_lossy().as_bytes());
            if p.is_dir() {
                walk(&p, root, h);
            } else {
                h.update(fs::read(&p).unwrap());
            }
        }
    }
    let mut h = Sha256::new();
    walk(root, root, &mut h);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn missing_dataset_root_exits_2_and_names_path() {
    let dir = workdir("missing-root");
    let missing = dir.join("no-such-dataset");
    let out = run(&["prepare", "--dataset", missing.to_str().unwrap(), "--out", dir.join("out").to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains(missing.to_str().unwrap()), "{}", stderr(&out));
}

#[test]
fn search_before_prepare_exits_2() {
    let (_, config) = setup("no-prepare", Layout::LeftRight, "d1m1@2x4");
    let out = run(&["search", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("prepare"), "{}", stderr(&out));
}

#[test]
fn prepare_is_idempotent() {
    let (dir, config) = setup("idempotent", Layout::LeftRight, "d1m1@2x4");
    let cfg = config.to_str().unwrap();
    assert_eq!(code(&run(&["prepare", "--config", cfg])), 0);
    let first = tree_hash(&dir.join("out"));
    assert_eq!(code(&run(&["prepare", "--config", cfg])), 0);
    assert_eq!(tree_hash(&dir.join("out")), first);
}

#[test]
fn reduce_rejects_fixed_width_preset() {
    let (_, config) = setup("fixed-width", Layout::LeftRight, "d2m2");
    let cfg = config.to_str().unwrap();
    for stage in ["prepare", "search"] {
        let out = run(&[stage, "--config", cfg]);
        assert_eq!(code(&out), 0, "{stage}: {}", stderr(&out));
    }
    let out = run(&["reduce", "--config", cfg]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    // Skipping the scan trains the searched architecture as is.
    let out = run(&["reduce", "--config", cfg, "--skip-reduction"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn deploy_gate_fails_on_border_signal() {
    let (_, config) = setup("gate", Layout::BorderBands, "d1m1@4x8");
    let cfg = config.to_str().unwrap();
    for stage in ["prepare", "search", "reduce", "package"] {
        let out = run(&[stage, "--config", cfg, "--skip-reduction"]);
        assert_eq!(code(&out), 0, "{stage}: {}", stderr(&out));
    }
    let out = run(&["simulate", "--config", cfg, "--deploy-threshold", "0.9"]);
    assert_eq!(code(&out), 6, "{}", stderr(&out));
    assert!(stderr(&out).contains("realtime"), "{}", stderr(&out));
    let out = run(&["simulate", "--config", cfg, "--deploy-threshold", "0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn bad_flag_value_is_a_usage_error() {
    let out = run(&["search", "--generators", "G9"]);
    assert_eq!(code(&out), 2);
}
