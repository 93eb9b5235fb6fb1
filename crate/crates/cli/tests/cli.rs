use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_conmae"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn conmae")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "conmae {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fails(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "conmae {args:?} should fail");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small enough that a full pipeline takes a second or two.
fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "seed": 3,
        "data": { "num_identities": 6, "views_per_identity": 4, "num_cameras": 2, "image_size": 32 },
        "mae": {
            "image_size": 32, "patch_size": 8, "embed_dim": 16, "depth": 1, "heads": 2, "mlp_ratio": 2,
            "decoder_dim": 8, "decoder_depth": 1, "decoder_heads": 2, "lr": 1e-3, "batch_size": 8, "epochs": 2
        },
        "reid": { "eps": 0.05, "min_samples": 2, "epochs": 2, "batch_size": 8 },
        "eval": { "chance_trials": 5 }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

struct Fixture {
    _tmp: TempDir,
    root: PathBuf,
    config: String,
    data: String,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = tiny_config(&root).display().to_string();
        let data = root.join("data").display().to_string();
        ok(&["gen-data", "--config", &config, "--out", &data]);
        Fixture {
            _tmp: tmp,
            root,
            config,
            data,
        }
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).display().to_string()
    }

    fn pretrain(&self, out: &str, extra: &[&str]) -> String {
        let out = self.path(out);
        let mut args = vec!["pretrain", "--config", &self.config, "--dataset", &self.data, "--out", &out];
        args.extend_from_slice(extra);
        ok(&args);
        format!("{out}/pretrain.ckpt")
    }
}

fn same_bytes(a: &str, b: &str) -> bool {
    let read = |p: &str| std::fs::read(p).unwrap_or_else(|e| panic!("{p}: {e}"));
    read(a) == read(b)
}

#[test]
fn missing_dataset_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let missing = tmp.path().join("nope");
    let err = fails(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        missing.to_str().unwrap(),
    ]);
    assert!(err.contains("nope"), "{err}");
}

#[test]
fn bad_config_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.json");
    std::fs::write(&path, r#"{"reid": {"lambda": 2.0}}"#).unwrap();
    let err = fails(&["gen-data", "--config", path.to_str().unwrap()]);
    assert!(err.contains("reid.lambda"), "{err}");
}

#[test]
fn missing_checkpoint_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("absent.ckpt");
    for cmd in ["eval", "train-reid"] {
        let err = fails(&[cmd, "--checkpoint", ck.to_str().unwrap()]);
        assert!(err.contains("absent.ckpt"), "{cmd}: {err}");
    }
}

#[test]
fn visualize_needs_images() {
    let tmp = tempfile::tempdir().unwrap();
    let err = fails(&["visualize", "--checkpoint", tmp.path().join("x.ckpt").to_str().unwrap()]);
    assert!(err.contains("no images"), "{err}");
}

#[test]
fn pipeline_end_to_end() {
    let fx = Fixture::new();
    let ck = fx.pretrain("pre", &[]);
    let curve = std::fs::read_to_string(fx.path("pre/pretrain_loss.jsonl")).unwrap();
    assert_eq!(curve.lines().count(), 2);
    assert!(Path::new(&fx.path("pre/pretrain_loss.png")).is_file());

    let reid_out = fx.path("reid");
    ok(&["train-reid", "--config", &fx.config, "--dataset", &fx.data, "--checkpoint", &ck, "--out", &reid_out]);
    let metrics = std::fs::read_to_string(fx.path("reid/reid_metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("num_clusters").is_some(), "{line}");
    }

    let eval_out = fx.path("eval");
    let reid_ck = fx.path("reid/reid.ckpt");
    let stdout = ok(&["eval", "--config", &fx.config, "--dataset", &fx.data, "--checkpoint", &reid_ck, "--out", &eval_out]);
    assert!(stdout.contains("mAP"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.path("eval/metrics.json")).unwrap()).unwrap();
    let map = report["mAP"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    let per_query = std::fs::read_to_string(fx.path("eval/per_query.csv")).unwrap();
    // Three test identities with one query each.
    assert_eq!(per_query.lines().count(), 1 + 3);

    let imgs: Vec<String> = ["0000_00_c0", "0001_01_c0", "0003_00_c1", "0005_02_c1"]
        .iter()
        .map(|n| format!("{}/images/{n}.png", fx.data))
        .collect();
    let (contour, random) = (fx.path("vis_contour.png"), fx.path("vis_random.png"));
    for (mode, out) in [("contour", &contour), ("random", &random)] {
        let mut args = vec!["visualize", "--config", &fx.config, "--checkpoint", &ck, "--mask-mode", mode, "--out", out];
        args.extend(imgs.iter().map(String::as_str));
        ok(&args);
    }
    // Same images, different kept-patch layout.
    assert!(!same_bytes(&contour, &random));
}

#[test]
fn resume_continues_epoch_numbering() {
    let fx = Fixture::new();
    let ck = fx.pretrain("pre", &["--epochs", "1"]);
    fx.pretrain("pre", &["--epochs", "3", "--resume", &ck]);
    let epochs: Vec<u64> = std::fs::read_to_string(fx.path("pre/pretrain_loss.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, vec![0, 1, 2]);

    // Resuming matches an uninterrupted run exactly.
    let straight = fx.pretrain("straight", &["--epochs", "3"]);
    assert!(same_bytes(&straight, &ck));
}

#[test]
fn same_seed_same_bytes() {
    let fx = Fixture::new();
    let a = fx.pretrain("a", &[]);
    let b = fx.pretrain("b", &[]);
    assert!(same_bytes(&a, &b));
    let c = fx.pretrain("c", &["--seed", "4"]);
    assert!(!same_bytes(&a, &c));

    let again = fx.path("data2");
    ok(&["gen-data", "--config", &fx.config, "--out", &again]);
    let name = "images/0005_03_c0.png";
    assert!(same_bytes(&format!("{}/{name}", fx.data), &format!("{again}/{name}")));
}

#[test]
fn hard_label_mode_runs() {
    let fx = Fixture::new();
    let ck = fx.pretrain("pre", &["--mask-mode", "random"]);
    let out = fx.path("hard");
    ok(&[
        "train-reid", "--config", &fx.config, "--dataset", &fx.data, "--checkpoint", &ck, "--out", &out,
        "--label-mode", "hard",
    ]);
    let state: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.path("hard/reid_state.json")).unwrap()).unwrap();
    // With λ = 1 every soft label is one-hot.
    for label in state["soft"].as_array().unwrap().iter().filter(|l| !l.is_null()) {
        let w = label["weights"].as_array().unwrap();
        let nonzero = w.iter().filter(|p| p.as_f64().unwrap() > 0.0).count();
        assert_eq!(nonzero, 1, "{label}");
    }
}

#[test]
fn sweep_writes_four_rows() {
    let fx = Fixture::new();
    let out = fx.path("sweep");
    ok(&["sweep-mask-rate", "--config", &fx.config, "--dataset", &fx.data, "--out", &out]);
    let csv = std::fs::read_to_string(fx.path("sweep/mask_rate_sweep.csv")).unwrap();
    let rates: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rates, ["0.55", "0.65", "0.75", "0.85"]);
    assert!(Path::new(&fx.path("sweep/mask_rate_sweep.png")).is_file());

    let again = fx.path("sweep2");
    ok(&["sweep-mask-rate", "--config", &fx.config, "--dataset", &fx.data, "--out", &again]);
    assert!(same_bytes(&fx.path("sweep/mask_rate_sweep.csv"), &fx.path("sweep2/mask_rate_sweep.csv")));
}
