use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ckbg::kernel_prior::{BankMetadata, KernelBank, KernelSlice};
use serde_json::Value;

fn ckbg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ckbg"))
        .args(args)
        .env("CKBG_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = ckbg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        Fixture {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Small run config: tiny network, short training, a small eval set.
    fn config(&self) -> PathBuf {
        let path = self.path("run.json");
        std::fs::write(
            &path,
            r#"{
                "net": {"channels": 4, "num_bgb": 2, "graft": {"inner": 2}},
                "kmeans": {"clusters": 4, "max_iter": 5},
                "train": {"iterations": 3, "batch": 2, "patch": 16, "frames": 3},
                "eval": {"sequences": 1, "frames": 3, "hr_height": 48, "hr_width": 48},
                "bench": {"timing": {"warmup": 1, "runs": 3}}
            }"#,
        )
        .unwrap();
        path
    }

    fn bank(&self) -> PathBuf {
        let path = self.path("bank.ckbg");
        ok_json(&["synth-bank", "--layers", "1", "--channels", "6", "--out", p(&path)]);
        path
    }

    fn basis(&self) -> PathBuf {
        let cfg = self.config();
        let bank = self.bank();
        let out = self.path("prior");
        ok_json(&["prior", "--bank", p(&bank), "--out", p(&out), "--config", p(&cfg)]);
        out.join("basis.json")
    }
}

#[test]
fn help_lists_every_subcommand() {
    let out = ckbg(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in [
        "bank-info", "prior", "demo-bary1d", "build", "train", "reparam", "infer", "bench", "score",
    ] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
}

#[test]
fn bank_info_counts_and_rejects_corrupt_files() {
    let f = Fixture::new();
    let bank = f.bank();
    let v = ok_json(&["bank-info", p(&bank), "--json"]);
    assert_eq!(v["count"], 36);
    assert_eq!(v["k"], 3);
    let again: Value = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
    assert_eq!(again, v);

    let bad = f.path("bad.ckbg");
    let mut bytes = std::fs::read(&bank).unwrap();
    bytes.truncate(bytes.len() - 5);
    std::fs::write(&bad, bytes).unwrap();
    let out = ckbg(&["bank-info", p(&bad)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn prior_on_duplicated_kernels_reaches_zero_objective() {
    let f = Fixture::new();
    let protos = [
        vec![0.0, 1.0, 0.0, 1.0, 4.0, 1.0, 0.0, 1.0, 0.0],
        vec![1.0, 0.0, -1.0, 2.0, 0.0, -2.0, 1.0, 0.0, -1.0],
        vec![0.5, 0.5, 0.5, 0.0, 0.0, 0.0, -0.5, -0.5, -0.5],
    ];
    let kernels = (0..12)
        .map(|i| KernelSlice::new(protos[i % 3].clone(), 3).unwrap())
        .collect();
    let meta = BankMetadata {
        teacher_id: "dup".into(),
        layers: vec![],
    };
    let bank = f.path("dup.ckbg");
    KernelBank::new(kernels, meta).unwrap().write(&bank).unwrap();
    let out = f.path("prior");
    let v = ok_json(&["prior", "--bank", p(&bank), "--out", p(&out), "--clusters", "3"]);
    assert!(v["final_objective"].as_f64().unwrap().abs() < 1e-9);
    let probs = (v["probs_sum"].as_f64().unwrap() - 1.0).abs();
    assert!(probs <= 1e-9);
}

#[test]
fn prior_is_byte_deterministic() {
    let f = Fixture::new();
    let bank = f.bank();
    let (a, b) = (f.path("a"), f.path("b"));
    for out in [&a, &b] {
        ok_json(&["prior", "--bank", p(&bank), "--out", p(out), "--clusters", "4", "--seed", "3"]);
    }
    for name in ["centroids.json", "basis.json"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap()
        );
    }
    let basis: Value = serde_json::from_slice(&std::fs::read(a.join("basis.json")).unwrap()).unwrap();
    let sum: f64 = basis["probs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert!((sum - 1.0).abs() <= 1e-9);
}

#[test]
fn demo_csv_shows_one_barycenter_mode() {
    let f = Fixture::new();
    let csv = f.path("demo.csv");
    let v = ok_json(&["demo-bary1d", "--out", p(&csv)]);
    assert_eq!(v["barycenter_modes"], 1);
    assert!(v["euclidean_modes"].as_u64().unwrap() >= 2);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let (ie, ib) = (header.len() - 2, header.len() - 1);
    let (mut se, mut sb, mut rows) = (0.0, 0.0, 0);
    for line in lines {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        se += cols[ie];
        sb += cols[ib];
        rows += 1;
    }
    assert_eq!(rows, 256);
    assert!((se - 1.0).abs() < 1e-6 && (sb - 1.0).abs() < 1e-6);
}

/// Reads every PPM of a directory as raw bytes.
fn ppm_dir(dir: &Path) -> Vec<Vec<u8>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    paths.sort();
    paths.iter().map(|p| std::fs::read(p).unwrap()).collect()
}

#[test]
fn build_train_reparam_infer_pipeline() {
    let f = Fixture::new();
    let cfg = f.config();
    let basis = f.basis();
    let (m0, m1) = (f.path("m0.ckbm"), f.path("m1.ckbm"));
    let built = ok_json(&["build", "--basis", p(&basis), "--out", p(&m0), "--config", p(&cfg)]);
    assert_eq!(built["config"]["net"]["channels"], 4);
    ok_json(&["build", "--basis", p(&basis), "--out", p(&m1), "--config", p(&cfg)]);
    assert_eq!(std::fs::read(&m0).unwrap(), std::fs::read(&m1).unwrap());

    let trained = f.path("t.ckbm");
    let csv = f.path("loss.csv");
    let report = f.path("train.json");
    let t = ok_json(&[
        "train", "--model", p(&m0), "--out", p(&trained), "--config", p(&cfg),
        "--loss-csv", p(&csv), "--report", p(&report),
    ]);
    assert_eq!(t["iterations"], 3);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);
    assert!(report.exists());

    let deploy = f.path("d.ckbm");
    ok_json(&["reparam", "--model", p(&trained), "--out", p(&deploy)]);

    let lr = f.path("lr");
    ok_json(&["synth-frames", "--out", p(&lr), "--frames", "10", "--size", "32"]);
    let (sr_t, sr_d) = (f.path("sr_t"), f.path("sr_d"));
    let a = ok_json(&["infer", "--model", p(&trained), "--frames", p(&lr), "--out", p(&sr_t)]);
    ok_json(&["infer", "--model", p(&deploy), "--frames", p(&lr), "--out", p(&sr_d)]);
    assert_eq!(a["frames"], 10);
    assert_eq!(a["output_size"], serde_json::json!([128, 128]));
    let (ta, da) = (ppm_dir(&sr_t), ppm_dir(&sr_d));
    assert_eq!(ta.len(), 10);
    for (x, y) in ta.iter().zip(&da) {
        assert_eq!(x.len(), y.len());
        let worst = x.iter().zip(y).map(|(a, b)| a.abs_diff(*b)).max().unwrap();
        assert!(worst <= 1, "8-bit outputs differ by {worst}");
    }

    let bench = |model: &Path| {
        ok_json(&["bench", "--model", p(model), "--config", p(&cfg), "--future-frames", "1"])
    };
    let (bt, bd) = (bench(&trained), bench(&deploy));
    let flops = |v: &Value| v["report"]["flops"].as_u64().unwrap();
    assert!(flops(&bd) < flops(&bt));
    let t_cache = bd["report"]["t_cache_ms"].as_f64().unwrap();
    assert!((t_cache - 1000.0 / 24.0).abs() < 1e-9);
    for key in ["psnr", "ssim", "space", "params", "flops", "activations", "t_run_ms", "t_cache_ms", "score"] {
        assert!(bd["report"].get(key).is_some(), "report lacks {key}");
    }
}

#[test]
fn training_is_reproducible_under_seed() {
    let f = Fixture::new();
    let cfg = f.config();
    let run = |name: &str| {
        let out = f.path(name);
        ok_json(&[
            "train", "--mode", "no-graft", "--out", p(&out), "--config", p(&cfg), "--seed", "5",
        ]);
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("a.ckbm"), run("b.ckbm"));
}

#[test]
fn score_subcommand() {
    let v = ok_json(&["score", "--psnr", "20", "--time-ms", "1"]);
    assert!((v["score"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(!ckbg(&["score", "--psnr", "20", "--time-ms", "0"]).status.success());
}

#[test]
fn missing_basis_is_an_error() {
    let f = Fixture::new();
    let out = ckbg(&["build", "--out", p(&f.path("m.ckbm"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--basis"));
}
