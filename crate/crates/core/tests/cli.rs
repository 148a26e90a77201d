use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sparo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparo")).args(args).output().expect("spawn sparo")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

const TINY: [&str; 15] = [
    "steps=3",
    "eval_every=2",
    "batch_size=8",
    "warmup_steps=1",
    "eval_size=16",
    "image.width=8",
    "image.heads=2",
    "image.blocks=1",
    "text.width=8",
    "text.heads=2",
    "text.blocks=1",
    "sparo.slots=4",
    "data.n_train=32",
    "data.n_val=16",
    "data.n_test=16",
];

fn train_tiny(task: &str, out: &Path) {
    let mut args = vec!["train", "--task", task, "--out", out.to_str().unwrap(), "--seed", "3"];
    for kv in TINY {
        args.extend(["--set", kv]);
    }
    let o = sparo(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn clip_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    train_tiny("clip", &run);
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,loss,retrieval@1,knn_acc"));
    assert_eq!(metrics.lines().count(), 4);
    let ckpt = run.to_str().unwrap();

    let report = dir.path().join("eval.json");
    let o = sparo(&["eval", "--ckpt", ckpt, "--metrics", "retrieval@1,knn", "--out", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&report);
    assert_eq!(r["split"], "test");
    assert_eq!(r["step"], 3);
    assert!(r["metrics"]["retrieval@1"].is_object());
    assert!(r["metrics"]["knn"]["accuracy"].is_number());

    assert_eq!(code(&sparo(&["eval", "--ckpt", ckpt, "--metrics", "recall"])), 1);
    assert_eq!(code(&sparo(&["eval", "--ckpt", ckpt, "--metrics", ""])), 1);
    assert_eq!(code(&sparo(&["eval", "--ckpt", ckpt, "--metrics", "knn", "--split", "dev"])), 1);

    let slots = dir.path().join("slots.json");
    let o = sparo(&["slots", "select", "--ckpt", ckpt, "--top-k", "4", "--out", slots.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = read_json(&slots);
    assert_eq!(s["selected"], serde_json::json!([0, 1, 2, 3]));
    assert_eq!(s["scores"].as_array().unwrap().len(), 4);
    assert_eq!(code(&sparo(&["slots", "select", "--ckpt", ckpt, "--top-k", "5", "--out", slots.to_str().unwrap()])), 1);

    let o = sparo(&["slots", "score", "--ckpt", ckpt, "--out", slots.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(read_json(&slots)["k"], 0);

    let attn = dir.path().join("attn.json");
    let o = sparo(&["attn", "export", "--ckpt", ckpt, "--count", "5", "--out", attn.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let a = read_json(&attn);
    let items = a["items"].as_array().unwrap();
    assert_eq!(items.len(), 5);
    for item in items {
        let slots = item["slots"].as_array().unwrap();
        assert_eq!(slots.len(), 4);
        for s in slots {
            let w: Vec<f64> = s["weights"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    let mask = dir.path().join("mask.json");
    let o = sparo(&["mask", "train", "--ckpt", ckpt, "--epochs", "3", "--out", mask.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_json(&mask);
    assert_eq!(m["granularity"], "slot");
    assert!(m["mask"].as_array().unwrap().iter().all(|v| {
        let v = v.as_f64().unwrap();
        (0.0..=1.0).contains(&v)
    }));
}

#[test]
fn dino_rejects_text_metrics() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny("dino", dir.path());
    let ckpt = dir.path().to_str().unwrap();
    assert_eq!(code(&sparo(&["eval", "--ckpt", ckpt, "--metrics", "retrieval@1"])), 1);
    assert_eq!(code(&sparo(&["eval", "--ckpt", ckpt, "--metrics", "knn"])), 0);
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&sparo(&["train", "--task", "clip", "--out", out, "--set", "bogus=1"])), 1);
    assert_eq!(code(&sparo(&["train", "--task", "clip", "--out", out, "--set", "image.heads=5"])), 1);
    assert_eq!(code(&sparo(&["train", "--task", "clip", "--out", out, "--set", "noequals"])), 1);
    assert_eq!(code(&sparo(&["eval", "--ckpt", "/nonexistent/run", "--metrics", "knn"])), 1);
    assert_eq!(code(&sparo(&["frobnicate"])), 1);
    assert_eq!(code(&sparo(&["--help"])), 0);

    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "sparo.slots = 6\nsparo.grp_size = 4\n").unwrap();
    let o = sparo(&["train", "--task", "clip", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("grp_size"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("grad.json");
    let o = sparo(&["gradcheck", "--f64", "--out", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let r = read_json(&report);
    assert!(r.as_array().unwrap().len() >= 30);
}
