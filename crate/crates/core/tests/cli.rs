use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowlab::checkpoint::Checkpoint;
use flowlab::denoiser::{CountingDenoiser, PredTarget};
use flowlab::eval::generate_pools;
use flowlab::sample::{SamplerKind, SamplerOptions};
use sha2::{Digest, Sha256};

fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_flowlab"))
}

fn flowlab(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = flowlab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(args: &[&str]) -> String {
    let out = flowlab(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "multi-line error: {err}");
    err.trim_end().to_owned()
}

fn sha(p: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(p).unwrap()).to_vec()
}

struct Run {
    dir: tempfile::TempDir,
    cfg: String,
}

impl Run {
    fn p(&self, s: &str) -> String {
        self.dir.path().join(s).to_str().unwrap().to_owned()
    }
}

fn tiny(extra: serde_json::Value) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = serde_json::json!({
        "seed": 3,
        "corpus": {"task": "copy", "n": 50, "min_len": 3, "max_len": 5, "vocab_size": 8},
        "model": {"dim": 8, "hidden": 16, "layers": 1, "heads": 2, "max_len": 16},
        "pretrain": {"max_steps": 10, "batch_size": 8, "diffusion_steps": 20, "warmup_steps": 2},
        "finetune": {"max_steps": 6, "batch_size": 8, "warmup_steps": 2},
        "sampler": {"steps": 2},
        "probe_size": 8
    });
    if let serde_json::Value::Object(m) = extra {
        for (k, v) in m {
            cfg[k] = v;
        }
    }
    let path = dir.path().join("cfg.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let cfg = path.to_str().unwrap().to_owned();
    Run { dir, cfg }
}

fn pretrain(r: &Run) {
    ok(&["corpus", "--config", &r.cfg, "--out", &r.p("data")]);
    ok(&["pretrain", "--config", &r.cfg, "--data", &r.p("data"), "--out", &r.p("diff.ckpt")]);
}

#[test]
fn copy_pipeline_emits_every_output() {
    let r = tiny(serde_json::json!({}));
    pretrain(&r);
    let c = r.cfg.as_str();
    ok(&["finetune", "--config", c, "--data", &r.p("data"), "--teacher", &r.p("diff.ckpt"), "--out", &r.p("flow.ckpt")]);
    ok(&[
        "sample", "--config", c, "--checkpoint", &r.p("flow.ckpt"), "--vocab", &r.p("data/vocab.txt"), "--input",
        &r.p("data/test.jsonl"), "--mbr", "2", "--out", &r.p("out.jsonl"),
    ]);
    let metrics = ok(&[
        "eval", "--config", c, "--input", &r.p("out.jsonl"), "--references", &r.p("data/test.jsonl"), "--mbr", "2",
        "--out", &r.p("metrics.csv"),
    ]);
    assert!(metrics.starts_with("mbr_n,bleu,rouge_l,dist1,n_samples\n1,"));
    assert_eq!(fs::read_to_string(r.p("metrics.csv")).unwrap().lines().count(), 3);

    let before = (sha(Path::new(&r.p("flow.ckpt"))), sha(Path::new(&r.p("diff.ckpt"))));
    let summary = ok(&[
        "diagnose", "--config", c, "--data", &r.p("data"), "--checkpoint", &r.p("flow.ckpt"), "--teacher",
        &r.p("diff.ckpt"), "--log", &r.p("flow.ckpt.log"), "--out", &r.p("diag"),
    ]);
    assert!(summary.contains("quartile loss flow"));
    for f in ["quartiles.csv", "timing.csv", "straightness.csv", "grad_norms.csv"] {
        assert!(fs::metadata(r.dir.path().join("diag").join(f)).unwrap().len() > 0, "{f}");
    }
    // diagnostics never write to checkpoints
    let after = (sha(Path::new(&r.p("flow.ckpt"))), sha(Path::new(&r.p("diff.ckpt"))));
    assert_eq!(before, after);

    let out = fs::read_to_string(r.p("out.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(out.lines().next().unwrap()).unwrap();
    assert!(first["trg"].is_string());
    assert_eq!(first["candidates"].as_array().unwrap().len(), 2);
}

#[test]
fn failures_are_one_categorised_line() {
    let r = tiny(serde_json::json!({}));
    pretrain(&r);
    let c = r.cfg.as_str();

    fs::write(r.p("other_vocab.txt"), "<pad>\n<sep>\n</s>\n<unk>\nzz\n").unwrap();
    let e = error_line(&[
        "sample", "--config", c, "--checkpoint", &r.p("diff.ckpt"), "--vocab", &r.p("other_vocab.txt"), "--input",
        &r.p("data/test.jsonl"), "--out", &r.p("x.jsonl"),
    ]);
    assert!(e.starts_with("error: vocab-mismatch: "), "{e}");

    let bad = r.dir.path().join("bad.json");
    fs::write(&bad, r#"{"seed": 1, "learning_rate": 3}"#).unwrap();
    let e = error_line(&["corpus", "--config", bad.to_str().unwrap(), "--out", &r.p("d2")]);
    assert!(e.starts_with("error: config: "), "{e}");

    let e = error_line(&["eval", "--input", &r.p("missing.jsonl"), "--references", &r.p("data/test.jsonl"), "--out", &r.p("m.csv")]);
    assert!(e.starts_with("error: io: "), "{e}");
}

#[test]
fn velocity_checkpoint_refuses_average_velocity_sampler() {
    let r = tiny(serde_json::json!({"finetune": {"max_steps": 3, "batch_size": 8, "pred_target": "velocity"}}));
    pretrain(&r);
    let c = r.cfg.as_str();
    ok(&["finetune", "--config", c, "--data", &r.p("data"), "--teacher", &r.p("diff.ckpt"), "--out", &r.p("v.ckpt")]);
    let ck = Checkpoint::load(Path::new(&r.p("v.ckpt")), None).unwrap();
    assert_eq!(ck.model.pred_target, PredTarget::Velocity);
    let e = error_line(&[
        "sample", "--config", c, "--checkpoint", &r.p("v.ckpt"), "--vocab", &r.p("data/vocab.txt"), "--input",
        &r.p("data/test.jsonl"), "--sampler", "flow-avg", "--out", &r.p("x.jsonl"),
    ]);
    assert!(e.starts_with("error: pred-target-mismatch: "), "{e}");
    ok(&[
        "sample", "--config", c, "--checkpoint", &r.p("v.ckpt"), "--vocab", &r.p("data/vocab.txt"), "--input",
        &r.p("data/test.jsonl"), "--sampler", "flow-instant", "--out", &r.p("y.jsonl"),
    ]);
}

#[test]
fn one_step_sampling_is_one_forward_per_item() {
    let r = tiny(serde_json::json!({}));
    pretrain(&r);
    let ck = Checkpoint::load(Path::new(&r.p("diff.ckpt")), None).unwrap();
    let m = &ck.ema;
    let counter = CountingDenoiser::new(m);
    let sources: Vec<Vec<usize>> = (0..7)
        .map(|i| {
            let mut s = vec![0; m.config.src_len - 2];
            s.push(4 + i % 3);
            s.push(1);
            s
        })
        .collect();
    let opts = SamplerOptions {
        rescale_max: m.config.rescale_max,
        ..SamplerOptions::default()
    };
    let pools = generate_pools(&counter, &m.table, &opts, &sources, m.config.tgt_len, SamplerKind::FlowAvg, 1, 1, 0, 64).unwrap();
    assert_eq!(pools.len(), 7);
    assert_eq!(counter.item_forwards(), 7);
    assert_eq!(counter.calls(), 1);
}

#[test]
fn threads_env_does_not_change_outputs() {
    let r = tiny(serde_json::json!({}));
    ok(&["corpus", "--config", &r.cfg, "--out", &r.p("data")]);
    let run = |threads: &str, out: &str| {
        let o = Command::new(bin())
            .args(["pretrain", "--config", &r.cfg, "--data", &r.p("data"), "--out", &r.p(out)])
            .env("FLOWLAB_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success());
    };
    run("1", "a.ckpt");
    run("3", "b.ckpt");
    assert_eq!(fs::read(r.p("a.ckpt")).unwrap(), fs::read(r.p("b.ckpt")).unwrap());
    let o = Command::new(bin())
        .args(["corpus", "--out", &r.p("d3")])
        .env("FLOWLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: config: "));
}
