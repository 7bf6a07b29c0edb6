//! End-to-end runs of the `catsg` binary on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use catsg::bundle::SeriesBundle;
use catsg::pipeline::RunManifest;

const TINY: &str = r#"{
  "dataset": {"train": 24, "val": 8, "test": 8, "horizon_steps": 16},
  "model": {
    "k": 2, "h": 4, "top_k": 2, "diffusion_steps": 50,
    "unet": {"base": 4, "mults": [1, 2], "blocks_per_level": 1, "groups": 2}
  },
  "train": {"steps": 3, "warmup_steps": 2, "batch_size": 8, "log_every": 0},
  "sample": {"steps": 3},
  "eval": {"metrics": ["mdd", "kl", "mmd", "jftsd"], "embedder": {"dim": 4, "width": 4, "steps": 3, "batch_size": 8}},
  "diagnose": {"grid": 10, "bins": 3},
  "seed": 3
}"#;

fn catsg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catsg"))
        .args(args)
        .env("CATSG_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = catsg(args);
    assert!(
        out.status.success(),
        "catsg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_run_is_reproducible_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["run", "--config", &cfg, "--out", s(&a)]);
    ok(&["run", "--config", &cfg, "--out", s(&b)]);

    let manifest = RunManifest::load(&a).unwrap().unwrap();
    assert!(manifest.stages.iter().all(|r| r.completed));
    assert_eq!(manifest.stages.len(), 5);
    for name in ["report_int.json", "report_cf.json"] {
        let ra = fs::read(a.join(name)).unwrap();
        assert_eq!(ra, fs::read(b.join(name)).unwrap(), "{name} differs between runs");
        let report: serde_json::Value = serde_json::from_slice(&ra).unwrap();
        for metric in ["mdd", "kl", "mmd", "jftsd"] {
            assert!(report[metric]["value"].as_f64().unwrap().is_finite());
        }
    }
    assert!(a.join("diagnostics/curves.csv").exists());

    // Rerunning skips every completed stage and leaves the outputs untouched.
    let ckpt_before = fs::metadata(a.join("model.ckpt")).unwrap().modified().unwrap();
    ok(&["run", "--config", &cfg, "--out", s(&a)]);
    assert_eq!(fs::metadata(a.join("model.ckpt")).unwrap().modified().unwrap(), ckpt_before);

    // A changed config must not reuse the directory.
    let out = catsg(&["run", "--config", &cfg, "--seed", "4", "--out", s(&a)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn interrupted_run_resumes_from_the_failed_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let dir = tmp.path().join("run");
    ok(&["run", "--config", &cfg, "--stages", "data,train", "--out", s(&dir)]);
    let m = RunManifest::load(&dir).unwrap().unwrap();
    assert!(m.completed(catsg::pipeline::Stage::Train));
    assert!(!m.completed(catsg::pipeline::Stage::Sample));
    ok(&["run", "--config", &cfg, "--out", s(&dir)]);
    let m = RunManifest::load(&dir).unwrap().unwrap();
    assert!(catsg::pipeline::Stage::ALL.iter().all(|&st| m.completed(st)));
}

#[test]
fn subcommands_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let p = |name: &str| tmp.path().join(name);
    ok(&["gen-data", "--config", &cfg, "--scenario", "VP", "--out", s(&p("data"))]);
    ok(&["train", "--config", &cfg, "--data", s(&p("data")), "--out", s(&p("model.ckpt"))]);
    ok(&[
        "sample", "--ckpt", s(&p("model.ckpt")), "--data", s(&p("data")), "--mode", "obs", "--steps", "3",
        "--out", s(&p("obs")),
    ]);
    ok(&[
        "sample", "--ckpt", s(&p("model.ckpt")), "--data", s(&p("data")), "--mode", "int", "--omega", "0",
        "--steps", "3", "--out", s(&p("int0")),
    ]);
    let x = |name: &str| SeriesBundle::read(&p(name)).unwrap().split("test").unwrap().x.clone();
    assert_eq!(x("obs"), x("int0"));

    ok(&[
        "sample", "--ckpt", s(&p("model.ckpt")), "--data", s(&p("data")), "--mode", "cf", "--steps", "3",
        "--action", r#"{"edits": [{"channel": "position", "op": "add", "value": 0.5}]}"#, "--out", s(&p("cf")),
    ]);
    ok(&[
        "eval", "--config", &cfg, "--real", s(&p("data")), "--gen", s(&p("cf")), "--metrics", "mdd,kl",
        "--out", s(&p("report.json")),
    ]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("report.json")).unwrap()).unwrap();
    assert_eq!(report.as_object().unwrap().len(), 2);

    ok(&["diagnose", "--data", s(&p("data")), "--context", "velocity", "--grid", "8", "--bins", "3", "--out", s(&p("diag.csv"))]);
    assert!(p("diag_bins.csv").exists());

    ok(&["embed-export", "--ckpt", s(&p("model.ckpt")), "--data", s(&p("data")), "--out", s(&p("emb.csv"))]);
    let emb = fs::read_to_string(p("emb.csv")).unwrap();
    assert_eq!(emb.lines().next().unwrap(), "sample_id,split,h_0,h_1,h_2,h_3,w_0,w_1");
    assert_eq!(emb.lines().count(), 1 + 24 + 8 + 8);

    ok(&[
        "sweep", "--config", &cfg, "--kind", "steps", "--data", s(&p("data")), "--ckpt", s(&p("model.ckpt")),
        "--sweep.steps", "[2,4]", "--out", s(&p("sweep")),
    ]);
    assert!(p("sweep/steps_2.json").exists() && p("sweep/steps_4.json").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("x");
    // Unknown config key.
    assert_eq!(catsg(&["gen-data", "--model.nope", "1", "--out", s(&out)]).status.code(), Some(2));
    // Bad value type.
    assert_eq!(catsg(&["gen-data", "--seed", "abc", "--out", s(&out)]).status.code(), Some(2));
    // Unknown subcommand.
    assert_eq!(catsg(&["frobnicate"]).status.code(), Some(2));
    // Missing data.
    let missing = tmp.path().join("missing");
    assert_eq!(
        catsg(&["train", "--config", &cfg, "--data", s(&missing), "--out", s(&out)]).status.code(),
        Some(3)
    );
    // Missing CSV column.
    let csv = tmp.path().join("bad.csv");
    fs::write(&csv, "a,b\n1,2\n").unwrap();
    assert_eq!(
        catsg(&["ingest", "--spec", "traffic", "--csv", s(&csv), "--out", s(&out)]).status.code(),
        Some(3)
    );
}
