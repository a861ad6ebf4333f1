use std::path::Path;

use serde_json::{json, Value};
use vcsl_cli::checkpoint::{Checkpoint, VERSION};
use vcsl_cli::commands::{read_metrics, CHECKPOINT_FILE, LOCK_FILE, METRICS_FILE};
use vcsl_cli::{run_with, RunConfig};
use vcsl_core::training::ModelConfig;
use vcsl_core::ModelState64;

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str], seed: Option<&str>) -> Outcome {
    let argv = std::iter::once("vcsl").chain(args.iter().copied()).map(Into::into);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with(argv, seed, &mut out, &mut err);
    Outcome { code, stdout: String::from_utf8(out).unwrap(), stderr: String::from_utf8(err).unwrap() }
}

fn last_json(stderr: &str) -> Value {
    serde_json::from_str(stderr.lines().last().unwrap()).unwrap()
}

fn tiny_config() -> Value {
    json!({
        "corpus": { "volumes_per_dataset": [10, 10], "slices": 4, "extent": 8, "classes": 2 },
        "encoder": { "channels": [4, 8], "taps": 2, "feature_width": 8, "embed_dim": 8, "input_extent": 8 },
        "attention": { "blocks": 2, "heads": 2, "ffn_hidden": 8 },
        "losses": { "prototypes": 5 },
        "train": { "epochs": 2, "slice_batch": 16, "volume_batch": 4, "slices_per_volume": 2 },
        "probe": { "epochs": 5 }
    })
}

fn write_config(dir: &Path, v: &Value) -> String {
    let p = dir.join("config.in.json");
    std::fs::write(&p, v.to_string()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn info_lists_schema_and_preset() {
    let o = run(&["info"], None);
    assert_eq!(o.code, 0);
    assert!(o.stdout.contains(env!("CARGO_PKG_VERSION")));
    assert!(o.stdout.contains("\"temperature\""));
    assert!(o.stdout.contains("not exercised by tests"));
    assert!(o.stdout.contains("losses.prototypes") && o.stdout.contains("3000"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["info", "--bogus"], None);
    assert_eq!(o.code, 2);
    assert_eq!(last_json(&o.stderr)["error"], "usage");
    assert_eq!(run(&["pretrain", "--stage", "4", "--out", "x"], None).code, 2);
}

#[test]
fn schema_violations_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    for (doc, pointer) in [
        (json!({ "train": { "epochs": "many" } }), "/train/epochs"),
        (json!({ "train": { "learning_rate": -1.0 } }), "/train/learning_rate"),
        (json!({ "corpus": { "volumes_per_dataset": [1, "x"] } }), "/corpus/volumes_per_dataset/1"),
        (json!({ "mask": { "ratio": 0.0 } }), "/mask/ratio"),
        (json!({ "encoder": { "input_extent": 16 } }), "/encoder/input_extent"),
    ] {
        let cfg = write_config(dir.path(), &doc);
        let o = run(&["--config", &cfg, "info"], None);
        assert_eq!(o.code, 3, "{doc}");
        let err = last_json(&o.stderr);
        assert_eq!(err["error"], "schema");
        assert_eq!(err["pointer"], pointer, "{err}");
    }
    let cfg = write_config(dir.path(), &json!({ "train": { "bogus": 1 } }));
    let o = run(&["--config", &cfg, "info"], None);
    assert_eq!(o.code, 3);
    assert!(last_json(&o.stderr)["message"].as_str().unwrap().contains("bogus"));
}

#[test]
fn config_round_trips() {
    let cfg: RunConfig = serde_json::from_value(tiny_config()).unwrap();
    assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    assert_eq!(RunConfig::from_json(&RunConfig::default().to_json()).unwrap(), RunConfig::default());
}

#[test]
fn resolved_config_and_seed_override_logged_first() {
    let o = run(&["info"], Some("77"));
    let first: Value = serde_json::from_str(o.stderr.lines().next().unwrap()).unwrap();
    assert_eq!(first["event"], "resolved_config");
    assert_eq!(first["seeds"]["train"], 77);
    assert_eq!(first["seeds"]["train_source"], "VCSL_SEED");
    assert_eq!(first["config"]["train"]["seed"], 77);
    assert_eq!(run(&["info"], Some("seven")).code, 3);
}

#[test]
fn stage_two_needs_stage_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let out = dir.path().join("run");
    let o = run(&["--config", &cfg, "pretrain", "--stage", "2", "--out", out.to_str().unwrap()], None);
    assert_eq!(o.code, 3);
    let err = last_json(&o.stderr);
    assert_eq!(err["error"], "prerequisite");
    assert!(err["message"].as_str().unwrap().contains("stage 1"), "{err}");
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    std::fs::write(dir.path().join(LOCK_FILE), "1").unwrap();
    let o = run(&["--config", &cfg, "pretrain", "--stage", "1", "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(o.code, 3);
    assert_eq!(last_json(&o.stderr)["error"], "locked");
}

#[test]
fn three_stages_probe_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    for stage in ["1", "2", "3"] {
        let o = run(&["--config", &cfg, "pretrain", "--stage", stage, "--out", out], None);
        assert_eq!(o.code, 0, "{}", o.stderr);
    }
    let records = read_metrics(&Path::new(out).join(METRICS_FILE)).unwrap();
    assert_eq!(records.len(), 6);
    assert_eq!(records.iter().map(|r| r.stage).collect::<Vec<_>>(), vec![1, 1, 2, 2, 3, 3]);
    assert!(records.iter().all(|r| r.wall_ms == 0 && r.loss.is_finite()));
    assert!(!Path::new(out).join(LOCK_FILE).exists());

    let o = run(&["--config", &cfg, "probe", "--out", out, "--source", "volume"], None);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let report: Value = serde_json::from_str(o.stdout.trim()).unwrap();
    assert_eq!(report["source"], "volume");
    assert_eq!(report["chance"], 0.5);

    let o = run(&["--config", &cfg, "export-metrics", "--out", out, "--format", "csv"], None);
    assert_eq!(o.code, 0);
    let lines: Vec<&str> = o.stdout.lines().collect();
    assert_eq!(lines[0], "stage,epoch,loss,wall_ms,seed");
    assert_eq!(lines.len(), 7);
}

#[test]
fn gen_corpus_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let a = run(&["--config", &cfg, "gen-corpus", "--out", dir.path().join("a").to_str().unwrap()], None);
    let b = run(&["--config", &cfg, "gen-corpus", "--out", dir.path().join("b").to_str().unwrap()], None);
    assert_eq!(a.code, 0);
    assert_eq!(a.stdout, b.stdout);
    let manifest: Value = serde_json::from_str(a.stdout.trim()).unwrap();
    assert_eq!(manifest["volumes"], 20);
    assert!(manifest.get("labels").is_none());
}

#[test]
fn grad_check_command_passes() {
    let o = run(&["grad-check"], None);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let report: Value = serde_json::from_str(&o.stdout).unwrap();
    assert_eq!(report["groups"].as_array().unwrap().len(), 9);
}

fn tiny_state() -> ModelState64 {
    let cfg: RunConfig = serde_json::from_value(tiny_config()).unwrap();
    let model: ModelConfig = cfg.model_config();
    ModelState64::new(&model, 3).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut state = tiny_state();
    state.progress.stages_done = [true, true, false];
    state.progress.stage = 2;
    state.progress.epoch = 9;
    let path = dir.path().join(CHECKPOINT_FILE);
    Checkpoint::capture(&state, 42).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.corpus_seed, 42);
    let mut fresh =
        ModelState64::new(&serde_json::from_value::<RunConfig>(tiny_config()).unwrap().model_config(), 99).unwrap();
    loaded.restore(&mut fresh).unwrap();
    assert_eq!(fresh.progress, state.progress);
    for ((na, a), (nb, b)) in state.named_tensors().into_iter().zip(fresh.named_tensors()) {
        assert_eq!(na, nb);
        assert!(a.bit_eq(b), "{na}");
    }
    assert_eq!(Checkpoint::capture(&fresh, 42).to_bytes(), std::fs::read(&path).unwrap());
}

#[test]
fn checkpoint_rejects_bad_input() {
    let bytes = Checkpoint::capture(&tiny_state(), 1).to_bytes();
    let mut wrong_version = bytes.clone();
    wrong_version[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    let e = Checkpoint::from_bytes(&wrong_version).unwrap_err().to_string();
    assert!(e.contains("version"), "{e}");
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad_magic).is_err());
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 1;
    assert!(Checkpoint::from_bytes(&flipped).unwrap_err().to_string().contains("checksum"));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}
