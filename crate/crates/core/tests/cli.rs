mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::small_config;
use mtts_core::trainer::{EvalMetrics, Trainer};

fn mtts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtts"))
        .args(args)
        .env_remove("MTTS_OUT")
        .env_remove("MTTS_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    std::fs::write(&path, small_config().to_json()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    for sub in ["synth-data", "train"] {
        let o = mtts(&[sub, "--config", "/no/such/config.json", "--out", "/tmp/unused"]);
        assert_eq!(code(&o), 2, "{sub}: {}", stderr(&o));
        assert!(stderr(&o).contains("/no/such/config.json"));
    }
}

#[test]
fn malformed_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(&path, "{\"train\": {\"batch_size\": 3}}").unwrap();
    let o = mtts(&["train", "--config", s(&path), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("batch"), "{}", stderr(&o));
}

#[test]
fn synth_data_lists_every_item_once_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = mtts(&["synth-data", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["dataset.json", "dataset.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("dataset.json")).unwrap()).unwrap();
    let mut ids: Vec<u64> = manifest["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["id"].as_u64().unwrap())
        .collect();
    let n = small_config().corpus.n_speakers * small_config().corpus.utterances_per_speaker;
    ids.sort_unstable();
    assert_eq!(ids, (0..n as u64).collect::<Vec<_>>());
}

#[test]
fn train_resume_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("data");
    assert_eq!(code(&mtts(&["synth-data", "--config", s(&cfg), "--out", s(&data)])), 0);

    let full = tmp.path().join("full");
    let o = mtts(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&full)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trace = std::fs::read(full.join("metrics.csv")).unwrap();
    assert!(full.join("run.json").exists() && full.join("config.json").exists());

    // A run built from the config alone matches a run from the saved dataset.
    let regen = tmp.path().join("regen");
    assert_eq!(code(&mtts(&["train", "--config", s(&cfg), "--out", s(&regen)])), 0);
    assert_eq!(std::fs::read(regen.join("metrics.csv")).unwrap(), trace);

    let seeded = tmp.path().join("seeded");
    assert_eq!(code(&mtts(&["train", "--config", s(&cfg), "--out", s(&seeded), "--seed", "9"])), 0);
    assert_ne!(std::fs::read(seeded.join("metrics.csv")).unwrap(), trace);

    let part = tmp.path().join("part");
    let o = mtts(&["train", "--config", s(&cfg), "--out", s(&part), "--stop-after", "12"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = part.join("checkpoints").join("step_0000010.json");
    let o = mtts(&["train", "--config", s(&cfg), "--out", s(&part), "--resume", s(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(part.join("metrics.csv")).unwrap(), trace);

    let last = full.join("checkpoints").join("step_0000016.json");
    let report = tmp.path().join("val.json");
    let o = mtts(&["eval", "--ckpt", s(&last), "--split", "val", "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    let mut want = EvalMetrics::KEYS.to_vec();
    keys.sort_unstable();
    want.sort_unstable();
    assert_eq!(keys, want);
    assert_eq!(v["step"], 16);
    let again = mtts(&["eval", "--ckpt", s(&last), "--split", "val", "--out", s(&tmp.path().join("v2.json"))]);
    assert_eq!(stdout(&again), stdout(&o));
}

#[test]
fn env_overrides_apply_to_train() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_mtts"))
        .args(["train", "--config", s(&cfg), "--stop-after", "2"])
        .env("MTTS_OUT", &out)
        .env("MTTS_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
}

#[test]
fn unknown_split_lists_valid_ones() {
    let o = mtts(&["eval", "--ckpt", "/unused.json", "--split", "dev"]);
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    for split in ["train", "val", "test", "unseen"] {
        assert!(e.contains(split), "{e}");
    }
}

#[test]
fn fresh_checkpoint_evaluates_to_finite_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = Trainer::new(small_config())
        .unwrap()
        .checkpoint()
        .save(&tmp.path().join("fresh.json"))
        .unwrap();
    for split in ["train", "val", "test", "unseen"] {
        let o = mtts(&["eval", "--ckpt", s(&ck), "--split", split]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let v: EvalMetrics = serde_json::from_str(&stdout(&o)).unwrap();
        for x in [v.mel_mae, v.dur_mse, v.feat_mse, v.fs2, v.critic_alpha_mae] {
            assert!(x.is_finite(), "{split}: {v:?}");
        }
    }
}

#[test]
fn corrupt_and_missing_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = Trainer::new(small_config())
        .unwrap()
        .checkpoint()
        .save(&tmp.path().join("c.json"))
        .unwrap();
    let blob = ck.with_extension("bin");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[100] ^= 0x40;
    std::fs::write(&blob, bytes).unwrap();
    let o = mtts(&["eval", "--ckpt", s(&ck), "--split", "val"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));

    let o = mtts(&["eval", "--ckpt", s(&tmp.path().join("absent.json")), "--split", "val"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn gradcheck_reports_every_case_and_flags_a_perturbation() {
    let o = mtts(&["gradcheck", "--seed", "0"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    for name in mtts_core::gradcheck::case_names() {
        assert_eq!(out.lines().filter(|l| l.split_whitespace().next() == Some(&name)).count(), 1, "{name}");
    }
    let o = mtts(&["gradcheck", "--perturb", "layer_norm"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("layer_norm"));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let o = mtts(&["synth-data", "--config", s(&cfg), "--out", s(&blocker.join("sub"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let (default, _) = mtts_core::config::Config::load(&dir.join("default.json")).unwrap();
    assert_eq!(default, mtts_core::config::Config::default());
    let (small, _) = mtts_core::config::Config::load(&dir.join("small.json")).unwrap();
    small.validate().unwrap();
    assert_eq!(small.corpus, small_config().corpus);
}
