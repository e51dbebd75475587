use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sare(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sare"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn sare")
}

fn json_file(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {text}"))
}

fn small_synth(dir: &Path, out: &str) {
    let o = sare(
        dir,
        &[
            "synth",
            "--n-places",
            "20",
            "--views",
            "4",
            "--queries",
            "2",
            "--d-in",
            "16",
            "--seed",
            "3",
            "--out",
            out,
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = sare(dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn bad_flag_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = sare(dir.path(), &["synth", "--n-places", "many"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_golden_run_writes_dataset_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    let o = sare(
        dir.path(),
        &[
            "synth",
            "--n-places",
            "100",
            "--views",
            "10",
            "--d-in",
            "64",
            "--seed",
            "7",
            "--out",
            "ds/",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ds = dir.path().join("ds");
    let rows = |name: &str| fs::read_to_string(ds.join(name)).unwrap().lines().count() - 1;
    assert_eq!(rows("database.csv"), 1000);
    let queries = rows("queries_train.csv") + rows("queries_val.csv") + rows("queries_test.csv");
    assert_eq!(queries, 300);
    let header = fs::read_to_string(ds.join("database.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap().split(',').count(), 4 + 64);

    let meta = json_file(&ds.join("run_meta.json"));
    assert_eq!(meta["command"], "synth");
    assert_eq!(meta["seed"], 7);
    assert_eq!(meta["config"]["synth"]["n_places"], 100);
    assert_eq!(meta["config"]["synth"]["view_noise_sigma"], 0.1);
    assert!(meta["versions"]["sare-core"].is_string());
    assert!(ds.join("meta.json").exists());
}

#[test]
fn identical_configs_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path(), "a");
    small_synth(dir.path(), "b");
    for name in [
        "database.csv",
        "queries_train.csv",
        "queries_val.csv",
        "queries_test.csv",
        "meta.json",
    ] {
        assert_eq!(
            fs::read(dir.path().join("a").join(name)).unwrap(),
            fs::read(dir.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }

    for run in ["ta", "tb"] {
        let o = sare(
            dir.path(),
            &[
                "train", "--data", "a", "--dim", "8", "--epochs", "3", "--n-neg", "4", "--out", run,
            ],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let o = sare(
            dir.path(),
            &[
                "eval",
                "--data",
                "a",
                "--model",
                &format!("{run}/model.ckpt"),
                "--out",
                &format!("{run}/eval"),
            ],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in [
        "model.ckpt",
        "history.json",
        "eval/metrics.json",
        "eval/topk.csv",
    ] {
        assert_eq!(
            fs::read(dir.path().join("ta").join(name)).unwrap(),
            fs::read(dir.path().join("tb").join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn gradcheck_passes_for_gaussian_joint() {
    let dir = tempfile::tempdir().unwrap();
    let o = sare(
        dir.path(),
        &[
            "gradcheck",
            "--loss",
            "sare",
            "--kernel",
            "gaussian",
            "--mode",
            "joint",
            "--trials",
            "100",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["trials"], 100);
    assert!(report["max_relative_error"].as_f64().unwrap() <= 1e-6);
    assert_eq!(json_file(&dir.path().join("gradcheck.json")), report);
    assert_eq!(
        json_file(&dir.path().join("run_meta.json"))["config"]["check"]["dim"],
        32
    );
}

#[test]
fn gradcheck_exits_3_above_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let o = sare(
        dir.path(),
        &[
            "gradcheck",
            "--loss",
            "triplet",
            "--trials",
            "5",
            "--threshold",
            "1e-300",
        ],
    );
    assert_eq!(o.status.code(), Some(3));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["passed"], false);
    assert_eq!(report["loss"]["family"], "triplet_ranking");
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"synth": {"n_places": 12, "views_per_place": 2, "d_in": 8, "seed": 3}, "out": "from_file"}"#,
    )
    .unwrap();
    let o = sare(
        dir.path(),
        &["synth", "--config", "cfg.json", "--seed", "4"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let meta = json_file(&dir.path().join("from_file/run_meta.json"));
    assert_eq!(meta["config"]["synth"]["n_places"], 12);
    assert_eq!(meta["config"]["synth"]["seed"], 4);
    assert_eq!(meta["seed"], 4);
}

#[test]
fn loss_flags_combine_with_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"loss": {"family": "sare", "kernel": "cauchy"}, "resolution": 3, "out": "gf"}"#,
    )
    .unwrap();
    let o = sare(
        dir.path(),
        &["gradfield", "--config", "cfg.json", "--mode", "independent"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let loss = &json_file(&dir.path().join("gf/run_meta.json"))["config"]["loss"];
    assert_eq!(loss["kernel"], "cauchy");
    assert_eq!(loss["mode"], "independent");
    let csv = fs::read_to_string(dir.path().join("gf/surface.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 4);

    let o = sare(
        dir.path(),
        &["gradfield", "--config", "cfg.json", "--loss", "contrastive"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let loss = &json_file(&dir.path().join("gf/run_meta.json"))["config"]["loss"];
    assert_eq!(loss["family"], "contrastive");
}

#[test]
fn unknown_keys_are_rejected_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    for (i, cfg) in [
        r#"{"synth": {"places": 5}, "out": "x"}"#,
        r#"{"bogus": 1, "out": "x"}"#,
    ]
    .iter()
    .enumerate()
    {
        let name = format!("c{i}.json");
        fs::write(dir.path().join(&name), cfg).unwrap();
        let o = sare(dir.path(), &["synth", "--config", &name]);
        assert_eq!(o.status.code(), Some(1));
        assert_eq!(stderr_error(&o)["error"]["kind"], "config");
    }
    fs::write(
        dir.path().join("l.json"),
        r#"{"loss": {"family": "triplet_ranking", "kernel": "gaussian"}, "out": "x"}"#,
    )
    .unwrap();
    let o = sare(dir.path(), &["gradfield", "--config", "l.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn validation_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = sare(dir.path(), &["synth", "--n-places", "0", "--out", "ds"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr_error(&o)["error"]["message"].is_string());

    let o = sare(
        dir.path(),
        &[
            "eval",
            "--data",
            "missing",
            "--model",
            "missing.ckpt",
            "--out",
            "ev",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_error(&o)["error"]["kind"], "io");

    let o = sare(
        dir.path(),
        &[
            "train", "--data", "ds", "--loss", "triplet", "--kernel", "cauchy", "--out", "t",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn mine_with_checkpoint_writes_tuples() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path(), "ds");
    let o = sare(
        dir.path(),
        &[
            "train",
            "--data",
            "ds",
            "--arch",
            "one-hidden",
            "--hidden-width",
            "10",
            "--dim",
            "6",
            "--epochs",
            "1",
            "--n-neg",
            "3",
            "--out",
            "tr",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = sare(
        dir.path(),
        &[
            "mine",
            "--data",
            "ds",
            "--model",
            "tr/model.ckpt",
            "--n-neg",
            "3",
            "--out",
            "m",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("m/tuples.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "query_id,positive_id,neg_id_1,neg_id_2,neg_id_3"
    );
    assert!(csv.lines().count() > 1);
    let meta = json_file(&dir.path().join("m/run_meta.json"));
    assert_eq!(meta["command"], "mine");
}
