use std::path::Path;
use tsd_cli::{run, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use tsd_core::config::RunConfig;
use tsd_core::dataset::DatasetManifest;

fn tsd(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["tsd"];
    argv.extend_from_slice(args);
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn resolved(dir: &Path) -> RunConfig {
    RunConfig::from_toml(&std::fs::read_to_string(dir.join("config.toml")).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_1_and_runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = tsd(&["train", "--bogus"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("--bogus"));

    let out = dir.path().join("x");
    let (code, _, err) = tsd(&["train", "--data", p(dir.path()), "--out", p(&out), "--tau", "1.5"]);
    assert_eq!(code, EXIT_USAGE, "{err}");
    assert!(err.contains("tau"));

    let (code, _, _) = tsd(&["train", "--data", p(dir.path()), "--out", p(&out), "--set", "train.nope=1"]);
    assert_eq!(code, EXIT_USAGE);

    let (code, _, err) = tsd(&["eval", "--data", p(&dir.path().join("missing")), "--scores", "s.jsonl", "--out", p(&out)]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(err.lines().any(|l| l.starts_with("{\"error\"")));

    let (code, out, _) = tsd(&["--help"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("build-data"));
}

#[test]
fn help_documents_defaults() {
    let (code, out, _) = tsd(&["train", "--help"]);
    assert_eq!(code, EXIT_OK);
    for flag in ["--tau <TAU>", "[default: 0.7]", "[default: 64]", "[default: du_focal]", "--set <KEY=VALUE>"] {
        assert!(out.contains(flag), "missing {flag}");
    }
}

#[test]
fn layers_resolve_in_order_and_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    std::fs::write(&file, "[data]\nnegative_ratio = 0.5\nsizes = [5, 5, 5]\n[data.bank]\nevents_per_class = 5\nreferences_per_class = 5\n").unwrap();
    let data = dir.path().join("data");
    let (code, out, err) = tsd(&[
        "build-data", "--out", p(&data), "--mini", "--config", p(&file), "--sizes", "5,0,5", "--classes", "2",
        "--set", "data.negative_ratio=0.0",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("manifest sha256"));
    let c = resolved(&data);
    // mini profile, then file, then flags, then --set
    assert_eq!(c.features.n_mels, 8);
    assert_eq!(c.data.bank.events_per_class, 5);
    assert_eq!(c.data.sizes, [5, 0, 5]);
    assert_eq!(c.data.bank.n_classes, 2);
    assert_eq!(c.data.negative_ratio, 0.0);
    let m = DatasetManifest::load(&data).unwrap();
    assert_eq!(m.records.len(), 10);
    assert!(m.records.iter().all(|r| !r.is_negative));
}

#[test]
fn train_eval_detect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let (code, _, err) = tsd(&["build-data", "--out", p(&data), "--mini", "--sizes", "8,4,4", "--seed", "2"]);
    assert_eq!(code, EXIT_OK, "{err}");

    let run_dir = dir.path().join("run");
    let (code, out, err) = tsd(&[
        "train", "--data", p(&data), "--out", p(&run_dir), "--mini", "--epochs", "2", "--warmup", "1", "--loss", "focal",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("best validation"));
    let c = resolved(&run_dir);
    assert_eq!(c.train.epochs, 2);
    assert_eq!(c.loss.kind, tsd_core::losses::LossKind::Focal);
    for f in ["best.ckpt", "last.ckpt", "train_log.jsonl"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }

    let ev = dir.path().join("eval");
    let ckpt = run_dir.join("best.ckpt");
    let (code, text, err) = tsd(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&ev), "--mini"]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(text.contains("segment-based") && text.contains("event-based"));
    for f in ["report.json", "report.txt", "predictions.jsonl", "duration_buckets.svg", "config.toml"] {
        assert!(ev.join(f).exists(), "{f}");
    }

    // scoring the written predictions reproduces the checkpoint's report
    let ev2 = dir.path().join("eval2");
    let (code, _, err) = tsd(&["eval", "--data", p(&data), "--scores", p(&ev.join("predictions.jsonl")), "--out", p(&ev2), "--mini"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let a: serde_json::Value = serde_json::from_slice(&std::fs::read(ev.join("report.json")).unwrap()).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&std::fs::read(ev2.join("report.json")).unwrap()).unwrap();
    assert_eq!(a["segment"], b["segment"]);
    assert_eq!(a["event"], b["event"]);

    let m = DatasetManifest::load(&data).unwrap();
    let r = &m.records[0];
    let det = dir.path().join("det");
    let (code, _, err) = tsd(&[
        "detect", "--mixture", p(&data.join(&r.mixture_path)), "--reference", p(&data.join(&r.reference_path)),
        "--checkpoint", p(&ckpt), "--out", p(&det), "--mini",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let events: serde_json::Value = serde_json::from_slice(&std::fs::read(det.join("events.json")).unwrap()).unwrap();
    assert!(events.is_array());
    let csv = std::fs::read_to_string(det.join("scores.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("time_s,score"));
    assert_eq!(csv.lines().count(), 1 + 1001 / 4);
}

#[test]
fn grid_sweep_writes_tables_and_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let (code, _, err) = tsd(&["build-data", "--out", p(&data), "--mini", "--sizes", "8,4,4"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let sw = dir.path().join("sweep");
    let (code, table, err) = tsd(&[
        "sweep", "--data", p(&data), "--out", p(&sw), "--mini", "--epochs", "1", "--no-ee", "--param", "alpha,beta",
        "--values", "2,1", "--values2", "0.6",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(table.lines().count(), 4);
    assert!(table.lines().nth(2).unwrap().starts_with('1'));
    for f in ["sweep.txt", "sweep.json", "sweep.csv", "sweep_segment.svg", "sweep_event.svg"] {
        assert!(sw.join(f).exists(), "{f}");
    }
    assert_eq!(resolved(&sw.join("alpha=2_beta=0.6")).loss.duration.alpha, 2.0);

    let (code, _, _) = tsd(&["sweep", "--data", p(&data), "--out", p(&sw), "--param", "gamma", "--values", "1"]);
    assert_eq!(code, EXIT_USAGE);
}
