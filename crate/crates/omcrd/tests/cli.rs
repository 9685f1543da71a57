mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use common::{tiny_config, TINY};
use omcrd::cli::{cmd_train, main_with_args, EvalSummary};
use omcrd::config::RunConfig;
use omcrd::embeddings::load_embeddings;
use omcrd::model_file::import_peer_with_header;
use omcrd::report::Report;
use omcrd::text::{load_json, read_epoch_log};
use omcrd::Error;
use omcrd_core::{FoldResult, LossTerms, SplitPlan, TrainMode};
use toml::Value;

fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut full = vec!["omcrd"];
    full.extend_from_slice(args);
    let code = main_with_args(full, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn training_defaults_follow_the_peer_count() {
    let three = RunConfig::from_toml("", &[]).unwrap();
    assert_eq!((three.train.peers, three.train.epochs, three.train.adam.weight_decay), (3, 90, 3.0));
    assert_eq!(three.train.mode, TrainMode::Deterministic);
    let two = RunConfig::from_toml("[train]\npeers = 2\n", &[]).unwrap();
    assert_eq!((two.train.epochs, two.train.adam.weight_decay), (60, 2.0));
    let pinned = RunConfig::from_toml("[train]\npeers = 2\nepochs = 7\n", &[]).unwrap();
    assert_eq!((pinned.train.epochs, pinned.train.adam.weight_decay), (7, 2.0));
    let over = RunConfig::from_toml("", &[("train.peers", Value::Integer(4))]).unwrap();
    assert_eq!((over.train.epochs, over.train.adam.weight_decay), (90, 3.0));
    let back = RunConfig::from_toml("[train]\npeers = 4\n", &[("train.peers", Value::Integer(2))]).unwrap();
    assert_eq!((back.train.epochs, back.train.adam.weight_decay), (60, 2.0));
    let transformer = RunConfig::from_toml("[peer]\nkind = \"Transformer\"\n", &[]).unwrap();
    assert_eq!(transformer.train.base_lr, 2e-4);
}

#[test]
fn synth_shape_drives_the_peer_input() {
    let cfg = RunConfig::from_toml(TINY, &[]).unwrap();
    assert_eq!((cfg.peer.channels, cfg.peer.samples), (3, 40));
}

#[test]
fn unknown_keys_are_rejected() {
    for text in ["[train]\nbogus = 1\n", "[nope]\nx = 1\n", "[synth]\nchanels = 4\n"] {
        let err = RunConfig::from_toml(text, &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{:?}", err);
        assert_eq!(err.exit_code(), 1);
    }
}

#[test]
fn echoed_configs_reload_identically() {
    let cfg = tiny_config(Path::new("runs/x"), &[("train.terms", Value::try_from(LossTerms::NO_KL).unwrap())]);
    let again = RunConfig::from_toml(&cfg.to_toml().unwrap(), &[]).unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn synth_is_reproducible_and_flags_chance_level_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = dir.path().join("a.omcrd");
    let b = dir.path().join("b.omcrd");
    let c = dir.path().join("c.omcrd");
    assert_eq!(run(&["synth", "-c", s(&cfg), "--out", s(&a), "--seed", "3"]).0, 0);
    assert_eq!(run(&["synth", "-c", s(&cfg), "--out", s(&b), "--seed", "3"]).0, 0);
    let (code, text) = run(&["synth", "-c", s(&cfg), "--out", s(&c), "--seed", "4"]);
    assert_eq!(code, 0);
    assert!(text.contains("80 records from 5 subjects"), "{}", text);
    assert!(!text.contains("chance-level"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());

    let flat = write_config(dir.path(), &TINY.replace("seed = 5\n", "seed = 5\nclass_separation = 0.0\n"));
    let (code, text) = run(&["synth", "-c", s(&flat), "--out", s(&a)]);
    assert_eq!(code, 0);
    assert!(text.contains("chance-level"), "{}", text);
}

#[test]
fn training_writes_a_reproducible_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let ra = cmd_train(&tiny_config(&a, &[]), false, &mut std::io::sink()).unwrap();
    let rb = cmd_train(&tiny_config(&b, &[]), false, &mut std::io::sink()).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ra.len(), 2);

    for f in [
        "config.toml",
        "split.json",
        "epochs.jsonl",
        "folds.json",
        "report.txt",
        "report.json",
    ] {
        assert!(a.join(f).is_file(), "{} missing", f);
    }
    for (f, r) in ra.iter().enumerate() {
        assert!(a.join("checkpoints").join(format!("fold{}.ckpt", f)).is_file());
        let model = a.join("models").join(format!("fold{}.model", f));
        assert_eq!(
            std::fs::read(&model).unwrap(),
            std::fs::read(b.join("models").join(format!("fold{}.model", f))).unwrap()
        );
        let (peer, header) = import_peer_with_header(&model).unwrap();
        assert!(peer.has_heads());
        assert_eq!(header.notes["peer"], r.selected_peer);
        assert_eq!(header.notes["fold"], f);
    }
    let log = read_epoch_log(&a.join("epochs.jsonl")).unwrap();
    assert_eq!(
        log.iter().map(|r| (r.fold, r.log.epoch)).collect::<Vec<_>>(),
        [(0, 0), (0, 1), (1, 0), (1, 1)]
    );
    assert_eq!(load_json::<Vec<FoldResult>>(&a.join("folds.json")).unwrap(), ra);
    assert_eq!(
        load_json::<SplitPlan>(&a.join("split.json")).unwrap(),
        load_json::<SplitPlan>(&b.join("split.json")).unwrap()
    );
    let report: Report = load_json(&a.join("report.json")).unwrap();
    assert_eq!(report.methods[0].name, "OMCRD");
    assert_eq!(report.compression.unwrap().peers, 2);

    // rerunning the same directory replaces the log rather than appending
    cmd_train(&tiny_config(&a, &[]), false, &mut std::io::sink()).unwrap();
    assert_eq!(read_epoch_log(&a.join("epochs.jsonl")).unwrap().len(), 4);
}

#[test]
fn resume_continues_only_with_the_same_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("r");
    let short = tiny_config(&run_dir, &[("split.folds", Value::Integer(1))]);
    let first = cmd_train(&short, false, &mut std::io::sink()).unwrap();
    let mut out = Vec::new();
    let again = cmd_train(&short, true, &mut out).unwrap();
    assert_eq!(again, first);
    assert!(String::from_utf8(out).unwrap().contains("resuming at epoch 2"));

    let echo = std::fs::read(run_dir.join("config.toml")).unwrap();
    let other = tiny_config(&run_dir, &[("split.folds", Value::Integer(1)), ("train.peers", Value::Integer(3))]);
    let err = cmd_train(&other, true, &mut std::io::sink()).unwrap_err();
    assert!(matches!(err, Error::Core(omcrd_core::Error::ConfigMismatch(_))), "{:?}", err);
    assert_eq!(err.exit_code(), 1);
    assert_eq!(std::fs::read(run_dir.join("config.toml")).unwrap(), echo);
}

#[test]
fn ablation_flag_selects_the_loss_terms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run_dir = dir.path().join("no-kl");
    let (code, text) = run(&[
        "train",
        "-c",
        s(&cfg),
        "--run-dir",
        s(&run_dir),
        "--ablate",
        "no-kl",
        "--epochs",
        "1",
    ]);
    assert_eq!(code, 0, "{}", text);
    let saved = RunConfig::load(Some(&run_dir.join("config.toml")), &[]).unwrap();
    assert_eq!(saved.train.terms, LossTerms::NO_KL);
    assert_eq!(saved.train.epochs, 1);
    let report: Report = load_json(&run_dir.join("report.json")).unwrap();
    assert_eq!(report.methods[0].name, "no-kl");
    let log = read_epoch_log(&run_dir.join("epochs.jsonl")).unwrap();
    assert!(log
        .iter()
        .all(|r| r.log.loss.kl_weight == 0.0 && r.log.loss.kl > 0.0 && r.log.loss.alpha > 0.0));

    let base = dir.path().join("full");
    assert_eq!(run(&["train", "-c", s(&cfg), "--run-dir", s(&base), "--epochs", "1"]).0, 0);
    let (code, text) = run(&[
        "report",
        "--run-dir",
        s(&base),
        "--ablation",
        &format!("no-kl={}", run_dir.display()),
    ]);
    assert_eq!(code, 0);
    assert!(text.contains("Loss-term ablation"));
    assert!(text.lines().any(|l| l.starts_with("OMCRD")) && text.lines().any(|l| l.starts_with("no-kl")));

    assert_eq!(run(&["train", "-c", s(&cfg), "--run-dir", s(&base), "--ablate", "no-ce"]).0, 1);
}

#[test]
fn eval_export_and_embed_work_on_trained_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let data = dir.path().join("d.omcrd");
    let split = dir.path().join("split.json");
    let run_dir = dir.path().join("run");
    assert_eq!(run(&["synth", "-c", s(&cfg), "--out", s(&data)]).0, 0);
    assert_eq!(run(&["split", "-c", s(&cfg), "--dataset", s(&data), "--out", s(&split)]).0, 0);
    let (code, text) = run(&[
        "train",
        "-c",
        s(&cfg),
        "--dataset",
        s(&data),
        "--split",
        s(&split),
        "--run-dir",
        s(&run_dir),
    ]);
    assert_eq!(code, 0, "{}", text);
    let model = run_dir.join("models").join("fold1.model");

    let (code, text) = run(&["eval", "--model", s(&model), "--dataset", s(&data), "--json"]);
    assert_eq!(code, 0);
    let summary: EvalSummary = serde_json::from_str(&text).unwrap();
    assert_eq!(summary.records, 80);
    assert_eq!(summary.per_class.iter().map(|c| c.records).sum::<usize>(), 80);
    assert!(summary.per_class.iter().all(|c| c.accuracy.is_some()));
    let (code, text) = run(&["eval", "--model", s(&model), "--dataset", s(&data)]);
    assert_eq!(code, 0);
    assert_eq!(text.lines().count(), 5);

    let lean = dir.path().join("lean.model");
    let kept = dir.path().join("kept.model");
    assert_eq!(run(&["export", "--model", s(&model), "--out", s(&lean)]).0, 0);
    assert_eq!(run(&["export", "--model", s(&model), "--out", s(&kept), "--keep-heads"]).0, 0);
    let (_, lean_header) = import_peer_with_header(&lean).unwrap();
    let (_, kept_header) = import_peer_with_header(&kept).unwrap();
    assert!(!lean_header.heads && kept_header.heads);
    assert_eq!(lean_header.notes["fold"], 1);
    let (_, a) = run(&["eval", "--model", s(&lean), "--dataset", s(&data), "--json"]);
    assert_eq!(serde_json::from_str::<EvalSummary>(&a).unwrap(), summary);

    let plan: SplitPlan = load_json(&split).unwrap();
    let dataset = omcrd::dataset::load_dataset(&data).unwrap();
    let (_, test) = plan.fold_indices(&dataset, 1).unwrap();
    let emb = dir.path().join("fold1.emb");
    let (code, _) = run(&[
        "embed",
        "--model",
        s(&lean),
        "--dataset",
        s(&data),
        "--split",
        s(&split),
        "--fold",
        "1",
        "--out",
        s(&emb),
    ]);
    assert_eq!(code, 0);
    let dump = load_embeddings(&emb).unwrap();
    assert_eq!(dump.rows.len(), test.len());
    assert!(dump
        .rows
        .iter()
        .all(|r| r.fold == 1 && plan.folds[1].test_subjects.contains(&r.subject_id)));
    let all = dir.path().join("all.emb");
    assert_eq!(run(&["embed", "--model", s(&lean), "--dataset", s(&data), "--out", s(&all)]).0, 0);
    assert_eq!(load_embeddings(&all).unwrap().rows.len(), 80);
}

fn binary(args: &[&str], mode: Option<&str>) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_omcrd"));
    cmd.args(args).env_remove("OMCRD_MODE");
    if let Some(m) = mode {
        cmd.env("OMCRD_MODE", m);
    }
    cmd.output().unwrap()
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nbogus = 1\n").unwrap();
    let missing = dir.path().join("missing.model");
    let data = dir.path().join("d.omcrd");

    assert_eq!(binary(&["--help"], None).status.code(), Some(0));
    assert_eq!(binary(&["train", "--no-such-flag"], None).status.code(), Some(1));
    assert_eq!(binary(&["synth", "-c", s(&bad), "--out", s(&data)], None).status.code(), Some(1));
    assert_eq!(
        binary(&["synth", "-c", s(&cfg), "--out", s(&data)], Some("bogus")).status.code(),
        Some(1)
    );
    assert_eq!(binary(&["synth", "-c", s(&cfg), "--out", s(&data)], None).status.code(), Some(0));
    let out = binary(&["eval", "--model", s(&missing), "--dataset", s(&data)], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.model"));
}

#[test]
fn fast_mode_reproduces_deterministic_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let det = dir.path().join("det");
    let fast = dir.path().join("fast");
    for (run_dir, mode) in [(&det, "deterministic"), (&fast, "fast")] {
        let out = binary(&["train", "-c", s(&cfg), "--run-dir", s(run_dir), "--peers", "3"], Some(mode));
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a: Vec<FoldResult> = load_json(&det.join("folds.json")).unwrap();
    let b: Vec<FoldResult> = load_json(&fast.join("folds.json")).unwrap();
    assert_eq!(a, b);
}
