//! Runs the `bicap` binary end to end on tiny synthetic data.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.image_side=16",
    "data.max_len=16",
    "backbone.widths=[4,8]",
    "backbone.blocks=[1,1]",
    "backbone.grid_side=4",
    "head.hidden=16",
    "head.heads=2",
    "head.feedforward=32",
    "head.allow_nonstandard=true",
    "tokenizer.vocab_size=60",
    "train.batch_size=4",
    "train.eval_period=3",
    "optim.warmup_iters=2",
    "optim.total_iters=6",
    "probe.svm_steps=50",
];

fn bicap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bicap")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn with_tiny<'a>(mut args: Vec<&'a str>) -> Vec<&'a str> {
    for s in TINY {
        args.extend(["--set", s]);
    }
    args
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_lists_configuration_fields() {
    let o = bicap(&["train", "--help"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for key in ["optim.lr_head", "optim.lookahead_alpha", "head.dropout", "data.image_side", "probe.costs"] {
        assert!(text.contains(key), "{key} missing from help");
    }
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(code(&bicap(&["no-such-command"])), 2);
    assert_eq!(code(&bicap(&["train", "--set", "optim.no_such_field=1"])), 2);
    assert_eq!(code(&bicap(&["train", "--set", "head.hidden=30", "--set", "head.heads=4"])), 2);
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let img = dir.path().join("nope.png");
    assert_eq!(code(&bicap(&["caption", "--checkpoint", p(&missing), "--image", p(&img)])), 3);
    let manifest = dir.path().join("captions.jsonl");
    std::fs::write(&manifest, "{\"id\": \"a\", \"image\": \"a.png\", \"captions\": [\"x\"]}\n").unwrap();
    let o = bicap(&with_tiny(vec!["train", "--manifest", p(&manifest), "--out", p(dir.path())]));
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_tokenize_train_caption_probe() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    let labeled = dir.path().join("labeled");
    let run = dir.path().join("run");

    let o = bicap(&["synth", "--kind", "scenes", "--count", "8", "--side", "16", "--out", p(&scenes)]);
    assert_eq!(code(&o), 0);
    let manifest = scenes.join("captions.jsonl");
    assert_eq!(std::fs::read_to_string(&manifest).unwrap().lines().count(), 8);
    let o = bicap(&["synth", "--kind", "canonical", "--count", "12", "--side", "16", "--out", p(&labeled)]);
    assert_eq!(code(&o), 0);
    let labels = labeled.join("labels.jsonl");

    let vocab = dir.path().join("vocab.txt");
    let o = bicap(&["tokenizer-train", "--manifest", p(&manifest), "--vocab-size", "60", "--out", p(&vocab)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("vocab size"));

    // three iterations, then three more from last.ckpt
    let o = bicap(&with_tiny(vec![
        "train",
        "--manifest",
        p(&manifest),
        "--probe-manifest",
        p(&labels),
        "--vocab",
        p(&vocab),
        "--iters",
        "3",
        "--out",
        p(&run),
    ]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = bicap(&["train", "--resume", p(&run.join("last.ckpt")), "--iters", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(run.join("train.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 6);
    let best = run.join("best.ckpt");
    assert!(best.exists());

    let image = scenes.join("scene00000.png");
    let overlays = dir.path().join("overlays");
    let o = bicap(&["caption", "--checkpoint", p(&best), "--image", p(&image), "--greedy", "--attend", p(&overlays)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let written = std::fs::read_dir(&overlays).unwrap().count();
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains(&format!("wrote {written} overlays")), "{stderr}");
    assert!(written >= 1);

    let o = bicap(&["caption", "--checkpoint", p(&best), "--image", p(&image), "--beams", "3", "--all"]);
    assert_eq!(code(&o), 0);
    assert!((1..=3).contains(&stdout(&o).lines().count()));

    // a 64 px image into a 16 px model
    bicap(&["synth", "--kind", "overfit", "--out", p(&dir.path().join("big"))]);
    let big = std::fs::read_dir(dir.path().join("big"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "png"))
        .unwrap();
    assert_eq!(code(&bicap(&["caption", "--checkpoint", p(&best), "--image", p(&big)])), 5);

    let report = dir.path().join("probe.json");
    let o = bicap(&[
        "probe",
        "--checkpoint",
        p(&best),
        "--manifest",
        p(&labels),
        "--protocol",
        "softmax",
        "--out",
        p(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("top-1 accuracy"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["test_size"], 4);

    let o = bicap(&with_tiny(vec![
        "probe",
        "--random-init",
        "--manifest",
        p(&labels),
        "--out",
        p(&report),
    ]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("chosen cost"));
}
