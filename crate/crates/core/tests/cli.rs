use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use avvp::datamodel::{
    load_features, synth_generate, Dataset, SynthConfig, CLASSES_FILE, MANIFEST_FILE,
};

fn avvp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avvp"))
        .args(args)
        .output()
        .unwrap()
}

fn avvp_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avvp"))
        .args(args)
        .env(key, value)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Parses the single-line JSON error and returns its kind.
fn error_kind(out: &Output) -> String {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    let v: serde_json::Value =
        serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"));
    assert!(v["message"].is_string());
    v["kind"].as_str().unwrap().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dir_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn small_synth(out: &Path, extra: &[&str]) {
    let mut args = vec![
        "synth",
        "--out",
        p(out),
        "--videos",
        "30",
        "--d-a",
        "8",
        "--d-v",
        "8",
        "--classes",
        "4",
        "--seed",
        "7",
    ];
    args.extend_from_slice(extra);
    ok(&avvp(&args));
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_synth(&a, &[]);
    small_synth(&b, &[]);
    let (fa, fb) = (dir_files(&a), dir_files(&b));
    assert!(fa.iter().any(|(n, _)| n == Path::new(MANIFEST_FILE)));
    assert_eq!(fa, fb);
}

#[test]
fn synth_declares_requested_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    ok(&avvp(&[
        "synth",
        "--out",
        p(&out),
        "--videos",
        "3",
        "--classes",
        "25",
        "--snippets",
        "10",
        "--d-a",
        "4",
        "--d-v",
        "6",
    ]));
    let classes = std::fs::read_to_string(out.join(CLASSES_FILE)).unwrap();
    assert_eq!(classes.lines().count(), 25);
    let ds = Dataset::load(&out).unwrap();
    assert_eq!(ds.classes(), 25);
    for s in &ds.samples {
        assert_eq!(s.bag.snippets(), 10);
    }
    let feat = std::fs::read_dir(out.join("features"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    assert_eq!(load_features(&feat).unwrap().features.rows(), 10);
}

#[test]
fn zero_noise_features_are_exact_prototype_sums() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    small_synth(&out, &["--noise", "0"]);
    let cfg = SynthConfig {
        n_videos: 30,
        d_a: 8,
        d_v: 8,
        classes: 4,
        noise_sigma: 0.0,
        seed: 7,
        ..Default::default()
    };
    let truth = synth_generate(&cfg).unwrap();
    let ds = Dataset::load(&out).unwrap();
    for s in &ds.samples {
        let dense = s.dense.as_ref().unwrap();
        for t in 0..s.bag.snippets() {
            for (features, protos, gain, grid) in [
                (
                    &s.bag.audio,
                    &truth.audio_prototypes,
                    cfg.audio_gain(),
                    dense.grid(avvp::datamodel::Modality::Audio),
                ),
                (
                    &s.bag.visual,
                    &truth.visual_prototypes,
                    cfg.visual_gain(),
                    dense.grid(avvp::datamodel::Modality::Visual),
                ),
            ] {
                let expect: Vec<f64> = (0..features.cols())
                    .map(|j| {
                        let sum: f64 = (0..4)
                            .filter(|&c| grid.get(t, c))
                            .map(|c| gain * protos.get(c, j))
                            .sum();
                        f64::from(sum as f32)
                    })
                    .collect();
                assert_eq!(features.row(t), expect.as_slice());
            }
        }
    }
}

#[test]
fn synth_refuses_non_empty_directory_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    small_synth(&out, &[]);
    let refused = avvp(&["synth", "--out", p(&out), "--videos", "5"]);
    assert_eq!(error_kind(&refused), "output_exists");
    ok(&avvp(&[
        "synth",
        "--out",
        p(&out),
        "--videos",
        "5",
        "--d-a",
        "4",
        "--d-v",
        "4",
        "--force",
    ]));
    assert_eq!(Dataset::load(&out).unwrap().len(), 5);
}

#[test]
fn gradcheck_passes() {
    let stdout = ok(&avvp(&[
        "gradcheck",
        "--seed",
        "1",
        "--t",
        "4",
        "--d",
        "8",
        "--classes",
        "3",
    ]));
    assert!(stdout.contains("PASS"));
}

#[test]
fn usage_errors_are_json() {
    let out = avvp(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "usage");
    let missing = avvp(&[
        "eval",
        "--data",
        "/nonexistent/x",
        "--pred",
        "/nonexistent/y.csv",
    ]);
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(error_kind(&missing), "io");
}

#[test]
fn help_lists_flags() {
    let help = ok(&avvp(&["train", "--help"]));
    for flag in [
        "--loss",
        "--pool",
        "--temporal",
        "--smooth-eps-a",
        "--smooth-eps-v",
        "--smooth-k",
        "--config",
    ] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
}

struct Pipeline {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

fn pipeline() -> Pipeline {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    small_synth(&root.join("data"), &["--split-test", "10"]);
    Pipeline { _tmp: tmp, root }
}

fn train_args<'a>(pl: &'a Pipeline, run: &'a Path) -> Vec<String> {
    [
        "train",
        "--data",
        p(&pl.root.join("data/train")),
        "--val",
        p(&pl.root.join("data/test")),
        "--out",
        p(run),
        "--epochs",
        "2",
        "--width",
        "8",
        "--batch-size",
        "4",
        "--lr",
        "0.01",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn run_train(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    avvp(&refs)
}

#[test]
fn train_parse_eval_round_trip() {
    let pl = pipeline();
    let run = pl.root.join("run");
    ok(&run_train(&train_args(&pl, &run)));
    for f in [
        "config.snapshot",
        "final_metrics.csv",
        "history.csv",
        "losses.csv",
        "ckpt_epoch_1",
        "ckpt_epoch_2",
        "ckpt_best",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let pred = pl.root.join("pred.csv");
    let test = pl.root.join("data/test");
    ok(&avvp(&[
        "parse",
        "--data",
        p(&test),
        "--checkpoint",
        p(&run.join("ckpt_epoch_2")),
        "--out",
        p(&pred),
    ]));
    let metrics = pl.root.join("m.csv");
    ok(&avvp(&[
        "eval",
        "--data",
        p(&test),
        "--pred",
        p(&pred),
        "--out",
        p(&metrics),
    ]));
    assert_eq!(
        std::fs::read_to_string(&metrics).unwrap(),
        std::fs::read_to_string(run.join("final_metrics.csv")).unwrap()
    );

    let single = pl.root.join("m1.csv");
    ok(&avvp_env(
        &[
            "eval",
            "--data",
            p(&test),
            "--pred",
            p(&pred),
            "--out",
            p(&single),
        ],
        "AVVP_THREADS",
        "1",
    ));
    assert_eq!(
        std::fs::read(&metrics).unwrap(),
        std::fs::read(&single).unwrap()
    );
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let pl = pipeline();
    let test = pl.root.join("data/test");
    let out = pl.root.join("self.csv");
    ok(&avvp(&[
        "eval",
        "--data",
        p(&test),
        "--pred",
        p(&test.join("annotations.csv")),
        "--out",
        p(&out),
    ]));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("type,segment_f,event_f"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5);
    for row in rows {
        assert!(row.ends_with(",1.000000,1.000000"), "{row}");
    }
}

#[test]
fn eval_rejects_predictions_for_unannotated_videos() {
    let pl = pipeline();
    let test = pl.root.join("data/test");
    let pred = pl.root.join("stray.csv");
    std::fs::write(
        &pred,
        "video_id,modality,class,onset,offset,confidence\nnot_a_video,audio,class_0,0,2,0.9\n",
    )
    .unwrap();
    let out = avvp(&["eval", "--data", p(&test), "--pred", p(&pred)]);
    assert_eq!(error_kind(&out), "missing_annotations");
}

#[test]
fn config_precedence_and_replay() {
    let pl = pipeline();
    let cfg_file = pl.root.join("cfg.toml");
    std::fs::write(&cfg_file, "epochs = 3\nwidth = 6\nseed = 5\n").unwrap();
    let run = pl.root.join("run");
    let mut args = train_args(&pl, &run);
    // drop --width and --epochs so the file supplies them, then override epochs by flag
    let pos = args.iter().position(|a| a == "--width").unwrap();
    args.drain(pos..pos + 2);
    let pos = args.iter().position(|a| a == "--epochs").unwrap();
    args.drain(pos..pos + 2);
    args.extend(["--config", p(&cfg_file), "--epochs", "1"].map(String::from));
    ok(&run_train(&args));
    let snap: toml::Table = std::fs::read_to_string(run.join("config.snapshot"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(snap["epochs"].as_integer(), Some(1));
    assert_eq!(snap["width"].as_integer(), Some(6));
    assert_eq!(snap["seed"].as_integer(), Some(5));
    assert_eq!(snap["batch_size"].as_integer(), Some(4));

    let replay = pl.root.join("replay");
    ok(&avvp(&[
        "train",
        "--data",
        p(&pl.root.join("data/train")),
        "--out",
        p(&replay),
        "--config",
        p(&run.join("config.snapshot")),
    ]));
    assert_eq!(
        std::fs::read(run.join("ckpt_epoch_1")).unwrap(),
        std::fs::read(replay.join("ckpt_epoch_1")).unwrap()
    );
}

#[test]
fn config_rejects_unknown_keys() {
    let pl = pipeline();
    let cfg_file = pl.root.join("bad.toml");
    std::fs::write(&cfg_file, "epocs = 3\n").unwrap();
    let mut args = train_args(&pl, &pl.root.join("run"));
    args.extend(["--config", p(&cfg_file)].map(String::from));
    assert_eq!(error_kind(&run_train(&args)), "config");
}

#[test]
fn incompatible_checkpoint_version_is_reported() {
    let pl = pipeline();
    let run = pl.root.join("run");
    ok(&run_train(&train_args(&pl, &run)));
    let ck = run.join("ckpt_epoch_1");
    let mut bytes = std::fs::read(&ck).unwrap();
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    std::fs::write(&ck, bytes).unwrap();
    let out = avvp(&[
        "parse",
        "--data",
        p(&pl.root.join("data/test")),
        "--checkpoint",
        p(&ck),
        "--out",
        p(&pl.root.join("x.csv")),
    ]);
    assert_eq!(error_kind(&out), "unsupported_version");
}

#[test]
fn resume_continues_to_the_same_result() {
    let pl = pipeline();
    let full = pl.root.join("full");
    ok(&run_train(&train_args(&pl, &full)));
    let part = pl.root.join("part");
    let mut first = train_args(&pl, &part);
    let pos = first.iter().position(|a| a == "--epochs").unwrap();
    first[pos + 1] = "1".into();
    ok(&run_train(&first));

    // resuming requires the config digest to match, so finish under the full config
    let resumed = pl.root.join("resumed");
    let mut args = train_args(&pl, &resumed);
    args.extend(["--resume", p(&part.join("ckpt_epoch_1"))].map(String::from));
    assert_eq!(error_kind(&run_train(&args)), "checkpoint");

    let mut args = train_args(&pl, &resumed);
    args.extend(["--resume", p(&full.join("ckpt_epoch_1"))].map(String::from));
    ok(&run_train(&args));
    assert_eq!(
        std::fs::read(full.join("ckpt_epoch_2")).unwrap(),
        std::fs::read(resumed.join("ckpt_epoch_2")).unwrap()
    );
}
