//! End-to-end tests of the `upix` binary: exit codes, determinism of every
//! written artifact, and the train -> sample -> eval -> distill pipeline on
//! a micro configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn upix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_upix"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_micro_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("micro.cfg");
    fs::write(
        &path,
        "\
# micro run for CLI tests
seed = 0
data.count = 10
data.eval_count = 4
data.eval_seed = 777
train.batch_size = 2
train.lr = 0.002
stage.count = 1
stage.1.resolution = 8
stage.1.steps = 2
stage.1.condition_prob = 0.0
refine.steps = 1
sample.steps = 3
distill.steps = 1
distill.batch_size = 2
distill.student_steps = 2
distill.fake_ratio = 1
",
    )
    .unwrap();
    path
}

#[test]
fn unknown_subcommand_exits_1_with_usage() {
    let out = upix(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "stderr: {stderr}");
}

#[test]
fn bad_config_is_a_validated_input_failure() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "model.depth = 3\n").unwrap();
    let out = upix(&["dataset-gen", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn dataset_gen_is_bitwise_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let r = upix(&[
            "dataset-gen",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "5",
            "--resolution",
            "8",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let names: Vec<String> = {
        let mut v: Vec<String> = fs::read_dir(&out_a)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        v.sort();
        v
    };
    assert!(names.contains(&"records.tsv".to_string()));
    for name in &names {
        let a = fs::read(out_a.join(name)).unwrap();
        let b = fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "artifact {name} differs between identical runs");
    }
    // Edit/subject records carry condition images; t2i records do not.
    let manifest = fs::read_to_string(out_a.join("records.tsv")).unwrap();
    for line in manifest.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        match cols[1] {
            "t2i" => assert_eq!(cols[4], "-"),
            "edit" | "subject" => assert_ne!(cols[4], "-"),
            other => panic!("unknown tag {other}"),
        }
    }
}

#[test]
fn train_sample_eval_distill_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_micro_config(dir.path());
    let out = dir.path().join("run");

    let r = upix(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let ckpt = out.join("model.upix");
    assert!(ckpt.exists());
    assert!(out.join("ckpt_stage1.upix").exists());
    assert!(out.join("ckpt_refine.upix").exists());
    let metrics = fs::read_to_string(out.join("metrics.log")).unwrap();
    assert!(metrics.lines().count() >= 3);
    assert!(metrics.starts_with("stage=stage1 step=0"));

    // Checkpoints begin with the magic bytes.
    let bytes = fs::read(&ckpt).unwrap();
    assert_eq!(&bytes[0..4], b"UPIX");

    // Same seed/prompt/checkpoint twice: identical image files.
    let img_a = dir.path().join("a.ppm");
    let img_b = dir.path().join("b.ppm");
    for img in [&img_a, &img_b] {
        let r = upix(&[
            "sample",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--prompt",
            "red square top-left",
            "--seed",
            "3",
            "--steps",
            "3",
            "--resolution",
            "8",
            "--out",
            img.to_str().unwrap(),
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let a = fs::read(&img_a).unwrap();
    assert_eq!(a, fs::read(&img_b).unwrap());
    assert!(a.starts_with(b"P6\n8 8\n255\n"));

    // Eval prints the three report lines.
    let r = upix(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--resolution",
        "8",
        "--steps",
        "2",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert!(stdout.contains("eval flow="));
    assert!(stdout.contains("eval lm="));
    assert!(stdout.contains("eval caption_accuracy="));

    // Distill writes a student checkpoint loadable by sample.
    let r = upix(&[
        "distill",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--resolution",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let student = out.join("student.upix");
    assert!(student.exists());
    let r = upix(&[
        "sample",
        "--checkpoint",
        student.to_str().unwrap(),
        "--prompt",
        "blue circle center",
        "--steps",
        "2",
        "--resolution",
        "8",
        "--out",
        dir.path().join("student.ppm").to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    // Missing checkpoint path is a validated-input failure.
    let r = upix(&["sample", "--checkpoint", "/nonexistent/x.upix"]);
    assert_eq!(r.status.code(), Some(1));
    // Corrupt checkpoint too.
    let garbage = dir.path().join("garbage.upix");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let r = upix(&["sample", "--checkpoint", garbage.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn grad_check_prints_small_error_and_exits_0() {
    let out = upix(&["grad-check"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let value: f64 = stdout
        .trim()
        .strip_prefix("max relative error: ")
        .expect("report line")
        .parse()
        .unwrap();
    assert!(value <= 1e-5, "reported {value}");
}
