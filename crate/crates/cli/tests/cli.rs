use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use anobfn_cli::{cmd_eval, cmd_infer, cmd_simulate, cmd_train, run, CliError, METRICS_FILE, TRAIN_LOG};
use anobfn_core::inference::anomaly_map;
use anobfn_core::io::{read_image, write_image};
use anobfn_core::metrics::average_precision;
use anobfn_core::phantom::{read_manifest, Split};
use anobfn_core::{InferenceMode, RunConfig};
use tempfile::TempDir;

const TINY: &str = r#"{
  "seed": 3,
  "schedule": {"n_steps": 6},
  "denoiser": {"base_width": 4, "n_stages": 2, "time_embed_dim": 4},
  "train": {"learning_rate": 0.001, "batch_size": 4, "max_steps": 6, "checkpoint_every": 4},
  "phantom": {"size": 16, "n_subjects": 10, "slices_per_subject": 2},
  "inference": {"receiver_noise": "gaussian"}
}"#;

fn tiny() -> RunConfig {
    RunConfig::from_json(TINY).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn args(list: &[&str]) -> Vec<String> {
    std::iter::once("anobfn")
        .chain(list.iter().copied())
        .map(String::from)
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_populates_splits_deterministically() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(cmd_simulate(&tiny(), &a, false).unwrap(), 10);
    cmd_simulate(&tiny(), &b, false).unwrap();
    for dir in ["train", "val", "test_cn", "test_sad/abnormal", "test_sad/mask"] {
        assert!(fs::read_dir(a.join(dir)).unwrap().next().is_some(), "{dir} is empty");
    }
    assert_eq!(files(&a), files(&b));
    let other = tiny().with_seed(4);
    let c = tmp.path().join("c");
    cmd_simulate(&other, &c, false).unwrap();
    assert_ne!(files(&a), files(&c));
}

#[test]
fn simulate_guards_inputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), r#"{"phantom": {"n_subjects": 4}}"#);
    let out = tmp.path().join("data");
    assert_eq!(run(args(&["simulate", "--config", s(&cfg), "--out", s(&out)])), 1);
    assert!(!out.exists(), "config errors must not touch the filesystem");

    let bad_key = write_config(tmp.path(), r#"{"phantom": {"subjects": 12}}"#);
    assert_eq!(run(args(&["simulate", "--config", s(&bad_key), "--out", s(&out)])), 1);

    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    let tiny_cfg = write_config(tmp.path(), TINY);
    assert_eq!(run(args(&["simulate", "--config", s(&tiny_cfg), "--out", s(&out)])), 1);
    assert_eq!(
        run(args(&[
            "simulate",
            "--config",
            s(&tiny_cfg),
            "--out",
            s(&out),
            "--force"
        ])),
        0
    );
    assert!(out.join("manifest.json").is_file());
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(args(&["frobnicate"])), 1);
    assert_eq!(run(args(&["train", "--data", "x"])), 1);
    assert_eq!(run(args(&["--help"])), 0);
}

fn log_steps(out: &Path) -> Vec<u64> {
    fs::read_to_string(out.join(TRAIN_LOG))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn training_checkpoints_and_resumes() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    cmd_simulate(&tiny(), &data, false).unwrap();

    let out = tmp.path().join("run");
    let first = cmd_train(&tiny(), &data, &out).unwrap();
    assert_eq!(first.final_step, 6);
    assert_eq!(first.checkpoints.len(), 2);
    assert_eq!(log_steps(&out), (1..=6).collect::<Vec<_>>());

    let mut longer = tiny();
    longer.train.max_steps = Some(10);
    let second = cmd_train(&longer, &data, &out).unwrap();
    assert_eq!(second.final_step, 10);
    assert_eq!(log_steps(&out), (1..=10).collect::<Vec<_>>());

    // a straight run reaches the same weights
    let straight = tmp.path().join("straight");
    cmd_train(&longer, &data, &straight).unwrap();
    let a = anobfn_core::denoiser::load_checkpoint(&out).unwrap();
    let b = anobfn_core::denoiser::load_checkpoint(&straight).unwrap();
    assert_eq!(a.state, b.state);
}

#[test]
fn smoke_run_of_two_hundred_steps_writes_a_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    cmd_simulate(&tiny(), &data, false).unwrap();
    let mut cfg = tiny();
    cfg.train.max_steps = Some(200);
    cfg.train.checkpoint_every = 1000;
    let o = cmd_train(&cfg, &data, &tmp.path().join("run")).unwrap();
    assert_eq!(o.final_step, 200);
    assert!(!o.checkpoints.is_empty());
    assert!(o.last_loss.is_finite());
}

#[test]
fn divergence_exits_with_runtime_code_and_step() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    cmd_simulate(&tiny(), &data, false).unwrap();
    let mut cfg = tiny();
    cfg.train.learning_rate = 1e30;
    cfg.train.grad_clip_norm = 1e30;
    cfg.train.weight_decay = 0.0;
    cfg.train.max_steps = Some(30);
    let err = cmd_train(&cfg, &data, &tmp.path().join("run")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("diverged at step"), "{err}");
}

#[test]
fn train_rejects_incompatible_image_size() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let mut cfg = tiny();
    cfg.phantom.size = 17;
    cmd_simulate(&cfg, &data, false).unwrap();
    let err = cmd_train(&tiny(), &data, &tmp.path().join("run")).unwrap_err();
    assert!(matches!(err, CliError::Usage(_)), "{err}");
}

fn trained(tmp: &Path) -> (PathBuf, PathBuf) {
    let data = tmp.join("data");
    cmd_simulate(&tiny(), &data, false).unwrap();
    let run_dir = tmp.join("run");
    cmd_train(&tiny(), &data, &run_dir).unwrap();
    (data, run_dir)
}

#[test]
fn inference_writes_one_triple_per_input_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (data, ckpt) = trained(tmp.path());
    let manifest = read_manifest(&data).unwrap();
    let n_test: usize = manifest.subjects_in(Split::Test).map(|s| s.slices.len()).sum();

    let (a, b) = (tmp.path().join("pa"), tmp.path().join("pb"));
    let o = cmd_infer(&tiny(), &ckpt, &data, Some(InferenceMode::Anobfn), &a).unwrap();
    assert_eq!(o.n_images, 2 * n_test);
    cmd_infer(&tiny(), &ckpt, &data, Some(InferenceMode::Anobfn), &b).unwrap();
    for dir in ["test_cn", "test_sad"] {
        let names: Vec<_> = fs::read_dir(a.join(dir))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 3 * n_test);
    }
    assert_eq!(files(&a), files(&b));
    let preview = fs::read_dir(a.join("test_sad"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "pgm"))
        .map(|p| fs::read(p).unwrap());
    assert!(preview.unwrap().starts_with(b"P5\n48 16\n255\n"));

    let out = tmp.path().join("bogus");
    let code = run(args(&[
        "infer",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--mode",
        "bogus",
        "--out",
        s(&out),
    ]));
    assert_eq!(code, 1);
}

#[test]
fn eval_writes_one_row_per_test_image() {
    let tmp = TempDir::new().unwrap();
    let (data, ckpt) = trained(tmp.path());
    let pred = tmp.path().join("pred");
    cmd_infer(&tiny(), &ckpt, &data, None, &pred).unwrap();
    let out = tmp.path().join("eval");
    let report = cmd_eval(&tiny(), &pred, &data, &out).unwrap();
    let csv = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "subject_id,slice_id,mse,psnr,ssim,iou,ap");
    assert_eq!(lines.len(), report.records.len() + 2);
    assert!(lines.last().unwrap().starts_with("aggregate,"));
    for r in &report.records {
        assert!((0.0..=1.0).contains(&r.ap.unwrap()) && (0.0..=1.0).contains(&r.iou.unwrap()));
    }
}

#[test]
fn eval_lists_every_missing_prediction() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    cmd_simulate(&tiny(), &data, false).unwrap();
    let pred = tmp.path().join("empty");
    fs::create_dir_all(&pred).unwrap();
    let err = cmd_eval(&tiny(), &pred, &data, &tmp.path().join("eval")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let manifest = read_manifest(&data).unwrap();
    for subject in manifest.subjects_in(Split::Test) {
        for e in &subject.slices {
            assert!(err
                .to_string()
                .contains(&format!("s{:04}_{:02}", subject.subject_id, e.slice_id)));
        }
    }
}

#[test]
fn ground_truth_reconstructions_beat_shuffled_scores() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    cmd_simulate(&tiny(), &data, false).unwrap();
    let manifest = read_manifest(&data).unwrap();
    let pred = tmp.path().join("pred");
    let mut shuffled_aps = Vec::new();
    for subject in manifest.subjects_in(Split::Test) {
        for e in &subject.slices {
            let stem = format!("s{:04}_{:02}", subject.subject_id, e.slice_id);
            let healthy = read_image(&data.join(&e.healthy)).unwrap();
            let abnormal = read_image(&data.join(e.abnormal.as_ref().unwrap())).unwrap();
            let mask = read_image(&data.join(e.mask.as_ref().unwrap())).unwrap();
            write_image(&pred.join("test_cn").join(format!("{stem}_pseudo.abfn")), &healthy).unwrap();
            let map = anomaly_map(&abnormal, &healthy).unwrap();
            write_image(&pred.join("test_sad").join(format!("{stem}_anomaly.abfn")), &map).unwrap();
            // a reversed score map is unrelated to the mask layout
            let mut v = map.as_slice().to_vec();
            v.reverse();
            let shuffled = anobfn_core::ImageTensor::new(map.height(), map.width(), v).unwrap();
            shuffled_aps.push(average_precision(&shuffled, &mask).unwrap());
        }
    }
    let report = cmd_eval(&tiny(), &pred, &data, &tmp.path().join("eval")).unwrap();
    let ap = report.aggregate(|r| r.ap).unwrap().mean;
    let baseline = shuffled_aps.iter().sum::<f64>() / shuffled_aps.len() as f64;
    assert!(ap > 0.9, "ground-truth AP {ap}");
    assert!(ap > 2.0 * baseline, "{ap} vs shuffled {baseline}");
    assert!(report.records.iter().all(|r| r.mse == 0.0 && r.psnr == 100.0));
}

#[test]
fn binary_reports_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_anobfn");
    let tmp = TempDir::new().unwrap();
    let status = Command::new(exe).arg("bogus").status().unwrap();
    assert_eq!(status.code(), Some(1));
    let status = Command::new(exe)
        .args([
            "eval",
            "--pred",
            s(tmp.path()),
            "--data",
            s(&tmp.path().join("none")),
            "--out",
            s(tmp.path()),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    let status = Command::new(exe)
        .env("ANOBFN_THREADS", "zero")
        .args(["simulate", "--out", s(&tmp.path().join("d"))])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}
