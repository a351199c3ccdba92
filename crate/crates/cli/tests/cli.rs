//! End-to-end tests of the `rawbench` binary and its exit-code contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rawbench"))
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rawbench-cli-{tag}-{}", std::process::id()));
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn run_gen(data: &Path, n: usize, extra: &[&str]) -> Output {
    bin()
        .args([
            "gen",
            "--n",
            &n.to_string(),
            "--seed",
            "7",
            "--out",
            data.to_str().unwrap(),
        ])
        .args(extra)
        .output()
        .unwrap()
}

#[test]
fn gen_writes_dataset_and_is_idempotent() {
    let dir = tmpdir("gen");
    let out = run_gen(&dir, 10, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("Training"));
    assert!(text.contains("arborio"));
    assert!(dir.join("manifest.csv").exists());
    assert!(dir.join("generator.cfg").exists());
    assert!(dir.join("conversion.cfg").exists());

    // Rerun: nothing changes, the tool says so.
    let again = run_gen(&dir, 10, &[]);
    assert!(again.status.success());
    assert!(stdout(&again).contains("up to date"), "{}", stdout(&again));
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn gen_paper_imbalance_mimics_published_proportions() {
    let dir = tmpdir("gen-imb");
    let out = run_gen(&dir, 40, &["--imbalance", "paper"]);
    assert!(out.status.success());
    let manifest = rawbench_core::datagen::SplitManifest::load(&dir.join("manifest.csv")).unwrap();
    let counts = manifest.counts();
    let totals: Vec<usize> = counts.iter().map(|c| c.iter().sum()).collect();
    // Largest class is basmati, smallest arborio, mirroring the capture.
    assert!(totals[1] > totals[0]);
    assert!(totals[1] > totals[4]);
    manifest.validate_ratios().unwrap();
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn train_writes_checkpoint_history_and_summary_reproducibly() {
    let dir = tmpdir("train");
    let data = dir.join("data");
    assert!(run_gen(&data, 10, &[]).status.success());

    let run_dir = dir.join("run");
    let train = |out_dir: &Path| {
        bin()
            .args([
                "train",
                "--data",
                data.to_str().unwrap(),
                "--out",
                out_dir.to_str().unwrap(),
                "--variant",
                "original-raw",
                "--arch",
                "tiny-vgg",
                "--epochs",
                "2",
                "--lr",
                "0.01",
                "--seed",
                "5",
                "--width",
                "0.25",
            ])
            .output()
            .unwrap()
    };
    let out = train(&run_dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run_dir.join("original-raw-tiny-vgg-seed5.ckpt");
    let history = run_dir.join("history-original-raw-tiny-vgg-seed5.csv");
    let summary = run_dir.join("accuracy-original-raw-tiny-vgg.csv");
    assert!(ckpt.exists() && history.exists() && summary.exists());
    let history_text = fs::read_to_string(&history).unwrap();
    assert!(history_text.contains("epoch,train_loss,val_loss,train_acc,val_acc"));
    assert!(history_text.starts_with("# rawbench"));

    // Same seed, fresh directory: byte-identical checkpoint.
    let run_dir2 = dir.join("run2");
    assert!(train(&run_dir2).status.success());
    assert_eq!(
        fs::read(&ckpt).unwrap(),
        fs::read(run_dir2.join("original-raw-tiny-vgg-seed5.ckpt")).unwrap()
    );
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn train_repeats_aggregate_mean_and_stddev() {
    let dir = tmpdir("repeats");
    let data = dir.join("data");
    assert!(run_gen(&data, 10, &[]).status.success());
    let run_dir = dir.join("run");
    let out = bin()
        .args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            run_dir.to_str().unwrap(),
            "--variant",
            "packed-raw",
            "--arch",
            "tiny-vgg",
            "--repeats",
            "2",
            "--epochs",
            "1",
            "--width",
            "0.25",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(run_dir.join("accuracy-packed-raw-tiny-vgg.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().filter(|l| !l.starts_with('#')).collect();
    // header + 2 seeds + mean + stddev
    assert_eq!(rows.len(), 5, "{summary}");
    assert!(summary.contains("packed-raw,tiny-vgg,mean,"));
    assert!(summary.contains("packed-raw,tiny-vgg,stddev,"));
    // Two checkpoints, one per seed.
    assert!(run_dir.join("packed-raw-tiny-vgg-seed0.ckpt").exists());
    assert!(run_dir.join("packed-raw-tiny-vgg-seed1.ckpt").exists());
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn bench_lists_missing_checkpoints_and_exits_2() {
    let dir = tmpdir("bench-missing");
    let data = dir.join("data");
    assert!(run_gen(&data, 10, &[]).status.success());
    let ckpts = dir.join("ckpts");
    fs::create_dir_all(&ckpts).unwrap();
    let out = bin()
        .args([
            "bench",
            "--data",
            data.to_str().unwrap(),
            "--checkpoints",
            ckpts.to_str().unwrap(),
            "--out",
            dir.join("bench").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing checkpoints"), "{err}");
    assert!(err.contains("original-raw/tiny-vgg"), "{err}");
    assert!(err.contains("bca-raw/tiny-resnet"), "{err}");
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn full_pipeline_bench_and_report() {
    let dir = tmpdir("pipeline");
    let data = dir.join("data");
    assert!(run_gen(&data, 10, &[]).status.success());
    let run_dir = dir.join("run");

    for variant in ["original-raw", "packed-raw", "bca-raw", "rgb8", "rgb16"] {
        for arch in ["tiny-vgg", "tiny-resnet"] {
            let out = bin()
                .args([
                    "train",
                    "--data",
                    data.to_str().unwrap(),
                    "--out",
                    run_dir.to_str().unwrap(),
                    "--variant",
                    variant,
                    "--arch",
                    arch,
                    "--epochs",
                    "1",
                    "--width",
                    "0.25",
                ])
                .output()
                .unwrap();
            assert!(
                out.status.success(),
                "{variant}/{arch}: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        }
    }

    let out = bin()
        .args([
            "bench",
            "--data",
            data.to_str().unwrap(),
            "--checkpoints",
            run_dir.to_str().unwrap(),
            "--out",
            run_dir.to_str().unwrap(),
            "--runs",
            "5",
            "--warmup",
            "1",
            "--batch",
            "50",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("RAW vs RGB: "), "{text}");
    assert!(text.contains("50 samples"));
    assert!(run_dir.join("timing.csv").exists());
    assert!(run_dir.join("samples.jsonl").exists());
    // Report metadata reflects the requested runs/warmup.
    let timing = fs::read_to_string(run_dir.join("timing.csv")).unwrap();
    assert!(timing.contains("# runs=5 warmup=1 batch=50"), "{timing}");

    let out = bin()
        .args(["report", "--run-dir", run_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(run_dir.join("report.md")).unwrap();
    assert!(report.contains("Mean top-1 accuracy"));
    assert!(report.contains("sha256:"));
    assert!(run_dir.join("accuracy.svg").exists());
    assert!(run_dir.join("timing.svg").exists());

    // Regeneration from the same CSVs is deterministic.
    let before = fs::read(run_dir.join("report.md")).unwrap();
    assert!(bin()
        .args(["report", "--run-dir", run_dir.to_str().unwrap()])
        .output()
        .unwrap()
        .status
        .success());
    assert_eq!(before, fs::read(run_dir.join("report.md")).unwrap());
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn report_tolerates_partial_data_with_absent_markers() {
    let dir = tmpdir("report-partial");
    let data = dir.join("data");
    assert!(run_gen(&data, 10, &[]).status.success());
    let run_dir = dir.join("run");
    let out = bin()
        .args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            run_dir.to_str().unwrap(),
            "--variant",
            "rgb8",
            "--arch",
            "tiny-vgg",
            "--epochs",
            "1",
            "--width",
            "0.25",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());

    let out = bin()
        .args(["report", "--run-dir", run_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let report = fs::read_to_string(run_dir.join("report.md")).unwrap();
    assert!(report.contains("absent"), "{report}");
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn help_documents_the_defaults() {
    let out = bin().args(["--help"]).output().unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("learning rate 0.001"));
    assert!(text.contains("momentum 0.9"));

    let out = bin().args(["train", "--help"]).output().unwrap();
    let text = stdout(&out);
    assert!(text.contains("0.001"), "{text}");
    assert!(text.contains("0.0001"));
    assert!(text.contains("default: 32"));

    let out = bin().args(["bench", "--help"]).output().unwrap();
    let text = stdout(&out);
    assert!(text.contains("default: 50"));
    assert!(text.contains("default: 5"));
    assert!(text.contains("default: 457"));
}

#[test]
fn exit_codes_follow_the_contract() {
    // Usage error: unknown subcommand.
    let out = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    // Usage error: bad variant value.
    let out = bin()
        .args([
            "train", "--data", "/nonexistent", "--out", "/tmp/x", "--variant", "bogus", "--arch",
            "tiny-vgg",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    // Data error: missing dataset.
    let dir = tmpdir("exit-codes");
    let out = bin()
        .args([
            "train",
            "--data",
            dir.join("missing").to_str().unwrap(),
            "--out",
            dir.join("out").to_str().unwrap(),
            "--variant",
            "rgb8",
            "--arch",
            "tiny-vgg",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    fs::remove_dir_all(dir).unwrap();
}
