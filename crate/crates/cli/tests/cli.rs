//! Black-box tests of the `uda-bench` binary: exit codes, file formats, and
//! the benchmark table contract.

use std::path::Path;
use std::process::{Command, Output};

use uda_bench::{
    metrics_path, read_metrics, summary_from_metrics, BenchmarkSpec, ConfigOverrides, PairSpec,
};
use uda_core::losses::TransferLossKind;
use uda_core::train::ArchConfig;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_uda-bench")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn")
}

#[test]
fn run_writes_one_record_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.jsonl");
    let output = run(&[
        "run",
        "--method",
        "mmd",
        "--data",
        "gauss:classes=2,per-class=10,dim=2,translate=1",
        "--epochs",
        "5",
        "--source-batch",
        "10",
        "--target-batch",
        "10",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{output:?}");
    let records = read_metrics(&out).unwrap();
    assert_eq!(records.len(), 5);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.epoch, i + 1);
        assert!(r.tgt_test_acc.is_some());
    }
}

#[test]
fn method_none_reports_zero_transfer_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("none.jsonl");
    let output = run(&[
        "run",
        "--method",
        "none",
        "--data",
        "moons:per-class=20,noise=0.1,rotation=30",
        "--epochs",
        "4",
        "--source-batch",
        "8",
        "--target-batch",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success());
    for r in read_metrics(&out).unwrap() {
        assert_eq!(r.transfer_loss, 0.0);
        assert!(r.disc_grad_norm.is_none());
    }
}

#[test]
fn usage_errors_exit_1() {
    // unknown flag (clap) and domain-level config errors both map to 1
    for args in [
        vec!["run", "--unknown-flag"],
        vec![
            "run",
            "--method",
            "warp",
            "--data",
            "moons:",
            "--out",
            "/tmp/x.jsonl",
        ],
        vec!["gradcheck", "--trials", "0"],
        vec![
            "gen-data",
            "--data",
            "csv:source=a.csv,target=b.csv",
            "--out-dir",
            "/tmp/d",
        ],
    ] {
        let output = run(&args);
        assert_eq!(output.status.code(), Some(1), "args {args:?}: {output:?}");
    }
}

#[test]
fn runtime_errors_exit_2() {
    let output = run(&[
        "run",
        "--method",
        "coral",
        "--data",
        "csv:source=/nonexistent/a.csv,target=/nonexistent/b.csv",
        "--out",
        "/tmp/never.jsonl",
    ]);
    assert_eq!(output.status.code(), Some(2), "{output:?}");
}

#[test]
fn gradcheck_passes_and_prints_per_loss_lines() {
    let output = run(&["gradcheck", "--seed", "3", "--trials", "2"]);
    assert!(output.status.success(), "{output:?}");
    let stdout = String::from_utf8(output.stdout).unwrap();
    for name in [
        "coral",
        "mmd_sq",
        "cross_entropy",
        "adversarial_cdan",
        "model_cdan_e",
    ] {
        assert!(stdout.contains(name), "missing {name} in:\n{stdout}");
    }
    assert!(stdout.contains("gradcheck: PASS"));
}

#[test]
fn gen_data_roundtrips_through_csv_runs() {
    let dir = tempfile::tempdir().unwrap();
    let gen = run(&[
        "gen-data",
        "--data",
        "gauss:classes=2,per-class=12,dim=2,translate=1",
        "--seed",
        "5",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(gen.status.success(), "{gen:?}");
    let files: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(files.len(), 2);
    let source = files
        .iter()
        .find(|p| p.to_str().unwrap().contains("source"))
        .unwrap();
    let target = files
        .iter()
        .find(|p| p.to_str().unwrap().contains("target"))
        .unwrap();

    let out = dir.path().join("csv_run.jsonl");
    let spec = format!(
        "csv:source={},target={}",
        source.display(),
        target.display()
    );
    let output = run(&[
        "run",
        "--method",
        "coral",
        "--data",
        &spec,
        "--epochs",
        "3",
        "--source-batch",
        "8",
        "--target-batch",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{output:?}");
    let records = read_metrics(&out).unwrap();
    // generated target CSVs carry labels, so target accuracy is evaluated
    assert!(records.iter().all(|r| r.tgt_test_acc.is_some()));
}

fn small_benchmark_spec(out_dir: &Path) -> BenchmarkSpec {
    BenchmarkSpec {
        methods: vec![TransferLossKind::None, TransferLossKind::Coral],
        pairs: vec!["gauss:classes=3,per-class=40,dim=2,translate=0"
            .parse::<PairSpec>()
            .unwrap()],
        seeds: vec![1, 2, 3],
        overrides: ConfigOverrides {
            epochs: Some(30),
            source_batch: Some(16),
            target_batch: Some(16),
            lr: Some(0.02),
            ..Default::default()
        },
        arch: ArchConfig {
            hidden: vec![16],
            bottleneck: Some(8),
            disc_hidden: vec![16],
        },
        out_dir: out_dir.to_path_buf(),
    }
}

/// Identity shift: adaptation cannot help, the table regenerates exactly
/// from the persisted metrics, and the cell std uses the n-1 denominator.
#[test]
fn benchmark_identity_shift_table_contract() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_benchmark_spec(dir.path());
    let table = uda_bench::run_benchmark(&spec).unwrap();
    assert!(!table.any_failed());
    assert_eq!(table.methods.len(), 2);
    assert_eq!(table.pairs.len(), 1);
    assert_eq!(table.cells.len(), 2);
    assert_eq!(table.cells[0].len(), 1);

    // identity shift: the two methods agree within noise
    let none = table.cell(TransferLossKind::None, 0).unwrap();
    let coral = table.cell(TransferLossKind::Coral, 0).unwrap();
    let pooled = ((none.std.powi(2) + coral.std.powi(2)) / 2.0).sqrt();
    assert!(
        (none.mean - coral.mean).abs() <= 2.0 * pooled.max(1e-9),
        "identity shift separated methods: {} vs {} (pooled {pooled})",
        none.mean,
        coral.mean
    );

    // regenerating the table from the metrics files reproduces it exactly
    let regenerated = summary_from_metrics(&spec).unwrap();
    assert_eq!(regenerated, table);

    // sample std over 3 seeds with the n-1 denominator
    let finals: Vec<f64> = spec
        .seeds
        .iter()
        .map(|&s| {
            let path = metrics_path(dir.path(), TransferLossKind::Coral, &spec.pairs[0], s);
            read_metrics(&path)
                .unwrap()
                .last()
                .unwrap()
                .tgt_test_acc
                .unwrap()
        })
        .collect();
    let mean = finals.iter().sum::<f64>() / 3.0;
    let expected_std = (finals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert_eq!(coral.std, expected_std);
    assert_eq!(coral.mean, mean);
    assert_eq!(coral.seeds, 3);

    // renderings exist and carry the CSV header
    let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(csv.starts_with("method,pair,mean_acc,std_acc,seeds"));
    assert!(dir.path().join("summary.txt").exists());
}

/// A failing run (bad CSV path) marks the cell and exits non-zero.
#[test]
fn benchmark_failed_run_marks_cell_and_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(&[
        "benchmark",
        "--methods",
        "none",
        "--pairs",
        "csv:source=/nonexistent/s.csv,target=/nonexistent/t.csv",
        "--seeds",
        "1",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2), "{output:?}");
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.contains("FAILED"), "{text}");
}

#[test]
fn save_params_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.jsonl");
    let params = dir.path().join("params.json");
    let output = run(&[
        "run",
        "--method",
        "cdan",
        "--data",
        "gauss:classes=2,per-class=10,dim=2,translate=1",
        "--epochs",
        "2",
        "--source-batch",
        "8",
        "--target-batch",
        "8",
        "--out",
        out.to_str().unwrap(),
        "--save-params",
        params.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{output:?}");
    let ckpt = uda_core::model::load_checkpoint(&params).unwrap();
    assert!(ckpt.discriminator.is_some());
    assert_eq!(ckpt.version, uda_core::model::CHECKPOINT_VERSION);
}
