use std::fs;
use std::path::Path;

use proxyslice::data::{read_proxy, sha256_hex, Method};
use proxyslice::eval::EvalReport;
use proxyslice::pipeline::*;
use proxyslice::search::{read_search_log, Algorithm};
use serde_json::Value;

fn small_config(dir: &Path) -> RunConfig {
    let text = format!(
        r#"
seed = 5
output_dir = "{}"

[dataset]
kind = "patterns"
classes = 2
per_class = 16
test_per_class = 8
side = 5

[sampling]
method = "cc-or"
ratio = 0.5

[search]
algorithm = "gdas"
epochs = 3
batch_size = 8
channels = 2
cells = 1

[eval]
widths = [2]
seeds = [0]
cells = 1

[eval.train]
epochs = 2
batch_size = 8
"#,
        dir.display()
    );
    parse_run_config(&text, &[]).unwrap()
}

fn digest(path: &Path) -> String {
    sha256_hex(&fs::read(path).unwrap())
}

#[test]
fn artifacts_exist_and_chain_by_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(&tmp.path().join("run"));
    let out = run_pipeline(&cfg).unwrap();
    let dir = &out.output_dir;
    let m = Manifest::read(&dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.status, "ok");
    assert_eq!(m.config, cfg);
    for a in &m.artifacts {
        assert_eq!(digest(&dir.join(&a.path)), a.sha256, "{}", a.path);
    }
    for name in ["eval.md", "edges.svg", "timing.svg", "edges.csv", "timing.csv"] {
        assert!(
            m.artifacts.iter().any(|a| a.path == name),
            "{name} missing from manifest"
        );
    }

    let source = &m.dataset.as_ref().unwrap().source_hash;
    let proxy = m.artifact(Stage::Sample).unwrap();
    let search = m.artifact(Stage::Search).unwrap();
    let eval = m.artifact(Stage::Eval).unwrap();
    let analysis = m.artifact(Stage::Analyze).unwrap();
    assert_eq!(proxy.parent.as_ref(), Some(source));
    assert_eq!(search.parent.as_ref(), Some(&proxy.sha256));
    assert_eq!(eval.parent.as_ref(), Some(&search.sha256));
    assert_eq!(analysis.parent.as_ref(), Some(&eval.sha256));

    let p = read_proxy(&dir.join(PROXY_FILE), None).unwrap();
    assert_eq!(p.source_hash(), source);
    assert_eq!(p.method(), Method::ClassOutlier);
    assert_eq!(p.len(), 16);

    let log = read_search_log(&dir.join(SEARCH_LOG_FILE)).unwrap();
    assert_eq!(log.provenance.proxy_hash, proxy.sha256);
    assert_eq!(log.config.algorithm, Algorithm::Gdas);
    assert_eq!(Some(log.genotype), m.genotype);

    let report = EvalReport::read(&dir.join(EVAL_FILE)).unwrap();
    assert_eq!(report.genotype, log.genotype);
    assert_eq!(report.lineage["proxy"], proxy.sha256);
    assert_eq!(report.lineage["search_log"], search.sha256);
    assert_eq!(&report.lineage["source_hash"], source);

    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.join(ANALYSIS_FILE)).unwrap()).unwrap();
    assert_eq!(summary["lineage"]["eval_report"], eval.sha256.as_str());
    let svg = fs::read_to_string(dir.join("edges.svg")).unwrap();
    assert!(svg.contains(&format!("eval_report={}", eval.sha256)));
}

#[test]
fn rerun_reproduces_proxy_and_genotype() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(&tmp.path().join("first"));
    let first = run_pipeline(&cfg).unwrap();
    let second_dir = tmp.path().join("second");
    let second = rerun_from_manifest(&first.output_dir.join(MANIFEST_FILE), Some(&second_dir)).unwrap();
    assert_eq!(second.output_dir, second_dir);
    assert_eq!(
        fs::read(first.output_dir.join(PROXY_FILE)).unwrap(),
        fs::read(second_dir.join(PROXY_FILE)).unwrap()
    );
    assert_eq!(first.manifest.genotype, second.manifest.genotype);
    // the search log carries wall-clock times, so only the results are compared
    let a = EvalReport::read(&first.output_dir.join(EVAL_FILE)).unwrap();
    let b = EvalReport::read(&second_dir.join(EVAL_FILE)).unwrap();
    assert_eq!((a.runs, a.widths), (b.runs, b.widths));
}

#[test]
fn failed_stage_keeps_earlier_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&tmp.path().join("run"));
    cfg.eval.train.lr = 1e200;
    cfg.eval.train.grad_clip = None;
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!((err.stage, err.exit_code()), (Stage::Eval, 4));
    let m = Manifest::read(&cfg.output_dir.join(MANIFEST_FILE)).unwrap();
    assert!(m.status.starts_with("failed: eval:"), "{}", m.status);
    assert!(m.genotype.is_some());
    for stage in [Stage::Sample, Stage::Search, Stage::Eval] {
        let a = m.artifact(stage).unwrap();
        assert_eq!(digest(&cfg.output_dir.join(&a.path)), a.sha256);
    }
    assert!(m.artifact(Stage::Analyze).is_none());
}

#[test]
fn missing_scores_stop_at_sampling() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&tmp.path().join("run"));
    cfg.sampling.method = Method::Transfer;
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!((err.stage, err.exit_code()), (Stage::Sample, 2));
    assert!(err.to_string().starts_with("sample: "));
    let m = Manifest::read(&cfg.output_dir.join(MANIFEST_FILE)).unwrap();
    assert!(m.dataset.is_some());
    assert!(m.artifacts.is_empty());
}

#[test]
fn config_errors_are_usage_errors() {
    let err = parse_run_config("[sampling]\nmethod = \"magic\"\n", &[]).unwrap_err();
    assert_eq!((err.stage, err.exit_code()), (Stage::Config, 2));
    assert!(err.message.contains("cc-or"));
    let err = parse_run_config("[search]\nalgorithm = \"darts2\"\n", &[]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = parse_run_config("", &[r#"{"sampling": {"ratio": 0}}"#.into()]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(load_run_config(Path::new("/nonexistent/run.toml"), &[]).is_err());
}

#[test]
fn cifar_needs_a_data_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&tmp.path().join("run"));
    cfg.dataset.kind = DatasetKind::Cifar10;
    cfg.data_dir = Some(tmp.path().join("nowhere"));
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!((err.stage, err.exit_code()), (Stage::Dataset, 3));
}

/// Writes a miniature CIFAR-10 binary tree: `per_batch` records per file,
/// labels cycling through the ten classes.
fn fake_cifar10(dir: &Path, per_batch: usize) {
    let root = dir.join("cifar-10-batches-bin");
    fs::create_dir_all(&root).unwrap();
    let files = [
        "data_batch_1.bin",
        "data_batch_2.bin",
        "data_batch_3.bin",
        "data_batch_4.bin",
        "data_batch_5.bin",
        "test_batch.bin",
    ];
    for (f, name) in files.iter().enumerate() {
        let mut bytes = Vec::new();
        for i in 0..per_batch {
            let label = (i % 10) as u8;
            bytes.push(label);
            bytes.extend((0..3072).map(|p| ((p * 7 + i * 13 + f * 31 + label as usize * 40) % 256) as u8));
        }
        fs::write(root.join(name), bytes).unwrap();
    }
}

#[test]
fn cifar_layout_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    fake_cifar10(tmp.path(), 20);
    let mut cfg = small_config(&tmp.path().join("run"));
    cfg.dataset.kind = DatasetKind::Cifar10;
    cfg.dataset.downsample = 8;
    cfg.dataset.limit_per_class = Some(6);
    cfg.data_dir = Some(tmp.path().to_path_buf());
    cfg.sampling.method = Method::Autoencoder;
    let out = run_pipeline(&cfg).unwrap();
    let info = out.manifest.dataset.unwrap();
    assert_eq!(info.train_samples, 60);
    assert_eq!(info.test_samples, 20);
    let p = read_proxy(&out.output_dir.join(PROXY_FILE), None).unwrap();
    assert_eq!(p.len(), 30);
}
