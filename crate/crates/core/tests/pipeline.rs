//! Whole-pipeline behaviour through the runner: run bundles, baseline
//! equivalence, variants, semi-supervised runs and cache resumption.

use std::collections::BTreeSet;
use std::path::Path;

use lanid_core::config::{validate_config, EmbeddingSource, Preset, RunConfig, Variant};
use lanid_core::data::Mode;
use lanid_core::runner::{execute, read_report, run_baseline, run_experiment, RunInputs};
use lanid_core::synthetic::{generate, SyntheticSpec};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec { clusters: 4, dim: 8, per_cluster: 40, separation: 6.0, ..SyntheticSpec::default() }
}

fn config_in(dir: &Path) -> RunConfig {
    let files = generate(&small_spec()).write_to(&dir.join("data")).unwrap();
    let mut c = RunConfig::from_preset(Preset::Banking);
    c.k = None;
    c.sampler.k = 20;
    c.normalize = false;
    c.dataset.path = files.dataset;
    c.embeddings = EmbeddingSource::File { train: files.train_embeddings, test: files.test_embeddings };
    c.output_dir = dir.join("runs");
    c
}

fn listing(dir: &Path) -> BTreeSet<String> {
    std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect()
}

#[test]
fn run_directory_holds_the_full_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let config = config_in(tmp.path());
    let (result, dir) = run_experiment(&config).unwrap();
    let expected: BTreeSet<String> =
        ["adapter.ckpt", "assignment.csv", "assignment.json", "config.toml", "log.jsonl", "report.json"]
            .into_iter()
            .map(String::from)
            .collect();
    assert_eq!(listing(&dir), expected);
    assert_eq!(read_report(&dir).unwrap(), result.report);
    assert_eq!(result.report.k, 4);

    let log = std::fs::read_to_string(dir.join("log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5, "four sampling rounds plus a summary");
    assert_eq!(lines.last().unwrap()["event"], "summary");
    let starts: Vec<u64> = lines[..4].iter().map(|l| l["start_epoch"].as_u64().unwrap()).collect();
    assert_eq!(starts, vec![0, 3, 6, 9]);

    let csv = std::fs::read_to_string(dir.join("assignment.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("utterance_id,cluster_id"));
    assert_eq!(csv.lines().count(), 161);

    let snapshot = RunConfig::from_toml_str(&std::fs::read_to_string(dir.join("config.toml")).unwrap()).unwrap();
    assert_eq!(snapshot, result.config);
}

#[test]
fn baseline_equals_zero_epoch_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let config = config_in(tmp.path());
    let (baseline, dir) = run_baseline(&config).unwrap();
    let mut zero = config.clone();
    zero.train.epochs = 0;
    let inputs = RunInputs::load(&zero).unwrap();
    let direct = execute(&zero, &inputs).unwrap();
    assert_eq!(baseline.report_json(), direct.report_json());
    assert_eq!(baseline.assignment.labels, direct.assignment.labels);
    assert_eq!(baseline.summary.kind, "baseline");
    assert!(baseline.log.is_empty());
    let report = std::fs::read_to_string(dir.join("report.json")).unwrap();
    let keys: Vec<String> = serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(&report)
        .unwrap()
        .keys()
        .cloned()
        .collect();
    assert_eq!(keys, ["acc", "ari", "k", "n", "nmi"].map(String::from));
}

#[test]
fn near_variant_never_runs_the_density_sampler() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = config_in(tmp.path());
    config.variant = Variant::LanidNear;
    let (result, dir) = run_experiment(&config).unwrap();
    assert!(!result.summary.density_sampler_invoked);
    assert!(result.log.iter().all(|l| l.density_pairs == 0 && l.eps.is_none()));
    let log = std::fs::read_to_string(dir.join("log.jsonl")).unwrap();
    let summary: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(summary["density_sampler_invoked"], false);
}

#[test]
fn semi_supervised_runs_use_known_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = config_in(tmp.path());
    config.mode = Mode::SemiSupervised;
    config.kcr = Some(0.5);
    config.labeled_fraction = 0.5;
    assert!(validate_config(&config).is_empty());
    let (result, _) = run_experiment(&config).unwrap();
    assert_eq!(result.summary.mode, Mode::SemiSupervised);
    assert!(result.log.iter().map(|l| l.shortcut).sum::<usize>() > 0);
}

#[test]
fn label_cache_lets_a_rerun_skip_the_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = config_in(tmp.path());
    config.oracle.cache_path = Some(tmp.path().join("labels.jsonl"));
    let (first, _) = run_experiment(&config).unwrap();
    assert!(first.log.iter().map(|l| l.dispatched).sum::<usize>() > 0);
    let (second, _) = run_experiment(&config).unwrap();
    assert_eq!(second.log.iter().map(|l| l.dispatched).sum::<usize>(), 0);
    assert_eq!(first.report_json(), second.report_json());
}

#[test]
fn invalid_configs_are_rejected_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = config_in(tmp.path());
    config.sampler.n_k = config.sampler.k;
    config.mode = Mode::SemiSupervised;
    config.kcr = Some(0.0);
    let err = run_experiment(&config).unwrap_err().to_string();
    assert!(err.contains("n_k must be < K") && err.contains("kcr"), "{err}");
    assert!(!config.output_dir.exists());
}

#[test]
fn misaligned_embeddings_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = config_in(tmp.path());
    let other = generate(&SyntheticSpec { per_cluster: 10, ..small_spec() }).write_to(&tmp.path().join("other")).unwrap();
    if let EmbeddingSource::File { test, .. } = &mut config.embeddings {
        *test = other.test_embeddings;
    }
    let err = run_experiment(&config).unwrap_err().to_string();
    assert!(err.contains("do not align"), "{err}");
}
