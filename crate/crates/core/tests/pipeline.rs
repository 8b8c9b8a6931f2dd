use std::fs;
use std::path::Path;

use auditlens_core::eval::ConfusionCounts;
use auditlens_core::gateway::{BackendConfig, BackendKind, BatchError, GatewayError};
use auditlens_core::ledger::{write_dataset, DataFormat};
use auditlens_core::pipeline::{ablate, detect, PipelineError, RunConfig};
use auditlens_core::prompt::{PromptVariant, VariantKind};
use auditlens_core::synthgen::{generate, GenConfig};

fn generated(out: &Path, n: usize) -> RunConfig {
    RunConfig {
        gen: Some(GenConfig {
            n_postings: n,
            anomaly_rate: 0.05,
            seed: 3,
            ..GenConfig::default()
        }),
        output_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

fn replaying(config: &RunConfig, fixtures: &Path) -> RunConfig {
    RunConfig {
        backend: BackendConfig {
            kind: BackendKind::Replay,
            replay_path: Some(fixtures.to_path_buf()),
            ..config.backend.clone()
        },
        ..config.clone()
    }
}

#[test]
fn replay_reproduces_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let config = generated(tmp.path(), 200);
    let recorded = detect(&config).unwrap();
    let replay = replaying(&config, &recorded.run_dir.join("replay.jsonl"));
    let a = detect(&replay).unwrap();
    let b = detect(&replay).unwrap();
    let strip = |r: &auditlens_core::eval::EvalReport| {
        let mut r = r.clone();
        r.run_metadata = serde_json::Value::Null;
        r
    };
    let (ra, rb) = (a.run.report.unwrap(), b.run.report.unwrap());
    assert_eq!(ra, rb);
    assert_eq!(strip(&ra), strip(recorded.run.report.as_ref().unwrap()));
    let json = |v: &[auditlens_core::gateway::ModelVerdict]| serde_json::to_string(v).unwrap();
    assert_eq!(json(&a.run.verdicts), json(&recorded.run.verdicts));
}

#[test]
fn replay_miss_aborts_and_names_the_posting() {
    let tmp = tempfile::tempdir().unwrap();
    let config = generated(tmp.path(), 100);
    let recorded = detect(&config).unwrap();
    let fixtures = recorded.run_dir.join("replay.jsonl");
    let text = fs::read_to_string(&fixtures).unwrap();
    let kept: Vec<&str> = text
        .lines()
        .enumerate()
        .filter(|(i, _)| *i != 36)
        .map(|(_, l)| l)
        .collect();
    let pruned = tmp.path().join("pruned.jsonl");
    fs::write(&pruned, kept.join("\n") + "\n").unwrap();
    let missing = recorded.run.verdicts[36].posting_id.clone();

    let err = detect(&replaying(&config, &pruned)).unwrap_err();
    match &err {
        PipelineError::Batch(BatchError::Backend {
            posting_id,
            source: GatewayError::ReplayMiss { posting_id: inner, .. },
        }) => {
            assert_eq!(posting_id, &missing);
            assert_eq!(inner, &missing);
        }
        other => panic!("expected a replay miss, got {other:?}"),
    }
    assert!(err.to_string().contains(&missing));

    let run_dirs: Vec<_> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.join("failure.txt").is_file())
        .collect();
    assert_eq!(run_dirs.len(), 1);
    assert!(!run_dirs[0].join("verdicts.jsonl").exists());
}

#[test]
fn single_variant_ablation_is_a_one_row_table() {
    let tmp = tempfile::tempdir().unwrap();
    let config = RunConfig {
        ablation_variants: vec![VariantKind::NoIf],
        ..generated(tmp.path(), 150)
    };
    let out = ablate(&config).unwrap();
    let cmp = out.comparison.unwrap();
    assert_eq!(cmp.rows.len(), 1);
    assert_eq!(cmp.baseline, "no_if");
    let row = &cmp.rows[0];
    assert_eq!((row.delta_precision, row.delta_recall, row.delta_f1), (0.0, 0.0, 0.0));
    assert_eq!(out.baselines.len(), 2);
    for f in [
        "comparison.json",
        "comparison.txt",
        "reports.json",
        "baselines.json",
        "replay.jsonl",
    ] {
        assert!(out.run_dir.join(f).is_file(), "missing {f}");
    }
    assert!(out.run_dir.join("variants/no_if/verdicts.jsonl").is_file());
}

#[test]
fn unreachable_http_endpoint_fails_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let config = RunConfig {
        backend: BackendConfig {
            kind: BackendKind::Http,
            endpoint_url: Some(format!("http://127.0.0.1:{port}/v1/chat/completions")),
            max_retries: 0,
            timeout_secs: 2.0,
            ..BackendConfig::default()
        },
        ..generated(tmp.path(), 100)
    };
    let err = detect(&config).unwrap_err();
    assert!(
        matches!(
            err,
            PipelineError::Batch(BatchError::Backend {
                source: GatewayError::Transport { attempts: 1, .. },
                ..
            })
        ),
        "{err:?}"
    );
}

#[test]
fn unlabeled_file_with_pseudo_labels_matches_jet() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(&GenConfig {
        n_postings: 200,
        anomaly_rate: 0.05,
        ..GenConfig::default()
    })
    .unwrap();
    let path = tmp.path().join("ledger.csv");
    write_dataset(&data.dataset, &path, DataFormat::Csv).unwrap();
    let config = RunConfig {
        dataset_path: Some(path),
        pseudo_label: true,
        variant: PromptVariant::new(VariantKind::SyntheticFlags),
        output_dir: tmp.path().join("runs"),
        ..RunConfig::default()
    };
    let out = detect(&config).unwrap();
    let report = out.run.report.unwrap();
    assert_eq!(report.run_metadata["label_provenance"], "JetPseudoLabel");
    assert_eq!(report.counts.fp + report.counts.fn_, 0);
    let jet = out.baselines.iter().find(|r| r.variant == "jet").unwrap();
    assert_eq!(jet.counts, report.counts);
}

#[test]
fn unparseable_responses_are_excluded_or_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    let config = generated(tmp.path(), 100);
    let recorded = detect(&config).unwrap();
    let fixtures = recorded.run_dir.join("replay.jsonl");
    let text = fs::read_to_string(&fixtures).unwrap();
    let broken: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 10 {
                let mut rec: serde_json::Value = serde_json::from_str(l).unwrap();
                rec["raw_response"] = "I cannot decide.".into();
                rec.to_string()
            } else {
                l.to_string()
            }
        })
        .collect();
    let path = tmp.path().join("broken.jsonl");
    fs::write(&path, broken.join("\n") + "\n").unwrap();
    let bad_id = recorded.run.verdicts[10].posting_id.clone();

    let lenient = detect(&replaying(&config, &path)).unwrap();
    let report = lenient.run.report.unwrap();
    assert_eq!(report.excluded_ids, vec![bad_id.clone()]);
    assert_eq!(report.counts.total(), 99);
    let errors = fs::read_to_string(lenient.run_dir.join("errors.jsonl")).unwrap();
    assert_eq!(errors.lines().count(), 1);
    assert!(errors.contains(&bad_id));

    let mut strict = replaying(&config, &path);
    strict.backend.fail_fast = true;
    match detect(&strict).unwrap_err() {
        PipelineError::Batch(BatchError::FailFast { posting_id, .. }) => assert_eq!(posting_id, bad_id),
        other => panic!("expected fail-fast, got {other:?}"),
    }
}

#[test]
fn generated_run_counts_match_the_injected_rate() {
    let tmp = tempfile::tempdir().unwrap();
    let config = RunConfig {
        variant: PromptVariant::new(VariantKind::SyntheticFlags),
        ..generated(tmp.path(), 400)
    };
    let out = detect(&config).unwrap();
    assert_eq!(out.run.report.unwrap().counts, ConfusionCounts::new(20, 0, 0, 380));
}
