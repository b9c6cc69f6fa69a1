//! End-to-end behavior of the loop on the mock world.

mod common;

use std::net::TcpListener;
use std::sync::Arc;
use std::time::Duration;

use common::*;
use dnr_core::backends::remote::{remote_suite, serve};
use dnr_core::backends::{Backend, BackendError, BackendResult, Expert};
use dnr_core::experts::ExpertOutput;
use dnr_core::fixtures::{is_biased, mock_suite, suite_config, suite_scene};
use dnr_core::harness::{DatasetAdapter, SceneDirAdapter};
use dnr_core::pipeline::{exhaustive_vlm_calls, policy_vlm_calls, Stage};
use dnr_core::selector::{collect, cost_comparison, read_examples, train, write_examples, FixedPolicy, SelectorModel, TrainParams};
use dnr_core::{run_dnr, run_policy, DnRResult, Selection};

struct Broken;

impl Backend for Broken {
    fn name(&self) -> &str {
        "broken"
    }
    fn version(&self) -> &str {
        "0"
    }
}

impl Expert for Broken {
    fn run(&self, _: &dnr_core::Image) -> BackendResult<ExpertOutput> {
        Err(BackendError::unavailable("broken", "always down"))
    }
}

fn scrub(mut r: DnRResult) -> DnRResult {
    r.trace = r.trace.untimed();
    r
}

#[test]
fn biased_scene_is_corrected_and_traced() {
    let scene = suite_scene(0);
    assert!(is_biased(&scene));
    let cfg = suite_config();
    let q = &scene.questions[0];
    let r = run_dnr(&scene.render(), Some(&q.text), &cfg, &mock_backends()).unwrap();
    assert_ne!(r.draft, scene.truth["q1"]);
    assert_eq!(r.final_answer, scene.truth["q1"]);
    assert!(matches!(r.selected, Selection::Expert(_)));
    assert!(r.selected_gain().unwrap() > 0.0);
    let stages: Vec<Stage> = r.trace.events.iter().map(|e| e.stage).collect();
    for s in [Stage::Draft, Stage::Decompose, Stage::Ground, Stage::Mask, Stage::Baseline, Stage::Refine, Stage::Select] {
        assert!(stages.contains(&s), "missing {s:?}");
    }
    assert_eq!(r.trace.vlm_calls, exhaustive_vlm_calls(cfg.masks, 3));
}

#[test]
fn grounded_scene_keeps_the_draft() {
    let scene = suite_scene(1);
    assert!(!is_biased(&scene));
    let r = run_dnr(&scene.render(), Some(&scene.questions[0].text), &suite_config(), &mock_backends()).unwrap();
    assert_eq!(r.selected, Selection::Draft);
    assert_eq!(r.final_answer, r.draft);
    assert_eq!(r.draft, scene.truth["q1"]);
}

#[test]
fn failed_expert_is_skipped_and_not_counted() {
    let mut backends = mock_backends();
    backends.experts.insert(1, Arc::new(Broken));
    let scene = suite_scene(0);
    let cfg = suite_config();
    let r = run_dnr(&scene.render(), Some(&scene.questions[0].text), &cfg, &backends).unwrap();
    assert_eq!(r.expert_failures.len(), 1);
    assert_eq!(r.expert_failures[0].index, 1);
    assert_eq!(r.per_expert.len(), 3);
    assert!(r.branch(1).is_none());
    assert_eq!(r.trace.vlm_calls, exhaustive_vlm_calls(cfg.masks, 3));
    assert_eq!(r.final_answer, scene.truth["q1"]);
}

#[test]
fn captioning_runs_without_a_question() {
    let scene = suite_scene(3);
    let r = run_dnr(&scene.render(), None, &suite_config(), &mock_backends()).unwrap();
    assert!(r.question.is_none());
    assert!(!r.query_set.terms.is_empty());
    assert!(!r.draft.is_empty());
}

#[test]
fn policy_paths_match_their_call_counts() {
    let scene = suite_scene(0);
    let q = scene.questions[0].text.clone();
    let cfg = suite_config();
    let b = mock_backends();
    let img = scene.render();
    for (policy, verify) in [(0, false), (0, true), (1, false), (1, true), (3, true)] {
        let r = run_policy(&img, Some(&q), &cfg, &b, &FixedPolicy(policy), verify).unwrap();
        let refined = policy != 0;
        assert_eq!(r.trace.vlm_calls, policy_vlm_calls(cfg.masks, refined, verify), "policy {policy} verify {verify}");
        assert_eq!(r.trace.expert_calls, usize::from(refined));
        assert_eq!(r.predicted, Some(Selection::from_class(policy)));
        if refined {
            assert_eq!(r.final_answer, scene.truth["q1"]);
        }
    }
    assert!(run_policy(&img, Some(&q), &cfg, &b, &FixedPolicy(9), false).is_err());
}

#[test]
fn remote_backends_reproduce_local_results() {
    let server = serve(TcpListener::bind("127.0.0.1:0").unwrap(), mock_backends()).unwrap();
    let remote = remote_suite(&server.addr().to_string(), Duration::from_secs(10)).unwrap();
    assert_eq!(remote.expert_names(), mock_backends().expert_names());
    assert!(remote.image_embedder.is_some());
    let cfg = suite_config();
    for i in [0, 1, 6] {
        let scene = suite_scene(i);
        let q = scene.questions[0].text.clone();
        let local = run_dnr(&scene.render(), Some(&q), &cfg, &mock_backends()).unwrap();
        let far = run_dnr(&scene.render(), Some(&q), &cfg, &remote).unwrap();
        assert_eq!(scrub(local.clone()), scrub(far), "scene {i}");
    }
    server.shutdown();
}

#[test]
fn collect_train_and_reload_selector() {
    let cfg = suite_config();
    let backends = mock_backends();
    let ds = SceneDirAdapter::from_scenes("mock_suite", mock_suite());
    let samples = ds.samples().unwrap();
    let out = collect(&samples, &cfg, &backends, 2);
    assert!(out.failed.is_empty());
    assert_eq!(out.examples.len(), samples.len());
    for e in &out.examples {
        e.validate().unwrap();
        let biased = e.sample_id.starts_with("scene") && {
            let n: usize = e.sample_id[5..7].parse().unwrap();
            n.is_multiple_of(2)
        };
        assert_eq!(e.label != 0, biased, "{}", e.sample_id);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("examples.jsonl");
    write_examples(&path, &out.examples).unwrap();
    let back = read_examples(&path).unwrap();
    assert_eq!(back, out.examples);

    let params = TrainParams {
        epochs: 5,
        ..TrainParams::default()
    };
    let (model, report) = train(&back, &params, &backends.expert_names(), &cfg.fingerprint()).unwrap();
    assert_eq!(report.epochs.len(), 5);
    assert!((report.initial_loss - 4f64.ln()).abs() < 1e-9);
    let model_path = dir.path().join("model.json");
    model.save(&model_path).unwrap();
    let loaded = SelectorModel::load(&model_path).unwrap();
    assert_eq!(loaded.fingerprint(), model.fingerprint());
    let mut text = std::fs::read_to_string(&model_path).unwrap();
    text = text.replacen(&model.fingerprint(), "0000000000000000", 1);
    std::fs::write(&model_path, text).unwrap();
    assert!(SelectorModel::load(&model_path).is_err());
}

#[test]
fn draft_only_policy_removes_every_branch() {
    let cfg = suite_config();
    let backends = mock_backends();
    let samples = SceneDirAdapter::from_scenes("mock_suite", mock_suite()).samples().unwrap();
    let report = cost_comparison(&samples, &cfg, &backends, &FixedPolicy(0), false, 0);
    assert_eq!(report.samples, 20);
    assert_eq!(report.policy_expert_branches, 0);
    assert_eq!(report.branch_reduction_pct, 100.0);
    assert_eq!(report.policy_calls, 20);
    assert_eq!(report.exhaustive_calls, 20 * exhaustive_vlm_calls(cfg.masks, 3));
    // the draft is wrong on every biased scene
    assert_eq!(report.delta_performance, Some(-50.0));
}
