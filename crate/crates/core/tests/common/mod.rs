//! Stub backends and synthetic logs shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use dnr_core::backends::mock::MockWorld;
use dnr_core::backends::{Backend, BackendError, BackendResult, Grounder, TextEncoder, VisionLanguageModel};
use dnr_core::harness::{RecordFailure, ResultLog, RunHeader, RunMode, SampleRecord, TaskKind, LOG_FORMAT};
use dnr_core::fixtures::mock_suite;
use dnr_core::{BackendSuite, DnRConfig, Image, Selection};

/// Answers with a fixed string per image id.
pub struct StubVlm(pub BTreeMap<String, String>);

impl Backend for StubVlm {
    fn name(&self) -> &str {
        "stub-vlm"
    }
    fn version(&self) -> &str {
        "0"
    }
}

impl VisionLanguageModel for StubVlm {
    fn answer(&self, image: &Image, _: &str) -> BackendResult<String> {
        self.0
            .get(image.id())
            .cloned()
            .ok_or_else(|| BackendError::rejected("stub-vlm", format!("no answer for {}", image.id())))
    }
}

/// Looks texts up in a fixed table of vectors.
pub struct StubEncoder(pub BTreeMap<String, Vec<f64>>);

impl Backend for StubEncoder {
    fn name(&self) -> &str {
        "stub-encoder"
    }
    fn version(&self) -> &str {
        "0"
    }
}

impl TextEncoder for StubEncoder {
    fn dim(&self) -> usize {
        self.0.values().next().map_or(0, Vec::len)
    }
    fn embed(&self, text: &str) -> BackendResult<Vec<f64>> {
        self.0
            .get(text)
            .cloned()
            .ok_or_else(|| BackendError::rejected("stub-encoder", format!("unknown text {text}")))
    }
}

/// Unit vector in the plane at cosine `c` to `[1, 0]`.
pub fn at_cosine(c: f64) -> Vec<f64> {
    vec![c, (1.0 - c * c).max(0.0).sqrt()]
}

/// Returns a fixed map per term.
pub struct StubGrounder(pub BTreeMap<String, Array2<f64>>);

impl Backend for StubGrounder {
    fn name(&self) -> &str {
        "stub-grounder"
    }
    fn version(&self) -> &str {
        "0"
    }
}

impl Grounder for StubGrounder {
    fn ground(&self, _: &Image, query: &str) -> BackendResult<Array2<f64>> {
        self.0
            .get(query)
            .cloned()
            .ok_or_else(|| BackendError::rejected("stub-grounder", query.to_owned()))
    }
}

pub fn mock_backends() -> BackendSuite {
    Arc::new(MockWorld::new(mock_suite())).suite()
}

pub fn header(samples: usize) -> RunHeader {
    RunHeader {
        format: LOG_FORMAT.to_owned(),
        fingerprint: "0000000000000000".to_owned(),
        dataset: "synthetic".to_owned(),
        mode: RunMode::Exhaustive,
        seed: 0,
        config: DnRConfig::default(),
        backend_versions: BTreeMap::new(),
        expert_names: vec!["a".into(), "b".into(), "c".into()],
        samples,
    }
}

/// A successful record with the given outcome.
pub fn record(
    id: &str,
    correct_draft: bool,
    correct_final: bool,
    revised: bool,
    u_base: f64,
    u_selected: Option<f64>,
) -> SampleRecord {
    let selected = if u_selected.is_some() { Selection::Expert(0) } else { Selection::Draft };
    SampleRecord {
        fingerprint: "0000000000000000".to_owned(),
        sample_id: id.to_owned(),
        task_kind: TaskKind::Vqa,
        question: Some("q".to_owned()),
        failure: None,
        draft: Some("draft".to_owned()),
        final_answer: Some(if revised { "refined" } else { "draft" }.to_owned()),
        selected: Some(selected),
        predicted: None,
        alpha: Some(0.5),
        u_base: Some(u_base),
        u_selected,
        correct_draft: Some(correct_draft),
        correct_final: Some(correct_final),
        branches: Vec::new(),
        expert_failures: Vec::new(),
        reports: Vec::new(),
        trace: None,
    }
}

pub fn failed(id: &str) -> SampleRecord {
    let mut r = record(id, false, false, false, 0.0, None);
    r.failure = Some(RecordFailure {
        stage: "draft".into(),
        message: "down".into(),
    });
    r.correct_draft = None;
    r.correct_final = None;
    r.draft = None;
    r.final_answer = None;
    r.selected = None;
    r.u_base = None;
    r.u_selected = None;
    r
}

/// Random log: revised records come from an expert selection, unrevised ones
/// mostly keep the draft. A few failures are mixed in.
pub fn random_log(rng: &mut impl Rng, n: usize) -> ResultLog {
    let records = (0..n)
        .map(|i| {
            let id = format!("s{i}");
            if rng.random_bool(0.05) {
                return failed(&id);
            }
            let revised = rng.random_bool(0.4);
            let cd = rng.random_bool(0.5);
            let cf = if revised { rng.random_bool(0.5) } else { cd };
            // coarse grid so ties are common
            let u_base = f64::from(rng.random_range(0..=10u8)) / 10.0;
            let u_sel = (revised || rng.random_bool(0.2)).then(|| f64::from(rng.random_range(0..=10u8)) / 10.0);
            record(&id, cd, cf, revised, u_base, u_sel)
        })
        .collect::<Vec<_>>();
    ResultLog {
        header: header(records.len()),
        records,
    }
}
