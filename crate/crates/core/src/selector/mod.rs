//! Learned expert selection from the state observed before any expert runs.

pub mod mlp;

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use mlp::{EpochStats, Mlp, Standardizer, TrainParams, TrainReport};

use crate::backends::text::normalize;
use crate::backends::{BackendSuite, Image};
use crate::error::{Error, Result};
use crate::harness::{evaluate_answer, parallel_map, Sample};
use crate::pipeline::{run_dnr, run_policy, select_expert, DnRConfig, DnRResult, Selection};
use crate::relevance::{QuerySet, RegionDistribution};
use crate::scalar::{self, Scalar};

pub const RELEVANCE_FEATURES: usize = 8;

/// `{H_norm, C, α, max p, min p, mean p, var p, degenerate}`.
pub fn relevance_features<T: Scalar>(dist: &RegionDistribution<T>) -> [T; RELEVANCE_FEATURES] {
    let p = &dist.probs;
    let max = p.iter().copied().fold(T::neg_infinity(), T::max);
    let min = p.iter().copied().fold(T::infinity(), T::min);
    [
        dist.stats.entropy_norm,
        dist.stats.contrast,
        dist.stats.alpha,
        max,
        min,
        scalar::mean(p),
        scalar::variance(p),
        if dist.degenerate { T::one() } else { T::zero() },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorState {
    pub image_embedding: Vec<f64>,
    pub query_embedding: Vec<f64>,
    pub draft_embedding: Vec<f64>,
    pub relevance_features: [f64; RELEVANCE_FEATURES],
}

impl SelectorState {
    pub fn len(&self) -> usize {
        self.image_embedding.len() + self.query_embedding.len() + self.draft_embedding.len() + RELEVANCE_FEATURES
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.image_embedding);
        v.extend_from_slice(&self.query_embedding);
        v.extend_from_slice(&self.draft_embedding);
        v.extend_from_slice(&self.relevance_features);
        v
    }
}

/// Build the selector input from pre-expert quantities only.
///
/// Without an image-embedding backend the image slot is a zero vector of the
/// text encoder's width.
pub fn featurize_state(
    image: &Image,
    query_set: &QuerySet,
    draft: &str,
    dist: &RegionDistribution<f64>,
    backends: &BackendSuite,
) -> Result<SelectorState> {
    let encoder = backends.encoder.as_ref();
    let image_embedding = match &backends.image_embedder {
        Some(e) => e.embed_image(image)?,
        None => vec![0.0; encoder.dim()],
    };
    let mut query_embedding = vec![0.0; encoder.dim()];
    for term in &query_set.terms {
        let e = encoder.embed(term)?;
        if e.len() != query_embedding.len() {
            return Err(Error::invalid("encoder returned a vector of the wrong width"));
        }
        query_embedding.iter_mut().zip(&e).for_each(|(q, v)| *q += v);
    }
    let m = query_set.terms.len().max(1) as f64;
    query_embedding.iter_mut().for_each(|q| *q /= m);
    let state = SelectorState {
        image_embedding,
        query_embedding,
        draft_embedding: encoder.embed(draft)?,
        relevance_features: relevance_features(dist),
    };
    if state.to_vec().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("selector features must be finite"));
    }
    Ok(state)
}

/// What a policy sees when choosing a branch.
pub struct PolicyInput<'a> {
    pub image_id: &'a str,
    pub question: Option<&'a str>,
    pub state: &'a SelectorState,
}

/// Chooses a selector class: 0 for the draft, `j + 1` for expert `j`.
pub trait ExpertPolicy: Send + Sync {
    fn choose(&self, input: &PolicyInput<'_>) -> Result<usize>;
}

/// Replays known labels; unknown samples get the draft.
#[derive(Debug, Clone, Default)]
pub struct OracleSelector {
    labels: BTreeMap<(String, Option<String>), usize>,
}

impl OracleSelector {
    pub fn insert(&mut self, image_id: &str, question: Option<&str>, class: usize) {
        self.labels.insert((image_id.to_owned(), question.map(str::to_owned)), class);
    }

    pub fn from_results<'a>(results: impl IntoIterator<Item = &'a DnRResult>) -> Self {
        let mut o = Self::default();
        for r in results {
            o.insert(&r.image_id, r.question.as_deref(), r.selected.class());
        }
        o
    }
}

impl ExpertPolicy for OracleSelector {
    fn choose(&self, input: &PolicyInput<'_>) -> Result<usize> {
        let key = (input.image_id.to_owned(), input.question.map(str::to_owned));
        Ok(self.labels.get(&key).copied().unwrap_or(0))
    }
}

/// Always picks one class.
#[derive(Debug, Clone, Copy)]
pub struct FixedPolicy(pub usize);

impl ExpertPolicy for FixedPolicy {
    fn choose(&self, _: &PolicyInput<'_>) -> Result<usize> {
        Ok(self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorExample {
    pub sample_id: String,
    pub state: SelectorState,
    pub label: usize,
    /// `U⁽ʲ⁾ − U_base` per expert; `None` where the branch failed.
    pub gains: Vec<Option<f64>>,
}

/// Class implied by a gain vector under the pipeline's tie-break.
pub fn label_from_gains(gains: &[Option<f64>]) -> usize {
    let candidates: Vec<(usize, f64)> = gains
        .iter()
        .enumerate()
        .filter_map(|(j, g)| g.map(|g| (j, g)))
        .collect();
    select_expert(0.0, &candidates).class()
}

impl SelectorExample {
    pub fn from_result(sample_id: &str, state: SelectorState, result: &DnRResult, experts: usize) -> Self {
        let mut gains = vec![None; experts];
        for b in &result.per_expert {
            if b.index < experts {
                gains[b.index] = b.gain;
            }
        }
        Self {
            sample_id: sample_id.to_owned(),
            state,
            label: result.selected.class(),
            gains,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.label > self.gains.len() {
            return Err(Error::invalid(format!("{}: label {} out of range", self.sample_id, self.label)));
        }
        if label_from_gains(&self.gains) != self.label {
            return Err(Error::invalid(format!("{}: label disagrees with stored gains", self.sample_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Collected {
    pub examples: Vec<SelectorExample>,
    pub failed: Vec<(String, String)>,
}

/// Run the exhaustive loop on every sample and keep its decision as the label.
pub fn collect(samples: &[Sample], config: &DnRConfig, backends: &BackendSuite, threads: usize) -> Collected {
    let experts = backends.experts.len();
    let outcomes = parallel_map(samples, threads, |s| -> std::result::Result<SelectorExample, String> {
        let image = s.load_image().map_err(|e| e.to_string())?;
        let result = run_dnr(&image, s.question.as_deref(), config, backends).map_err(|e| e.to_string())?;
        let dist_state = state_from_result(&image, &result, backends).map_err(|e| e.to_string())?;
        Ok(SelectorExample::from_result(&s.id, dist_state, &result, experts))
    });
    let mut out = Collected {
        examples: Vec::new(),
        failed: Vec::new(),
    };
    for (s, o) in samples.iter().zip(outcomes) {
        match o {
            Ok(e) => out.examples.push(e),
            Err(e) => out.failed.push((s.id.clone(), e)),
        }
    }
    out
}

/// Rebuild the pre-expert state of a finished run.
pub fn state_from_result(image: &Image, result: &DnRResult, backends: &BackendSuite) -> Result<SelectorState> {
    let dist = result
        .distribution
        .as_ref()
        .ok_or_else(|| Error::invalid("result carries no region distribution"))?;
    featurize_state(image, &result.query_set, &result.draft, dist, backends)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorModel {
    pub network: Mlp<f64>,
    pub standardizer: Standardizer<f64>,
    pub classes: usize,
    pub feature_len: usize,
    pub expert_names: Vec<String>,
    pub params: TrainParams,
    /// Fingerprint of the pipeline config the labels were collected under.
    pub config_fingerprint: String,
}

impl SelectorModel {
    pub fn probabilities(&self, state: &SelectorState) -> Result<Vec<f64>> {
        self.probabilities_raw(&state.to_vec())
    }

    pub fn probabilities_raw(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.feature_len {
            return Err(Error::invalid(format!(
                "feature length {} does not match model input {}",
                features.len(),
                self.feature_len
            )));
        }
        self.network.probabilities(&self.standardizer.apply(features))
    }

    pub fn predict_raw(&self, features: &[f64]) -> Result<usize> {
        let p = self.probabilities_raw(features)?;
        Ok(argmax(&p))
    }

    /// Digest of the serialized weights and metadata.
    pub fn fingerprint(&self) -> String {
        crate::digest::fingerprint(serde_json::to_string(self).expect("model serializes").as_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Artifact<'a> {
            format: &'a str,
            fingerprint: String,
            model: &'a SelectorModel,
        }
        let path = path.as_ref();
        let a = Artifact {
            format: MODEL_FORMAT,
            fingerprint: self.fingerprint(),
            model: self,
        };
        let text = serde_json::to_string(&a).expect("model serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Artifact {
            format: String,
            fingerprint: String,
            model: SelectorModel,
        }
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let a: Artifact =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        if a.format != MODEL_FORMAT {
            return Err(Error::parse(path.display().to_string(), format!("unknown format `{}`", a.format)));
        }
        if a.model.fingerprint() != a.fingerprint {
            return Err(Error::parse(path.display().to_string(), "fingerprint mismatch"));
        }
        Ok(a.model)
    }
}

pub const MODEL_FORMAT: &str = "dnr-selector-mlp-1";

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

impl ExpertPolicy for SelectorModel {
    fn choose(&self, input: &PolicyInput<'_>) -> Result<usize> {
        predict(self, input.state)
    }
}

/// Argmax class; ties go to the lowest index.
pub fn predict(model: &SelectorModel, state: &SelectorState) -> Result<usize> {
    model.predict_raw(&state.to_vec())
}

/// Train on raw feature vectors.
pub fn train_features(
    xs: &[Vec<f64>],
    ys: &[usize],
    classes: usize,
    params: &TrainParams,
) -> Result<(SelectorModel, TrainReport)> {
    if xs.len() < 20 {
        return Err(Error::invalid(format!("at least 20 examples are required, got {}", xs.len())));
    }
    let mut seen: Vec<usize> = ys.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(Error::invalid("training data holds a single class"));
    }
    let (standardizer, network, report) = mlp::fit(xs, ys, classes, params)?;
    let model = SelectorModel {
        feature_len: network.input_dim(),
        network,
        standardizer,
        classes,
        expert_names: Vec::new(),
        params: *params,
        config_fingerprint: String::new(),
    };
    Ok((model, report))
}

/// Train on collected examples.
pub fn train(
    examples: &[SelectorExample],
    params: &TrainParams,
    expert_names: &[String],
    config_fingerprint: &str,
) -> Result<(SelectorModel, TrainReport)> {
    for e in examples {
        e.validate()?;
        if e.gains.len() != expert_names.len() {
            return Err(Error::invalid(format!(
                "{}: {} gains recorded for {} experts",
                e.sample_id,
                e.gains.len(),
                expert_names.len()
            )));
        }
    }
    let xs: Vec<Vec<f64>> = examples.iter().map(|e| e.state.to_vec()).collect();
    let ys: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let (mut model, report) = train_features(&xs, &ys, expert_names.len() + 1, params)?;
    model.expert_names = expert_names.to_vec();
    model.config_fingerprint = config_fingerprint.to_owned();
    Ok((model, report))
}

pub fn write_examples(path: impl AsRef<Path>, examples: &[SelectorExample]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in examples {
        let line = serde_json::to_string(e).expect("example serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_examples(path: impl AsRef<Path>) -> Result<Vec<SelectorExample>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e.to_string()))?;
        out.push(e);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub sample_id: String,
    pub label: usize,
    pub predicted: usize,
    pub exhaustive_calls: usize,
    pub policy_calls: usize,
    pub exhaustive_correct: Option<bool>,
    pub policy_correct: Option<bool>,
    pub benign_swap: bool,
}

/// Exhaustive versus policy-driven selection on the same samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub samples: usize,
    pub failed: usize,
    pub verify: bool,
    pub exhaustive_calls: usize,
    pub policy_calls: usize,
    pub exhaustive_expert_branches: usize,
    pub policy_expert_branches: usize,
    pub branch_reduction_pct: f64,
    pub exhaustive_accuracy: Option<f64>,
    pub policy_accuracy: Option<f64>,
    /// Policy minus exhaustive accuracy, in percentage points.
    pub delta_performance: Option<f64>,
    pub delta_cost_pct: f64,
    pub disagreements: usize,
    pub benign_swaps: usize,
    pub rows: Vec<CostRow>,
}

fn utilization_of(result: &DnRResult, s: Selection) -> Option<f64> {
    match s {
        Selection::Draft => result.u_base.as_ref().map(|r| r.u_q),
        Selection::Expert(j) => result.branch(j).and_then(|b| b.report.as_ref()).map(|r| r.u_q),
    }
}

fn answer_of(result: &DnRResult, s: Selection) -> Option<&str> {
    match s {
        Selection::Draft => Some(&result.draft),
        Selection::Expert(j) => result.branch(j).map(|b| b.refined_answer.as_str()),
    }
}

fn percent_change(new: usize, old: usize) -> f64 {
    if old == 0 {
        0.0
    } else {
        (new as f64 - old as f64) / old as f64 * 100.0
    }
}

pub fn cost_comparison(
    samples: &[Sample],
    config: &DnRConfig,
    backends: &BackendSuite,
    policy: &dyn ExpertPolicy,
    verify: bool,
    threads: usize,
) -> CostReport {
    let outcomes = parallel_map(samples, threads, |s| -> std::result::Result<(DnRResult, DnRResult), String> {
        let image = s.load_image().map_err(|e| e.to_string())?;
        let q = s.question.as_deref();
        let exh = run_dnr(&image, q, config, backends).map_err(|e| e.to_string())?;
        let pol = run_policy(&image, q, config, backends, policy, verify).map_err(|e| e.to_string())?;
        Ok((exh, pol))
    });
    let mut rows = Vec::new();
    let mut failed = 0;
    let (mut ex_branches, mut po_branches) = (0, 0);
    for (s, o) in samples.iter().zip(outcomes) {
        let Ok((exh, pol)) = o else {
            failed += 1;
            continue;
        };
        let predicted = pol.predicted.unwrap_or(Selection::Draft);
        let truth = s.ground_truth.as_deref();
        let correct = |a: &str| truth.map(|t| evaluate_answer(a, t));
        let benign = predicted != exh.selected
            && match (answer_of(&exh, predicted), answer_of(&exh, exh.selected)) {
                (Some(a), Some(b)) => normalize(a) == normalize(b),
                _ => false,
            }
            && match (utilization_of(&exh, predicted), utilization_of(&exh, exh.selected)) {
                (Some(a), Some(b)) => (a - b).abs() < config.selection_epsilon,
                _ => false,
            };
        ex_branches += exh.trace.expert_calls;
        po_branches += pol.trace.expert_calls;
        rows.push(CostRow {
            sample_id: s.id.clone(),
            label: exh.selected.class(),
            predicted: predicted.class(),
            exhaustive_calls: exh.trace.vlm_calls,
            policy_calls: pol.trace.vlm_calls,
            exhaustive_correct: correct(&exh.final_answer),
            policy_correct: correct(&pol.final_answer),
            benign_swap: benign,
        });
    }
    let accuracy = |f: fn(&CostRow) -> Option<bool>| -> Option<f64> {
        let v: Vec<bool> = rows.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().filter(|&&b| b).count() as f64 / v.len() as f64 * 100.0)
    };
    let exhaustive_accuracy = accuracy(|r| r.exhaustive_correct);
    let policy_accuracy = accuracy(|r| r.policy_correct);
    let exhaustive_calls = rows.iter().map(|r| r.exhaustive_calls).sum();
    let policy_calls = rows.iter().map(|r| r.policy_calls).sum();
    CostReport {
        samples: samples.len(),
        failed,
        verify,
        exhaustive_calls,
        policy_calls,
        exhaustive_expert_branches: ex_branches,
        policy_expert_branches: po_branches,
        branch_reduction_pct: -percent_change(po_branches, ex_branches),
        delta_performance: exhaustive_accuracy.zip(policy_accuracy).map(|(e, p)| p - e),
        exhaustive_accuracy,
        policy_accuracy,
        delta_cost_pct: percent_change(policy_calls, exhaustive_calls),
        disagreements: rows.iter().filter(|r| r.label != r.predicted).count(),
        benign_swaps: rows.iter().filter(|r| r.benign_swap).count(),
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relevance::RegionGrid;

    #[test]
    fn uniform_and_one_hot_features() {
        let grid = RegionGrid::new(16, 16).unwrap();
        let d = RegionDistribution::from_scores(vec![0.0f64; 256], grid).unwrap();
        let n = 1.0 / 256.0;
        assert_eq!(relevance_features(&d), [1.0, 0.0, 0.0, n, n, n, 0.0, 1.0]);
        let mut s = vec![0.0f64; 256];
        s[17] = 3.0;
        let d = RegionDistribution::from_scores(s, grid).unwrap();
        let f = relevance_features(&d);
        // Direct population variance of one 1 and 255 zeros.
        let var = ((1.0 - n) * (1.0 - n) + 255.0 * n * n) / 256.0;
        assert_eq!(&f[..3], &[0.0, 1.0, 1.0]);
        assert_eq!((f[3], f[4], f[7]), (1.0, 0.0, 0.0));
        assert!((f[5] - n).abs() < 1e-15 && (f[6] - var).abs() < 1e-15);
    }

    #[test]
    fn labels_follow_gains() {
        assert_eq!(label_from_gains(&[Some(-0.1), None, Some(0.0)]), 0);
        assert_eq!(label_from_gains(&[Some(0.1), Some(0.3), Some(0.3)]), 2);
        assert_eq!(label_from_gains(&[]), 0);
    }

    #[test]
    fn single_class_is_rejected() {
        let xs = vec![vec![1.0, 2.0]; 30];
        assert!(train_features(&xs, &[1; 30], 2, &TrainParams::default()).is_err());
        assert!(train_features(&xs[..10], &[0, 1, 0, 1, 0, 1, 0, 1, 0, 1], 2, &TrainParams::default()).is_err());
    }
}
