//! The draft → relevance → masking → utilization → refine → select loop.

mod config;
mod trace;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::DnRConfig;
pub use trace::{Stage, Trace, TraceEvent};

use crate::backends::mock::CAPTION_PROMPT;
use crate::backends::text::{splitmix64, stable_hash};
use crate::backends::{Backend, BackendResult, BackendSuite, Decomposer, Image, VisionLanguageModel};
use crate::error::{Error, Result};
use crate::experts::refine_with_expert;
use crate::masking::{sample_mask_set, MaskKind, MaskSet};
use crate::relevance::{
    compute_alpha, compute_relevance_map, query_set_with_fallback, region_distribution, QuerySet,
    RegionDistribution, RegionGrid, RegionStats, RelevanceMap, TermSource, GENERIC_QUERIES,
};
use crate::selector::{featurize_state, ExpertPolicy, PolicyInput, SelectorState};
use crate::utilization::{mask_images, recompute_for_expert, utilization_score, Subject, UtilizationReport};

/// Which answer the loop settled on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum Selection {
    Draft,
    Expert(usize),
}

impl Selection {
    /// Selector class: 0 is the draft, `j + 1` is expert `j`.
    pub fn class(&self) -> usize {
        match *self {
            Selection::Draft => 0,
            Selection::Expert(j) => j + 1,
        }
    }

    pub fn from_class(class: usize) -> Self {
        match class {
            0 => Selection::Draft,
            c => Selection::Expert(c - 1),
        }
    }
}

/// `argmax_j (U⁽ʲ⁾ − U_base)₊`; the draft when no gain is strictly positive,
/// the lowest expert index among equal gains.
pub fn select_expert(u_base: f64, candidates: &[(usize, f64)]) -> Selection {
    let mut best: Option<(usize, f64)> = None;
    for &(j, u) in candidates {
        let gain = u - u_base;
        if !(gain > 0.0) {
            continue;
        }
        best = match best {
            Some((bj, bg)) if bg > gain || (bg == gain && bj < j) => Some((bj, bg)),
            _ => Some((j, gain)),
        };
    }
    best.map_or(Selection::Draft, |(j, _)| Selection::Expert(j))
}

/// One successfully evaluated expert branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertBranch {
    pub index: usize,
    pub name: String,
    pub refined_answer: String,
    pub no_op: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<UtilizationReport>,
    /// `U⁽ʲ⁾ − U_base`; absent when utilization was not verified.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertFailure {
    pub index: usize,
    pub name: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnRResult {
    pub image_id: String,
    pub question: Option<String>,
    /// Prompt actually sent to the VLM.
    pub prompt: String,
    pub sample_seed: u64,
    pub draft: String,
    pub query_set: QuerySet,
    pub alpha: f64,
    pub region_stats: RegionStats<f64>,
    pub degenerate_relevance: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_set: Option<MaskSet>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_base: Option<UtilizationReport>,
    pub per_expert: Vec<ExpertBranch>,
    pub expert_failures: Vec<ExpertFailure>,
    /// Selector class predicted on the policy path.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted: Option<Selection>,
    pub selected: Selection,
    pub final_answer: String,
    pub trace: Trace,
    /// Pixel relevance map; kept in memory for export, not serialized.
    #[serde(skip)]
    pub relevance: Option<RelevanceMap<f64>>,
    #[serde(skip)]
    pub distribution: Option<RegionDistribution<f64>>,
}

impl DnRResult {
    pub fn branch(&self, index: usize) -> Option<&ExpertBranch> {
        self.per_expert.iter().find(|b| b.index == index)
    }

    /// Utilization of the selected input: the chosen expert's, or the baseline.
    pub fn selected_utilization(&self) -> Option<f64> {
        match self.selected {
            Selection::Draft => self.u_base.as_ref().map(|r| r.u_q),
            Selection::Expert(j) => self.branch(j).and_then(|b| b.report.as_ref()).map(|r| r.u_q),
        }
    }

    pub fn selected_gain(&self) -> Option<f64> {
        match self.selected {
            Selection::Draft => Some(0.0),
            Selection::Expert(j) => self.branch(j).and_then(|b| b.gain),
        }
    }
}

/// A sample that could not produce a result.
#[derive(Debug, thiserror::Error)]
#[error("{stage:?} failed: {message}")]
pub struct SampleFailure {
    pub stage: Stage,
    pub message: String,
    pub trace: Trace,
}

/// VLM wrapper that counts calls for the trace.
struct Counted<'a> {
    inner: &'a dyn VisionLanguageModel,
    calls: AtomicUsize,
}

impl Backend for Counted<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn version(&self) -> &str {
        self.inner.version()
    }
}

impl VisionLanguageModel for Counted<'_> {
    fn answer(&self, image: &Image, question: &str) -> BackendResult<String> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.answer(image, question)
    }
}

impl Counted<'_> {
    fn take(&self) -> usize {
        self.calls.swap(0, Ordering::Relaxed)
    }
}

/// Object-centric queries for captioning, extracted from the draft caption.
pub fn captioning_queries(draft_caption: &str, decomposer: &dyn Decomposer) -> Result<QuerySet> {
    if draft_caption.trim().is_empty() {
        return Ok(QuerySet {
            source_question: String::new(),
            terms: GENERIC_QUERIES.iter().map(|s| (*s).to_owned()).collect(),
            origin: TermSource::Generic,
        });
    }
    query_set_with_fallback(draft_caption, decomposer)
}

/// Per-sample mask seed from the run seed, image id and question.
pub fn sample_seed(run_seed: u64, image_id: &str, question: Option<&str>) -> u64 {
    let key = format!("{image_id}\u{1f}{}", question.unwrap_or(""));
    splitmix64(run_seed ^ stable_hash(&key))
}

pub fn draft(image: &Image, question: &str, backends: &BackendSuite) -> BackendResult<String> {
    backends.vlm.answer(image, question)
}

/// State shared by the exhaustive and policy paths: everything up to and
/// including the region distribution.
struct Prepared {
    prompt: String,
    seed: u64,
    draft: String,
    query_set: QuerySet,
    relevance: RelevanceMap<f64>,
    dist: RegionDistribution<f64>,
    grid: RegionGrid,
}

struct Run<'a> {
    config: &'a DnRConfig,
    backends: &'a BackendSuite,
    vlm: Counted<'a>,
    trace: Trace,
}

impl<'a> Run<'a> {
    fn new(config: &'a DnRConfig, backends: &'a BackendSuite) -> Self {
        Self {
            config,
            backends,
            vlm: Counted {
                inner: backends.vlm.as_ref(),
                calls: AtomicUsize::new(0),
            },
            trace: Trace::default(),
        }
    }

    fn record(&mut self, stage: Stage, detail: impl Into<String>, started: Instant) {
        let calls = self.vlm.take();
        self.trace.push(stage, detail, calls, started.elapsed());
    }

    fn fail(mut self, stage: Stage, message: impl ToString, started: Instant) -> SampleFailure {
        let message = message.to_string();
        self.record(stage, format!("failed: {message}"), started);
        SampleFailure {
            stage,
            message,
            trace: self.trace,
        }
    }

    fn prepare(mut self, image: &Image, question: Option<&str>) -> std::result::Result<(Self, Prepared), SampleFailure> {
        let t = Instant::now();
        if let Err(e) = self.config.validate() {
            return Err(self.fail(Stage::Draft, e, t));
        }
        if question.is_some_and(|q| q.trim().is_empty()) {
            return Err(self.fail(Stage::Draft, "question is empty", t));
        }
        let prompt = question.unwrap_or(CAPTION_PROMPT).to_owned();
        let seed = sample_seed(self.config.seed, image.id(), question);
        let draft = match self.vlm.answer(image, &prompt) {
            Ok(d) => d,
            Err(e) => return Err(self.fail(Stage::Draft, e, t)),
        };
        self.record(Stage::Draft, draft.clone(), t);

        let t = Instant::now();
        let decomposer = self.backends.decomposer.as_ref();
        let queries = match question {
            Some(q) => query_set_with_fallback(q, decomposer),
            None => captioning_queries(&draft, decomposer),
        };
        let query_set = match queries {
            Ok(q) => q,
            Err(e) => return Err(self.fail(Stage::Decompose, e, t)),
        };
        self.trace.decomposer_calls += usize::from(question.is_some() || !draft.trim().is_empty());
        self.record(Stage::Decompose, query_set.terms.join(", "), t);

        let t = Instant::now();
        let relevance = match compute_relevance_map::<f64>(image, &query_set, self.backends.grounder.as_ref()) {
            Ok(r) => r,
            Err(e) => return Err(self.fail(Stage::Ground, e, t)),
        };
        self.trace.grounder_calls += query_set.m();
        let grid = match self.config.grid() {
            Ok(g) => g,
            Err(e) => return Err(self.fail(Stage::Ground, e, t)),
        };
        let mut dist = match region_distribution(&relevance, grid) {
            Ok(d) => d,
            Err(e) => return Err(self.fail(Stage::Ground, e, t)),
        };
        if let Err(e) = compute_alpha(&mut dist, self.config.beta_ent, self.config.beta_ctr) {
            return Err(self.fail(Stage::Ground, e, t));
        }
        self.record(Stage::Ground, format!("alpha={:.6}", dist.alpha()), t);
        let prepared = Prepared {
            prompt,
            seed,
            draft,
            query_set,
            relevance,
            dist,
            grid,
        };
        Ok((self, prepared))
    }

    fn masks(&mut self, image: &Image, p: &Prepared) -> Result<(MaskSet, Vec<Image>)> {
        let set = sample_mask_set(&p.dist, &self.config.mask_params(p.seed))?;
        let imgs = mask_images(image, &set, &p.grid, self.config.fill)?;
        Ok((set, imgs))
    }

    fn baseline(
        &mut self,
        image: &Image,
        p: &Prepared,
    ) -> std::result::Result<(MaskSet, UtilizationReport), (Stage, String)> {
        let t = Instant::now();
        let (set, masked) = self.masks(image, p).map_err(|e| (Stage::Mask, e.to_string()))?;
        let detail = format!("{} top, {} bottom", set.count(MaskKind::Top), set.count(MaskKind::Bottom));
        self.record(Stage::Mask, detail, t);
        let t = Instant::now();
        let report = utilization_score(
            Subject::Draft,
            &p.draft,
            &p.prompt,
            &set,
            &masked,
            &self.vlm,
            self.backends.encoder.as_ref(),
            p.dist.alpha(),
        )
        .map_err(|e| (Stage::Baseline, e.to_string()))?;
        self.record(Stage::Baseline, format!("u_base={:.6}", report.u_q), t);
        Ok((set, report))
    }

    /// Refine with expert `j`; verify utilization when a mask set is given.
    fn branch(
        &mut self,
        j: usize,
        image: &Image,
        p: &Prepared,
        verify: Option<(&MaskSet, &UtilizationReport)>,
    ) -> std::result::Result<ExpertBranch, ExpertFailure> {
        let t = Instant::now();
        let expert = &self.backends.experts[j];
        let name = expert.name().to_owned();
        let failure = |error: String| ExpertFailure {
            index: j,
            name: name.clone(),
            error,
        };
        self.trace.expert_calls += 1;
        let style = self.config.style_for(&name);
        let refined = refine_with_expert(image, &p.prompt, expert.as_ref(), style, &self.vlm);
        let refined = match refined {
            Ok(r) => r,
            Err(e) => {
                let msg = e.to_string();
                self.record(Stage::Refine, format!("{name}: failed: {msg}"), t);
                return Err(failure(msg));
            }
        };
        self.record(Stage::Refine, format!("{name}: {}", refined.answer), t);
        let (report, gain) = match verify {
            None => (None, None),
            Some((set, base)) => {
                let t = Instant::now();
                let report = recompute_for_expert(
                    j,
                    &refined.rendered,
                    &refined.answer,
                    &p.prompt,
                    set,
                    &p.grid,
                    self.config.fill,
                    &self.vlm,
                    self.backends.encoder.as_ref(),
                    p.dist.alpha(),
                );
                match report {
                    Ok(r) => {
                        let gain = r.u_q - base.u_q;
                        self.record(Stage::Recompute, format!("{name}: u={:.6} gain={gain:+.6}", r.u_q), t);
                        (Some(r), Some(gain))
                    }
                    Err(e) => {
                        self.record(Stage::Recompute, format!("{name}: failed: {e}"), t);
                        return Err(failure(e.to_string()));
                    }
                }
            }
        };
        Ok(ExpertBranch {
            index: j,
            name,
            refined_answer: refined.answer,
            no_op: refined.no_op,
            report,
            gain,
        })
    }

    fn features(&mut self, image: &Image, p: &Prepared) -> Result<SelectorState> {
        let t = Instant::now();
        let state = featurize_state(image, &p.query_set, &p.draft, &p.dist, self.backends)?;
        self.record(Stage::Featurize, format!("{} features", state.len()), t);
        Ok(state)
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    run: Run<'_>,
    image: &Image,
    question: Option<&str>,
    p: Prepared,
    mask_set: Option<MaskSet>,
    u_base: Option<UtilizationReport>,
    per_expert: Vec<ExpertBranch>,
    expert_failures: Vec<ExpertFailure>,
    predicted: Option<Selection>,
    selected: Selection,
) -> DnRResult {
    let final_answer = match selected {
        Selection::Draft => p.draft.clone(),
        Selection::Expert(j) => per_expert
            .iter()
            .find(|b| b.index == j)
            .map(|b| b.refined_answer.clone())
            .unwrap_or_else(|| p.draft.clone()),
    };
    let mut trace = run.trace;
    let t = Instant::now();
    trace.push(
        Stage::Select,
        match selected {
            Selection::Draft => "draft".to_owned(),
            Selection::Expert(j) => format!("expert {j}"),
        },
        0,
        t.elapsed(),
    );
    DnRResult {
        image_id: image.id().to_owned(),
        question: question.map(str::to_owned),
        prompt: p.prompt,
        sample_seed: p.seed,
        draft: p.draft,
        query_set: p.query_set,
        alpha: p.dist.alpha(),
        region_stats: p.dist.stats,
        degenerate_relevance: p.dist.degenerate,
        mask_set,
        u_base,
        per_expert,
        expert_failures,
        predicted,
        selected,
        final_answer,
        trace,
        relevance: Some(p.relevance),
        distribution: Some(p.dist),
    }
}

/// Exhaustive loop: every expert is refined and verified against the baseline.
pub fn run_dnr(
    image: &Image,
    question: Option<&str>,
    config: &DnRConfig,
    backends: &BackendSuite,
) -> std::result::Result<DnRResult, SampleFailure> {
    let (mut run, p) = Run::new(config, backends).prepare(image, question)?;
    let (set, base) = match run.baseline(image, &p) {
        Ok(v) => v,
        Err((stage, msg)) => return Err(run.fail(stage, msg, Instant::now())),
    };
    let mut per_expert = Vec::new();
    let mut failures = Vec::new();
    for j in 0..backends.experts.len() {
        match run.branch(j, image, &p, Some((&set, &base))) {
            Ok(b) => per_expert.push(b),
            Err(f) => failures.push(f),
        }
    }
    let candidates: Vec<(usize, f64)> = per_expert
        .iter()
        .filter_map(|b| b.report.as_ref().map(|r| (b.index, r.u_q)))
        .collect();
    let selected = select_expert(base.u_q, &candidates);
    Ok(finish(run, image, question, p, Some(set), Some(base), per_expert, failures, None, selected))
}

/// Policy loop: the selector picks one branch from the pre-expert state.
///
/// With `verify`, the baseline and the predicted branch's utilization are
/// computed and the branch is kept only on a positive gain; without it the
/// prediction is taken as the decision.
pub fn run_policy(
    image: &Image,
    question: Option<&str>,
    config: &DnRConfig,
    backends: &BackendSuite,
    policy: &dyn ExpertPolicy,
    verify: bool,
) -> std::result::Result<DnRResult, SampleFailure> {
    let (mut run, p) = Run::new(config, backends).prepare(image, question)?;
    let t = Instant::now();
    let state = match run.features(image, &p) {
        Ok(s) => s,
        Err(e) => return Err(run.fail(Stage::Featurize, e, t)),
    };
    let input = PolicyInput {
        image_id: image.id(),
        question,
        state: &state,
    };
    let predicted = match policy.choose(&input) {
        Ok(c) => Selection::from_class(c),
        Err(e) => return Err(run.fail(Stage::Featurize, e, t)),
    };
    if let Selection::Expert(j) = predicted {
        if j >= backends.experts.len() {
            let msg = Error::invalid(format!("selector chose expert {j} of {}", backends.experts.len()));
            return Err(run.fail(Stage::Featurize, msg, t));
        }
    }
    let mut per_expert = Vec::new();
    let mut failures = Vec::new();
    let (mask_set, u_base, selected) = if verify {
        let (set, base) = match run.baseline(image, &p) {
            Ok(v) => v,
            Err((stage, msg)) => return Err(run.fail(stage, msg, Instant::now())),
        };
        let selected = match predicted {
            Selection::Draft => Selection::Draft,
            Selection::Expert(j) => match run.branch(j, image, &p, Some((&set, &base))) {
                Ok(b) => {
                    let sel = select_expert(base.u_q, &[(j, b.report.as_ref().map_or(f64::NAN, |r| r.u_q))]);
                    per_expert.push(b);
                    sel
                }
                Err(f) => {
                    failures.push(f);
                    Selection::Draft
                }
            },
        };
        (Some(set), Some(base), selected)
    } else {
        let selected = match predicted {
            Selection::Draft => Selection::Draft,
            Selection::Expert(j) => match run.branch(j, image, &p, None) {
                Ok(b) => {
                    per_expert.push(b);
                    Selection::Expert(j)
                }
                Err(f) => {
                    failures.push(f);
                    Selection::Draft
                }
            },
        };
        (None, None, selected)
    };
    Ok(finish(
        run,
        image,
        question,
        p,
        mask_set,
        u_base,
        per_expert,
        failures,
        Some(predicted),
        selected,
    ))
}

/// VLM calls an exhaustive run makes: draft plus M masked queries for the
/// baseline and for every expert that produced a branch.
pub fn exhaustive_vlm_calls(masks: usize, experts_ok: usize) -> usize {
    (1 + masks) * (1 + experts_ok)
}

/// VLM calls on the policy path.
pub fn policy_vlm_calls(masks: usize, refined: bool, verify: bool) -> usize {
    match (verify, refined) {
        (true, true) => 1 + masks + 1 + masks,
        (true, false) => 1 + masks,
        (false, true) => 2,
        (false, false) => 1,
    }
}
