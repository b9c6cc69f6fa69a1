use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{evaluate_answer, ResultLog, SampleRecord};
use crate::backends::mock::{MockWorld, UNKNOWN_ANSWER};
use crate::backends::text::{content_words, normalize};
use crate::error::{Error, Result};
use crate::pipeline::Selection;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionStats {
    pub n: usize,
    pub revised_count: usize,
    pub revision_rate_pct: f64,
    pub corrections: usize,
    pub degradations: usize,
    /// False→True as a percentage of revised samples.
    pub correction_pct: f64,
    /// True→False as a percentage of revised samples.
    pub degradation_pct: f64,
    /// No sample was revised; both percentages are reported as 0.
    pub zero_revised: bool,
}

fn pct(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64 * 100.0
    }
}

/// Revision and correction/degradation rates over evaluable records.
pub fn transition_stats(log: &ResultLog) -> Result<TransitionStats> {
    let recs: Vec<&SampleRecord> = log.records.iter().filter(|r| r.is_evaluable()).collect();
    if recs.is_empty() {
        return Err(Error::invalid("log has no evaluable records"));
    }
    let revised: Vec<&&SampleRecord> = recs.iter().filter(|r| r.revised()).collect();
    let corrections = revised
        .iter()
        .filter(|r| r.correct_draft == Some(false) && r.correct_final == Some(true))
        .count();
    let degradations = revised
        .iter()
        .filter(|r| r.correct_draft == Some(true) && r.correct_final == Some(false))
        .count();
    Ok(TransitionStats {
        n: recs.len(),
        revised_count: revised.len(),
        revision_rate_pct: pct(revised.len(), recs.len()),
        corrections,
        degradations,
        correction_pct: pct(corrections, revised.len()),
        degradation_pct: pct(degradations, revised.len()),
        zero_revised: revised.is_empty(),
    })
}

/// Pearson correlation; `None` for fewer than 3 points, unequal lengths or
/// zero variance in either variable.
pub fn pearson<T: Scalar>(x: &[T], y: &[T]) -> Option<T> {
    if x.len() != y.len() || x.len() < 3 {
        return None;
    }
    let n = T::count(x.len());
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy = sxy + da * db;
        sxx = sxx + da * da;
        syy = syy + db * db;
    }
    if !(sxx > T::zero() && syy > T::zero()) {
        return None;
    }
    let r = sxy / (sxx * syy).sqrt();
    Some(r.max(-T::one()).min(T::one()))
}

/// 1-based ranks with ties sharing their mean rank.
pub fn midranks<T: Scalar>(v: &[T]) -> Vec<T> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![T::zero(); v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = T::lit((i + j) as f64 / 2.0 + 1.0);
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman<T: Scalar>(x: &[T], y: &[T]) -> Option<T> {
    if x.len() != y.len() {
        return None;
    }
    pearson(&midranks(x), &midranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub n: usize,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub pearson_undefined: bool,
    pub spearman_undefined: bool,
}

impl Correlation {
    pub fn of(x: &[f64], y: &[f64]) -> Self {
        let p = pearson(x, y);
        let s = spearman(x, y);
        Self {
            n: x.len(),
            pearson: p,
            spearman: s,
            pearson_undefined: p.is_none(),
            spearman_undefined: s.is_none(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// ΔU = U_selected − U_base against Δacc ∈ {−1, 0, +1}.
    pub delta_u: Correlation,
    /// Raw U_base against Δacc, for inspection.
    pub u_base: Correlation,
}

pub fn correlation(log: &ResultLog) -> CorrelationReport {
    let mut du = (Vec::new(), Vec::new());
    let mut ub = (Vec::new(), Vec::new());
    for r in log.records.iter().filter(|r| r.is_evaluable()) {
        let Some(acc) = r.delta_acc() else { continue };
        if let Some(d) = r.delta_u() {
            du.0.push(d);
            du.1.push(acc);
        }
        if let Some(u) = r.u_base {
            ub.0.push(u);
            ub.1.push(acc);
        }
    }
    CorrelationReport {
        delta_u: Correlation::of(&du.0, &du.1),
        u_base: Correlation::of(&ub.0, &ub.1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HallucinationLabel {
    #[serde(rename = "H")]
    Hallucination,
    #[serde(rename = "M")]
    Misperception,
    #[serde(rename = "G")]
    Grounded,
    #[serde(rename = "C")]
    Correct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationTally {
    pub labeled: usize,
    pub unlabeled: usize,
    pub hallucination_pct: f64,
    pub misperception_pct: f64,
    pub grounded_pct: f64,
    pub correct_pct: f64,
}

/// Category percentages over the log's labeled records.
pub fn hallucination_tally(log: &ResultLog, labels: &BTreeMap<String, HallucinationLabel>) -> Result<HallucinationTally> {
    if labels.is_empty() {
        return Err(Error::invalid("no hallucination labels supplied"));
    }
    let mut counts = [0usize; 4];
    let mut unlabeled = 0;
    for r in &log.records {
        match labels.get(&r.sample_id) {
            Some(&l) => counts[l as usize] += 1,
            None => unlabeled += 1,
        }
    }
    let labeled: usize = counts.iter().sum();
    if labeled == 0 {
        return Err(Error::invalid("no record in the log carries a label"));
    }
    Ok(HallucinationTally {
        labeled,
        unlabeled,
        hallucination_pct: pct(counts[0], labeled),
        misperception_pct: pct(counts[1], labeled),
        grounded_pct: pct(counts[2], labeled),
        correct_pct: pct(counts[3], labeled),
    })
}

/// Mock judge against scene truth: correct answers are C, abstentions G,
/// wrong answers made only of scene words M, anything else H.
pub fn judge_against_scene(log: &ResultLog, world: &MockWorld, final_answer: bool) -> BTreeMap<String, HallucinationLabel> {
    let mut out = BTreeMap::new();
    for r in log.records.iter().filter(|r| r.is_ok()) {
        let scene_id = r.sample_id.split('/').next().unwrap_or_default();
        let (Some(scene), Some(q)) = (world.scene(scene_id), r.question.as_deref()) else {
            continue;
        };
        let Some(truth) = scene.question_by_text(q).and_then(|q| scene.answer(&q.id)) else {
            continue;
        };
        let answer = if final_answer { &r.final_answer } else { &r.draft };
        let Some(answer) = answer.as_deref() else { continue };
        let vocab: Vec<String> = scene
            .objects
            .iter()
            .flat_map(|o| std::iter::once(o.label.clone()).chain(o.attributes.iter().cloned()))
            .map(|w| normalize(&w))
            .collect();
        let label = if evaluate_answer(answer, &[truth.to_owned()]) {
            HallucinationLabel::Correct
        } else if normalize(answer) == UNKNOWN_ANSWER {
            HallucinationLabel::Grounded
        } else if content_words(answer).iter().all(|w| vocab.contains(w)) {
            HallucinationLabel::Misperception
        } else {
            HallucinationLabel::Hallucination
        };
        out.insert(r.sample_id.clone(), label);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub fingerprint: String,
    pub dataset: String,
    pub samples: usize,
    pub failures: usize,
    pub evaluable: usize,
    pub draft_accuracy_pct: Option<f64>,
    pub final_accuracy_pct: Option<f64>,
    pub transitions: Option<TransitionStats>,
    pub correlation: CorrelationReport,
    pub selections: BTreeMap<String, usize>,
    pub mean_u_base: Option<f64>,
    pub vlm_calls: usize,
    pub expert_calls: usize,
    /// How correction/degradation percentages are normalized.
    pub convention: String,
}

pub fn summarize(log: &ResultLog) -> Summary {
    let ev: Vec<&SampleRecord> = log.records.iter().filter(|r| r.is_evaluable()).collect();
    let acc = |f: fn(&SampleRecord) -> Option<bool>| {
        (!ev.is_empty()).then(|| pct(ev.iter().filter(|r| f(r) == Some(true)).count(), ev.len()))
    };
    let mut selections = BTreeMap::new();
    for r in &log.records {
        let key = match r.selected {
            None => "failed".to_owned(),
            Some(Selection::Draft) => "draft".to_owned(),
            Some(Selection::Expert(j)) => log.header.expert_names.get(j).cloned().unwrap_or_else(|| format!("expert{j}")),
        };
        *selections.entry(key).or_insert(0) += 1;
    }
    let ub: Vec<f64> = log.records.iter().filter_map(|r| r.u_base).collect();
    Summary {
        fingerprint: log.header.fingerprint.clone(),
        dataset: log.header.dataset.clone(),
        samples: log.records.len(),
        failures: log.failures(),
        evaluable: ev.len(),
        draft_accuracy_pct: acc(|r| r.correct_draft),
        final_accuracy_pct: acc(|r| r.correct_final),
        transitions: transition_stats(log).ok(),
        correlation: correlation(log),
        selections,
        mean_u_base: (!ub.is_empty()).then(|| crate::scalar::mean(&ub)),
        vlm_calls: log.records.iter().filter_map(|r| r.trace.as_ref()).map(|t| t.vlm_calls).sum(),
        expert_calls: log.records.iter().filter_map(|r| r.trace.as_ref()).map(|t| t.expert_calls).sum(),
        convention: "correction and degradation are percentages of revised samples".to_owned(),
    }
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.digits$}"))
}

impl Summary {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let mut row = |k: &str, v: String| {
            let _ = writeln!(s, "{k:<24} {v}");
        };
        row("run", self.fingerprint.clone());
        row("dataset", self.dataset.clone());
        row("samples", format!("{} ({} failed, {} evaluable)", self.samples, self.failures, self.evaluable));
        row("draft accuracy %", opt(self.draft_accuracy_pct, 2));
        row("final accuracy %", opt(self.final_accuracy_pct, 2));
        if let Some(t) = &self.transitions {
            row("revision rate %", format!("{:.2} ({}/{})", t.revision_rate_pct, t.revised_count, t.n));
            row("correction % (F->T)", format!("{:.2} ({})", t.correction_pct, t.corrections));
            row("degradation % (T->F)", format!("{:.2} ({})", t.degradation_pct, t.degradations));
        }
        let c = &self.correlation.delta_u;
        row("pearson dU/dacc", opt(c.pearson, 4));
        row("spearman dU/dacc", opt(c.spearman, 4));
        row("mean U_base", opt(self.mean_u_base, 4));
        for (k, v) in &self.selections {
            row(&format!("selected {k}"), v.to_string());
        }
        row("vlm calls", self.vlm_calls.to_string());
        row("expert calls", self.expert_calls.to_string());
        s
    }
}
