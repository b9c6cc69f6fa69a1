//! Semantic deviation under masking and the α-weighted utilization score.

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, Image, TextEncoder, VisionLanguageModel};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, Fill, MaskKind, MaskMode, MaskSet};
use crate::relevance::RegionGrid;
use crate::scalar::{mean, Scalar};

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    dot / (na * nb)
}

/// Deviation of one mask from a clamped cosine: `1 − c` for Top, `c` for Bottom.
pub fn deviation<T: Scalar>(kind: MaskKind, clamped_cosine: T) -> T {
    match kind {
        MaskKind::Top => T::one() - clamped_cosine,
        MaskKind::Bottom => clamped_cosine,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationRecord {
    pub mask_index: usize,
    pub kind: MaskKind,
    pub seed: u64,
    pub perturbed_answer: String,
    pub raw_cosine: f64,
    pub cosine: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deviation {
    pub raw_cosine: f64,
    /// Cosine clamped to `[0,1]`.
    pub cosine: f64,
    pub deviation: f64,
}

fn deviation_from(reference: &[f64], perturbed: &[f64], kind: MaskKind) -> Deviation {
    let raw = cosine_similarity(reference, perturbed);
    let cosine = raw.clamp(0.0, 1.0);
    Deviation {
        raw_cosine: raw,
        cosine,
        deviation: deviation(kind, cosine),
    }
}

pub fn semantic_deviation(
    reference: &str,
    perturbed: &str,
    kind: MaskKind,
    encoder: &dyn TextEncoder,
) -> Result<Deviation> {
    if reference.trim().is_empty() {
        return Err(Error::invalid("reference answer is empty"));
    }
    Ok(deviation_from(&encoder.embed(reference)?, &encoder.embed(perturbed)?, kind))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum Subject {
    Draft,
    Expert(usize),
}

/// Aggregate over surviving deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate<T> {
    /// α actually applied; 1 or 0 when one subset is absent.
    pub alpha: T,
    pub top_mean: T,
    pub bottom_mean: T,
    pub u_q: T,
}

/// `U = α·mean(top) + (1−α)·mean(bottom)`.
///
/// A mode without one subset, or a hybrid set that lost every mask of one kind,
/// puts all weight on the subset that is present.
pub fn aggregate<T: Scalar>(alpha: T, mode: MaskMode, top: &[T], bottom: &[T]) -> Result<Aggregate<T>> {
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::invalid("alpha must lie in [0,1]"));
    }
    if top.is_empty() && bottom.is_empty() {
        return Err(Error::invalid("no deviations to aggregate"));
    }
    let alpha = match mode {
        MaskMode::TopOnly => T::one(),
        MaskMode::BottomOnly => T::zero(),
        MaskMode::Hybrid if bottom.is_empty() => T::one(),
        MaskMode::Hybrid if top.is_empty() => T::zero(),
        MaskMode::Hybrid => alpha,
    };
    if (alpha > T::zero() && top.is_empty()) || (alpha < T::one() && bottom.is_empty()) {
        return Err(Error::invalid("mask mode and surviving masks disagree"));
    }
    let (top_mean, bottom_mean) = (mean(top), mean(bottom));
    Ok(Aggregate {
        alpha,
        top_mean,
        bottom_mean,
        u_q: alpha * top_mean + (T::one() - alpha) * bottom_mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub subject: Subject,
    pub baseline_answer: String,
    pub alpha: f64,
    pub top_mean: f64,
    pub bottom_mean: f64,
    pub u_q: f64,
    pub records: Vec<DeviationRecord>,
    /// Masks whose VLM query failed and were left out of the means.
    pub dropped: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum UtilizationError {
    #[error("every masked query failed (last: {0})")]
    AllFailed(BackendError),
    #[error(transparent)]
    Other(#[from] Error),
}

impl From<BackendError> for UtilizationError {
    fn from(e: BackendError) -> Self {
        UtilizationError::Other(e.into())
    }
}

/// Query the VLM on each masked image and score the answers against `baseline`.
#[allow(clippy::too_many_arguments)]
pub fn utilization_score(
    subject: Subject,
    baseline: &str,
    question: &str,
    mask_set: &MaskSet,
    masked_images: &[Image],
    vlm: &dyn VisionLanguageModel,
    encoder: &dyn TextEncoder,
    alpha: f64,
) -> std::result::Result<UtilizationReport, UtilizationError> {
    if masked_images.len() != mask_set.len() {
        return Err(Error::invalid("one masked image per mask is required").into());
    }
    if baseline.trim().is_empty() {
        return Err(Error::invalid("baseline answer is empty").into());
    }
    let reference = encoder.embed(baseline)?;
    let mut records = Vec::with_capacity(mask_set.len());
    let mut last_failure = None;
    for (i, (mask, img)) in mask_set.masks.iter().zip(masked_images).enumerate() {
        let answer = match vlm.answer(img, question) {
            Ok(a) => a,
            Err(e) => {
                last_failure = Some(e);
                continue;
            }
        };
        let d = deviation_from(&reference, &encoder.embed(&answer)?, mask.kind);
        records.push(DeviationRecord {
            mask_index: i,
            kind: mask.kind,
            seed: mask.seed,
            perturbed_answer: answer,
            raw_cosine: d.raw_cosine,
            cosine: d.cosine,
            deviation: d.deviation,
        });
    }
    if records.is_empty() {
        return Err(UtilizationError::AllFailed(
            last_failure.unwrap_or_else(|| BackendError::unavailable(vlm.name(), "no masks")),
        ));
    }
    let pick = |k: MaskKind| -> Vec<f64> {
        records.iter().filter(|r| r.kind == k).map(|r| r.deviation).collect()
    };
    let agg = aggregate(alpha, mask_set.mode, &pick(MaskKind::Top), &pick(MaskKind::Bottom))?;
    let dropped = mask_set.len() - records.len();
    Ok(UtilizationReport {
        subject,
        baseline_answer: baseline.to_owned(),
        alpha: agg.alpha,
        top_mean: agg.top_mean,
        bottom_mean: agg.bottom_mean,
        u_q: agg.u_q,
        records,
        dropped,
    })
}

pub fn mask_images(image: &Image, mask_set: &MaskSet, grid: &RegionGrid, fill: Fill) -> Result<Vec<Image>> {
    mask_set
        .masks
        .iter()
        .map(|m| apply_mask(image, m, grid, fill))
        .collect()
}

/// Utilization of an expert-rendered image, reusing the draft's masks and
/// measuring deviations against the refined answer.
#[allow(clippy::too_many_arguments)]
pub fn recompute_for_expert(
    expert_index: usize,
    rendered: &Image,
    refined_answer: &str,
    question: &str,
    mask_set: &MaskSet,
    grid: &RegionGrid,
    fill: Fill,
    vlm: &dyn VisionLanguageModel,
    encoder: &dyn TextEncoder,
    alpha: f64,
) -> std::result::Result<UtilizationReport, UtilizationError> {
    let masked = mask_images(rendered, mask_set, grid, fill)?;
    utilization_score(
        Subject::Expert(expert_index),
        refined_answer,
        question,
        mask_set,
        &masked,
        vlm,
        encoder,
        alpha,
    )
}
