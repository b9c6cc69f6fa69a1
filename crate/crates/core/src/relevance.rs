//! Query-conditioned relevance: query terms, averaged grounding maps, the
//! region distribution over a grid, and the adaptive Top/Bottom weighting factor.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backends::text::content_words;
use crate::backends::{Decomposer, Grounder, Image};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Queries used when neither the backend nor the fallback extraction yields a term.
pub const GENERIC_QUERIES: [&str; 3] = ["object", "person", "background"];

/// Degenerate-range guard in the contrast ratio.
pub const CONTRAST_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermSource {
    Backend,
    ContentWords,
    Generic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySet {
    pub source_question: String,
    pub terms: Vec<String>,
    pub origin: TermSource,
}

impl QuerySet {
    pub fn m(&self) -> usize {
        self.terms.len()
    }
}

/// Lowercase, trim and deduplicate, keeping first-appearance order.
pub fn clean_terms(raw: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in raw {
        let t = t.trim().to_lowercase();
        if !t.is_empty() && !out.contains(&t) {
            out.push(t);
        }
    }
    out
}

/// Decompose `text` into query terms, falling back to content words and then
/// to [`GENERIC_QUERIES`] so that `m ≥ 1` always holds.
pub fn query_set_with_fallback(text: &str, decomposer: &dyn Decomposer) -> Result<QuerySet> {
    let terms = clean_terms(decomposer.decompose(text)?);
    let (terms, origin) = if !terms.is_empty() {
        (terms, TermSource::Backend)
    } else {
        let words = content_words(text);
        if !words.is_empty() {
            (words, TermSource::ContentWords)
        } else {
            (
                GENERIC_QUERIES.iter().map(|s| (*s).to_owned()).collect(),
                TermSource::Generic,
            )
        }
    };
    Ok(QuerySet {
        source_question: text.to_owned(),
        terms,
        origin,
    })
}

pub fn build_query_set(question: &str, decomposer: &dyn Decomposer) -> Result<QuerySet> {
    if question.trim().is_empty() {
        return Err(Error::invalid("question is empty"));
    }
    query_set_with_fallback(question, decomposer)
}

/// Pixel relevance `r(x|q)` in `[0,1]^{H×W}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap<T> {
    pub values: Array2<T>,
    pub terms: Vec<String>,
    pub image_id: String,
}

impl<T: Scalar> RelevanceMap<T> {
    pub fn new(values: Array2<T>, terms: Vec<String>, image_id: impl Into<String>) -> Result<Self> {
        if values.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::invalid("relevance values must lie in [0,1]"));
        }
        Ok(Self {
            values,
            terms,
            image_id: image_id.into(),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Elementwise mean of equally shaped maps, summed in the given order.
pub fn mean_of_maps<T: Scalar>(maps: &[Array2<T>]) -> Result<Array2<T>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("no maps to average"))?;
    let mut acc = Array2::<T>::zeros(first.dim());
    for m in maps {
        if m.dim() != first.dim() {
            return Err(Error::invalid("grounding maps differ in shape"));
        }
        acc.zip_mut_with(m, |a, &b| *a = *a + b);
    }
    let n = T::count(maps.len());
    acc.mapv_inplace(|v| v / n);
    Ok(acc)
}

/// Average the per-term grounding maps. Terms are accumulated in sorted order
/// so the result does not depend on the order the decomposer listed them.
pub fn compute_relevance_map<T: Scalar>(
    image: &Image,
    query_set: &QuerySet,
    grounder: &dyn Grounder,
) -> Result<RelevanceMap<T>> {
    if query_set.terms.is_empty() {
        return Err(Error::invalid("query set is empty"));
    }
    let mut order: Vec<&String> = query_set.terms.iter().collect();
    order.sort();
    order.dedup();
    let mut maps = Vec::with_capacity(order.len());
    for term in order {
        let raw = grounder.ground(image, term)?;
        if raw.dim() != image.shape() {
            return Err(Error::invalid(format!(
                "grounder returned {:?} for a {:?} image",
                raw.dim(),
                image.shape()
            )));
        }
        maps.push(raw.mapv(|v| T::lit(v.clamp(0.0, 1.0))));
    }
    RelevanceMap::new(mean_of_maps(&maps)?, query_set.terms.clone(), image.id())
}

/// `rows × cols` rectangular cells tiling an image; the last row and column
/// absorb remainder pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub rows: usize,
    pub cols: usize,
}

/// Pixel span of one cell: rows `y0..y1`, columns `x0..x1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellBounds {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

fn span(i: usize, parts: usize, len: usize) -> (usize, usize) {
    let step = len / parts;
    let start = i * step;
    let end = if i + 1 == parts { len } else { start + step };
    (start, end)
}

impl RegionGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols < 4 {
            return Err(Error::invalid(format!(
                "region grid {rows}x{cols} needs at least 4 cells"
            )));
        }
        Ok(Self { rows, cols })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_fits(&self, height: usize, width: usize) -> Result<()> {
        if height < self.rows || width < self.cols {
            return Err(Error::invalid(format!(
                "{}x{} grid does not tile a {height}x{width} image",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    pub fn cell(&self, index: usize, height: usize, width: usize) -> CellBounds {
        let (r, c) = (index / self.cols, index % self.cols);
        let (y0, y1) = span(r, self.rows, height);
        let (x0, x1) = span(c, self.cols, width);
        CellBounds { y0, y1, x0, x1 }
    }

    /// Cell index of pixel `(y, x)`.
    pub fn cell_of(&self, y: usize, x: usize, height: usize, width: usize) -> usize {
        let idx = |v: usize, parts: usize, len: usize| (v / (len / parts)).min(parts - 1);
        idx(y, self.rows, height) * self.cols + idx(x, self.cols, width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionStats<T> {
    pub entropy_norm: T,
    pub contrast: T,
    pub alpha: T,
}

/// Normalized region probabilities `P(u|x,q)` plus the statistics derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionDistribution<T> {
    pub probs: Vec<T>,
    pub region_scores: Vec<T>,
    pub grid: RegionGrid,
    /// All relevance was zero; `probs` is uniform.
    pub degenerate: bool,
    pub stats: RegionStats<T>,
}

/// Mean relevance per cell.
pub fn pool_regions<T: Scalar>(values: &Array2<T>, grid: &RegionGrid) -> Result<Vec<T>> {
    let (h, w) = values.dim();
    grid.check_fits(h, w)?;
    Ok((0..grid.len())
        .map(|i| {
            let c = grid.cell(i, h, w);
            let mut sum = T::zero();
            for y in c.y0..c.y1 {
                for x in c.x0..c.x1 {
                    sum = sum + values[[y, x]];
                }
            }
            sum / T::count((c.y1 - c.y0) * (c.x1 - c.x0))
        })
        .collect())
}

/// `−Σ p ln p / ln N`, with `0 ln 0 = 0`.
pub fn normalized_entropy<T: Scalar>(probs: &[T]) -> T {
    let n = probs.len();
    if n < 2 {
        return T::zero();
    }
    let h = probs
        .iter()
        .filter(|&&p| p > T::zero())
        .map(|&p| -p * p.ln())
        .sum::<T>();
    (h / T::count(n).ln()).max(T::zero()).min(T::one())
}

/// Gap between the mean of the scores in the top tenth of the value range and
/// the mean of those in the bottom tenth, divided by the range.
pub fn contrast<T: Scalar>(scores: &[T]) -> T {
    let Some(&first) = scores.first() else {
        return T::zero();
    };
    let (lo, hi) = scores
        .iter()
        .fold((first, first), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    let range = hi - lo;
    if !(range > T::zero()) {
        return T::zero();
    }
    let tenth = range * T::lit(0.1);
    let band_mean = |pred: &dyn Fn(T) -> bool| {
        let picked: Vec<T> = scores.iter().copied().filter(|&s| pred(s)).collect();
        crate::scalar::mean(&picked)
    };
    let top = band_mean(&|s| s >= hi - tenth);
    let bottom = band_mean(&|s| s <= lo + tenth);
    ((top - bottom) / range.max(T::lit(CONTRAST_EPS)))
        .max(T::zero())
        .min(T::one())
}

/// `α = (β_ent·S + β_ctr·C)/(β_ent + β_ctr)` with sharpness `S = 1 − H_norm`.
pub fn alpha_from_stats<T: Scalar>(entropy_norm: T, contrast: T, beta_ent: T, beta_ctr: T) -> T {
    let s = T::one() - entropy_norm;
    ((beta_ent * s + beta_ctr * contrast) / (beta_ent + beta_ctr))
        .max(T::zero())
        .min(T::one())
}

fn check_betas<T: Scalar>(beta_ent: T, beta_ctr: T) -> Result<()> {
    if !(beta_ent >= T::zero() && beta_ctr >= T::zero()) || beta_ent + beta_ctr <= T::zero() {
        return Err(Error::invalid(
            "beta_ent and beta_ctr must be non-negative and not both zero",
        ));
    }
    Ok(())
}

impl<T: Scalar> RegionDistribution<T> {
    /// Build from pooled region scores. Statistics use `β_ent = β_ctr = 1`
    /// until [`compute_alpha`] is called with other weights.
    pub fn from_scores(region_scores: Vec<T>, grid: RegionGrid) -> Result<Self> {
        if region_scores.len() != grid.len() {
            return Err(Error::invalid("one score per grid cell is required"));
        }
        if region_scores.iter().any(|&s| !(s >= T::zero()) || !s.is_finite()) {
            return Err(Error::invalid("region scores must be finite and non-negative"));
        }
        let n = region_scores.len();
        let total: T = region_scores.iter().copied().sum();
        let degenerate = !(total > T::zero());
        let probs = if degenerate {
            vec![T::one() / T::count(n); n]
        } else {
            region_scores.iter().map(|&s| s / total).collect()
        };
        let mut dist = Self {
            probs,
            region_scores,
            grid,
            degenerate,
            stats: RegionStats {
                entropy_norm: T::one(),
                contrast: T::zero(),
                alpha: T::zero(),
            },
        };
        if !degenerate {
            dist.stats.entropy_norm = normalized_entropy(&dist.probs);
            dist.stats.contrast = contrast(&dist.region_scores);
        }
        compute_alpha(&mut dist, T::one(), T::one())?;
        Ok(dist)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn alpha(&self) -> T {
        self.stats.alpha
    }
}

pub fn region_distribution<T: Scalar>(
    rmap: &RelevanceMap<T>,
    grid: RegionGrid,
) -> Result<RegionDistribution<T>> {
    RegionDistribution::from_scores(pool_regions(&rmap.values, &grid)?, grid)
}

/// Recompute α for the given weights and store it in `dist.stats`.
/// Degenerate distributions get `α = 0`.
pub fn compute_alpha<T: Scalar>(dist: &mut RegionDistribution<T>, beta_ent: T, beta_ctr: T) -> Result<T> {
    check_betas(beta_ent, beta_ctr)?;
    let alpha = if dist.degenerate {
        T::zero()
    } else {
        alpha_from_stats(dist.stats.entropy_norm, dist.stats.contrast, beta_ent, beta_ctr)
    };
    dist.stats.alpha = alpha;
    Ok(alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::MockDecomposer;
    use crate::backends::{Backend, BackendResult};

    struct Fixed(Vec<&'static str>);
    impl Backend for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn version(&self) -> &str {
            "0"
        }
    }
    impl Decomposer for Fixed {
        fn decompose(&self, _: &str) -> BackendResult<Vec<String>> {
            Ok(self.0.iter().map(|s| (*s).to_owned()).collect())
        }
    }

    #[test]
    fn query_set_examples() {
        let q = build_query_set("What is the man wearing on his feet?", &MockDecomposer::default()).unwrap();
        assert!(q.terms.contains(&"shoes".into()) && q.terms.contains(&"feet".into()));
        assert_eq!(q.origin, TermSource::Backend);

        let q = build_query_set("Is the gizmo spinning?", &Fixed(vec![])).unwrap();
        assert_eq!(q.terms, vec!["gizmo", "spinning"]);
        assert_eq!(q.origin, TermSource::ContentWords);

        let q = build_query_set("q", &Fixed(vec!["Car", "car ", "tree", ""])).unwrap();
        assert_eq!(q.terms, vec!["car", "tree"]);
        assert_eq!(q.m(), 2);

        assert!(build_query_set("  ", &Fixed(vec!["x"])).is_err());
        let q = build_query_set("what is it?", &Fixed(vec![])).unwrap();
        assert_eq!(q.origin, TermSource::Generic);
    }

    #[test]
    fn mean_of_two_maps() {
        let a = Array2::from_shape_fn((3, 4), |(y, x)| (y * 4 + x) as f64 / 12.0);
        let b = Array2::from_shape_fn((3, 4), |(y, x)| ((y + x) % 2) as f64);
        let m = mean_of_maps(&[a.clone(), b.clone()]).unwrap();
        for ((y, x), v) in m.indexed_iter() {
            assert_eq!(*v, (a[[y, x]] + b[[y, x]]) / 2.0);
        }
        assert_eq!(mean_of_maps(std::slice::from_ref(&a)).unwrap(), a);
    }

    #[test]
    fn grid_tiles_with_remainder() {
        let g = RegionGrid::new(3, 3).unwrap();
        let mut covered = vec![0u8; 17 * 20];
        for i in 0..g.len() {
            let c = g.cell(i, 17, 20);
            for y in c.y0..c.y1 {
                for x in c.x0..c.x1 {
                    covered[y * 20 + x] += 1;
                    assert_eq!(g.cell_of(y, x, 17, 20), i);
                }
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
        assert_eq!(g.cell(8, 17, 20), CellBounds { y0: 10, y1: 17, x0: 12, x1: 20 });
        assert!(RegionGrid::new(1, 3).is_err());
    }

    #[test]
    fn uniform_and_zero_maps() {
        let g = RegionGrid::new(4, 4).unwrap();
        let flat = RelevanceMap::new(Array2::from_elem((16, 16), 0.3f64), vec![], "i").unwrap();
        let d = region_distribution(&flat, g).unwrap();
        assert!(d.probs.iter().all(|&p| (p - 1.0 / 16.0).abs() < 1e-15));
        assert!(!d.degenerate);
        assert!(d.alpha().abs() < 1e-12);

        let zero = RelevanceMap::new(Array2::<f64>::zeros((16, 16)), vec![], "i").unwrap();
        let d = region_distribution(&zero, g).unwrap();
        assert!(d.degenerate);
        assert_eq!(d.probs, vec![1.0 / 16.0; 16]);
        assert_eq!(d.alpha(), 0.0);
        assert_eq!(d.stats.entropy_norm, 1.0);
        assert_eq!(d.stats.contrast, 0.0);
    }

    #[test]
    fn alpha_boundaries() {
        let g = RegionGrid::new(16, 16).unwrap();
        let mut scores = vec![0.0f64; 256];
        scores[37] = 0.9;
        let d = RegionDistribution::from_scores(scores, g).unwrap();
        assert_eq!(d.stats.entropy_norm, 0.0);
        assert_eq!(d.stats.contrast, 1.0);
        assert_eq!(d.alpha(), 1.0);
    }

    #[test]
    fn alpha_two_regions_by_hand() {
        let g = RegionGrid { rows: 1, cols: 2 };
        let mut d = RegionDistribution::from_scores(vec![0.8f64, 0.2], g).unwrap();
        let h = -(0.8f64 * 0.8f64.ln() + 0.2 * 0.2f64.ln()) / 2f64.ln();
        assert!((d.stats.entropy_norm - h).abs() < 1e-15);
        // each tenth-of-range band holds exactly one score
        assert!((d.stats.contrast - 1.0).abs() < 1e-15);
        let a = compute_alpha(&mut d, 1.0, 1.0).unwrap();
        assert!((a - ((1.0 - h) + 1.0) / 2.0).abs() < 1e-15);
        let a = compute_alpha(&mut d, 3.0, 1.0).unwrap();
        assert!((a - (3.0 * (1.0 - h) + 1.0) / 4.0).abs() < 1e-15);
        assert!(compute_alpha(&mut d, 0.0, 0.0).is_err());
        assert!(compute_alpha(&mut d, -1.0, 2.0).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let g = RegionGrid::new(2, 2).unwrap();
        let d = RegionDistribution::from_scores(vec![1.0f32, 0.0, 0.0, 0.0], g).unwrap();
        assert_eq!(d.alpha(), 1.0f32);
    }

    #[test]
    fn contrast_bounded() {
        assert_eq!(contrast::<f64>(&[]), 0.0);
        assert_eq!(contrast(&[0.5f64, 0.5, 0.5]), 0.0);
        let c = contrast(&[0.0f64, 0.1, 0.5, 0.95, 1.0]);
        assert!((c - (0.975 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_relevance() {
        assert!(RelevanceMap::new(Array2::from_elem((2, 2), 1.5f64), vec![], "x").is_err());
    }
}
