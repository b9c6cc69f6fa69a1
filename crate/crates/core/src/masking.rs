//! Stochastic Top-k / Bottom-k region masks drawn with Gumbel-top-k sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::text::splitmix64;
use crate::backends::Image;
use crate::error::{Error, Result};
use crate::relevance::{RegionDistribution, RegionGrid};
use crate::scalar::Scalar;

/// Offset added to inverted weights so Bottom-k never sees an all-zero vector.
pub const BOTTOM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Top,
    Bottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    TopOnly,
    BottomOnly,
    Hybrid,
}

/// How Bottom-k regions are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottomSampling {
    /// Gumbel-top-k over `max p − p + ε`.
    #[default]
    Stochastic,
    /// The lowest-probability regions, ties by index.
    Lowest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    pub kind: MaskKind,
    /// Sorted region indices.
    pub regions: Vec<usize>,
    pub rho: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub masks: Vec<Mask>,
    pub mode: MaskMode,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn count(&self, kind: MaskKind) -> usize {
        self.masks.iter().filter(|m| m.kind == kind).count()
    }

    pub fn top(&self) -> impl Iterator<Item = &Mask> {
        self.masks.iter().filter(|m| m.kind == MaskKind::Top)
    }

    pub fn bottom(&self) -> impl Iterator<Item = &Mask> {
        self.masks.iter().filter(|m| m.kind == MaskKind::Bottom)
    }
}

/// Standard Gumbel draw from an open-interval uniform.
fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Indices of the `k` largest `ln wᵢ + Gᵢ` keys, ascending.
///
/// Equivalent to drawing `k` items without replacement from the Plackett–Luce
/// model with weights `w`. Zero weights have key `−∞` and are picked only when
/// fewer than `k` positive weights exist.
pub fn gumbel_k_sample<T: Scalar>(weights: &[T], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = weights.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} outside 1..={n}")));
    }
    if weights.iter().any(|&w| !(w >= T::zero()) || !w.is_finite()) {
        return Err(Error::invalid("weights must be finite and non-negative"));
    }
    if !weights.iter().any(|&w| w > T::zero()) {
        return Err(Error::invalid("weights are all zero"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(T, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            // one draw per slot keeps the stream aligned across weight vectors
            let g = T::lit(gumbel(&mut rng));
            let key = if w > T::zero() {
                w.ln() + g
            } else {
                T::neg_infinity()
            };
            (key, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("keys are not NaN").then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = keyed[..k].iter().map(|&(_, i)| i).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// `round(ρ·N)` clamped to `[1, N−1]`.
pub fn region_count(rho: f64, n: usize) -> usize {
    ((rho * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Number of Top masks in a hybrid set: `round(α·M)` clamped to `[1, M−1]`.
pub fn hybrid_top_count(alpha: f64, m: usize) -> usize {
    ((alpha * m as f64).round() as usize).clamp(1, m - 1)
}

/// Seed of mask `index` derived from the sample seed.
pub fn mask_seed(seed: u64, index: usize) -> u64 {
    seed ^ splitmix64(index as u64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskParams {
    pub mode: MaskMode,
    pub rho_top: f64,
    pub rho_bottom: f64,
    pub count: usize,
    pub seed: u64,
    pub bottom_sampling: BottomSampling,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            mode: MaskMode::Hybrid,
            rho_top: 0.25,
            rho_bottom: 0.75,
            count: 16,
            seed: 0,
            bottom_sampling: BottomSampling::Stochastic,
        }
    }
}

fn lowest_k<T: Scalar>(probs: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[a].partial_cmp(&probs[b]).expect("finite").then(a.cmp(&b)));
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

pub fn sample_mask_set<T: Scalar>(dist: &RegionDistribution<T>, params: &MaskParams) -> Result<MaskSet> {
    let m = params.count;
    if m < 2 {
        return Err(Error::invalid("at least two masks are required"));
    }
    for rho in [params.rho_top, params.rho_bottom] {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::invalid(format!("masking ratio {rho} outside (0,1)")));
        }
    }
    let n = dist.len();
    let n_top = match params.mode {
        MaskMode::TopOnly => m,
        MaskMode::BottomOnly => 0,
        MaskMode::Hybrid => hybrid_top_count(dist.alpha().as_f64(), m),
    };
    let top_weights = &dist.probs;
    let max_p = dist
        .probs
        .iter()
        .copied()
        .fold(T::zero(), |a, b| a.max(b));
    let bottom_weights: Vec<T> = dist
        .probs
        .iter()
        .map(|&p| (max_p - p) + T::lit(BOTTOM_EPS))
        .collect();

    let mut masks = Vec::with_capacity(m);
    for i in 0..m {
        let seed = mask_seed(params.seed, i);
        let (kind, rho) = if i < n_top {
            (MaskKind::Top, params.rho_top)
        } else {
            (MaskKind::Bottom, params.rho_bottom)
        };
        let k = region_count(rho, n);
        let regions = match (kind, params.bottom_sampling) {
            (MaskKind::Top, _) => gumbel_k_sample(top_weights, k, seed)?,
            (MaskKind::Bottom, BottomSampling::Stochastic) => gumbel_k_sample(&bottom_weights, k, seed)?,
            (MaskKind::Bottom, BottomSampling::Lowest) => lowest_k(&dist.probs, k),
        };
        masks.push(Mask {
            kind,
            regions,
            rho,
            seed,
        });
    }
    Ok(MaskSet {
        masks,
        mode: params.mode,
    })
}

/// Pixel value written into masked cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    Constant([u8; 3]),
    ImageMean,
}

impl Default for Fill {
    fn default() -> Self {
        Fill::Constant([128, 128, 128])
    }
}

impl Fill {
    pub fn resolve(&self, image: &Image) -> [u8; 3] {
        match *self {
            Fill::Constant(c) => c,
            Fill::ImageMean => image.mean_color(),
        }
    }
}

/// Copy of `image` with every cell of the mask set to `fill`.
pub fn apply_mask(image: &Image, mask: &Mask, grid: &RegionGrid, fill: Fill) -> Result<Image> {
    let (h, w) = image.shape();
    grid.check_fits(h, w)?;
    if let Some(&bad) = mask.regions.iter().find(|&&r| r >= grid.len()) {
        return Err(Error::invalid(format!("region {bad} outside the {}-cell grid", grid.len())));
    }
    let value = fill.resolve(image);
    let mut out = image.clone();
    for &r in &mask.regions {
        let c = grid.cell(r, h, w);
        for y in c.y0..c.y1 {
            for x in c.x0..c.x1 {
                out.put(x as u32, y as u32, value);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid4() -> RegionGrid {
        RegionGrid::new(4, 4).unwrap()
    }

    #[test]
    fn k_equals_n_selects_everything() {
        let w = [0.1f64, 0.0, 3.0, 0.5];
        assert_eq!(gumbel_k_sample(&w, 4, 9).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn zero_weight_skipped_when_possible() {
        let w = [0.3f64, 0.0, 0.2, 0.5];
        for seed in 0..2000 {
            assert!(!gumbel_k_sample(&w, 3, seed).unwrap().contains(&1));
        }
    }

    #[test]
    fn sample_errors() {
        assert!(gumbel_k_sample(&[0.0f64, 0.0], 1, 0).is_err());
        assert!(gumbel_k_sample(&[1.0f64], 2, 0).is_err());
        assert!(gumbel_k_sample(&[1.0f64], 0, 0).is_err());
        assert!(gumbel_k_sample(&[1.0f64, -0.1], 1, 0).is_err());
    }

    #[test]
    fn counts_and_clamps() {
        assert_eq!(region_count(0.25, 256), 64);
        assert_eq!(region_count(0.75, 256), 192);
        assert_eq!(region_count(0.01, 16), 1);
        assert_eq!(region_count(0.99, 16), 15);
        assert_eq!(hybrid_top_count(1.0, 16), 15);
        assert_eq!(hybrid_top_count(0.0, 16), 1);
        assert_eq!(hybrid_top_count(0.5, 16), 8);
    }

    #[test]
    fn hybrid_alpha_one_keeps_one_bottom_mask() {
        let mut scores = vec![0.0f64; 16];
        scores[5] = 1.0;
        let d = RegionDistribution::from_scores(scores, grid4()).unwrap();
        assert_eq!(d.alpha(), 1.0);
        let set = sample_mask_set(&d, &MaskParams::default()).unwrap();
        assert_eq!(set.count(MaskKind::Top), 15);
        assert_eq!(set.count(MaskKind::Bottom), 1);
    }

    #[test]
    fn one_hot_top_k1_always_hits_hot_region() {
        let mut scores = vec![0.0f64; 16];
        scores[6] = 2.0;
        let d = RegionDistribution::from_scores(scores, grid4()).unwrap();
        let params = MaskParams {
            mode: MaskMode::TopOnly,
            rho_top: 0.05,
            ..MaskParams::default()
        };
        let set = sample_mask_set(&d, &params).unwrap();
        assert!(set.masks.iter().all(|m| m.regions == vec![6]));
    }

    #[test]
    fn lowest_bottom_sampling_is_deterministic_lowest() {
        let scores: Vec<f64> = (0..16).map(|i| i as f64 + 1.0).collect();
        let d = RegionDistribution::from_scores(scores, grid4()).unwrap();
        let params = MaskParams {
            mode: MaskMode::BottomOnly,
            bottom_sampling: BottomSampling::Lowest,
            ..MaskParams::default()
        };
        let set = sample_mask_set(&d, &params).unwrap();
        assert!(set.masks.iter().all(|m| m.regions == (0..12).collect::<Vec<_>>()));
    }

    #[test]
    fn mask_set_is_reproducible_and_seeds_distinct() {
        let scores: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64).collect();
        let d = RegionDistribution::from_scores(scores, grid4()).unwrap();
        let p = MaskParams {
            seed: 42,
            ..MaskParams::default()
        };
        let a = sample_mask_set(&d, &p).unwrap();
        assert_eq!(a, sample_mask_set(&d, &p).unwrap());
        let mut seeds: Vec<u64> = a.masks.iter().map(|m| m.seed).collect();
        seeds.dedup();
        assert_eq!(seeds.len(), 16);
        assert!(a.masks.iter().all(|m| m.regions.len() == region_count(m.rho, 16)));
    }

    #[test]
    fn apply_mask_touches_only_masked_cells() {
        let mut img = Image::filled("m", 18, 17, [0; 3]).unwrap();
        for y in 0..17 {
            for x in 0..18 {
                img.put(x, y, [x as u8 * 9, y as u8 * 11, 77]);
            }
        }
        let g = grid4();
        let mask = Mask {
            kind: MaskKind::Top,
            regions: vec![5],
            rho: 0.0,
            seed: 0,
        };
        let out = apply_mask(&img, &mask, &g, Fill::default()).unwrap();
        let c = g.cell(5, 17, 18);
        let mut sum = [0u64; 3];
        let mut n = 0u64;
        for y in 0..17u32 {
            for x in 0..18u32 {
                let inside = (c.y0..c.y1).contains(&(y as usize)) && (c.x0..c.x1).contains(&(x as usize));
                if inside {
                    let p = out.get(x, y);
                    (0..3).for_each(|i| sum[i] += u64::from(p[i]));
                    n += 1;
                } else {
                    assert_eq!(out.get(x, y), img.get(x, y));
                }
            }
        }
        assert_eq!(sum.map(|s| s / n), [128; 3]);
        assert_eq!(sum.map(|s| s % n), [0; 3]);

        let all_but_one = Mask {
            regions: (0..15).collect(),
            ..mask.clone()
        };
        let out = apply_mask(&img, &all_but_one, &g, Fill::ImageMean).unwrap();
        let last = g.cell(15, 17, 18);
        let untouched = (0..17u32)
            .flat_map(|y| (0..18u32).map(move |x| (x, y)))
            .filter(|&(x, y)| out.get(x, y) == img.get(x, y))
            .count();
        assert_eq!(untouched, (last.y1 - last.y0) * (last.x1 - last.x0));

        let bad = Mask {
            regions: vec![16],
            ..mask
        };
        assert!(apply_mask(&img, &bad, &g, Fill::default()).is_err());
    }
}
