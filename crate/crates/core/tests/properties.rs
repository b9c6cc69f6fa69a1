//! Invariants checked over generated inputs.

mod common;

use std::collections::BTreeMap;

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use dnr_core::harness::ResultLog;
use dnr_core::masking::{gumbel_k_sample, sample_mask_set, MaskKind, MaskMode, MaskParams};
use dnr_core::relevance::{compute_relevance_map, QuerySet, RegionGrid, TermSource};
use dnr_core::selector::mlp::Mlp;
use dnr_core::utilization::aggregate;
use dnr_core::{select_expert, Image, RegionDistribution, Selection};

fn scores(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.0..1.0f64], n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn utilization_stays_in_unit_interval(
        alpha in 0.0..=1.0f64,
        top in prop::collection::vec(0.0..=1.0f64, 1..8),
        bottom in prop::collection::vec(0.0..=1.0f64, 1..8),
    ) {
        let a = aggregate(alpha, MaskMode::Hybrid, &top, &bottom).unwrap();
        prop_assert!((0.0..=1.0).contains(&a.u_q));
        prop_assert!(a.u_q >= a.top_mean.min(a.bottom_mean) - 1e-15);
        prop_assert!(a.u_q <= a.top_mean.max(a.bottom_mean) + 1e-15);
    }

    #[test]
    fn region_stats_ignore_cell_order(s in scores(16), seed in any::<u64>()) {
        prop_assume!(s.iter().any(|&v| v > 0.0));
        let grid = RegionGrid::new(4, 4).unwrap();
        let mut perm: Vec<usize> = (0..16).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let a = RegionDistribution::from_scores(s.clone(), grid).unwrap();
        let b = RegionDistribution::from_scores(perm.iter().map(|&i| s[i]).collect(), grid).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((b.probs[j] - a.probs[i]).abs() < 1e-12);
        }
        prop_assert!((a.stats.entropy_norm - b.stats.entropy_norm).abs() < 1e-12);
        prop_assert!((a.stats.contrast - b.stats.contrast).abs() < 1e-12);
        prop_assert!((a.alpha() - b.alpha()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.alpha()));
        prop_assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relevance_ignores_term_order(seed in any::<u64>(), n in 1usize..5) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let terms: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        let maps: BTreeMap<String, Array2<f64>> = terms
            .iter()
            .map(|t| (t.clone(), Array2::from_shape_fn((16, 16), |_| rng.random::<f64>())))
            .collect();
        let image = Image::filled("x", 16, 16, [0, 0, 0]).unwrap();
        let mut reversed = terms.clone();
        reversed.reverse();
        let q = |terms: Vec<String>| QuerySet { source_question: "q".into(), terms, origin: TermSource::Backend };
        let g = StubGrounder(maps);
        let a = compute_relevance_map::<f64>(&image, &q(terms), &g).unwrap();
        let b = compute_relevance_map::<f64>(&image, &q(reversed), &g).unwrap();
        prop_assert_eq!(a.values, b.values);
    }

    #[test]
    fn gumbel_sets_are_valid(w in scores(8), k in 1usize..8, seed in any::<u64>()) {
        let positive = w.iter().filter(|&&v| v > 0.0).count();
        prop_assume!(positive > 0);
        let picked = gumbel_k_sample(&w, k, seed).unwrap();
        prop_assert_eq!(picked.len(), k);
        prop_assert!(picked.windows(2).all(|p| p[0] < p[1]));
        let zeros = picked.iter().filter(|&&i| w[i] == 0.0).count();
        prop_assert_eq!(zeros, k.saturating_sub(positive));
        prop_assert_eq!(&picked, &gumbel_k_sample(&w, k, seed).unwrap());
    }

    #[test]
    fn mask_sets_respect_mode_and_counts(s in scores(16), m in 2usize..12, seed in any::<u64>(), mode in 0u8..3) {
        prop_assume!(s.iter().any(|&v| v > 0.0));
        let mode = [MaskMode::TopOnly, MaskMode::BottomOnly, MaskMode::Hybrid][mode as usize];
        let dist = RegionDistribution::from_scores(s, RegionGrid::new(4, 4).unwrap()).unwrap();
        let params = MaskParams { mode, count: m, seed, ..MaskParams::default() };
        let set = sample_mask_set(&dist, &params).unwrap();
        prop_assert_eq!(set.len(), m);
        match mode {
            MaskMode::TopOnly => prop_assert_eq!(set.count(MaskKind::Top), m),
            MaskMode::BottomOnly => prop_assert_eq!(set.count(MaskKind::Bottom), m),
            MaskMode::Hybrid => prop_assert!(set.count(MaskKind::Top) >= 1 && set.count(MaskKind::Bottom) >= 1),
        }
        for mask in &set.masks {
            prop_assert!(!mask.regions.is_empty() && mask.regions.len() < 16);
            prop_assert!(mask.regions.windows(2).all(|p| p[0] < p[1]));
        }
        prop_assert_eq!(set, sample_mask_set(&dist, &params).unwrap());
    }

    #[test]
    fn selection_ignores_candidate_order(
        u_base in 0.0..=1.0f64,
        us in prop::collection::vec(prop_oneof![Just(0.5), 0.0..=1.0f64], 0..5),
        seed in any::<u64>(),
    ) {
        let mut cands: Vec<(usize, f64)> = us.into_iter().enumerate().collect();
        let a = select_expert(u_base, &cands);
        rand::seq::SliceRandom::shuffle(&mut cands[..], &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, select_expert(u_base, &cands));
        if let Selection::Expert(j) = a {
            let u = cands.iter().find(|c| c.0 == j).unwrap().1;
            prop_assert!(u > u_base);
        }
    }

    #[test]
    fn relabeling_outputs_permutes_predictions(seed in any::<u64>(), x in prop::collection::vec(-2.0..2.0f64, 6)) {
        let mut net = Mlp::<f64>::init(&[6, 8, 4], seed).unwrap();
        // give the zero-initialized head some signal
        let head = net.layers.last_mut().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        use rand::Rng;
        head.weights.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let perm = [2usize, 0, 3, 1];
        let mut swapped = net.clone();
        let last = swapped.layers.len() - 1;
        for (new, &old) in perm.iter().enumerate() {
            let row = net.layers[last].weights.row(old).to_owned();
            swapped.layers[last].weights.row_mut(new).assign(&row);
            swapped.layers[last].bias[new] = net.layers[last].bias[old];
        }
        let p = net.probabilities(&x).unwrap();
        let q = swapped.probabilities(&x).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            prop_assert!((q[new] - p[old]).abs() < 1e-12);
        }
        let best = net.predict(&x).unwrap();
        let moved = swapped.predict(&x).unwrap();
        prop_assert!((p[best] - q[moved]).abs() < 1e-12);
    }

    #[test]
    fn result_log_round_trips(seed in any::<u64>(), n in 1usize..30) {
        let log = random_log(&mut ChaCha8Rng::seed_from_u64(seed), n);
        let text = log.to_jsonl();
        let back = ResultLog::from_jsonl(&text).unwrap();
        prop_assert_eq!(&back, &log);
        prop_assert_eq!(back.to_jsonl(), text);
    }
}

#[test]
fn single_precision_matches_double() {
    let s: Vec<f64> = (0..16).map(|i| f64::from(i % 5) / 4.0).collect();
    let grid = RegionGrid::new(4, 4).unwrap();
    let a = RegionDistribution::from_scores(s.clone(), grid).unwrap();
    let b = dnr_core::relevance::RegionDistribution::<f32>::from_scores(s.iter().map(|&v| v as f32).collect(), grid).unwrap();
    assert!((a.alpha() - f64::from(b.alpha())).abs() < 1e-5);
    let top = [0.25f32, 0.5];
    let bottom = [0.75f32];
    let u = aggregate(0.5f32, MaskMode::Hybrid, &top, &bottom).unwrap();
    assert!((u.u_q - 0.5625).abs() < 1e-6);
}
