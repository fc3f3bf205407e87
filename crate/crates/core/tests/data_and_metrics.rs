use cyclic_dp_core::data::{
    generate_multisite, min_max_normalize, pooled_variances, top_variance_features, Provenance,
    SiteDataSpec,
};
use cyclic_dp_core::metrics::{auroc, ScoredSet};
use cyclic_dp_core::nn::sigmoid;
use cyclic_dp_core::rng::NoiseSource;
use cyclic_dp_core::{Matrix, SiteDataset};
use proptest::prelude::*;

fn binomial_sd(n: usize, p: f64) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn null_model_gives_balanced_labels() {
    let d = 4;
    let ds = generate_multisite(d, &vec![0.0; d], &[SiteDataSpec::new("a", 10_000, d)], 1).unwrap();
    let rate = ds[0].positive_rate();
    assert!((rate - 0.5).abs() <= 3.0 * binomial_sd(10_000, 0.5), "rate {rate}");
}

#[test]
fn shared_subseed_gives_identical_data() {
    let d = 3;
    let mut a = SiteDataSpec::new("a", 50, d);
    a.subseed = Some(77);
    let b = SiteDataSpec { id: "b".into(), ..a.clone() };
    let out = generate_multisite(d, &[0.3, -0.2, 1.0], &[a, b], 5).unwrap();
    assert_eq!(out[0].features(), out[1].features());
    assert_eq!(out[0].labels(), out[1].labels());
    // derived subseeds differ per id
    let c = SiteDataSpec::new("a", 50, d);
    let e = SiteDataSpec::new("e", 50, d);
    let out = generate_multisite(d, &[0.3, -0.2, 1.0], &[c, e], 5).unwrap();
    assert_ne!(out[0].features(), out[1].features());
}

#[test]
fn generation_is_deterministic() {
    let d = 5;
    let specs = [SiteDataSpec::new("x", 300, d), SiteDataSpec::new("y", 200, d)];
    let w = [0.5; 5];
    assert_eq!(
        generate_multisite(d, &w, &specs, 9).unwrap(),
        generate_multisite(d, &w, &specs, 9).unwrap()
    );
}

#[test]
fn large_label_bias_saturates_positives() {
    let d = 5;
    let w = vec![0.1; d];
    let mut spec = SiteDataSpec::new("hi", 1000, d);
    spec.label_bias = 8.0;
    let ds = generate_multisite(d, &w, &[spec], 2).unwrap();
    // Sampling oracle for the expected rate: E[sigmoid(w·x + 8)] with x ~ N(0, I).
    let mut rng = NoiseSource::new(1234, 9);
    let expected: f64 = (0..100_000)
        .map(|_| sigmoid((0..d).map(|_| 0.1 * rng.standard_normal()).sum::<f64>() + 8.0))
        .sum::<f64>()
        / 100_000.0;
    assert!(expected > 0.999);
    assert!(ds[0].positive_rate() > 0.99);
}

#[test]
fn class_rate_tracks_expected_sigmoid() {
    let d = 3;
    let w = [1.0, -0.5, 0.25];
    let mut spec = SiteDataSpec::new("s", 40_000, d);
    spec.feature_shift = vec![0.5, 0.0, -1.0];
    spec.label_bias = -0.7;
    let ds = generate_multisite(d, &w, &[spec], 17).unwrap();
    // Monte Carlo oracle on an independent stream.
    let mut rng = NoiseSource::new(555, 4);
    let m = 200_000;
    let shift = [0.5, 0.0, -1.0];
    let expected = (0..m)
        .map(|_| {
            let z: f64 = (0..d).map(|j| w[j] * (shift[j] + rng.standard_normal())).sum();
            sigmoid(z - 0.7)
        })
        .sum::<f64>()
        / m as f64;
    let rate = ds[0].positive_rate();
    assert!((rate - expected).abs() <= 4.0 * binomial_sd(40_000, expected), "{rate} vs {expected}");
}

fn sites(seed: u64) -> Vec<SiteDataset> {
    let d = 6;
    let specs: Vec<SiteDataSpec> = (0..4)
        .map(|i| {
            let mut s = SiteDataSpec::new(format!("site{i}"), 50 + 37 * i, d);
            s.feature_shift = (0..d).map(|j| (i * j) as f64 * 0.3).collect();
            s
        })
        .collect();
    generate_multisite(d, &[0.2; 6], &specs, seed).unwrap()
}

fn two_pass_variance(datasets: &[SiteDataset]) -> Vec<f64> {
    let d = datasets[0].dim();
    let rows: Vec<&[f64]> = datasets.iter().flat_map(|ds| ds.features().row_iter()).collect();
    let n = rows.len() as f64;
    (0..d)
        .map(|j| {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n
        })
        .collect()
}

#[test]
fn pooled_variance_matches_two_pass_oracle() {
    let ds = sites(3);
    let got = pooled_variances(&ds).unwrap();
    let want = two_pass_variance(&ds);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() <= 1e-12 * w.max(1.0), "{g} vs {w}");
    }
}

#[test]
fn feature_selection_ignores_site_order() {
    let ds = sites(4);
    let (cols, filtered) = top_variance_features(&ds, 3).unwrap();
    let mut rev = ds.clone();
    rev.reverse();
    let (cols_rev, _) = top_variance_features(&rev, 3).unwrap();
    assert_eq!(cols, cols_rev);
    assert!(filtered.iter().all(|f| f.dim() == 3));
    // Selected columns are those with the largest oracle variance.
    let v = two_pass_variance(&ds);
    let min_kept = cols.iter().map(|&c| v[c]).fold(f64::INFINITY, f64::min);
    let max_dropped = (0..6).filter(|c| !cols.contains(c)).map(|c| v[c]).fold(0.0, f64::max);
    assert!(min_kept >= max_dropped);
}

fn pair_counting_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut twice_wins = 0u64;
    let mut pairs = 0u64;
    for (i, &yi) in labels.iter().enumerate() {
        if yi != 1 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj != 0 {
                continue;
            }
            pairs += 1;
            twice_wins += if scores[i] > scores[j] {
                2
            } else if scores[i] == scores[j] {
                1
            } else {
                0
            };
        }
    }
    twice_wins as f64 / (2 * pairs) as f64
}

#[test]
fn rank_auroc_equals_pair_counting_on_random_data() {
    let mut rng = NoiseSource::new(200, 3);
    let scores: Vec<f64> = (0..200).map(|_| rng.unit()).collect();
    let labels: Vec<u8> = (0..200).map(|_| u8::from(rng.bernoulli(0.4))).collect();
    let got = auroc(&ScoredSet::new(scores.clone(), labels.clone()).unwrap()).unwrap();
    assert_eq!(got, pair_counting_auroc(&scores, &labels));
}

fn scored_inputs() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..=500).prop_flat_map(|n| {
        (
            // few distinct levels so ties are common
            prop::collection::vec((0u8..20).prop_map(|v| f64::from(v) / 20.0), n),
            prop::collection::vec(0u8..=1, n),
        )
    })
}

proptest! {
    #[test]
    fn rank_auroc_equals_pair_counting((scores, labels) in scored_inputs()) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let got = auroc(&ScoredSet::new(scores.clone(), labels.clone()).unwrap()).unwrap();
        prop_assert!((got - pair_counting_auroc(&scores, &labels)).abs() <= 1e-12);
    }

    #[test]
    fn flipping_labels_complements(seed in any::<u64>(), n in 2usize..300) {
        let mut rng = NoiseSource::new(seed, 1);
        let scores: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(0.5))).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let flipped: Vec<u8> = labels.iter().map(|y| 1 - y).collect();
        let a = auroc(&ScoredSet::new(scores.clone(), labels).unwrap()).unwrap();
        let b = auroc(&ScoredSet::new(scores, flipped).unwrap()).unwrap();
        prop_assert!((a + b - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn monotone_transform_preserves_auroc(seed in any::<u64>(), n in 2usize..300) {
        let mut rng = NoiseSource::new(seed, 1);
        let scores: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(0.3))).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let squashed: Vec<f64> = scores.iter().map(|&s| sigmoid(3.0 * s) + 2.0).collect();
        let a = auroc(&ScoredSet::new(scores, labels.clone()).unwrap()).unwrap();
        let b = auroc(&ScoredSet::new(squashed, labels).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn normalization_is_idempotent(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..40)) {
        let ds = SiteDataset::new("p", Matrix::from_rows(&rows).unwrap(), vec![0; rows.len()], Provenance::Csv)
            .unwrap();
        let (once, _) = min_max_normalize(&ds, None).unwrap();
        let (_, own) = min_max_normalize(&once, None).unwrap();
        let (twice, _) = min_max_normalize(&once, Some(&own)).unwrap();
        for (a, b) in once.features().as_slice().iter().zip(twice.features().as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert!(once.features().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
