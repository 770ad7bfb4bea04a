use std::collections::HashSet;

use sopssl_core::data::{
    channel_means, generate, split_by_rate, Dataset, Generator, Split, SplitCounts, SyntheticSpec,
};
use sopssl_core::model::{LayerSpec, ModelConfig};
use sopssl_core::train::{run, Mode, TrainConfig};
use sopssl_core::Tensor;

fn spec_with(per_class: SplitCounts) -> SyntheticSpec {
    SyntheticSpec {
        per_class,
        ..SyntheticSpec::default()
    }
}

fn channel_covariance(image: &Tensor) -> Vec<f64> {
    let c = image.shape()[0];
    let plane = image.numel() / c;
    let means = channel_means(image);
    let mut cov = vec![0.0; c * c];
    for a in 0..c {
        for b in 0..c {
            let (xa, xb) = (
                &image.data()[a * plane..(a + 1) * plane],
                &image.data()[b * plane..(b + 1) * plane],
            );
            cov[a * c + b] = xa
                .iter()
                .zip(xb)
                .map(|(u, v)| (u - means[a]) * (v - means[b]))
                .sum::<f64>()
                / plane as f64;
        }
    }
    cov
}

/// Per-class mean of a per-image statistic, plus the expected squared norm of
/// the difference between two class means under sampling noise alone.
fn class_means(ds: &Dataset, stat: impl Fn(&Tensor) -> Vec<f64>) -> (Vec<Vec<f64>>, f64) {
    let k = ds.num_classes;
    let mut groups: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k];
    for s in ds.labeled.iter().chain(&ds.validation).chain(&ds.test) {
        groups[s.label.unwrap()].push(stat(&s.image));
    }
    let dim = groups[0][0].len();
    let means: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            (0..dim)
                .map(|j| g.iter().map(|v| v[j]).sum::<f64>() / g.len() as f64)
                .collect()
        })
        .collect();
    let mut var_of_mean = 0.0;
    for (g, mu) in groups.iter().zip(&means) {
        let n = g.len() as f64;
        for j in 0..dim {
            let var = g.iter().map(|v| (v[j] - mu[j]).powi(2)).sum::<f64>() / (n - 1.0);
            var_of_mean += var / n;
        }
    }
    // Average over classes, doubled for a difference of two means.
    (means, 2.0 * var_of_mean / k as f64)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn first_order_statistics_do_not_separate_classes() {
    let ds = generate(&spec_with(SplitCounts {
        labeled: 600,
        unlabeled: 0,
        validation: 100,
        test: 100,
    }))
    .unwrap();
    let (mean_first, noise_first) = class_means(&ds, channel_means);
    let (mean_second, noise_second) = class_means(&ds, channel_covariance);
    let tol_first = 2.0 * noise_first.sqrt();
    let tol_second = 2.0 * noise_second.sqrt();
    let mut min_second = f64::INFINITY;
    for a in 0..ds.num_classes {
        for b in (a + 1)..ds.num_classes {
            let d1 = dist(&mean_first[a], &mean_first[b]);
            assert!(d1 <= tol_first, "classes {a},{b}: first-order gap {d1} > {tol_first}");
            min_second = min_second.min(dist(&mean_second[a], &mean_second[b]));
        }
    }
    assert!(
        min_second >= 5.0 * tol_second,
        "covariance gap {min_second} vs tolerance {tol_second}"
    );
}

#[test]
fn linear_probe_on_pooled_parts_stays_near_chance() {
    let ds = generate(&SyntheticSpec::default()).unwrap();
    let mut model = ModelConfig::default();
    model.extractor.layers = vec![LayerSpec::PointwiseLinear { c_out: 8 }];
    let cfg = TrainConfig {
        mode: Mode::Sup,
        ..TrainConfig::desk()
    };
    let out = run(&ds, &model, &cfg).unwrap();
    assert!(
        out.final_test_acc <= 0.1 + 0.1,
        "linear probe reached {}",
        out.final_test_acc
    );
}

#[test]
fn splits_are_disjoint_and_sized() {
    let ds = generate(&SyntheticSpec::default()).unwrap();
    assert_eq!(
        (ds.labeled.len(), ds.unlabeled.len(), ds.validation.len(), ds.test.len()),
        (200, 2000, 200, 500)
    );
    let mut seen = HashSet::new();
    for rec in ds.records() {
        assert!(seen.insert(rec.sample.id));
        assert_eq!(rec.sample.label.is_some(), rec.split != Split::Unlabeled);
    }
    ds.validate().unwrap();
}

#[test]
fn same_seed_same_bits() {
    let spec = spec_with(SplitCounts {
        labeled: 2,
        unlabeled: 3,
        validation: 1,
        test: 1,
    });
    let a = generate(&spec).unwrap();
    let b = generate(&spec).unwrap();
    assert_eq!(a, b);
    let c = generate(&SyntheticSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn signatures_share_marginals() {
    let g = Generator::new(&SyntheticSpec::default()).unwrap();
    for sig in g.signatures() {
        let mut parts: Vec<usize> = sig.iter().flat_map(|&(a, b)| [a, b]).collect();
        parts.sort_unstable();
        assert_eq!(parts, (0..8).collect::<Vec<_>>());
    }
    let distinct: HashSet<_> = g.signatures().iter().collect();
    assert_eq!(distinct.len(), 10);
}

#[test]
fn label_rate_subsets() {
    let ds = generate(&spec_with(SplitCounts {
        labeled: 1,
        unlabeled: 20,
        validation: 1,
        test: 1,
    }))
    .unwrap();
    assert_eq!(ds.unlabeled.len(), 200);
    assert!(split_by_rate(&ds, 0.0, 0).unwrap().unlabeled.is_empty());
    assert_eq!(split_by_rate(&ds, 1.0, 0).unwrap(), ds);
    let half = split_by_rate(&ds, 0.5, 0).unwrap();
    assert_eq!(half.unlabeled.len(), 100);
    assert_eq!(
        (half.labeled.clone(), half.test.clone(), half.validation.clone()),
        (ds.labeled.clone(), ds.test.clone(), ds.validation.clone())
    );
    assert_eq!(half, split_by_rate(&ds, 0.5, 0).unwrap());
    let ids: HashSet<u64> = ds.unlabeled.iter().map(|s| s.id).collect();
    assert!(half.unlabeled.iter().all(|s| ids.contains(&s.id)));
    assert!(split_by_rate(&ds, -0.1, 0).is_err());
}

#[test]
fn infeasible_specs_rejected() {
    let tiny = SyntheticSpec {
        height: 2,
        width: 2,
        ..SyntheticSpec::default()
    };
    assert!(generate(&tiny).is_err());
    let few_parts = SyntheticSpec {
        parts: 3,
        channels: 3,
        ..SyntheticSpec::default()
    };
    assert!(generate(&few_parts).is_err());
    let one_class = SyntheticSpec {
        num_classes: 1,
        ..SyntheticSpec::default()
    };
    assert!(generate(&one_class).is_err());
}
