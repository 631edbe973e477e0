mod common;

use std::collections::HashSet;
use std::f64::consts::PI;

use proptest::prelude::*;
use proto_margin::autodiff::Graph;
use proto_margin::data::{generate_synthetic, sample_episode, split_classes, DatasetIndex, SplitCounts};
use proto_margin::eval::confusion_matrix;
use proto_margin::metric::{
    aam_probabilities, angular_distance, class_probabilities, compute_prototypes, euclidean_sq_distance, predict,
    MetricKind, Prototypes,
};
use proto_margin::train::{lr_at, TrainConfig};
use proto_margin::Tensor;
use rand::Rng;

fn t(rows: usize, cols: usize, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new([rows, cols], data).unwrap()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| t(rows, cols, d))
}

/// Rows bounded away from the origin.
fn directions(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    matrix(rows, cols).prop_filter("non-degenerate rows", move |m| {
        m.data().chunks(cols).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-2)
    })
}

fn protos_of(g: &mut Graph<f64>, p: &Tensor<f64>) -> Prototypes {
    Prototypes {
        class_ids: (0..p.shape()[0]).collect(),
        matrix: g.constant(p.clone()).unwrap(),
    }
}

fn angles(q: &Tensor<f64>, p: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::no_grad();
    let qv = g.constant(q.clone()).unwrap();
    let pr = protos_of(&mut g, p);
    let d = angular_distance(&mut g, qv, &pr).unwrap();
    g.value(d).clone()
}

fn probs(d: &Tensor<f64>, kind: MetricKind) -> Tensor<f64> {
    let mut g = Graph::no_grad();
    let dv = g.constant(d.clone()).unwrap();
    let p = class_probabilities(&mut g, dv, kind).unwrap();
    g.value(p).clone()
}

fn aam(d: &Tensor<f64>, targets: &[usize], m: f64) -> Tensor<f64> {
    let mut g = Graph::no_grad();
    let k = d.shape()[1];
    let pr = Prototypes {
        class_ids: (0..k).collect(),
        matrix: g.constant(Tensor::zeros([k, 1]).unwrap()).unwrap(),
    };
    let dv = g.constant(d.clone()).unwrap();
    let p = aam_probabilities(&mut g, dv, &pr, targets, m).unwrap();
    g.value(p).clone()
}

fn random_distances(rng: &mut impl Rng, q: usize, k: usize) -> Tensor<f64> {
    t(q, k, (0..q * k).map(|_| rng.random_range(0.0..PI)).collect())
}

#[test]
fn prototypes_equal_brute_force_means() {
    let mut rng = common::rng(4);
    for _ in 0..50 {
        let (n, k, d) = (rng.random_range(1..6), rng.random_range(2..6), rng.random_range(1..8));
        let support = t(n * k, d, (0..n * k * d).map(|_| rng.random_range(-5.0..5.0)).collect());
        // Interleaved labels, so rows of one class are not contiguous.
        let labels: Vec<usize> = (0..n * k).map(|r| 100 + r % k).collect();
        let order: Vec<usize> = (0..k).rev().map(|c| 100 + c).collect();
        let mut g = Graph::no_grad();
        let s = g.constant(support.clone()).unwrap();
        let pr = compute_prototypes(&mut g, s, &labels, &order).unwrap();
        let got = g.value(pr.matrix);
        for (j, &class) in order.iter().enumerate() {
            for c in 0..d {
                let rows: Vec<f64> = (0..n * k).filter(|&r| labels[r] == class).map(|r| support.at(&[r, c])).collect();
                let mean = rows.iter().sum::<f64>() / rows.len() as f64;
                assert!((got.at(&[j, c]) - mean).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn unequal_or_missing_support_rejected() {
    let mut g = Graph::<f64>::no_grad();
    let s = g.constant(t(3, 1, vec![1., 2., 3.])).unwrap();
    assert!(compute_prototypes(&mut g, s, &[0, 0, 1], &[0, 1]).is_err());
    assert!(compute_prototypes(&mut g, s, &[0, 0, 0], &[0, 1]).is_err());
}

#[test]
fn euclidean_matches_brute_force() {
    let mut rng = common::rng(5);
    for _ in 0..50 {
        let (q, k, d) = (rng.random_range(1..6), rng.random_range(2..6), rng.random_range(1..8));
        let x = t(q, d, (0..q * d).map(|_| rng.random_range(-5.0..5.0)).collect());
        let p = t(k, d, (0..k * d).map(|_| rng.random_range(-5.0..5.0)).collect());
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone()).unwrap();
        let pr = protos_of(&mut g, &p);
        let out = euclidean_sq_distance(&mut g, xv, &pr).unwrap();
        for i in 0..q {
            for j in 0..k {
                let brute: f64 = (0..d).map(|c| (x.at(&[i, c]) - p.at(&[j, c])).powi(2)).sum();
                assert!((g.value(out).at(&[i, j]) - brute).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn predict_matches_exhaustive_oracle() {
    let mut rng = common::rng(6);
    for _ in 0..100 {
        let x = t(7, 4, (0..28).map(|_| rng.random_range(-1.0..1.0)).collect());
        let p = t(5, 4, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect());
        let ids = [40, 30, 20, 10, 0];
        for kind in [MetricKind::Cosine, MetricKind::euclidean(), MetricKind::Aam { margin: 0.5 }] {
            let got = predict(&x, &p, &ids, kind).unwrap();
            for i in 0..7 {
                let score = |j: usize| {
                    let dot: f64 = (0..4).map(|c| x.at(&[i, c]) * p.at(&[j, c])).sum();
                    let nx: f64 = (0..4).map(|c| x.at(&[i, c]).powi(2)).sum::<f64>().sqrt();
                    let np: f64 = (0..4).map(|c| p.at(&[j, c]).powi(2)).sum::<f64>().sqrt();
                    let sq: f64 = (0..4).map(|c| (x.at(&[i, c]) - p.at(&[j, c])).powi(2)).sum();
                    if kind.is_angular() {
                        (dot / (nx * np)).clamp(-1., 1.).acos().cos()
                    } else {
                        -sq
                    }
                };
                let best = (0..5).fold(0, |b, j| if score(j) > score(b) { j } else { b });
                assert_eq!(got[i], ids[best]);
            }
        }
    }
}

#[test]
fn zero_margin_reduces_to_cosine() {
    let mut rng = common::rng(7);
    for _ in 0..200 {
        let d = random_distances(&mut rng, 4, 5);
        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let a = aam(&d, &targets, 0.0);
        assert!(a.max_abs_diff(&probs(&d, MetricKind::Cosine)) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn angular_distance_properties(x in directions(3, 4), p in directions(2, 4), a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let d = angles(&x, &p);
        prop_assert!(d.data().iter().all(|&v| (0.0..=PI).contains(&v)));
        let scaled = angles(&x.map_scale(a), &p.map_scale(b));
        prop_assert!(d.max_abs_diff(&scaled) < 1e-6);
        let own = angles(&x, &x);
        let neg = angles(&x, &x.map_scale(-1.0));
        for i in 0..3 {
            prop_assert!(own.at(&[i, i]) < 1e-3);
            prop_assert!((neg.at(&[i, i]) - PI).abs() < 1e-3);
        }
    }

    #[test]
    fn probability_rows_normalized(d in prop::collection::vec(0.0f64..PI, 12), sq in prop::collection::vec(0.0f64..50.0, 12)) {
        for (dist, kind) in [(t(3, 4, d), MetricKind::Cosine), (t(3, 4, sq), MetricKind::euclidean())] {
            let p = probs(&dist, kind);
            for row in p.data().chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn prototype_permutation_permutes_columns(x in directions(3, 4), p in directions(4, 4), perm in Just(vec![2usize, 0, 3, 1]).prop_shuffle()) {
        let ids = [7, 8, 9, 10];
        let permuted = t(4, 4, perm.iter().flat_map(|&j| p.row(j).to_vec()).collect());
        let pids: Vec<usize> = perm.iter().map(|&j| ids[j]).collect();
        let base = probs(&angles(&x, &p), MetricKind::Cosine);
        let moved = probs(&angles(&x, &permuted), MetricKind::Cosine);
        for i in 0..3 {
            for (c, &j) in perm.iter().enumerate() {
                prop_assert!((moved.at(&[i, c]) - base.at(&[i, j])).abs() < 1e-12);
            }
        }
        // Exact score ties may legitimately resolve differently after reordering.
        let tied = base.data().chunks(4).any(|r| {
            let m = r.iter().cloned().fold(f64::MIN, f64::max);
            r.iter().filter(|&&v| v == m).count() > 1
        });
        if !tied {
            prop_assert_eq!(
                predict(&x, &p, &ids, MetricKind::Cosine).unwrap(),
                predict(&x, &permuted, &pids, MetricKind::Cosine).unwrap()
            );
        }
    }

    #[test]
    fn prototypes_are_linear(s in matrix(6, 3), alpha in -4.0f64..4.0) {
        let labels = [0, 1, 2, 0, 1, 2];
        let mean = |s: &Tensor<f64>| {
            let mut g = Graph::no_grad();
            let v = g.constant(s.clone()).unwrap();
            let pr = compute_prototypes(&mut g, v, &labels, &[0, 1, 2]).unwrap();
            g.value(pr.matrix).clone()
        };
        prop_assert!(mean(&s.map_scale(alpha)).max_abs_diff(&mean(&s).map_scale(alpha)) < 1e-12);
    }

    #[test]
    fn margin_strictly_lowers_target_probability(d in prop::collection::vec(0.0f64..(PI - 0.5), 5), target in 0usize..5) {
        let dist = t(1, 5, d);
        let ps: Vec<f64> = (0..=5).map(|i| aam(&dist, &[target], i as f64 / 10.0).at(&[0, target])).collect();
        prop_assert!(ps.windows(2).all(|w| w[1] < w[0]), "{:?}", ps);
    }

    #[test]
    fn lr_non_increasing(a in 0usize..100_000, b in 0usize..100_000) {
        let cfg = TrainConfig::new(1, 2, MetricKind::Cosine, 0);
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(lr_at(hi, &cfg) <= lr_at(lo, &cfg));
        prop_assert!(lr_at(hi, &cfg) > 0.0);
    }

    #[test]
    fn confusion_rows_count_truths(truths in prop::collection::vec(0usize..4, 1..60), seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let preds: Vec<usize> = truths.iter().map(|_| rng.random_range(0..4)).collect();
        let classes = [0, 1, 2, 3];
        let m = confusion_matrix(&truths, &preds, &classes).unwrap();
        for c in classes {
            prop_assert_eq!(m[c].iter().sum::<u64>() as usize, truths.iter().filter(|&&x| x == c).count());
            prop_assert_eq!((0..4).map(|r| m[r][c]).sum::<u64>() as usize, preds.iter().filter(|&&x| x == c).count());
        }
        let diag = confusion_matrix(&truths, &truths, &classes).unwrap();
        prop_assert!((0..4).all(|i| (0..4).all(|j| i == j || diag[i][j] == 0)));
    }

    #[test]
    fn splits_disjoint(seed in any::<u64>(), train in 0usize..10, val in 0usize..8, test in 0usize..8) {
        let idx = common::one_hot_dataset(25, 1);
        let s = split_classes(&idx, SplitCounts { train, val, test }, seed).unwrap();
        let all: HashSet<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        prop_assert_eq!(all.len(), train + val + test);
        prop_assert!(all.iter().all(|&c| c < 25));
    }
}

trait Scale {
    fn map_scale(&self, s: f64) -> Tensor<f64>;
}

impl Scale for Tensor<f64> {
    fn map_scale(&self, s: f64) -> Tensor<f64> {
        Tensor::new(self.shape().to_vec(), self.data().iter().map(|v| v * s).collect()).unwrap()
    }
}

fn ragged_dataset(rng: &mut impl Rng) -> DatasetIndex {
    DatasetIndex::from_vectors(
        1,
        (0..12)
            .map(|c| {
                let count = rng.random_range(4..15);
                (format!("c{c}"), (0..count).map(|i| vec![i as f32]).collect())
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn thousand_random_episodes_respect_the_protocol() {
    let mut rng = common::rng(8);
    let mut violations = 0;
    for _ in 0..1000 {
        let data = ragged_dataset(&mut rng);
        let part: Vec<usize> = (0..12).filter(|_| rng.random_bool(0.7)).collect();
        let (n, q) = (rng.random_range(1..3), rng.random_range(1..3));
        let k = rng.random_range(2..6);
        let Ok(ep) = sample_episode(&data, &part, n, k, q, &mut rng) else {
            continue;
        };
        let s: HashSet<usize> = ep.support.iter().map(|p| p.0).collect();
        let qs: HashSet<usize> = ep.query.iter().map(|p| p.0).collect();
        let classes: HashSet<usize> = ep.class_order.iter().copied().collect();
        let ok = s.is_disjoint(&qs)
            && s.len() == n * k
            && qs.len() == q * k
            && classes.len() == k
            && classes.iter().all(|c| part.contains(c))
            && ep.support.iter().chain(&ep.query).all(|&(e, c)| data.classes()[c].examples.contains(&e))
            && ep.class_order.iter().all(|c| {
                ep.support.iter().filter(|p| p.1 == *c).count() == n && ep.query.iter().filter(|p| p.1 == *c).count() == q
            });
        violations += usize::from(!ok);
    }
    assert_eq!(violations, 0);
}

#[test]
fn synthetic_vectors_unit_norm_and_separated() {
    let spec = common::synthetic_spec(5, PI / 3.0, 0.1, 40, 11);
    let idx = generate_synthetic(&spec).unwrap();
    let means = spec.class_means().unwrap();
    let angle = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1., 1.).acos();
    let mut deviation = 0.0;
    for (c, class) in idx.classes().iter().enumerate() {
        for &e in &class.examples {
            let v: Vec<f64> = idx.vector(e).unwrap().iter().map(|&x| f64::from(x)).collect();
            assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
            deviation += angle(&v, &means[c]);
        }
    }
    deviation /= idx.len() as f64;
    let min_between = (0..5)
        .flat_map(|i| (i + 1..5).map(move |j| (i, j)))
        .map(|(i, j)| angle(&means[i], &means[j]))
        .fold(f64::INFINITY, f64::min);
    assert!(min_between >= PI / 3.0);
    assert!(deviation < min_between, "{deviation} vs {min_between}");
}
