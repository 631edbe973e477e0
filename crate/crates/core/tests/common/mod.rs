#![allow(dead_code)]

use proto_margin::autodiff::{gradient_check, Graph, Padding, ParamStore, Var};
use proto_margin::data::{DatasetIndex, Episode, SyntheticSpec};
use proto_margin::embedding::{Backbone, Conv4Config, EmbeddingParams, MlpConfig};
use proto_margin::metric::MetricKind;
use proto_margin::train::episode_forward;
use proto_margin::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-4;
/// Whole networks contain relu and maxpool switches; a 1e-4 step straddles
/// some of them on the conv backbone, so network checks use a finer step.
pub const NETWORK_EPS: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draws from `[lo, hi)` kept at least 0.05 away from every kink.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| loop {
            let x = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (x - k).abs() > 0.05) {
                break x;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalar `sum(out * w)` with fixed, shape-derived, non-uniform weights.
pub fn project(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect())?;
    let w = g.constant(w)?;
    let m = g.mul(out, w)?;
    g.sum(m, None)
}

fn store(inputs: Vec<Tensor<f64>>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (i, t) in inputs.into_iter().enumerate() {
        s.insert(format!("x{i}"), t).unwrap();
    }
    s
}

fn check<F>(inputs: Vec<Tensor<f64>>, op: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let s = store(inputs);
    let n = s.len();
    gradient_check(
        |g, st| {
            let vars: Vec<Var> = (0..n).map(|i| g.param(st, &format!("x{i}"))).collect::<Result<_>>()?;
            let out = op(g, &vars)?;
            project(g, out)
        },
        &s,
        EPS,
    )
}

type Case = fn(&mut ChaCha8Rng) -> Result<f64>;

pub fn primitive_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", |r| {
            check(vec![uniform(r, &[3, 4], -1., 1., &[]), uniform(r, &[4, 2], -1., 1., &[])], |g, v| {
                g.matmul(v[0], v[1])
            })
        }),
        ("transpose", |r| check(vec![uniform(r, &[3, 5], -1., 1., &[])], |g, v| g.transpose(v[0]))),
        ("conv2d_same", |r| {
            check(
                vec![
                    uniform(r, &[2, 5, 5, 2], -1., 1., &[]),
                    uniform(r, &[3, 3, 2, 3], -1., 1., &[]),
                    uniform(r, &[3], -1., 1., &[]),
                ],
                |g, v| g.conv2d(v[0], v[1], v[2], Padding::Same),
            )
        }),
        ("conv2d_valid", |r| {
            check(
                vec![
                    uniform(r, &[2, 5, 4, 2], -1., 1., &[]),
                    uniform(r, &[3, 3, 2, 2], -1., 1., &[]),
                    uniform(r, &[2], -1., 1., &[]),
                ],
                |g, v| g.conv2d(v[0], v[1], v[2], Padding::Valid),
            )
        }),
        ("maxpool", |r| check(vec![uniform(r, &[2, 5, 4, 3], -1., 1., &[])], |g, v| g.maxpool(v[0], 2))),
        ("relu", |r| check(vec![uniform(r, &[4, 5], -1., 1., &[0.])], |g, v| g.relu(v[0]))),
        ("batchnorm", |r| {
            check(
                vec![
                    uniform(r, &[4, 3, 3, 2], -1., 1., &[]),
                    uniform(r, &[2], 0.5, 1.5, &[]),
                    uniform(r, &[2], -1., 1., &[]),
                ],
                |g, v| g.batchnorm(v[0], v[1], v[2]),
            )
        }),
        ("add", |r| {
            check(vec![uniform(r, &[3, 4], -1., 1., &[]), uniform(r, &[3, 4], -1., 1., &[])], |g, v| {
                g.add(v[0], v[1])
            })
        }),
        ("add_bias", |r| {
            check(vec![uniform(r, &[3, 4], -1., 1., &[]), uniform(r, &[4], -1., 1., &[])], |g, v| {
                g.add(v[0], v[1])
            })
        }),
        ("sub", |r| {
            check(vec![uniform(r, &[3, 4], -1., 1., &[]), uniform(r, &[3, 4], -1., 1., &[])], |g, v| {
                g.sub(v[0], v[1])
            })
        }),
        ("mul", |r| {
            check(vec![uniform(r, &[3, 4], -1., 1., &[]), uniform(r, &[3, 4], -1., 1., &[])], |g, v| {
                g.mul(v[0], v[1])
            })
        }),
        ("scalar_mul", |r| check(vec![uniform(r, &[3, 4], -1., 1., &[])], |g, v| g.scalar_mul(v[0], -2.5))),
        ("add_scalar", |r| check(vec![uniform(r, &[3, 4], -1., 1., &[])], |g, v| g.add_scalar(v[0], 0.7))),
        ("sum", |r| check(vec![uniform(r, &[3, 4], -1., 1., &[])], |g, v| g.sum(v[0], None))),
        ("sum_axis", |r| check(vec![uniform(r, &[3, 4], -1., 1., &[])], |g, v| g.sum(v[0], Some(1)))),
        ("mean", |r| check(vec![uniform(r, &[3, 4], -1., 1., &[])], |g, v| g.mean(v[0], None))),
        ("mean_axis", |r| check(vec![uniform(r, &[3, 4], -1., 1., &[])], |g, v| g.mean(v[0], Some(0)))),
        ("l2_normalize", |r| check(vec![uniform(r, &[3, 4], -1., 1., &[])], |g, v| g.l2_normalize(v[0]))),
        ("cos", |r| check(vec![uniform(r, &[3, 4], 0., 3.1, &[])], |g, v| g.cos(v[0]))),
        ("arccos", |r| check(vec![uniform(r, &[3, 4], -0.95, 0.95, &[])], |g, v| g.arccos(v[0]))),
        ("exp", |r| check(vec![uniform(r, &[3, 4], -2., 2., &[])], |g, v| g.exp(v[0]))),
        ("log", |r| check(vec![uniform(r, &[3, 4], 0.3, 3., &[])], |g, v| g.log(v[0]))),
        ("sqrt", |r| check(vec![uniform(r, &[3, 4], 0.3, 3., &[])], |g, v| g.sqrt(v[0]))),
        ("log_softmax", |r| check(vec![uniform(r, &[3, 5], -2., 2., &[])], |g, v| g.log_softmax(v[0]))),
        ("negate", |r| check(vec![uniform(r, &[3, 4], -1., 1., &[])], |g, v| g.negate(v[0]))),
        ("concat_rows", |r| {
            check(vec![uniform(r, &[2, 3], -1., 1., &[]), uniform(r, &[4, 3], -1., 1., &[])], |g, v| {
                g.concat(&[v[0], v[1]], 0)
            })
        }),
        ("concat_cols", |r| {
            check(vec![uniform(r, &[2, 3], -1., 1., &[]), uniform(r, &[2, 2], -1., 1., &[])], |g, v| {
                g.concat(&[v[0], v[1]], 1)
            })
        }),
        ("flatten", |r| check(vec![uniform(r, &[2, 3, 2, 2], -1., 1., &[])], |g, v| g.flatten(v[0]))),
        ("select_rows", |r| {
            check(vec![uniform(r, &[4, 3], -1., 1., &[])], |g, v| g.select_rows(v[0], vec![2, 0, 2]))
        }),
        ("clamp", |r| check(vec![uniform(r, &[4, 5], -1., 1., &[-0.4, 0.5])], |g, v| g.clamp(v[0], -0.4, 0.5))),
        ("pairwise_sq_dist", |r| {
            check(vec![uniform(r, &[4, 3], -1., 1., &[]), uniform(r, &[3, 3], -1., 1., &[])], |g, v| {
                g.pairwise_sq_dist(v[0], v[1])
            })
        }),
    ]
}

/// Worst relative gradient error of each primitive over `instances` draws.
pub fn primitive_errors(instances: u64) -> Vec<(&'static str, f64)> {
    primitive_cases()
        .into_iter()
        .map(|(name, case)| {
            let worst = (0..instances)
                .map(|i| case(&mut rng(1000 + i)).unwrap_or_else(|e| panic!("{name}: {e}")))
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

/// 3-way, 2-shot, 2-query episode over ids `0..12`.
pub fn toy_episode() -> Episode {
    let classes = [10, 11, 12];
    let support = (0..6).map(|i| (i, classes[i / 2])).collect();
    let query = (6..12).map(|i| (i, classes[(i - 6) / 2])).collect();
    Episode {
        support,
        query,
        class_order: classes.to_vec(),
    }
}

pub fn small_backbones() -> Vec<Backbone> {
    vec![
        Backbone::Mlp(MlpConfig::new([6, 16, 8])),
        Backbone::Conv4(Conv4Config {
            blocks: 2,
            filters: 4,
            height: 8,
            width: 8,
            channels: 1,
            ..Conv4Config::default()
        }),
    ]
}

/// Worst gradient error of the full episode loss for `kind`, over every
/// small backbone and `instances` random batches and initializations.
pub fn episode_loss_error(kind: MetricKind, instances: u64) -> f64 {
    let episode = toy_episode();
    let mut worst: f64 = 0.0;
    for backbone in small_backbones() {
        for i in 0..instances {
            let params = EmbeddingParams::<f32>::init(backbone.clone(), 77 + i).unwrap().cast::<f64>();
            let mut shape = vec![12];
            shape.extend(backbone.input_shape());
            let batch = uniform(&mut rng(500 + i), &shape, -1., 1., &[]);
            let err = gradient_check(
                |g, st| {
                    let p = EmbeddingParams::from_store(backbone.clone(), st.clone())?;
                    Ok(episode_forward(g, &p, &batch, &episode, kind)?.0)
                },
                &params.store,
                NETWORK_EPS,
            )
            .unwrap_or_else(|e| panic!("{kind}: {e}"));
            worst = worst.max(err);
        }
    }
    worst
}

pub fn synthetic_spec(num_classes: usize, sep: f64, sigma: f64, per_class: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        dim: 16,
        num_classes,
        min_angle_sep: sep,
        noise_sigma: sigma,
        examples_per_class: per_class,
        seed,
    }
}

/// Dataset whose classes are one-hot directions in `dim` dimensions, every
/// example exactly on its axis.
pub fn one_hot_dataset(classes: usize, per_class: usize) -> DatasetIndex {
    DatasetIndex::from_vectors(
        classes,
        (0..classes)
            .map(|c| {
                let mut v = vec![0.0f32; classes];
                v[c] = 1.0;
                (format!("axis{c}"), vec![v; per_class])
            })
            .collect(),
    )
    .unwrap()
}
