//! Gaussian clusters on the unit hypersphere, plus their archive format.
//!
//! ```text
//! proto-margin synthetic v1
//! dim 16
//! classes 3
//! counts 20,20,20
//! seed 7
//! min_angle_sep 0.7853981633974483
//! noise_sigma 0.15
//! labels class_000,class_001,class_002
//! end
//! <little-endian f32 vectors, class by class>
//! ```

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::DatasetIndex;
use crate::error::{Error, Result};
use crate::io::{f32s_to_le, le_to_f32s, split_header, write_atomic};

const MAGIC: &str = "proto-margin synthetic v1";
const MAX_ATTEMPTS: usize = 100_000;
/// Consecutive rejections for one class before all means are redrawn.
const RESTART_AFTER: usize = 1_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub num_classes: usize,
    /// Minimum pairwise angle between class mean directions, in radians.
    pub min_angle_sep: f64,
    pub noise_sigma: f64,
    pub examples_per_class: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.num_classes < 2 || self.examples_per_class == 0 {
            return Err(Error::Config(format!(
                "synthetic spec needs dim >= 2, num_classes >= 2 and examples_per_class >= 1: {self:?}"
            )));
        }
        if !(0.0..=PI).contains(&self.min_angle_sep) {
            return Err(Error::Config(format!("min_angle_sep {} outside [0, pi]", self.min_angle_sep)));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }

    /// The unit mean direction of every class, as drawn by
    /// [`generate_synthetic`] for this spec.
    pub fn class_means(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        place_means(self, &mut ChaCha8Rng::seed_from_u64(self.seed))
    }
}

fn unit_gaussian<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn angle(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0).acos()
}

fn place_means<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let antipodal_only = spec.min_angle_sep > PI - 1e-6;
    if antipodal_only && spec.num_classes > 2 {
        return Err(Error::Config(format!(
            "{} directions cannot be pairwise {} apart",
            spec.num_classes, spec.min_angle_sep
        )));
    }
    let mut attempts = 0;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    let mut stuck = 0;
    while means.len() < spec.num_classes {
        if attempts >= MAX_ATTEMPTS {
            return Err(Error::Config(format!(
                "could not place {} class means at separation {} in {} dimensions within {MAX_ATTEMPTS} attempts",
                spec.num_classes, spec.min_angle_sep, spec.dim
            )));
        }
        attempts += 1;
        let candidate = if antipodal_only && means.len() == 1 {
            means[0].iter().map(|x| -x).collect()
        } else {
            unit_gaussian(spec.dim, rng)
        };
        if means.iter().all(|m| angle(m, &candidate) >= spec.min_angle_sep) {
            means.push(candidate);
            stuck = 0;
        } else {
            stuck += 1;
            if stuck >= RESTART_AFTER {
                means.clear();
                stuck = 0;
            }
        }
    }
    Ok(means)
}

/// Draws class mean directions with pairwise angle at least
/// `min_angle_sep`, then `examples_per_class` examples per class, each the
/// normalized sum of its mean and isotropic Gaussian noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetIndex> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = place_means(spec, &mut rng)?;
    let mut classes = Vec::with_capacity(spec.num_classes);
    for (c, mean) in means.iter().enumerate() {
        let mut vectors = Vec::with_capacity(spec.examples_per_class);
        for _ in 0..spec.examples_per_class {
            let v: Vec<f64> = loop {
                let v: Vec<f64> = mean
                    .iter()
                    .map(|&m| m + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                if v.iter().map(|x| x * x).sum::<f64>() > 1e-24 {
                    break v;
                }
            };
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            vectors.push(v.iter().map(|x| (x / norm) as f32).collect());
        }
        classes.push((format!("class_{c:03}"), vectors));
    }
    DatasetIndex::from_vectors(spec.dim, classes)
}

pub fn save_archive(path: &Path, spec: &SyntheticSpec, index: &DatasetIndex) -> Result<()> {
    write_atomic(path, &archive_bytes(spec, index)?)
}

pub(crate) fn archive_bytes(spec: &SyntheticSpec, index: &DatasetIndex) -> Result<Vec<u8>> {
    let dim = match index.modality() {
        super::Modality::Vectors { dim } => dim,
        super::Modality::Images { .. } => return Err(Error::Config("only vector datasets can be archived".into())),
    };
    let counts: Vec<String> = index.classes().iter().map(|c| c.examples.len().to_string()).collect();
    let labels: Vec<&str> = index.classes().iter().map(|c| c.label.as_str()).collect();
    if labels.iter().any(|l| l.contains(',') || l.contains('\n')) {
        return Err(Error::Config("class labels may not contain ',' or newlines".into()));
    }
    let header = format!(
        "{MAGIC}\ndim {dim}\nclasses {}\ncounts {}\nseed {}\nmin_angle_sep {}\nnoise_sigma {}\nlabels {}\nend\n",
        index.num_classes(),
        counts.join(","),
        spec.seed,
        spec.min_angle_sep,
        spec.noise_sigma,
        labels.join(",")
    );
    let mut bytes = header.into_bytes();
    for class in index.classes() {
        for &e in &class.examples {
            f32s_to_le(index.vector(e).expect("vector dataset").iter().copied(), &mut bytes);
        }
    }
    Ok(bytes)
}

pub fn load_archive(path: &Path) -> Result<(SyntheticSpec, DatasetIndex)> {
    if !path.exists() {
        return Err(Error::format(path, "synthetic archive not found"));
    }
    parse_archive(path, &crate::io::read(path)?)
}

pub(crate) fn parse_archive(path: &Path, bytes: &[u8]) -> Result<(SyntheticSpec, DatasetIndex)> {
    let (lines, body) = split_header(path, bytes, MAGIC)?;
    let mut fields = std::collections::HashMap::new();
    for line in &lines[1..] {
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| Error::format(path, format!("malformed header line `{line}`")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::format(path, format!("missing `{k}`")));
    let bad = |k: &str| Error::format(path, format!("malformed `{k}`"));
    let dim: usize = get("dim")?.parse().map_err(|_| bad("dim"))?;
    let num_classes: usize = get("classes")?.parse().map_err(|_| bad("classes"))?;
    let counts = get("counts")?
        .split(',')
        .map(str::parse)
        .collect::<std::result::Result<Vec<usize>, _>>()
        .map_err(|_| bad("counts"))?;
    let labels: Vec<&str> = get("labels")?.split(',').collect();
    if counts.len() != num_classes || labels.len() != num_classes {
        return Err(Error::format(path, "class count disagrees with counts/labels"));
    }
    let spec = SyntheticSpec {
        dim,
        num_classes,
        min_angle_sep: get("min_angle_sep")?.parse().map_err(|_| bad("min_angle_sep"))?,
        noise_sigma: get("noise_sigma")?.parse().map_err(|_| bad("noise_sigma"))?,
        examples_per_class: counts.first().copied().unwrap_or(0),
        seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
    };
    let total: usize = counts.iter().sum::<usize>() * dim;
    if body.len() != total * 4 {
        return Err(Error::format(
            path,
            format!("expected {} data bytes, found {}", total * 4, body.len()),
        ));
    }
    let values = le_to_f32s(body);
    let mut classes = Vec::with_capacity(num_classes);
    let mut offset = 0;
    for (label, &count) in labels.iter().zip(&counts) {
        let vectors = (0..count)
            .map(|i| values[offset + i * dim..offset + (i + 1) * dim].to_vec())
            .collect();
        offset += count * dim;
        classes.push((label.to_string(), vectors));
    }
    let index = DatasetIndex::from_vectors(dim, classes).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((spec, index))
}
