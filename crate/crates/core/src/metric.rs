//! Prototypes, distance functions and the softmax classification heads.
//!
//! All graph-building functions take the embedding nodes of a [`Graph`], so
//! gradients flow from the episode loss back into the backbone.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, NORM_FLOOR};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// How Euclidean distances become logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceForm {
    /// logit = -|x - L|^2
    #[default]
    Squared,
    /// logit = -|x - L|
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricKind {
    Euclidean {
        #[serde(default)]
        form: DistanceForm,
    },
    Cosine,
    /// Cosine head whose target-class angle is widened by `margin` radians
    /// while training.
    Aam { margin: f64 },
}

impl MetricKind {
    pub const DEFAULT_MARGIN: f64 = 0.5;

    pub fn euclidean() -> Self {
        MetricKind::Euclidean {
            form: DistanceForm::Squared,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let MetricKind::Aam { margin } = self {
            if !(0.0..FRAC_PI_2).contains(margin) {
                return Err(Error::Config(format!("margin {margin} must lie in [0, pi/2)")));
            }
        }
        Ok(())
    }

    pub fn is_angular(&self) -> bool {
        !matches!(self, MetricKind::Euclidean { .. })
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricKind::Euclidean { form: DistanceForm::Squared } => write!(f, "euclidean"),
            MetricKind::Euclidean { form: DistanceForm::Plain } => write!(f, "euclidean-plain"),
            MetricKind::Cosine => write!(f, "cosine"),
            MetricKind::Aam { margin } => write!(f, "aam(m={margin})"),
        }
    }
}

/// Class centroids in embedding space; row `j` belongs to `class_ids[j]`.
#[derive(Clone, Debug)]
pub struct Prototypes {
    pub matrix: Var,
    pub class_ids: Vec<usize>,
}

impl Prototypes {
    pub fn k(&self) -> usize {
        self.class_ids.len()
    }

    pub fn column_of(&self, label: usize) -> Result<usize> {
        self.class_ids
            .iter()
            .position(|&c| c == label)
            .ok_or_else(|| Error::Episode(format!("label {label} is not among the prototype classes {:?}", self.class_ids)))
    }

    fn columns(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels.iter().map(|&l| self.column_of(l)).collect()
    }
}

/// Mean support embedding per class, in `class_order`. Every class must have
/// the same positive number of support rows.
pub fn compute_prototypes<T: Element>(
    g: &mut Graph<T>,
    support: Var,
    labels: &[usize],
    class_order: &[usize],
) -> Result<Prototypes> {
    let rows = g.value(support).shape()[0];
    if labels.len() != rows {
        return Err(Error::Episode(format!("{} labels for {rows} support rows", labels.len())));
    }
    let k = class_order.len();
    if k < 2 {
        return Err(Error::Episode(format!("need at least 2 classes, got {k}")));
    }
    for (i, c) in class_order.iter().enumerate() {
        if class_order[..i].contains(c) {
            return Err(Error::Episode(format!("class {c} listed twice")));
        }
    }
    let mut counts = vec![0usize; k];
    let mut cols = Vec::with_capacity(rows);
    for &l in labels {
        let j = class_order
            .iter()
            .position(|&c| c == l)
            .ok_or_else(|| Error::Episode(format!("support label {l} not in class order {class_order:?}")))?;
        counts[j] += 1;
        cols.push(j);
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Episode(format!("class {} has no support examples", class_order[j])));
    }
    if counts.iter().any(|&c| c != counts[0]) {
        return Err(Error::Episode(format!("unequal support counts per class: {counts:?}")));
    }
    let weight = T::lit(1.0 / counts[0] as f64);
    let mut avg = vec![T::zero(); k * rows];
    for (r, &j) in cols.iter().enumerate() {
        avg[j * rows + r] = weight;
    }
    let avg = g.constant(Tensor::new([k, rows], avg)?)?;
    let matrix = g.matmul(avg, support)?;
    Ok(Prototypes {
        matrix,
        class_ids: class_order.to_vec(),
    })
}

fn check_row_norms<T: Element>(what: &str, t: &Tensor<T>) -> Result<()> {
    let d = t.last_dim();
    for (i, row) in t.data().chunks(d).enumerate() {
        let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if !(norm > NORM_FLOOR) {
            return Err(Error::domain("angular_distance", format!("{what} row {i} has zero norm")));
        }
    }
    Ok(())
}

/// `[Q, k]` angles (radians) between each query and each prototype.
pub fn angular_distance<T: Element>(g: &mut Graph<T>, queries: Var, protos: &Prototypes) -> Result<Var> {
    check_row_norms("query", g.value(queries))?;
    check_row_norms("prototype", g.value(protos.matrix))?;
    let qn = g.l2_normalize(queries)?;
    let pn = g.l2_normalize(protos.matrix)?;
    let pt = g.transpose(pn)?;
    let cosine = g.matmul(qn, pt)?;
    g.arccos(cosine)
}

/// `[Q, k]` squared Euclidean distances.
pub fn euclidean_sq_distance<T: Element>(g: &mut Graph<T>, queries: Var, protos: &Prototypes) -> Result<Var> {
    g.pairwise_sq_dist(queries, protos.matrix)
}

/// Distances appropriate for `kind`: angles for cosine and AAM heads,
/// squared Euclidean distances otherwise.
pub fn distances<T: Element>(g: &mut Graph<T>, queries: Var, protos: &Prototypes, kind: MetricKind) -> Result<Var> {
    if kind.is_angular() {
        angular_distance(g, queries, protos)
    } else {
        euclidean_sq_distance(g, queries, protos)
    }
}

fn check_distances<T: Element>(t: &Tensor<T>) -> Result<()> {
    if t.data().iter().any(|v| v.is_nan()) {
        return Err(Error::domain("class_probabilities", "NaN distance"));
    }
    Ok(())
}

/// Row-wise log-softmax of the margin-free logits: `cos(d)` for angular heads,
/// `-d` (or `-sqrt(d)`) for the Euclidean head.
pub fn class_log_probabilities<T: Element>(g: &mut Graph<T>, distances: Var, kind: MetricKind) -> Result<Var> {
    check_distances(g.value(distances))?;
    let logits = match kind {
        MetricKind::Cosine | MetricKind::Aam { .. } => g.cos(distances)?,
        MetricKind::Euclidean { form: DistanceForm::Squared } => g.negate(distances)?,
        MetricKind::Euclidean { form: DistanceForm::Plain } => {
            let shifted = g.add_scalar(distances, 1e-12)?;
            let root = g.sqrt(shifted)?;
            g.negate(root)?
        }
    };
    g.log_softmax(logits)
}

pub fn class_probabilities<T: Element>(g: &mut Graph<T>, distances: Var, kind: MetricKind) -> Result<Var> {
    let lp = class_log_probabilities(g, distances, kind)?;
    g.exp(lp)
}

/// Log-probabilities under the additive angular margin: the target column's
/// logit is `cos(min(d_target + margin, pi))`, all other columns keep `cos(d)`.
pub fn aam_log_probabilities<T: Element>(
    g: &mut Graph<T>,
    distances: Var,
    protos: &Prototypes,
    targets: &[usize],
    margin: f64,
) -> Result<Var> {
    MetricKind::Aam { margin }.validate()?;
    check_distances(g.value(distances))?;
    let shape = g.value(distances).shape().to_vec();
    if shape[0] != targets.len() || shape[1] != protos.k() {
        return Err(Error::ShapeMismatch {
            op: "aam_probabilities",
            lhs: shape,
            rhs: vec![targets.len(), protos.k()],
        });
    }
    let cols = protos.columns(targets)?;
    let k = protos.k();
    let mut shift = vec![T::zero(); targets.len() * k];
    for (i, &j) in cols.iter().enumerate() {
        shift[i * k + j] = T::lit(margin);
    }
    let shift = g.constant(Tensor::new(shape, shift)?)?;
    let widened = g.add(distances, shift)?;
    let capped = g.clamp(widened, f64::NEG_INFINITY, PI)?;
    let logits = g.cos(capped)?;
    g.log_softmax(logits)
}

pub fn aam_probabilities<T: Element>(
    g: &mut Graph<T>,
    distances: Var,
    protos: &Prototypes,
    targets: &[usize],
    margin: f64,
) -> Result<Var> {
    let lp = aam_log_probabilities(g, distances, protos, targets, margin)?;
    g.exp(lp)
}

/// Log-probabilities used for the training objective. The margin of an AAM
/// head needs the targets and is only applied here.
pub fn training_log_probabilities<T: Element>(
    g: &mut Graph<T>,
    queries: Var,
    protos: &Prototypes,
    targets: &[usize],
    kind: MetricKind,
) -> Result<Var> {
    let d = distances(g, queries, protos, kind)?;
    match kind {
        MetricKind::Aam { margin } => aam_log_probabilities(g, d, protos, targets, margin),
        _ => class_log_probabilities(g, d, kind),
    }
}

/// Mean negative log-likelihood of the targets, as a scalar node.
pub fn nll_loss<T: Element>(g: &mut Graph<T>, log_probs: Var, protos: &Prototypes, targets: &[usize]) -> Result<Var> {
    let shape = g.value(log_probs).shape().to_vec();
    if shape[0] != targets.len() {
        return Err(Error::Episode(format!("{} targets for {} query rows", targets.len(), shape[0])));
    }
    let cols = protos.columns(targets)?;
    let k = shape[1];
    let mut pick = vec![T::zero(); shape[0] * k];
    let w = T::lit(-1.0 / targets.len() as f64);
    for (i, &j) in cols.iter().enumerate() {
        pick[i * k + j] = w;
    }
    let pick = g.constant(Tensor::new(shape, pick)?)?;
    let picked = g.mul(log_probs, pick)?;
    g.sum(picked, None)
}

/// Value-level summary of an episode's objective.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLoss {
    pub value: f64,
    pub per_query_nll: Vec<f64>,
    pub probabilities: Tensor<f64>,
}

impl EpisodeLoss {
    pub fn from_log_probs<T: Element>(log_probs: &Tensor<T>, target_cols: &[usize]) -> Result<Self> {
        let k = log_probs.last_dim();
        let per_query_nll: Vec<f64> = target_cols
            .iter()
            .enumerate()
            .map(|(i, &j)| -log_probs.data()[i * k + j].as_f64())
            .collect();
        let probabilities = Tensor::new(
            log_probs.shape().to_vec(),
            log_probs.data().iter().map(|v| v.as_f64().exp()).collect(),
        )?;
        let value = per_query_nll.iter().sum::<f64>() / per_query_nll.len() as f64;
        Ok(EpisodeLoss {
            value,
            per_query_nll,
            probabilities,
        })
    }
}

/// Mean negative log-likelihood of the target columns of `probabilities`.
pub fn episode_loss<T: Element>(probabilities: &Tensor<T>, target_cols: &[usize]) -> Result<EpisodeLoss> {
    let k = probabilities.last_dim();
    let rows = probabilities.len() / k;
    if rows != target_cols.len() {
        return Err(Error::Episode(format!("{} targets for {rows} probability rows", target_cols.len())));
    }
    let mut per_query_nll = Vec::with_capacity(rows);
    for (i, &j) in target_cols.iter().enumerate() {
        if j >= k {
            return Err(Error::Episode(format!("target column {j} out of range for {k} classes")));
        }
        let p = probabilities.data()[i * k + j].as_f64();
        if p <= 0.0 {
            return Err(Error::domain("episode_loss", format!("query {i} assigns zero probability to its target")));
        }
        per_query_nll.push(-p.ln());
    }
    let value = per_query_nll.iter().sum::<f64>() / rows as f64;
    Ok(EpisodeLoss {
        value,
        per_query_nll,
        probabilities: probabilities.cast(),
    })
}

/// Index of the largest entry per row; ties resolve to the lowest index.
pub fn argmax_rows<T: Element>(t: &Tensor<T>) -> Vec<usize> {
    let k = t.last_dim();
    t.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Margin-free class assignment: the label of the most probable prototype.
pub fn predict<T: Element>(
    queries: &Tensor<T>,
    prototypes: &Tensor<T>,
    class_ids: &[usize],
    kind: MetricKind,
) -> Result<Vec<usize>> {
    if prototypes.shape()[0] != class_ids.len() {
        return Err(Error::Episode(format!(
            "{} class ids for {} prototypes",
            class_ids.len(),
            prototypes.shape()[0]
        )));
    }
    let mut g = Graph::no_grad();
    let q = g.constant(queries.clone())?;
    let p = g.constant(prototypes.clone())?;
    let protos = Prototypes {
        matrix: p,
        class_ids: class_ids.to_vec(),
    };
    let d = distances(&mut g, q, &protos, kind)?;
    let lp = class_log_probabilities(&mut g, d, kind)?;
    Ok(argmax_rows(g.value(lp)).into_iter().map(|j| class_ids[j]).collect())
}
