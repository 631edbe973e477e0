use rand::seq::index;
use rand::Rng;

use super::DatasetIndex;
use crate::error::{Error, Result};

/// One n-shot, k-way task. Support and query lists are grouped by class in
/// `class_order`; entries are `(example id, class index)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
    pub class_order: Vec<usize>,
}

impl Episode {
    /// Example ids with support rows first, then query rows.
    pub fn batch_examples(&self) -> Vec<usize> {
        self.support.iter().chain(&self.query).map(|&(e, _)| e).collect()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|&(_, c)| c).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|&(_, c)| c).collect()
    }
}

/// Samples `k` classes of `split_part` without replacement, then `n + q`
/// distinct examples per class: the first `n` form the support set and the
/// remaining `q` the query set.
pub fn sample_episode<R: Rng + ?Sized>(
    data: &DatasetIndex,
    split_part: &[usize],
    n: usize,
    k: usize,
    q: usize,
    rng: &mut R,
) -> Result<Episode> {
    check_feasible(data, split_part, n, k, q)?;
    let class_order: Vec<usize> = index::sample(rng, split_part.len(), k)
        .into_iter()
        .map(|i| split_part[i])
        .collect();
    let mut support = Vec::with_capacity(n * k);
    let mut query = Vec::with_capacity(q * k);
    for &c in &class_order {
        let examples = &data.classes()[c].examples;
        let picks = index::sample(rng, examples.len(), n + q).into_vec();
        support.extend(picks[..n].iter().map(|&i| (examples[i], c)));
        query.extend(picks[n..].iter().map(|&i| (examples[i], c)));
    }
    Ok(Episode {
        support,
        query,
        class_order,
    })
}

/// Checks an (n, k, q) configuration against a split part without sampling.
pub fn check_feasible(data: &DatasetIndex, split_part: &[usize], n: usize, k: usize, q: usize) -> Result<()> {
    if n == 0 || q == 0 || k < 2 {
        return Err(Error::Episode(format!("need n >= 1, q >= 1 and k >= 2 (got n={n}, k={k}, q={q})")));
    }
    if k > split_part.len() {
        return Err(Error::Episode(format!("k={k} exceeds the {} classes available", split_part.len())));
    }
    for &c in split_part {
        let class = data
            .classes()
            .get(c)
            .ok_or_else(|| Error::Episode(format!("class index {c} out of range")))?;
        if class.examples.len() < n + q {
            return Err(Error::Episode(format!(
                "class `{}` has {} examples, needs n + q = {}",
                class.label,
                class.examples.len(),
                n + q
            )));
        }
    }
    Ok(())
}
