use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetIndex;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Disjoint sets of class indices, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles the class indices with `seed` and cuts them into train, val and
/// test parts of the requested sizes. Leftover classes are unused.
pub fn split_classes(index: &DatasetIndex, counts: SplitCounts, seed: u64) -> Result<ClassSplit> {
    let n = index.num_classes();
    if counts.total() > n {
        return Err(Error::Config(format!(
            "split needs {} classes but the dataset has {n}",
            counts.total()
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let part = |range: std::ops::Range<usize>| {
        let mut v = order[range].to_vec();
        v.sort_unstable();
        v
    };
    let a = counts.train;
    let b = a + counts.val;
    Ok(ClassSplit {
        train: part(0..a),
        val: part(a..b),
        test: part(b..b + counts.test),
    })
}
