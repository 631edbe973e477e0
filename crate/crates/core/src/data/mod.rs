//! Dataset indexing, class splits and episode sampling.

mod episode;
mod images;
mod split;
mod synthetic;

pub use episode::{check_feasible, sample_episode, Episode};
pub use images::{decode_and_resize, index_image_folder, resize_bilinear, IMAGE_SIZE};
pub use split::{split_classes, ClassSplit, SplitCounts};
pub use synthetic::{generate_synthetic, load_archive, save_archive, SyntheticSpec};

use std::path::PathBuf;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassEntry {
    pub label: String,
    /// Example ids, in index order.
    pub examples: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    /// Decoded and resized images, `height x width x channels`.
    Images { height: usize, width: usize, channels: usize },
    Vectors { dim: usize },
}

#[derive(Clone, Debug, PartialEq)]
enum Storage {
    Images(Vec<PathBuf>),
    Vectors { dim: usize, data: Vec<f32> },
}

/// Examples grouped by class. Example ids are dense, `0..len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    classes: Vec<ClassEntry>,
    storage: Storage,
}

impl DatasetIndex {
    fn validate(classes: &[ClassEntry]) -> Result<()> {
        if classes.is_empty() {
            return Err(Error::Config("dataset has no classes".into()));
        }
        for (i, c) in classes.iter().enumerate() {
            if c.examples.is_empty() {
                return Err(Error::Config(format!("empty class `{}`", c.label)));
            }
            if classes[..i].iter().any(|o| o.label == c.label) {
                return Err(Error::Config(format!("duplicate class label `{}`", c.label)));
            }
        }
        Ok(())
    }

    /// Builds a vector dataset from per-class lists of equally sized vectors.
    pub fn from_vectors(dim: usize, classes: Vec<(String, Vec<Vec<f32>>)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("vector dimension must be positive".into()));
        }
        let mut entries = Vec::with_capacity(classes.len());
        let mut data = Vec::new();
        let mut next = 0;
        for (label, vectors) in classes {
            let mut examples = Vec::with_capacity(vectors.len());
            for v in vectors {
                if v.len() != dim {
                    return Err(Error::Config(format!("class `{label}`: vector of length {} != {dim}", v.len())));
                }
                data.extend(v);
                examples.push(next);
                next += 1;
            }
            entries.push(ClassEntry { label, examples });
        }
        Self::validate(&entries)?;
        Ok(DatasetIndex {
            classes: entries,
            storage: Storage::Vectors { dim, data },
        })
    }

    pub(crate) fn from_images(classes: Vec<(String, Vec<PathBuf>)>) -> Result<Self> {
        let mut entries = Vec::with_capacity(classes.len());
        let mut paths = Vec::new();
        for (label, files) in classes {
            let examples = (paths.len()..paths.len() + files.len()).collect();
            paths.extend(files);
            entries.push(ClassEntry { label, examples });
        }
        Self::validate(&entries)?;
        Ok(DatasetIndex {
            classes: entries,
            storage: Storage::Images(paths),
        })
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn label(&self, class: usize) -> &str {
        &self.classes[class].label
    }

    /// Total number of examples.
    pub fn len(&self) -> usize {
        self.classes.iter().map(|c| c.examples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modality(&self) -> Modality {
        match &self.storage {
            Storage::Images(_) => Modality::Images {
                height: IMAGE_SIZE,
                width: IMAGE_SIZE,
                channels: 3,
            },
            Storage::Vectors { dim, .. } => Modality::Vectors { dim: *dim },
        }
    }

    pub fn example_shape(&self) -> Vec<usize> {
        match self.modality() {
            Modality::Images { height, width, channels } => vec![height, width, channels],
            Modality::Vectors { dim } => vec![dim],
        }
    }

    pub fn image_path(&self, example: usize) -> Option<&PathBuf> {
        match &self.storage {
            Storage::Images(paths) => paths.get(example),
            Storage::Vectors { .. } => None,
        }
    }

    pub fn vector(&self, example: usize) -> Option<&[f32]> {
        match &self.storage {
            Storage::Vectors { dim, data } => data.get(example * dim..(example + 1) * dim),
            Storage::Images(_) => None,
        }
    }

    /// Stacks the given examples into a `[B, ...example_shape]` batch.
    pub fn load_batch(&self, examples: &[usize]) -> Result<Tensor<f32>> {
        let mut shape = vec![examples.len()];
        shape.extend(self.example_shape());
        let data = match &self.storage {
            Storage::Vectors { .. } => {
                let mut data = Vec::with_capacity(shape.iter().product());
                for &e in examples {
                    let v = self
                        .vector(e)
                        .ok_or_else(|| Error::Episode(format!("example {e} out of range")))?;
                    data.extend_from_slice(v);
                }
                data
            }
            Storage::Images(paths) => {
                let decoded: Vec<Tensor<f32>> = examples
                    .par_iter()
                    .map(|&e| {
                        let path = paths
                            .get(e)
                            .ok_or_else(|| Error::Episode(format!("example {e} out of range")))?;
                        decode_and_resize(path)
                    })
                    .collect::<Result<_>>()?;
                decoded.into_iter().flat_map(Tensor::into_data).collect()
            }
        };
        Tensor::new(shape, data)
    }
}
