//! Embedding backbones: the four-block convolutional encoder and a plain MLP.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Padding, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Stacked `conv -> batchnorm -> relu -> maxpool` blocks over NHWC images.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Conv4Config {
    pub blocks: usize,
    pub filters: usize,
    pub kernel: usize,
    pub pool: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub padding: Padding,
}

impl Default for Conv4Config {
    fn default() -> Self {
        Conv4Config {
            blocks: 4,
            filters: 64,
            kernel: 3,
            pool: 2,
            height: 84,
            width: 84,
            channels: 3,
            padding: Padding::Same,
        }
    }
}

impl Conv4Config {
    /// Spatial extents after every block, starting with the input.
    pub fn spatial_cascade(&self) -> Result<Vec<(usize, usize)>> {
        if self.blocks == 0 || self.filters == 0 || self.kernel == 0 || self.pool == 0 || self.channels == 0 {
            return Err(Error::Config(format!("degenerate conv config {self:?}")));
        }
        let mut dims = vec![(self.height, self.width)];
        let (mut h, mut w) = (self.height, self.width);
        for block in 0..self.blocks {
            if self.padding == Padding::Valid {
                if h < self.kernel || w < self.kernel {
                    return Err(Error::Config(format!("block {block}: {h}x{w} input smaller than kernel {}", self.kernel)));
                }
                h = h - self.kernel + 1;
                w = w - self.kernel + 1;
            }
            h /= self.pool;
            w /= self.pool;
            if h == 0 || w == 0 {
                return Err(Error::Config(format!("block {block}: spatial extent collapses to zero")));
            }
            dims.push((h, w));
        }
        Ok(dims)
    }

    pub fn embedding_dim(&self) -> Result<usize> {
        let &(h, w) = self.spatial_cascade()?.last().expect("cascade has the input entry");
        Ok(h * w * self.filters)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    /// Input width, hidden widths, output width.
    pub widths: Vec<usize>,
}

impl MlpConfig {
    pub fn new(widths: impl Into<Vec<usize>>) -> Self {
        MlpConfig { widths: widths.into() }
    }

    fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::Config(format!("MLP widths {:?} need at least input and output, all positive", self.widths)));
        }
        if *self.widths.last().unwrap() < 2 {
            return Err(Error::Config("MLP output width must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Conv4(Conv4Config),
    Mlp(MlpConfig),
}

impl Backbone {
    pub fn embedding_dim(&self) -> Result<usize> {
        match self {
            Backbone::Conv4(c) => c.embedding_dim(),
            Backbone::Mlp(m) => {
                m.validate()?;
                Ok(*m.widths.last().unwrap())
            }
        }
    }

    /// Per-example input shape, without the batch axis.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Backbone::Conv4(c) => vec![c.height, c.width, c.channels],
            Backbone::Mlp(m) => vec![m.widths[0]],
        }
    }

    /// Every parameter the architecture declares, in creation order, with its
    /// shape and fan-in (`None` for entries initialized to a constant).
    fn layout(&self) -> Result<Vec<(String, Vec<usize>, Init)>> {
        let mut out = Vec::new();
        match self {
            Backbone::Conv4(c) => {
                c.spatial_cascade()?;
                let mut c_in = c.channels;
                for b in 0..c.blocks {
                    let fan_in = c.kernel * c.kernel * c_in;
                    out.push((format!("block{b}.conv.weight"), vec![c.kernel, c.kernel, c_in, c.filters], Init::He(fan_in)));
                    out.push((format!("block{b}.conv.bias"), vec![c.filters], Init::Zero));
                    out.push((format!("block{b}.bn.gamma"), vec![c.filters], Init::One));
                    out.push((format!("block{b}.bn.beta"), vec![c.filters], Init::Zero));
                    c_in = c.filters;
                }
            }
            Backbone::Mlp(m) => {
                m.validate()?;
                for (i, pair) in m.widths.windows(2).enumerate() {
                    out.push((format!("layer{i}.weight"), vec![pair[0], pair[1]], Init::He(pair[0])));
                    out.push((format!("layer{i}.bias"), vec![pair[1]], Init::Zero));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy)]
enum Init {
    He(usize),
    Zero,
    One,
}

/// The learnable parameters of an embedding function plus its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams<T> {
    pub backbone: Backbone,
    pub store: ParamStore<T>,
    pub embedding_dim: usize,
}

impl<T: Element> EmbeddingParams<T> {
    /// Gaussian weights with variance `2 / fan_in`; biases and batchnorm
    /// shifts zero, batchnorm scales one. Deterministic in `seed`.
    pub fn init(backbone: Backbone, seed: u64) -> Result<Self> {
        let layout = backbone.layout()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape, init) in layout {
            let len = shape.iter().product();
            let data = match init {
                Init::Zero => vec![T::zero(); len],
                Init::One => vec![T::one(); len],
                Init::He(fan_in) => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..len).map(|_| T::lit(normal.sample(&mut rng))).collect()
                }
            };
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        let embedding_dim = backbone.embedding_dim()?;
        Ok(EmbeddingParams {
            backbone,
            store,
            embedding_dim,
        })
    }

    /// Wraps an existing store, checking it holds exactly the declared entries.
    pub fn from_store(backbone: Backbone, store: ParamStore<T>) -> Result<Self> {
        let layout = backbone.layout()?;
        if layout.len() != store.len() {
            return Err(Error::Config(format!(
                "store has {} entries, architecture declares {}",
                store.len(),
                layout.len()
            )));
        }
        for (name, shape, _) in &layout {
            let value = store.value(name)?;
            if value.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "from_store",
                    lhs: shape.clone(),
                    rhs: value.shape().to_vec(),
                });
            }
        }
        let embedding_dim = backbone.embedding_dim()?;
        Ok(EmbeddingParams {
            backbone,
            store,
            embedding_dim,
        })
    }

    pub fn count_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn cast<U: Element>(&self) -> EmbeddingParams<U> {
        EmbeddingParams {
            backbone: self.backbone.clone(),
            store: self.store.cast(),
            embedding_dim: self.embedding_dim,
        }
    }

    /// Records the embedding of `batch` (`[B, ...input]`) on `g`, returning a
    /// `[B, embedding_dim]` node. When `g` tracks gradients, parameters are
    /// registered so `Graph::backward` reaches them.
    pub fn forward(&self, g: &mut Graph<T>, batch: Var) -> Result<Var> {
        let shape = g.value(batch).shape().to_vec();
        let expected = self.backbone.input_shape();
        if shape.len() != expected.len() + 1 || shape[1..] != expected[..] {
            let mut want = vec![shape[0]];
            want.extend(expected);
            return Err(Error::ShapeMismatch {
                op: "embedding forward",
                lhs: want,
                rhs: shape,
            });
        }
        match &self.backbone {
            Backbone::Conv4(c) => {
                if shape[0] < 2 && g.is_tracking() {
                    return Err(Error::Config(
                        "batch normalization needs at least two examples per batch in training mode".into(),
                    ));
                }
                let mut x = batch;
                for b in 0..c.blocks {
                    let w = g.param(&self.store, &format!("block{b}.conv.weight"))?;
                    let bias = g.param(&self.store, &format!("block{b}.conv.bias"))?;
                    let gamma = g.param(&self.store, &format!("block{b}.bn.gamma"))?;
                    let beta = g.param(&self.store, &format!("block{b}.bn.beta"))?;
                    x = g.conv2d(x, w, bias, c.padding)?;
                    x = g.batchnorm(x, gamma, beta)?;
                    x = g.relu(x)?;
                    x = g.maxpool(x, c.pool)?;
                }
                g.flatten(x)
            }
            Backbone::Mlp(m) => {
                let layers = m.widths.len() - 1;
                let mut x = batch;
                for i in 0..layers {
                    let w = g.param(&self.store, &format!("layer{i}.weight"))?;
                    let bias = g.param(&self.store, &format!("layer{i}.bias"))?;
                    x = g.matmul(x, w)?;
                    x = g.add(x, bias)?;
                    if i + 1 < layers {
                        x = g.relu(x)?;
                    }
                }
                Ok(x)
            }
        }
    }

    /// Forward pass without gradient tracking.
    pub fn embed(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let x = g.constant(batch.clone())?;
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}
