use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use proto_margin::data::{generate_synthetic, index_image_folder, load_archive, DatasetIndex, Modality, SplitCounts, SyntheticSpec};
use proto_margin::embedding::{Backbone, Conv4Config, MlpConfig};
use proto_margin::metric::MetricKind;
use proto_margin::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub image_folder: Option<PathBuf>,
    pub synthetic_archive: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

impl DatasetSource {
    fn validate(&self) -> Result<()> {
        let given = [
            self.image_folder.is_some(),
            self.synthetic_archive.is_some(),
            self.synthetic.is_some(),
        ];
        if given.iter().filter(|&&g| g).count() != 1 {
            bail!("dataset: exactly one of `image_folder`, `synthetic_archive` or `synthetic` must be given");
        }
        for p in [&self.image_folder, &self.synthetic_archive].into_iter().flatten() {
            if !p.exists() {
                bail!("dataset: path {} does not exist", p.display());
            }
        }
        Ok(())
    }

    pub fn load(&self) -> Result<DatasetIndex> {
        if let Some(root) = &self.image_folder {
            return Ok(index_image_folder(root)?);
        }
        if let Some(path) = &self.synthetic_archive {
            return Ok(load_archive(path)?.1);
        }
        let spec = self.synthetic.as_ref().expect("validated source");
        Ok(generate_synthetic(spec)?)
    }
}

fn default_split() -> SplitCounts {
    SplitCounts {
        train: 15,
        val: 5,
        test: 5,
    }
}
fn default_metric() -> MetricKind {
    MetricKind::Aam {
        margin: MetricKind::DEFAULT_MARGIN,
    }
}
fn default_margins() -> Vec<f64> {
    vec![0.0, 0.25, 0.5]
}
fn default_test_episodes() -> usize {
    1000
}

macro_rules! train_default {
    ($name:ident: $ty:ty) => {
        fn $name() -> $ty {
            TrainConfig::new(1, 2, MetricKind::Cosine, 0).$name
        }
    };
}
train_default!(q: usize);
train_default!(epochs: usize);
train_default!(episodes_per_epoch: usize);
train_default!(lr0: f64);
train_default!(lr_cut_every: usize);
train_default!(lr_cut_factor: f64);
train_default!(early_stop_min_delta: f64);
train_default!(early_stop_patience_epochs: usize);
train_default!(val_episodes: usize);

/// Everything one invocation needs. Read from JSON, then overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<DatasetSource>,
    #[serde(default = "default_split")]
    pub split: SplitCounts,
    /// Defaults to the conv stack for images and an MLP `[D, 64, 64]` for vectors.
    #[serde(default)]
    pub backbone: Option<Backbone>,
    pub n: Option<usize>,
    pub k: Option<usize>,
    #[serde(default = "q")]
    pub q: usize,
    #[serde(default = "epochs")]
    pub epochs: usize,
    #[serde(default = "episodes_per_epoch")]
    pub episodes_per_epoch: usize,
    #[serde(default = "lr0")]
    pub lr0: f64,
    #[serde(default = "lr_cut_every")]
    pub lr_cut_every: usize,
    #[serde(default = "lr_cut_factor")]
    pub lr_cut_factor: f64,
    #[serde(default = "early_stop_min_delta")]
    pub early_stop_min_delta: f64,
    #[serde(default = "early_stop_patience_epochs")]
    pub early_stop_patience_epochs: usize,
    #[serde(default = "val_episodes")]
    pub val_episodes: usize,
    #[serde(default = "default_test_episodes")]
    pub test_episodes: usize,
    #[serde(default = "default_metric")]
    pub metric: MetricKind,
    #[serde(default = "default_margins")]
    pub margins: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Euclidean,
    Cosine,
    Aam,
}

#[derive(Clone, Debug, Default, Args)]
pub struct CommonFlags {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    /// Angular margin in radians (aam only).
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub q: Option<usize>,
    /// Number of test episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
}

pub fn parse_json(text: &str, origin: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow!("{origin}: at `{path}`: {}", e.into_inner())
    })
}

/// Reads the config file (if any) and applies flag overrides. Paths inside
/// the file resolve relative to the file's directory.
pub fn parse_config(flags: &CommonFlags) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
            let mut cfg = parse_json(&text, &path.display().to_string())?;
            cfg.rebase(path.parent().unwrap_or(Path::new("")));
            cfg
        }
        None => RunConfig::default(),
    };
    apply_flags(&mut cfg, flags)?;
    cfg.metric.validate()?;
    Ok(cfg)
}

pub fn apply_flags(cfg: &mut RunConfig, flags: &CommonFlags) -> Result<()> {
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(o) = &flags.out {
        cfg.out = Some(o.clone());
    }
    if let Some(n) = flags.n {
        cfg.n = Some(n);
    }
    if let Some(k) = flags.k {
        cfg.k = Some(k);
    }
    if let Some(q) = flags.q {
        cfg.q = q;
    }
    if let Some(e) = flags.episodes {
        cfg.test_episodes = e;
    }
    if let Some(m) = flags.metric {
        cfg.metric = match m {
            MetricArg::Euclidean => MetricKind::euclidean(),
            MetricArg::Cosine => MetricKind::Cosine,
            MetricArg::Aam => match cfg.metric {
                MetricKind::Aam { margin } => MetricKind::Aam { margin },
                _ => default_metric(),
            },
        };
    }
    if let Some(margin) = flags.margin {
        match &mut cfg.metric {
            MetricKind::Aam { margin: m } => *m = margin,
            other => bail!("--margin applies only to the aam metric (metric is {other})"),
        }
    }
    Ok(())
}

impl RunConfig {
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = &mut self.dataset {
            d.image_folder.as_mut().map(fix);
            d.synthetic_archive.as_mut().map(fix);
        }
        self.out.as_mut().map(fix);
        self.checkpoint.as_mut().map(fix);
    }

    pub fn dataset(&self) -> Result<&DatasetSource> {
        let d = self.dataset.as_ref().ok_or_else(|| anyhow!("dataset: missing dataset source"))?;
        d.validate()?;
        Ok(d)
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        let out = self.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out).with_context(|| format!("cannot create output directory {}", out.display()))?;
        Ok(out)
    }

    pub fn checkpoint_path(&self) -> Result<PathBuf> {
        match &self.checkpoint {
            Some(p) => Ok(p.clone()),
            None => Ok(self.out_dir()?.join("checkpoint.bin")),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            episodes_per_epoch: self.episodes_per_epoch,
            lr0: self.lr0,
            lr_cut_every: self.lr_cut_every,
            lr_cut_factor: self.lr_cut_factor,
            early_stop_min_delta: self.early_stop_min_delta,
            early_stop_patience_epochs: self.early_stop_patience_epochs,
            val_episodes: self.val_episodes,
            n: self.n.ok_or_else(|| anyhow!("n: missing (set it in the config or pass --n)"))?,
            k: self.k.ok_or_else(|| anyhow!("k: missing (set it in the config or pass --k)"))?,
            q: self.q,
            metric: self.metric,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn backbone_for(&self, data: &DatasetIndex) -> Result<Backbone> {
        let backbone = match (&self.backbone, data.modality()) {
            (Some(b), _) => b.clone(),
            (None, Modality::Images { .. }) => Backbone::Conv4(Conv4Config::default()),
            (None, Modality::Vectors { dim }) => Backbone::Mlp(MlpConfig::new([dim, 64, 64])),
        };
        if backbone.input_shape() != data.example_shape() {
            bail!(
                "backbone: expects inputs of shape {:?}, dataset examples have shape {:?}",
                backbone.input_shape(),
                data.example_shape()
            );
        }
        backbone.embedding_dim()?;
        Ok(backbone)
    }
}
