//! Episodic training with step-decayed SGD and early stopping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, Graph, Var};
use crate::checkpoint::{Checkpoint, TrainState};
use crate::data::{check_feasible, sample_episode, ClassSplit, DatasetIndex, Episode};
use crate::embedding::EmbeddingParams;
use crate::error::{Error, Result};
use crate::metric::{
    aam_log_probabilities, argmax_rows, class_log_probabilities, compute_prototypes, distances, nll_loss, EpisodeLoss,
    MetricKind,
};
use crate::seed::derive_seed;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub lr0: f64,
    /// Episodes between learning-rate cuts.
    pub lr_cut_every: usize,
    /// Multiplier applied at every cut.
    pub lr_cut_factor: f64,
    pub early_stop_min_delta: f64,
    pub early_stop_patience_epochs: usize,
    /// Size of the fixed validation block evaluated after every epoch.
    pub val_episodes: usize,
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub metric: MetricKind,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(n: usize, k: usize, metric: MetricKind, seed: u64) -> Self {
        TrainConfig {
            epochs: 200,
            episodes_per_epoch: 100,
            lr0: 1e-3,
            lr_cut_every: 500,
            lr_cut_factor: 1.0 / 3.0,
            early_stop_min_delta: 0.01,
            early_stop_patience_epochs: 10,
            val_episodes: 100,
            n,
            k,
            q: 5,
            metric,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("lr_cut_every", self.lr_cut_every),
            ("early_stop_patience_epochs", self.early_stop_patience_epochs),
            ("val_episodes", self.val_episodes),
            ("n", self.n),
            ("k", self.k),
            ("q", self.q),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.lr_cut_factor > 0.0 && self.lr_cut_factor < 1.0) {
            return Err(Error::Config(format!("lr_cut_factor must lie in (0, 1), got {}", self.lr_cut_factor)));
        }
        if !(self.early_stop_min_delta >= 0.0) {
            return Err(Error::Config("early_stop_min_delta must be non-negative".into()));
        }
        self.metric.validate()
    }
}

/// Learning rate for a zero-based global episode index.
pub fn lr_at(global_episode: usize, cfg: &TrainConfig) -> f64 {
    // Repeated multiplication, so consecutive cuts differ by exactly the factor.
    (0..global_episode / cfg.lr_cut_every).fold(cfg.lr0, |lr, _| lr * cfg.lr_cut_factor)
}

/// True once none of the last `patience` entries improved on the best loss
/// seen before it by at least `min_delta`.
pub fn early_stop_check(val_loss_history: &[f64], min_delta: f64, patience: usize) -> bool {
    if val_loss_history.len() <= patience {
        return false;
    }
    let window = val_loss_history.len() - patience;
    let mut best = val_loss_history[..window].iter().copied().fold(f64::INFINITY, f64::min);
    for &v in &val_loss_history[window..] {
        if best - v >= min_delta {
            return false;
        }
        best = best.min(v);
    }
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingTrace {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_acc,val_loss,val_acc,lr";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr
            ));
        }
        out
    }
}

/// Everything one episode produces.
#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    /// Training objective (with margin for AAM heads).
    pub loss: EpisodeLoss,
    /// Margin-free predicted class indices, one per query.
    pub predictions: Vec<usize>,
    pub targets: Vec<usize>,
}

impl EpisodeOutcome {
    pub fn accuracy(&self) -> f64 {
        let correct = self.predictions.iter().zip(&self.targets).filter(|(p, t)| p == t).count();
        correct as f64 / self.targets.len() as f64
    }
}

/// Encodes support and query rows of `batch` in one forward pass, builds the
/// prototypes and returns the scalar loss node plus the episode summary.
pub fn episode_forward<T: Element>(
    g: &mut Graph<T>,
    params: &EmbeddingParams<T>,
    batch: &Tensor<T>,
    episode: &Episode,
    kind: MetricKind,
) -> Result<(Var, EpisodeOutcome)> {
    let n_support = episode.support.len();
    let rows = batch.shape()[0];
    if rows != n_support + episode.query.len() {
        return Err(Error::Episode(format!("batch has {rows} rows, episode has {n_support} + {}", episode.query.len())));
    }
    let x = g.constant(batch.clone())?;
    let emb = params.forward(g, x)?;
    let support = g.select_rows(emb, (0..n_support).collect())?;
    let query = g.select_rows(emb, (n_support..rows).collect())?;
    let protos = compute_prototypes(g, support, &episode.support_labels(), &episode.class_order)?;
    let targets = episode.query_labels();
    let d = distances(g, query, &protos, kind)?;
    let plain = class_log_probabilities(g, d, kind)?;
    let objective = match kind {
        MetricKind::Aam { margin } => aam_log_probabilities(g, d, &protos, &targets, margin)?,
        _ => plain,
    };
    let loss = nll_loss(g, objective, &protos, &targets)?;
    let target_cols: Vec<usize> = targets.iter().map(|&t| protos.column_of(t)).collect::<Result<_>>()?;
    let outcome = EpisodeOutcome {
        loss: EpisodeLoss::from_log_probs(g.value(objective), &target_cols)?,
        predictions: argmax_rows(g.value(plain)).into_iter().map(|j| protos.class_ids[j]).collect(),
        targets,
    };
    Ok((loss, outcome))
}

/// Forward-only evaluation of one episode.
pub fn eval_episode<T: Element>(
    params: &EmbeddingParams<T>,
    data: &DatasetIndex,
    episode: &Episode,
    kind: MetricKind,
) -> Result<EpisodeOutcome> {
    let batch = data.load_batch(&episode.batch_examples())?.cast::<T>();
    let mut g = Graph::no_grad();
    Ok(episode_forward(&mut g, params, &batch, episode, kind)?.1)
}

/// Mean loss and accuracy over a block of episodes, evaluated in parallel.
pub fn mean_episode_metrics<T: Element>(
    params: &EmbeddingParams<T>,
    data: &DatasetIndex,
    episodes: &[Episode],
    kind: MetricKind,
) -> Result<(f64, f64)> {
    let outcomes: Vec<EpisodeOutcome> = episodes
        .par_iter()
        .map(|ep| eval_episode(params, data, ep, kind))
        .collect::<Result<_>>()?;
    let n = outcomes.len() as f64;
    let loss = outcomes.iter().map(|o| o.loss.value).sum::<f64>() / n;
    let acc = outcomes.iter().map(EpisodeOutcome::accuracy).sum::<f64>() / n;
    Ok((loss, acc))
}

/// Draws `count` episodes from one deterministic stream.
pub fn sample_block(
    data: &DatasetIndex,
    part: &[usize],
    n: usize,
    k: usize,
    q: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sample_episode(data, part, n, k, q, &mut rng)).collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss.
    pub params: EmbeddingParams<f32>,
    pub trace: TrainingTrace,
    pub checkpoint: Checkpoint,
    /// Training objective of every optimizer step, in order.
    pub episode_losses: Vec<f64>,
    pub stopped_early: bool,
}

/// Runs the full episodic optimization. One SGD step per training episode;
/// after every epoch the fixed validation block is scored, the best
/// parameters retained, and early stopping consulted.
pub fn run_training(
    cfg: &TrainConfig,
    data: &DatasetIndex,
    split: &ClassSplit,
    mut params: EmbeddingParams<f32>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_feasible(data, &split.train, cfg.n, cfg.k, cfg.q)
        .map_err(|e| Error::Episode(format!("training split: {e}")))?;
    check_feasible(data, &split.val, cfg.n, cfg.k, cfg.q)
        .map_err(|e| Error::Episode(format!("validation split: {e}")))?;

    let val_block = sample_block(
        data,
        &split.val,
        cfg.n,
        cfg.k,
        cfg.q,
        cfg.val_episodes,
        derive_seed(cfg.seed, "val-episodes"),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train-episodes"));

    let mut trace = TrainingTrace::default();
    let mut episode_losses = Vec::with_capacity(cfg.epochs * cfg.episodes_per_epoch);
    let mut val_history = Vec::new();
    let mut best: Option<(EmbeddingParams<f32>, TrainState)> = None;
    let mut global = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let epoch_lr = lr_at(global, cfg);
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        for _ in 0..cfg.episodes_per_epoch {
            let episode = sample_episode(data, &split.train, cfg.n, cfg.k, cfg.q, &mut rng)?;
            let batch = data.load_batch(&episode.batch_examples())?;
            let mut g = Graph::new();
            let (loss, outcome) = episode_forward(&mut g, &params, &batch, &episode, cfg.metric)?;
            g.backward(loss, &mut params.store)?;
            sgd_step(&mut params.store, lr_at(global, cfg))?;
            loss_sum += outcome.loss.value;
            acc_sum += outcome.accuracy();
            episode_losses.push(outcome.loss.value);
            global += 1;
        }
        let (val_loss, val_acc) = mean_episode_metrics(&params, data, &val_block, cfg.metric)?;
        let per_epoch = cfg.episodes_per_epoch as f64;
        trace.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / per_epoch,
            train_acc: acc_sum / per_epoch,
            val_loss,
            val_acc,
            lr: epoch_lr,
        });
        if best.as_ref().is_none_or(|(_, s)| val_loss < s.best_val_loss) {
            best = Some((
                params.clone(),
                TrainState {
                    epoch: epoch + 1,
                    global_episode: global,
                    best_val_loss: val_loss,
                },
            ));
        }
        val_history.push(val_loss);
        if early_stop_check(&val_history, cfg.early_stop_min_delta, cfg.early_stop_patience_epochs) {
            stopped_early = true;
            break;
        }
    }

    let (best_params, state) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params: best_params.clone(),
            state: Some(state),
        },
        params: best_params,
        trace,
        episode_losses,
        stopped_early,
    })
}
