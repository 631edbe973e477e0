use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use proto_margin::checkpoint::Checkpoint;
use proto_margin::data::{save_archive, split_classes, ClassSplit, DatasetIndex};
use proto_margin::embedding::EmbeddingParams;
use proto_margin::eval::{evaluate, summarize, EvalConfig, EvalReport, SummaryTable};
use proto_margin::io::write_atomic;
use proto_margin::metric::MetricKind;
use proto_margin::seed::derive_seed;
use proto_margin::train::{run_training, TrainOutcome};
use rayon::prelude::*;

use crate::config::RunConfig;

struct Prepared {
    data: DatasetIndex,
    split: ClassSplit,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let data = cfg.dataset()?.load()?;
    let split = split_classes(&data, cfg.split, derive_seed(cfg.seed, "class-split"))?;
    Ok(Prepared { data, split })
}

fn train_with(cfg: &RunConfig, prep: &Prepared, metric: MetricKind) -> Result<TrainOutcome> {
    let mut tc = cfg.train_config()?;
    tc.metric = metric;
    let backbone = cfg.backbone_for(&prep.data)?;
    let params = EmbeddingParams::init(backbone, derive_seed(cfg.seed, "embedding-init"))?;
    Ok(run_training(&tc, &prep.data, &prep.split, params)?)
}

fn eval_with(cfg: &RunConfig, prep: &Prepared, params: &EmbeddingParams<f32>, metric: MetricKind) -> Result<EvalReport> {
    let ec = EvalConfig {
        n: cfg.n.ok_or_else(|| anyhow!("n: missing (set it in the config or pass --n)"))?,
        k: cfg.k.ok_or_else(|| anyhow!("k: missing (set it in the config or pass --k)"))?,
        q: cfg.q,
        num_episodes: cfg.test_episodes,
        metric,
        seed: derive_seed(cfg.seed, "test"),
    };
    if params.backbone.input_shape() != prep.data.example_shape() {
        bail!(
            "checkpoint expects inputs of shape {:?}, dataset examples have shape {:?}",
            params.backbone.input_shape(),
            prep.data.example_shape()
        );
    }
    Ok(evaluate(params, &prep.data, &prep.split.test, &ec)?)
}

fn write_train_artifacts(dir: &Path, checkpoint: &Path, outcome: &TrainOutcome) -> Result<()> {
    outcome.checkpoint.save(checkpoint)?;
    write_atomic(&dir.join("trace.csv"), outcome.trace.to_csv().as_bytes())?;
    Ok(())
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report)? + "\n";
    write_atomic(&dir.join("report.json"), json.as_bytes())?;
    write_atomic(&dir.join("confusion.csv"), report.confusion.to_csv().as_bytes())?;
    Ok(())
}

fn write_summary(dir: &Path, table: &SummaryTable) -> Result<()> {
    write_atomic(&dir.join("summary.csv"), table.to_csv().as_bytes())?;
    write_atomic(&dir.join("summary.json"), (table.to_json() + "\n").as_bytes())?;
    write_atomic(&dir.join("summary.txt"), table.to_text().as_bytes())?;
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let prep = prepare(cfg)?;
    let out = cfg.out_dir()?;
    let outcome = train_with(cfg, &prep, cfg.metric)?;
    let ckpt = cfg.checkpoint_path()?;
    write_train_artifacts(&out, &ckpt, &outcome)?;
    let state = outcome.checkpoint.state.as_ref().expect("training records state");
    println!(
        "trained {} for {} epochs ({} episodes); best val loss {:.4} at epoch {}; checkpoint {}",
        cfg.metric,
        outcome.trace.epochs.len(),
        outcome.episode_losses.len(),
        state.best_val_loss,
        state.epoch,
        ckpt.display()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let ckpt_path = cfg.checkpoint_path()?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let prep = prepare(cfg)?;
    let report = eval_with(cfg, &prep, &ckpt.params, cfg.metric)?;
    let out = cfg.out_dir()?;
    write_report(&out, &report)?;
    println!(
        "{}-way {}-shot {}: {} over {} episodes",
        report.config.k,
        report.config.n,
        report.config.metric,
        report.summary(),
        report.episode_accuracies.len()
    );
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let spec = cfg
        .dataset()?
        .synthetic
        .as_ref()
        .ok_or_else(|| anyhow!("dataset: synth needs an inline `synthetic` spec"))?;
    let index = proto_margin::data::generate_synthetic(spec)?;
    let path = cfg.out_dir()?.join("synthetic.bin");
    save_archive(&path, spec, &index)?;
    println!("wrote {} ({} classes, {} examples)", path.display(), index.num_classes(), index.len());
    Ok(())
}

fn margin_dir(out: &Path, margin: f64) -> PathBuf {
    out.join(format!("m{margin}"))
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    if cfg.margins.is_empty() {
        bail!("margins: need at least one margin");
    }
    let metrics: Vec<MetricKind> = cfg.margins.iter().map(|&margin| MetricKind::Aam { margin }).collect();
    for m in &metrics {
        m.validate()?;
    }
    let prep = prepare(cfg)?;
    let out = cfg.out_dir()?;
    let reports: Vec<EvalReport> = metrics
        .par_iter()
        .map(|&metric| {
            let MetricKind::Aam { margin } = metric else { unreachable!() };
            let dir = margin_dir(&out, margin);
            std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
            let outcome = train_with(cfg, &prep, metric)?;
            write_train_artifacts(&dir, &dir.join("checkpoint.bin"), &outcome)?;
            let report = eval_with(cfg, &prep, &outcome.params, metric)?;
            write_report(&dir, &report)?;
            Ok(report)
        })
        .collect::<Result<_>>()?;
    let table = summarize(&reports);
    write_summary(&out, &table)?;
    print!("{}", table.to_text());
    Ok(())
}

pub fn report(cfg: &RunConfig, files: &[PathBuf]) -> Result<()> {
    if files.is_empty() {
        bail!("report: no report files given");
    }
    let reports: Vec<EvalReport> = files
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read report {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("malformed report {}", p.display()))
        })
        .collect::<Result<_>>()?;
    let table = summarize(&reports);
    write_summary(&cfg.out_dir()?, &table)?;
    print!("{}", table.to_text());
    Ok(())
}
