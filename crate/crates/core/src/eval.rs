//! Test-split evaluation, confusion matrices and result tables.

use std::cmp::Reverse;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{check_feasible, sample_episode, DatasetIndex};
use crate::embedding::EmbeddingParams;
use crate::error::{Error, Result};
use crate::metric::MetricKind;
use crate::seed::derive_indexed_seed;
use crate::train::{eval_episode, EpisodeOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub num_episodes: usize,
    pub metric: MetricKind,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// `counts[true][predicted]`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for l in &self.labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(&csv_field(l));
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Counts `(truth, prediction)` pairs over the given class ids.
pub fn confusion_matrix(truths: &[usize], predictions: &[usize], classes: &[usize]) -> Result<Vec<Vec<u64>>> {
    if truths.len() != predictions.len() {
        return Err(Error::Episode(format!(
            "{} truths but {} predictions",
            truths.len(),
            predictions.len()
        )));
    }
    let pos = |c: usize| {
        classes
            .iter()
            .position(|&x| x == c)
            .ok_or_else(|| Error::Episode(format!("class {c} not in confusion labels")))
    };
    let mut m = vec![vec![0u64; classes.len()]; classes.len()];
    for (&t, &p) in truths.iter().zip(predictions) {
        m[pos(t)?][pos(p)?] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    /// Per-episode query accuracy, as a fraction.
    pub episode_accuracies: Vec<f64>,
    /// Percent.
    pub mean_accuracy: f64,
    /// Sample standard deviation of episode accuracy, percent.
    pub std_dev: f64,
    /// Half-width of the 95% confidence interval of the mean, percent.
    pub ci95: f64,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    /// `"mean ± ci95"` with two decimals.
    pub fn summary(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean_accuracy, self.ci95)
    }
}

/// Scores `num_episodes` independent test episodes. Episode `i` draws from
/// its own seed so results do not depend on scheduling. Predictions never
/// use the margin.
pub fn evaluate(
    params: &EmbeddingParams<f32>,
    data: &DatasetIndex,
    test_part: &[usize],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.metric.validate()?;
    if cfg.num_episodes == 0 {
        return Err(Error::Config("num_episodes must be at least 1".into()));
    }
    check_feasible(data, test_part, cfg.n, cfg.k, cfg.q)?;
    let outcomes: Vec<EpisodeOutcome> = (0..cfg.num_episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed_seed(cfg.seed, "test-episode", i));
            let ep = sample_episode(data, test_part, cfg.n, cfg.k, cfg.q, &mut rng)?;
            eval_episode(params, data, &ep, cfg.metric)
        })
        .collect::<Result<_>>()?;

    let mut counts = vec![vec![0u64; test_part.len()]; test_part.len()];
    for o in &outcomes {
        let m = confusion_matrix(&o.targets, &o.predictions, test_part)?;
        for (row, add) in counts.iter_mut().zip(m) {
            for (c, a) in row.iter_mut().zip(add) {
                *c += a;
            }
        }
    }
    let confusion = ConfusionMatrix {
        labels: test_part.iter().map(|&c| data.label(c).to_string()).collect(),
        counts,
    };

    let episode_accuracies: Vec<f64> = outcomes.iter().map(EpisodeOutcome::accuracy).collect();
    // Every episode has the same query count, so this is the mean of
    // `episode_accuracies` without summation error.
    let mean_accuracy = 100.0 * confusion.trace() as f64 / confusion.total() as f64;
    let std_dev = 100.0 * sample_std(&episode_accuracies);
    let ci95 = 1.96 * std_dev / (episode_accuracies.len() as f64).sqrt();
    Ok(EvalReport {
        config: cfg.clone(),
        episode_accuracies,
        mean_accuracy,
        std_dev,
        ci95,
        confusion,
    })
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: String,
    pub k: usize,
    pub n: usize,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub std_dev: f64,
    pub episodes: usize,
}

/// Results grid: one row per metric, one column per (k-way, n-shot).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub metrics: Vec<String>,
    /// `(k, n)`, k descending then n ascending.
    pub columns: Vec<(usize, usize)>,
    pub rows: Vec<SummaryRow>,
}

pub fn summarize(reports: &[EvalReport]) -> SummaryTable {
    let mut metrics: Vec<String> = Vec::new();
    let mut columns: Vec<(usize, usize)> = Vec::new();
    let mut rows = Vec::with_capacity(reports.len());
    for r in reports {
        let metric = r.config.metric.to_string();
        if !metrics.contains(&metric) {
            metrics.push(metric.clone());
        }
        if !columns.contains(&(r.config.k, r.config.n)) {
            columns.push((r.config.k, r.config.n));
        }
        rows.push(SummaryRow {
            metric,
            k: r.config.k,
            n: r.config.n,
            mean_accuracy: r.mean_accuracy,
            ci95: r.ci95,
            std_dev: r.std_dev,
            episodes: r.episode_accuracies.len(),
        });
    }
    columns.sort_by_key(|&(k, n)| (Reverse(k), n));
    SummaryTable { metrics, columns, rows }
}

impl SummaryTable {
    pub const CSV_HEADER: &'static str = "metric,k_way,n_shot,mean_accuracy,ci95,std_dev,episodes";

    fn cell(&self, metric: &str, col: (usize, usize)) -> Option<&SummaryRow> {
        self.rows.iter().rev().find(|r| r.metric == metric && (r.k, r.n) == col)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for m in &self.metrics {
            for &col in &self.columns {
                if let Some(r) = self.cell(m, col) {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{}\n",
                        csv_field(&r.metric),
                        r.k,
                        r.n,
                        r.mean_accuracy,
                        r.ci95,
                        r.std_dev,
                        r.episodes
                    ));
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// Human-readable grid with `mean ± ci95` cells.
    pub fn to_text(&self) -> String {
        let mut header = vec!["metric".to_string()];
        header.extend(self.columns.iter().map(|(k, n)| format!("{k}-way {n}-shot")));
        let mut lines = vec![header];
        for m in &self.metrics {
            let mut line = vec![m.clone()];
            for &col in &self.columns {
                line.push(match self.cell(m, col) {
                    Some(r) => format!("{:.2} ± {:.2}", r.mean_accuracy, r.ci95),
                    None => "-".into(),
                });
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|j| lines.iter().map(|l| l[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_counts() {
        let m = confusion_matrix(&[3, 3, 7, 7], &[3, 7, 7, 7], &[3, 7]).unwrap();
        assert_eq!(m, vec![vec![1, 1], vec![0, 2]]);
        assert!(confusion_matrix(&[3], &[9], &[3, 7]).is_err());
        assert!(confusion_matrix(&[3], &[], &[3]).is_err());
    }

    #[test]
    fn std_matches_hand_value() {
        assert_eq!(sample_std(&[0.5]), 0.0);
        assert!((sample_std(&[0.2, 0.4, 0.6]) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }

    fn report(metric: MetricKind, k: usize, n: usize, mean: f64) -> EvalReport {
        EvalReport {
            config: EvalConfig {
                n,
                k,
                q: 5,
                num_episodes: 2,
                metric,
                seed: 0,
            },
            episode_accuracies: vec![mean / 100.0; 2],
            mean_accuracy: mean,
            std_dev: 0.0,
            ci95: 0.0,
            confusion: ConfusionMatrix {
                labels: vec![],
                counts: vec![],
            },
        }
    }

    #[test]
    fn table_column_order() {
        let t = summarize(&[
            report(MetricKind::Cosine, 2, 1, 70.0),
            report(MetricKind::Cosine, 5, 5, 60.0),
            report(MetricKind::Cosine, 5, 1, 50.0),
            report(MetricKind::Aam { margin: 0.5 }, 3, 1, 55.0),
        ]);
        assert_eq!(t.columns, vec![(5, 1), (5, 5), (3, 1), (2, 1)]);
        assert_eq!(t.metrics, vec!["cosine", "aam(m=0.5)"]);
        let csv = t.to_csv();
        assert!(csv.starts_with("metric,k_way,n_shot"));
        assert_eq!(csv.lines().nth(1).unwrap(), "cosine,5,1,50,0,0,2");
        assert!(t.to_text().contains("50.00 ± 0.00"));
    }
}
