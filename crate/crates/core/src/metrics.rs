//! Per-user ranking and correlation metrics, aggregated over a user split.
//!
//! Rankings sort by descending score with ties broken by ascending item
//! index, so every metric is a deterministic function of the scores.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CrossDomainDataset, Preprocess, SparseRow, SplitLabel};
use crate::error::{Error, Result};
use crate::losses::pearson;
use crate::model::Model;

/// Item indices ordered by descending score, ties by ascending index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn check_pair(scores: &[f64], truth: &[f64]) -> Result<()> {
    if scores.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} items",
            scores.len(),
            truth.len()
        )));
    }
    if !truth.iter().any(|&t| t > 0.0) {
        return Err(Error::InvalidInput("ranking metrics need at least one positive count".into()));
    }
    Ok(())
}

fn dcg(order: impl Iterator<Item = f64>) -> f64 {
    order
        .enumerate()
        .map(|(r, gain)| gain / ((r + 2) as f64).log2())
        .sum()
}

/// NDCG over the full item list with gain equal to the true count.
pub fn ndcg(scores: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(scores, truth)?;
    let actual = dcg(ranking(scores).into_iter().map(|j| truth[j]));
    let mut ideal_gains = truth.to_vec();
    ideal_gains.sort_by(|a, b| b.total_cmp(a));
    let ideal = dcg(ideal_gains.into_iter());
    Ok((actual / ideal).clamp(0.0, 1.0))
}

/// Quantile grades in `0..=max_grade`.
///
/// Zero counts get grade 0. A positive count `c` gets
/// `ceil(max_grade · #{positive counts ≤ c} / #positive)`, so the user's
/// largest counts always reach `max_grade`.
pub fn err_grades(truth: &[f64], max_grade: u32) -> Vec<u32> {
    let mut positives: Vec<f64> = truth.iter().copied().filter(|&t| t > 0.0).collect();
    positives.sort_by(f64::total_cmp);
    let n = positives.len();
    truth
        .iter()
        .map(|&t| {
            if t > 0.0 {
                let at_most = positives.partition_point(|&p| p <= t);
                ((max_grade as usize * at_most).div_ceil(n)) as u32
            } else {
                0
            }
        })
        .collect()
}

fn err_of_order(order: impl Iterator<Item = u32>, max_grade: u32) -> f64 {
    let denom = 2f64.powi(max_grade as i32);
    let mut keep_going = 1.0;
    let mut total = 0.0;
    for (r, g) in order.enumerate() {
        let stop = (2f64.powi(g as i32) - 1.0) / denom;
        total += keep_going * stop / (r + 1) as f64;
        keep_going *= 1.0 - stop;
    }
    total
}

/// Expected reciprocal rank with quantile grades.
pub fn err(scores: &[f64], truth: &[f64], max_grade: u32) -> Result<f64> {
    check_pair(scores, truth)?;
    if max_grade == 0 {
        return Err(Error::InvalidConfig("max grade must be at least 1".into()));
    }
    let grades = err_grades(truth, max_grade);
    Ok(err_of_order(ranking(scores).into_iter().map(|j| grades[j]), max_grade))
}

/// ERR of the best possible ranking.
pub fn ideal_err(truth: &[f64], max_grade: u32) -> Result<f64> {
    err(truth, truth, max_grade)
}

/// Which items count as relevant for recall.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relevance {
    /// Count at least the user's median positive count.
    #[default]
    AtLeastMedian,
    /// Any positive count.
    Positive,
}

pub fn relevant_items(truth: &[f64], rule: Relevance) -> Vec<usize> {
    let positive = || truth.iter().enumerate().filter(|(_, &t)| t > 0.0);
    match rule {
        Relevance::Positive => positive().map(|(j, _)| j).collect(),
        Relevance::AtLeastMedian => {
            let mut counts: Vec<f64> = positive().map(|(_, &t)| t).collect();
            if counts.is_empty() {
                return Vec::new();
            }
            counts.sort_by(f64::total_cmp);
            let n = counts.len();
            let median = if n % 2 == 1 {
                counts[n / 2]
            } else {
                0.5 * (counts[n / 2 - 1] + counts[n / 2])
            };
            positive().filter(|(_, &t)| t >= median).map(|(j, _)| j).collect()
        }
    }
}

/// `|top-k ∩ relevant| / min(k, |relevant|)`
pub fn recall_at_k(scores: &[f64], relevant: &[usize], k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::InvalidInput("recall needs a nonempty relevant set".into()));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("recall cutoff must be at least 1".into()));
    }
    if let Some(&bad) = relevant.iter().find(|&&j| j >= scores.len()) {
        return Err(Error::InvalidInput(format!("relevant item {bad} out of range")));
    }
    let mut top = ranking(scores);
    top.truncate(k);
    let hits = relevant.iter().filter(|j| top.contains(j)).count();
    Ok(hits as f64 / k.min(relevant.len()) as f64)
}

/// Per-user values with their mean and normal-approximation 95% half-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub ci95: f64,
    pub values: Vec<f64>,
}

impl MetricSummary {
    /// Uses the sample standard deviation; a single value has half-width 0.
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                ci95: f64::NAN,
                values,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let ci95 = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, ci95, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub correlation: MetricSummary,
    pub ndcg: MetricSummary,
    pub err: MetricSummary,
    pub recall: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: SplitLabel,
    /// Users that were scored.
    pub n_users: usize,
    /// Users skipped because their truth or predictions were constant.
    pub n_excluded: usize,
    pub recall_k: usize,
    pub max_grade: u32,
    pub config_hash: Option<String>,
    /// Dataset indices of scored users, aligned with every value vector.
    pub users: Vec<usize>,
    pub metrics: Metrics,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "split,n_users,n_excluded,correlation,correlation_ci95,ndcg,ndcg_ci95,err,err_ci95,recall_at_k,recall_at_k_ci95";

    pub fn csv_row(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.split,
            self.n_users,
            self.n_excluded,
            m.correlation.mean,
            m.correlation.ci95,
            m.ndcg.mean,
            m.ndcg.ci95,
            m.err.mean,
            m.err.ci95,
            m.recall.mean,
            m.recall.ci95
        )
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Applied to auxiliary inputs; truths stay raw counts.
    pub preprocess: Preprocess,
    pub recall_k: usize,
    pub max_grade: u32,
    pub relevance: Relevance,
    /// Users scored per forward pass.
    pub chunk_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            preprocess: Preprocess::Raw,
            recall_k: 10,
            max_grade: 4,
            relevance: Relevance::AtLeastMedian,
            chunk_size: 256,
        }
    }
}

/// Anything that can score every target item for a batch of users.
pub trait Scorer: Sync {
    /// One score row per user, or `None` for a user that cannot be scored.
    fn score_users(&self, ds: &CrossDomainDataset, users: &[usize]) -> Result<Vec<Option<Vec<f64>>>>;
}

/// Scores users with a trained model in inference mode.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub preprocess: Preprocess,
}

impl ModelScorer<'_> {
    fn score_batch(&self, rows: &[SparseRow], users: &[usize]) -> Result<Array2<f64>> {
        let refs: Vec<&SparseRow> = rows.iter().collect();
        let emb = self.model.user_embeddings(&refs)?;
        let items: Vec<usize> = (0..self.model.config.n_target_items).collect();
        let bias_users = self.model.params.user_bias.is_some().then_some(users);
        self.model.predict_block(emb.view(), bias_users, &items)
    }
}

impl Scorer for ModelScorer<'_> {
    fn score_users(&self, ds: &CrossDomainDataset, users: &[usize]) -> Result<Vec<Option<Vec<f64>>>> {
        let rows: Vec<SparseRow> = users
            .iter()
            .map(|&u| self.preprocess.row(ds.auxiliary().row(u)))
            .collect();
        match self.score_batch(&rows, users) {
            Ok(p) => Ok(p.rows().into_iter().map(|r| Some(r.to_vec())).collect()),
            // A zero user embedding under cosine similarity only spoils that user.
            Err(Error::ZeroVector) => users
                .iter()
                .zip(&rows)
                .map(|(&u, row)| match self.score_batch(std::slice::from_ref(row), &[u]) {
                    Ok(p) => Ok(Some(p.row(0).to_vec())),
                    Err(Error::ZeroVector) => Ok(None),
                    Err(e) => Err(e),
                })
                .collect(),
            Err(e) => Err(e),
        }
    }
}

struct UserMetrics {
    user: usize,
    correlation: f64,
    ranking: Option<(f64, f64, f64)>,
}

fn user_metrics(scores: &[f64], truth: &[f64], opts: &EvalOptions, full: bool) -> Result<Option<(f64, Option<(f64, f64, f64)>)>> {
    let corr = match pearson(scores, truth) {
        Ok(c) => c,
        Err(Error::ConstantRow { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    if !full {
        return Ok(Some((corr, None)));
    }
    let n = ndcg(scores, truth)?;
    let e = err(scores, truth, opts.max_grade)?;
    let r = recall_at_k(scores, &relevant_items(truth, opts.relevance), opts.recall_k)?;
    Ok(Some((corr, Some((n, e, r)))))
}

fn score_all(
    scorer: &dyn Scorer,
    ds: &CrossDomainDataset,
    users: &[usize],
    opts: &EvalOptions,
    full: bool,
) -> Result<(Vec<UserMetrics>, usize)> {
    let n_items = ds.target().n_items();
    let chunk = opts.chunk_size.max(1);
    let per_chunk: Vec<Vec<Option<UserMetrics>>> = users
        .par_chunks(chunk)
        .map(|batch| -> Result<Vec<Option<UserMetrics>>> {
            let scored = scorer.score_users(ds, batch)?;
            if scored.len() != batch.len() {
                return Err(Error::Shape("scorer returned the wrong number of rows".into()));
            }
            batch
                .iter()
                .zip(scored)
                .map(|(&u, scores)| {
                    let Some(scores) = scores else { return Ok(None) };
                    if scores.len() != n_items {
                        return Err(Error::Shape("scorer returned the wrong number of items".into()));
                    }
                    let truth = ds.target().row(u).to_dense(n_items);
                    Ok(user_metrics(&scores, &truth, opts, full)?.map(|(correlation, ranking)| UserMetrics {
                        user: u,
                        correlation,
                        ranking,
                    }))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut kept = Vec::with_capacity(users.len());
    let mut excluded = 0;
    for m in per_chunk.into_iter().flatten() {
        match m {
            Some(m) => kept.push(m),
            None => excluded += 1,
        }
    }
    if excluded > 0 {
        log::info!("excluded {excluded} users with constant truth or predictions");
    }
    Ok((kept, excluded))
}

/// Evaluates `scorer` on the given users.
pub fn evaluate_with(
    scorer: &dyn Scorer,
    ds: &CrossDomainDataset,
    users: &[usize],
    split: SplitLabel,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if users.is_empty() {
        return Err(Error::InvalidInput(format!("the {split} split has no users")));
    }
    let (kept, n_excluded) = score_all(scorer, ds, users, opts, true)?;
    let pick = |f: fn(&UserMetrics) -> f64| MetricSummary::from_values(kept.iter().map(f).collect());
    Ok(EvalReport {
        split,
        n_users: kept.len(),
        n_excluded,
        recall_k: opts.recall_k,
        max_grade: opts.max_grade,
        config_hash: None,
        users: kept.iter().map(|m| m.user).collect(),
        metrics: Metrics {
            correlation: pick(|m| m.correlation),
            ndcg: pick(|m| m.ranking.expect("full").0),
            err: pick(|m| m.ranking.expect("full").1),
            recall: pick(|m| m.ranking.expect("full").2),
        },
    })
}

/// Scores every target item for each user of `split` in inference mode.
pub fn evaluate(model: &Model, ds: &CrossDomainDataset, split: SplitLabel, opts: &EvalOptions) -> Result<EvalReport> {
    let scorer = ModelScorer {
        model,
        preprocess: opts.preprocess,
    };
    evaluate_with(&scorer, ds, &ds.users_with(split), split, opts)
}

/// Per-user correlation only, for validation during training.
pub fn correlation_summary(
    scorer: &dyn Scorer,
    ds: &CrossDomainDataset,
    users: &[usize],
    opts: &EvalOptions,
) -> Result<MetricSummary> {
    let (kept, _) = score_all(scorer, ds, users, opts, false)?;
    Ok(MetricSummary::from_values(kept.iter().map(|m| m.correlation).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndcg_two_item_reversal() {
        let v = ndcg(&[0.0, 1.0], &[3.0, 1.0]).unwrap();
        let l3 = 1.0 / 3f64.log2();
        assert!((v - (1.0 + 3.0 * l3) / (3.0 + l3)).abs() < 1e-15);
        assert!((v - 0.79671).abs() < 1e-5);
        assert_eq!(ndcg(&[5.0, 2.0, 1.0], &[3.0, 2.0, 0.0]).unwrap(), 1.0);
        assert!(ndcg(&[1.0, 2.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn err_single_and_isolated_items() {
        // One item with the top grade.
        assert_eq!(err(&[1.0], &[7.0], 4).unwrap(), 15.0 / 16.0);
        // Only the first-ranked item has a nonzero grade.
        let v = err(&[3.0, 2.0, 1.0], &[5.0, 0.0, 0.0], 4).unwrap();
        assert_eq!(v, 15.0 / 16.0);
        assert_eq!(err_grades(&[0.0, 1.0, 2.0, 3.0, 4.0], 4), vec![0, 1, 2, 3, 4]);
        assert_eq!(err_grades(&[2.0, 2.0, 0.0], 4), vec![4, 4, 0]);
    }

    #[test]
    fn recall_cases() {
        let scores: Vec<f64> = (0..20).map(|j| -(j as f64)).collect();
        // Relevant items 0, 4, 8 land in the top 10; 12 and 16 do not.
        assert!((recall_at_k(&scores, &[0, 4, 8, 12, 16], 10).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(recall_at_k(&scores, &[3, 1], 10).unwrap(), 1.0);
        assert_eq!(recall_at_k(&scores, &[19, 18], 25).unwrap(), 1.0);
        assert!(recall_at_k(&scores, &[], 10).is_err());
    }

    #[test]
    fn relevance_rules() {
        let truth = [0.0, 1.0, 5.0, 2.0, 2.0];
        assert_eq!(relevant_items(&truth, Relevance::AtLeastMedian), vec![2, 3, 4]);
        assert_eq!(relevant_items(&truth, Relevance::Positive), vec![1, 2, 3, 4]);
        assert_eq!(relevant_items(&[0.0, 3.0, 3.0], Relevance::AtLeastMedian), vec![1, 2]);
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(ranking(&[1.0, 2.0, 2.0, 0.5]), vec![1, 2, 0, 3]);
    }

    #[test]
    fn summary_arithmetic() {
        let s = MetricSummary::from_values(vec![0.2, 0.6]);
        assert!((s.mean - 0.4).abs() < 1e-15);
        // sd = √0.08, half-width 1.96·sd/√2.
        assert!((s.ci95 - 1.96 * 0.08f64.sqrt() / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(MetricSummary::from_values(vec![0.3]).ci95, 0.0);
    }
}
