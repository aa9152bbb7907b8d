//! Ranking evaluation: ROC-AUC in the Mann-Whitney pair-counting form
//! (ties count one half), F1 at a fixed threshold and at the best
//! threshold, and the report table over one or more labeled sets.

use serde::{Deserialize, Serialize};

use crate::data::{FeatureStore, ImageRecord, LabeledPair};
use crate::numerics::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("AUC undefined for `{dataset}`: needs at least one positive and one negative")]
    UndefinedMetric { dataset: String },
    #[error("dataset `{0}` is empty")]
    EmptyDataset(String),
    #[error("non-finite score encountered")]
    NonFiniteScore,
    #[error("scores and labels differ in length: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("unknown image id `{0}` in eval set")]
    UnknownImage(String),
}

fn check_inputs<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore);
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Rank-sum implementation with midranks; O(n log n).
pub fn roc_auc<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<f64, MetricsError> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::UndefinedMetric {
            dataset: "<scores>".into(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Midranks over tie groups, accumulating the positive rank sum.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// F1 of the classifier `score >= t`; 0 when there are no true positives.
pub fn f1_at_threshold<T: Scalar>(scores: &[T], labels: &[u8], t: T) -> Result<f64, MetricsError> {
    check_inputs(scores, labels)?;
    if scores.is_empty() {
        return Err(MetricsError::EmptyDataset("<scores>".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&s, &l) in scores.iter().zip(labels) {
        let predicted = s >= t;
        match (predicted, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64))
}

/// Maximize F1 over the finite candidate set: every distinct score plus one
/// value above all of them. Ties resolve to the lowest threshold.
pub fn best_f1<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<(f64, T), MetricsError> {
    check_inputs(scores, labels)?;
    if scores.is_empty() {
        return Err(MetricsError::EmptyDataset("<scores>".into()));
    }
    let mut candidates: Vec<T> = scores.to_vec();
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    candidates.dedup();
    let above_all = *candidates.last().expect("non-empty") + T::one();
    candidates.push(above_all);

    let mut best = (-1.0f64, above_all);
    for &t in &candidates {
        let f1 = f1_at_threshold(scores, labels, t)?;
        if f1 > best.0 {
            best = (f1, t);
        }
    }
    Ok(best)
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub dataset: String,
    pub auc: f64,
    pub f1_at_half: f64,
    pub best_f1: f64,
    pub best_f1_threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Report over (model, dataset) pairs, rendered as a text table shaped like
/// the usual results table (rows = models, columns = dataset metrics) and
/// as deterministic JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn push(&mut self, row: EvalRow) {
        self.rows.push(row);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut models: Vec<&str> = Vec::new();
        let mut datasets: Vec<&str> = Vec::new();
        for row in &self.rows {
            if !models.contains(&row.model.as_str()) {
                models.push(&row.model);
            }
            if !datasets.contains(&row.dataset.as_str()) {
                datasets.push(&row.dataset);
            }
        }
        let model_width = models
            .iter()
            .map(|m| m.len())
            .chain(["model".len()])
            .max()
            .unwrap_or(5);

        let mut out = String::new();
        out.push_str(&format!("{:<model_width$}", "model"));
        for d in &datasets {
            out.push_str(&format!(" | {d}: AUC    F1@0.5 bestF1"));
        }
        out.push('\n');
        for m in &models {
            out.push_str(&format!("{m:<model_width$}"));
            for d in &datasets {
                match self
                    .rows
                    .iter()
                    .find(|r| r.model == *m && r.dataset == *d)
                {
                    Some(r) => out.push_str(&format!(
                        " | {:width$} {:.4} {:.4} {:.4}",
                        "",
                        r.auc,
                        r.f1_at_half,
                        r.best_f1,
                        width = d.len().saturating_sub(1),
                    )),
                    None => out.push_str(&format!(
                        " | {:width$} {:>6} {:>6} {:>6}",
                        "",
                        "-",
                        "-",
                        "-",
                        width = d.len().saturating_sub(1),
                    )),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Score every pair of a labeled set and compute the full metric row.
/// Deterministic: pairs are scored in dataset order.
pub fn evaluate<T, E, F>(
    model_name: &str,
    dataset_name: &str,
    pairs: &[LabeledPair],
    features: &FeatureStore,
    mut scorer: F,
) -> Result<EvalRow, E>
where
    T: Scalar,
    E: From<MetricsError>,
    F: FnMut(&LabeledPair, &ImageRecord) -> Result<T, E>,
{
    if pairs.is_empty() {
        return Err(MetricsError::EmptyDataset(dataset_name.to_string()).into());
    }
    let mut scores = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let record = features
            .get(&pair.image_id)
            .ok_or_else(|| MetricsError::UnknownImage(pair.image_id.clone()))?;
        scores.push(scorer(pair, record)?);
        labels.push(pair.label);
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::UndefinedMetric {
            dataset: dataset_name.to_string(),
        }
        .into());
    }
    let auc = roc_auc(&scores, &labels)?;
    let f1_at_half = f1_at_threshold(&scores, &labels, T::cast(0.5))?;
    let (best, threshold) = best_f1(&scores, &labels)?;
    Ok(EvalRow {
        model: model_name.to_string(),
        dataset: dataset_name.to_string(),
        auc,
        f1_at_half,
        best_f1: best,
        best_f1_threshold: threshold.to_f64().expect("threshold fits f64"),
        n_pos,
        n_neg,
    })
}
