//! Rank-1 identification accuracy and per-subject breakdowns.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::ClipTensor;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn;

/// One prediction on a test clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub clip_id: String,
    pub true_label: usize,
    pub predicted_label: usize,
    pub probabilities: Vec<f64>,
}

impl PredictionRecord {
    /// Record whose prediction is the argmax of `probabilities`.
    pub fn from_probabilities(
        clip_id: impl Into<String>,
        true_label: usize,
        probabilities: Vec<f64>,
    ) -> Self {
        Self {
            clip_id: clip_id.into(),
            true_label,
            predicted_label: nn::argmax(&probabilities),
            probabilities,
        }
    }

    pub fn is_hit(&self) -> bool {
        self.predicted_label == self.true_label
    }
}

/// Percentage of records whose prediction equals the truth.
pub fn rank1_accuracy(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Invalid("no predictions to score".into()));
    }
    let hits = records.iter().filter(|r| r.is_hit()).count();
    Ok(percent(hits, records.len()))
}

/// Percentage of records whose true label is among the `k` most probable
/// classes. Probability ties are ordered by lower class index.
pub fn rank_k_accuracy(records: &[PredictionRecord], k: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Invalid("no predictions to score".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("rank k must be at least 1".into()));
    }
    let hits = records
        .iter()
        .filter(|r| {
            let p = &r.probabilities;
            let truth = p.get(r.true_label).copied().unwrap_or(f64::NEG_INFINITY);
            let better = p
                .iter()
                .enumerate()
                .filter(|&(i, &q)| q > truth || (q == truth && i < r.true_label))
                .count();
            r.true_label < p.len() && better < k
        })
        .count();
    Ok(percent(hits, records.len()))
}

fn percent(hits: usize, total: usize) -> f64 {
    100.0 * hits as f64 / total as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectAccuracy {
    pub label: usize,
    pub n_total: usize,
    pub n_hits: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rank1: f64,
    pub n_hits: usize,
    pub n_total: usize,
    pub per_subject: Vec<SubjectAccuracy>,
    /// `confusion_matrix[truth][prediction]` counts.
    pub confusion_matrix: Vec<Vec<usize>>,
    pub records: Vec<PredictionRecord>,
}

impl EvaluationReport {
    pub fn from_records(records: Vec<PredictionRecord>, num_classes: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Invalid("no predictions to score".into()));
        }
        let mut matrix = vec![vec![0usize; num_classes]; num_classes];
        for r in &records {
            if r.true_label >= num_classes || r.predicted_label >= num_classes {
                return Err(Error::Invalid(format!(
                    "clip {} has labels outside {num_classes} classes",
                    r.clip_id
                )));
            }
            matrix[r.true_label][r.predicted_label] += 1;
        }
        let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for r in &records {
            let e = per.entry(r.true_label).or_default();
            e.0 += 1;
            e.1 += usize::from(r.is_hit());
        }
        let per_subject = per
            .into_iter()
            .map(|(label, (n_total, n_hits))| SubjectAccuracy {
                label,
                n_total,
                n_hits,
                accuracy: percent(n_hits, n_total),
            })
            .collect();
        let n_hits = records.iter().filter(|r| r.is_hit()).count();
        let n_total = records.len();
        Ok(Self {
            rank1: percent(n_hits, n_total),
            n_hits,
            n_total,
            per_subject,
            confusion_matrix: matrix,
            records,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.confusion_matrix.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for EvaluationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "rank-1 accuracy: {:.2}% ({}/{})",
            self.rank1, self.n_hits, self.n_total
        )?;
        writeln!(f, "{:>8} {:>6} {:>6} {:>9}", "subject", "clips", "hits", "accuracy")?;
        for s in &self.per_subject {
            writeln!(
                f,
                "{:>8} {:>6} {:>6} {:>8.2}%",
                s.label, s.n_total, s.n_hits, s.accuracy
            )?;
        }
        Ok(())
    }
}

/// Predicts every clip with `model` and scores the result.
pub fn evaluate_model(model: &Model, clips: &[ClipTensor]) -> Result<EvaluationReport> {
    let records = clips
        .iter()
        .map(|c| {
            Ok(PredictionRecord::from_probabilities(
                c.clip_id.clone(),
                c.label,
                model.predict_proba(c)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    EvaluationReport::from_records(records, model.num_classes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(truth: usize, pred: usize) -> PredictionRecord {
        let mut p = vec![0.1; 3];
        p[pred] = 0.8;
        PredictionRecord::from_probabilities(format!("{truth}-{pred}"), truth, p)
    }

    #[test]
    fn counts_hits_exactly() {
        let r = vec![rec(0, 0), rec(1, 2), rec(2, 2), rec(1, 1)];
        assert_eq!(rank1_accuracy(&r).unwrap(), 75.0);
        let report = EvaluationReport::from_records(r, 3).unwrap();
        assert_eq!((report.n_hits, report.n_total), (3, 4));
        assert_eq!(report.confusion_matrix[1], vec![0, 1, 1]);
        assert_eq!(report.per_subject[1].accuracy, 50.0);
    }

    #[test]
    fn empty_records_are_an_error() {
        assert!(rank1_accuracy(&[]).is_err());
        assert!(EvaluationReport::from_records(vec![], 2).is_err());
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        assert!(EvaluationReport::from_records(vec![rec(2, 2)], 2).is_err());
    }

    #[test]
    fn rank_k_reaches_everything_at_k_equal_classes() {
        let r = vec![rec(0, 1), rec(1, 2), rec(2, 2)];
        assert!((rank_k_accuracy(&r, 1).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(rank_k_accuracy(&r, 3).unwrap(), 100.0);
        assert_eq!(rank_k_accuracy(&r, 1).unwrap(), rank1_accuracy(&r).unwrap());
    }

    #[test]
    fn report_serializes_with_stable_keys() {
        let report = EvaluationReport::from_records(vec![rec(0, 0), rec(1, 0)], 3).unwrap();
        let v: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        for key in ["rank1", "n_hits", "n_total", "per_subject", "confusion_matrix"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(report.to_string().contains("50.00%"));
    }
}
