//! Combining several trained models by voting.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ClipTensor;
use crate::error::{Error, Result};
use crate::evaluation::{EvaluationReport, PredictionRecord};
use crate::model::{load_checkpoint, Model};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VotingPolicy {
    /// Argmax of the mean class probability.
    #[default]
    Soft,
    /// Most frequent member argmax. Ties go to the tied class with the
    /// highest mean probability, then to the lowest index.
    Hard,
}

impl std::str::FromStr for VotingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "soft" => Ok(VotingPolicy::Soft),
            "hard" => Ok(VotingPolicy::Hard),
            other => Err(Error::Config(format!("unknown voting policy {other:?}"))),
        }
    }
}

/// An ensemble on disk: member checkpoints and a policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<PathBuf>,
    #[serde(default)]
    pub policy: VotingPolicy,
}

impl EnsembleSpec {
    /// Reads a JSON spec. Relative member paths resolve against the spec's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: EnsembleSpec = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for m in &mut spec.members {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.len() < 2 {
            return Err(Error::Config(format!(
                "an ensemble needs at least 2 members, got {}",
                self.members.len()
            )));
        }
        Ok(())
    }
}

/// Mean of the member probability vectors, summed in a canonical order so
/// the result does not depend on member order.
pub fn mean_probabilities(member_probs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = member_probs
        .first()
        .ok_or_else(|| Error::Invalid("ensemble has no members".into()))?;
    let k = first.len();
    if k == 0 || member_probs.iter().any(|p| p.len() != k) {
        return Err(Error::Shape("member probability vectors differ in length".into()));
    }
    let mut sorted: Vec<&Vec<f64>> = member_probs.iter().collect();
    sorted.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut mean = vec![0.0; k];
    for p in sorted {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    let n = member_probs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Combined prediction and the mean probability vector.
pub fn ensemble_predict(
    member_probs: &[Vec<f64>],
    policy: VotingPolicy,
) -> Result<(usize, Vec<f64>)> {
    let mean = mean_probabilities(member_probs)?;
    let label = match policy {
        VotingPolicy::Soft => crate::nn::argmax(&mean),
        VotingPolicy::Hard => {
            let mut votes = vec![0usize; mean.len()];
            for p in member_probs {
                votes[crate::nn::argmax(p)] += 1;
            }
            let top = *votes.iter().max().expect("nonempty");
            let mut best: Option<usize> = None;
            for (c, &v) in votes.iter().enumerate() {
                if v == top && best.is_none_or(|b| mean[c] > mean[b]) {
                    best = Some(c);
                }
            }
            best.expect("some class has the top vote")
        }
    };
    Ok((label, mean))
}

fn check_compatible(members: &[Model]) -> Result<()> {
    let first = members
        .first()
        .ok_or_else(|| Error::Invalid("ensemble has no members".into()))?;
    for m in &members[1..] {
        if m.num_classes() != first.num_classes() {
            return Err(Error::Config(format!(
                "ensemble members disagree on class count ({} vs {})",
                first.num_classes(),
                m.num_classes()
            )));
        }
        if m.config.input_shape != first.config.input_shape {
            return Err(Error::Config(format!(
                "ensemble members disagree on input shape ({:?} vs {:?})",
                first.config.input_shape, m.config.input_shape
            )));
        }
    }
    Ok(())
}

/// Scores the ensemble of `members` on `clips`.
pub fn evaluate_members(
    members: &[Model],
    policy: VotingPolicy,
    clips: &[ClipTensor],
) -> Result<EvaluationReport> {
    check_compatible(members)?;
    let records = clips
        .iter()
        .map(|clip| {
            let probs = members
                .iter()
                .map(|m| m.predict_proba(clip))
                .collect::<Result<Vec<_>>>()?;
            let (label, mean) = ensemble_predict(&probs, policy)?;
            Ok(PredictionRecord {
                clip_id: clip.clip_id.clone(),
                true_label: clip.label,
                predicted_label: label,
                probabilities: mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvaluationReport::from_records(records, members[0].num_classes())
}

/// Loads the spec's checkpoints and scores the ensemble on `clips`.
pub fn evaluate_ensemble(spec: &EnsembleSpec, clips: &[ClipTensor]) -> Result<EvaluationReport> {
    spec.validate()?;
    let members = spec
        .members
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    evaluate_members(&members, spec.policy, clips)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_vote_uses_mean_probability() {
        let probs = vec![vec![0.6, 0.4], vec![0.1, 0.9]];
        let (label, mean) = ensemble_predict(&probs, VotingPolicy::Soft).unwrap();
        assert_eq!(label, 1);
        assert!((mean[0] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn hard_vote_takes_majority_then_mean() {
        let probs = vec![vec![0.6, 0.4, 0.0], vec![0.55, 0.45, 0.0], vec![0.0, 1.0, 0.0]];
        assert_eq!(ensemble_predict(&probs, VotingPolicy::Hard).unwrap().0, 0);
        assert_eq!(ensemble_predict(&probs, VotingPolicy::Soft).unwrap().0, 1);
        // one vote each: mean decides
        let tie = vec![vec![0.6, 0.4], vec![0.2, 0.8]];
        assert_eq!(ensemble_predict(&tie, VotingPolicy::Hard).unwrap().0, 1);
        // one vote each and equal means: lowest index
        let flat = vec![vec![0.7, 0.3], vec![0.3, 0.7]];
        assert_eq!(ensemble_predict(&flat, VotingPolicy::Hard).unwrap().0, 0);
    }

    #[test]
    fn single_member_is_identity() {
        let p = vec![vec![0.2, 0.5, 0.3]];
        for policy in [VotingPolicy::Soft, VotingPolicy::Hard] {
            let (label, mean) = ensemble_predict(&p, policy).unwrap();
            assert_eq!(label, 1);
            assert_eq!(mean, p[0]);
        }
    }

    #[test]
    fn rejects_empty_or_ragged_input() {
        assert!(ensemble_predict(&[], VotingPolicy::Soft).is_err());
        assert!(ensemble_predict(&[vec![0.5, 0.5], vec![1.0]], VotingPolicy::Soft).is_err());
    }

    #[test]
    fn spec_round_trips_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ens.json");
        std::fs::write(&path, r#"{"members": ["a.ckpt", "/abs/b.ckpt"], "policy": "hard"}"#)
            .unwrap();
        let spec = EnsembleSpec::load(&path).unwrap();
        assert_eq!(spec.policy, VotingPolicy::Hard);
        assert_eq!(spec.members[0], dir.path().join("a.ckpt"));
        assert_eq!(spec.members[1], PathBuf::from("/abs/b.ckpt"));
        std::fs::write(&path, r#"{"members": ["a.ckpt", "b.ckpt"]}"#).unwrap();
        assert_eq!(EnsembleSpec::load(&path).unwrap().policy, VotingPolicy::Soft);
        std::fs::write(&path, r#"{"members": ["a.ckpt"]}"#).unwrap();
        assert!(matches!(EnsembleSpec::load(&path), Err(Error::Config(_))));
    }
}
