//! Prediction files and fold-averaged ensembles.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::mil::ProbVector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub id: String,
    /// Ground truth when known.
    pub label: Option<usize>,
    pub probs: ProbVector,
    pub predicted: usize,
}

/// One model's (or one ensemble's) predictions over a list of patients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionSet {
    /// Fold ids contributing to these probabilities, ascending.
    pub folds: Vec<usize>,
    pub rows: Vec<Prediction>,
}

impl PredictionSet {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn probs(&self) -> Vec<ProbVector> {
        self.rows.iter().map(|r| r.probs).collect()
    }

    /// Ground-truth labels; errors if any row lacks one.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.rows
            .iter()
            .map(|r| {
                r.label
                    .ok_or_else(|| Error::Invalid(format!("patient `{}` has no ground-truth label", r.id)))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub probs: Vec<ProbVector>,
    pub predicted: Vec<usize>,
}

/// Mean of per-fold probability vectors. Sets are summed in ascending fold-id
/// order, so the result does not depend on the order they are passed in.
pub fn ensemble_average(sets: &[(usize, Vec<ProbVector>)]) -> Result<Ensemble> {
    let Some((_, first)) = sets.first() else {
        return Err(Error::Invalid("ensemble of zero prediction sets".into()));
    };
    let n = first.len();
    let mut order: Vec<&(usize, Vec<ProbVector>)> = sets.iter().collect();
    order.sort_by_key(|(fold, _)| *fold);
    if order.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Invalid("duplicate fold id in ensemble".into()));
    }
    if let Some((fold, s)) = order.iter().find(|(_, s)| s.len() != n) {
        return Err(Error::Invalid(format!(
            "fold {fold} has {} rows, expected {n}",
            s.len()
        )));
    }

    let f = sets.len() as f64;
    let mut probs = Vec::with_capacity(n);
    let mut predicted = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = [0.0; NUM_CLASSES];
        for (_, s) in &order {
            acc.iter_mut().zip(s[i].values()).for_each(|(a, p)| *a += p);
        }
        let p = ProbVector::new(acc.map(|a| a / f))?;
        let y = p.argmax();
        if p.values().iter().filter(|&&v| v == p.values()[y]).count() > 1 {
            log::debug!("row {i}: argmax tie resolved to class {y}");
        }
        probs.push(p);
        predicted.push(y);
    }
    Ok(Ensemble { probs, predicted })
}

/// Average whole prediction files; rows must list the same patients in the
/// same order.
pub fn ensemble_sets(sets: &[PredictionSet]) -> Result<PredictionSet> {
    let Some(first) = sets.first() else {
        return Err(Error::Invalid("ensemble of zero prediction files".into()));
    };
    let mut keyed = Vec::with_capacity(sets.len());
    let mut folds = Vec::new();
    for (k, s) in sets.iter().enumerate() {
        if s.rows.len() != first.rows.len() || s.rows.iter().zip(&first.rows).any(|(a, b)| a.id != b.id) {
            return Err(Error::Invalid(format!("prediction file {k} lists different patients")));
        }
        let &[fold] = s.folds.as_slice() else {
            return Err(Error::Invalid(format!(
                "prediction file {k} covers folds {:?}; expected exactly one",
                s.folds
            )));
        };
        folds.push(fold);
        keyed.push((fold, s.probs()));
    }
    let ens = ensemble_average(&keyed)?;
    folds.sort_unstable();
    let rows = first
        .rows
        .iter()
        .zip(ens.probs.into_iter().zip(ens.predicted))
        .map(|(r, (probs, predicted))| Prediction {
            id: r.id.clone(),
            label: r.label,
            probs,
            predicted,
        })
        .collect();
    Ok(PredictionSet { folds, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(p: [f64; 4]) -> ProbVector {
        ProbVector::new(p).unwrap()
    }

    #[test]
    fn averages_two_folds() {
        let e = ensemble_average(&[(0, vec![pv([0.6, 0.4, 0.0, 0.0])]), (1, vec![pv([0.2, 0.8, 0.0, 0.0])])]).unwrap();
        assert!((e.probs[0].values()[0] - 0.4).abs() < 1e-15);
        assert!((e.probs[0].values()[1] - 0.6).abs() < 1e-15);
        assert_eq!(e.predicted, vec![1]);
    }

    #[test]
    fn identical_sets_are_a_fixed_point() {
        let s = vec![pv([0.1, 0.2, 0.3, 0.4]), pv([0.25; 4])];
        let e = ensemble_average(&[(2, s.clone()), (0, s.clone()), (1, s.clone())]).unwrap();
        for (a, b) in e.probs.iter().zip(&s) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        assert_eq!(e.predicted, vec![3, 0]);
    }

    #[test]
    fn rejects_mismatch() {
        assert!(ensemble_average(&[]).is_err());
        assert!(ensemble_average(&[(0, vec![pv([0.25; 4])]), (1, vec![])]).is_err());
        assert!(ensemble_average(&[(0, vec![pv([0.25; 4])]), (0, vec![pv([0.25; 4])])]).is_err());
    }

    #[test]
    fn files_must_agree_on_patients() {
        let row = |id: &str| Prediction {
            id: id.into(),
            label: Some(0),
            probs: ProbVector::uniform(),
            predicted: 0,
        };
        let a = PredictionSet {
            folds: vec![0],
            rows: vec![row("a"), row("b")],
        };
        let b = PredictionSet {
            folds: vec![1],
            rows: vec![row("a"), row("c")],
        };
        assert!(ensemble_sets(&[a.clone(), b]).is_err());
        let c = PredictionSet {
            folds: vec![3],
            ..a.clone()
        };
        let e = ensemble_sets(&[c, a]).unwrap();
        assert_eq!(e.folds, vec![0, 3]);
        assert_eq!(e.labels().unwrap(), vec![0, 0]);
    }
}
