use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Stratified fold index for each position of `labels`.
///
/// Members of each class are shuffled with the seeded split stream and dealt
/// round-robin, class `c` starting at fold `c mod k`. Every fold then holds
/// `floor(n_c / k)` or `ceil(n_c / k)` members of class `c`. Classes with
/// fewer than `k` members simply leave some folds without that class.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be >= 2, got {k}")));
    }
    if labels.is_empty() {
        return Err(Error::Invalid("no labels to split".into()));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let mut folds = vec![0; labels.len()];
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng::stream(seed, Stream::Splits, class as u64));
        for (n, i) in members.into_iter().enumerate() {
            folds[i] = (class + n) % k;
        }
    }
    Ok(folds)
}

/// Patient-to-fold assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    /// Stratify `(patient_id, label)` pairs. Ids are sorted first, so the
    /// plan does not depend on the order patients are listed in.
    pub fn stratified(patients: &[(String, usize)], k: usize, seed: u64) -> Result<Self> {
        let mut sorted: Vec<&(String, usize)> = patients.iter().collect();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Invalid("duplicate patient ids".into()));
        }
        let labels: Vec<usize> = sorted.iter().map(|p| p.1).collect();
        let folds = stratified_kfold(&labels, k, seed)?;
        Ok(Self {
            k,
            seed,
            assignment: sorted.iter().map(|p| p.0.clone()).zip(folds).collect(),
        })
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    /// Patients in `fold`, in id order.
    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Patients outside `fold`, in id order.
    pub fn complement(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if plan.k < 2 || plan.assignment.values().any(|&f| f >= plan.k) {
            return Err(Error::Invalid(format!(
                "{}: fold indices outside 0..{}",
                path.display(),
                plan.k
            )));
        }
        Ok(plan)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Stratified hold-out of roughly `1 / k` of the patients (one fold of a
/// `k`-fold plan drawn from a stream separate from the CV splits).
pub fn holdout_split(patients: &[(String, usize)], k: usize, seed: u64) -> Result<Vec<String>> {
    let plan = FoldPlan::stratified(patients, k, seed ^ 0x0048_4f4c_444f_5554)?;
    Ok(plan.members(0).into_iter().map(String::from).collect())
}
