//! Synthetic token bags with a spatially coherent class signal.
//!
//! Background tokens are i.i.d. Gaussian. A bag of class `c` carries, in a
//! random non-empty subset of its patches, one `b x b` block of tokens
//! shifted by `strength * v_c`, where the `v_c` are orthonormal class
//! directions. A single motif token is barely above the noise; the block as
//! a whole is not, so models that pool over grid neighborhoods see a
//! stronger signal than models that look at tokens one by one.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{holdout_split, write_bag, DatasetManifest, GridTokens, PatientEntry, TokenBag, CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub patients_per_class: usize,
    pub min_patches: usize,
    pub max_patches: usize,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    /// Side of the square motif block.
    pub motif_size: usize,
    pub motif_strength: f64,
    /// Probability that a patch carries the motif (at least one always does).
    pub motif_prob: f64,
    pub noise: f64,
    /// Held-out test share is `1 / test_folds` of each class.
    pub test_folds: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            patients_per_class: 50,
            min_patches: 1,
            max_patches: 4,
            rows: 14,
            cols: 14,
            dim: 384,
            motif_size: 3,
            motif_strength: 2.0,
            motif_prob: 0.5,
            noise: 1.0,
            test_folds: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.patients_per_class == 0 || self.rows == 0 || self.cols == 0 || self.dim == 0 {
            return bad("patient count and grid sizes must be positive");
        }
        if self.min_patches == 0 || self.max_patches < self.min_patches {
            return bad("need 1 <= min_patches <= max_patches");
        }
        if self.motif_size == 0 || self.motif_size > self.rows || self.motif_size > self.cols {
            return bad("motif block must fit the grid");
        }
        if !(0.0..=1.0).contains(&self.motif_prob) {
            return bad("motif_prob must lie in [0, 1]");
        }
        if !(self.motif_strength >= 0.0 && self.noise > 0.0) {
            return bad("motif_strength must be >= 0 and noise > 0");
        }
        if self.test_folds < 2 {
            return bad("test_folds must be >= 2");
        }
        Ok(())
    }
}

/// Orthonormal class directions (Gram-Schmidt on Gaussian draws; falls back
/// to plain normalization when `dim < NUM_CLASSES`).
fn class_directions(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(cfg.seed, Stream::Synth, u64::MAX);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(NUM_CLASSES);
    for c in 0..NUM_CLASSES {
        let mut v: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
        if c < cfg.dim {
            for d in &dirs {
                let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        dirs.push(v);
    }
    dirs
}

fn patch(cfg: &SynthConfig, rng: &mut Rng, motif: Option<&[f64]>) -> GridTokens {
    let n = cfg.rows * cfg.cols * cfg.dim;
    let mut values: Vec<f64> = (0..n)
        .map(|_| cfg.noise * rng.sample::<f64, _>(StandardNormal))
        .collect();
    if let Some(dir) = motif {
        let b = cfg.motif_size;
        let top = rng.random_range(0..=cfg.rows - b);
        let left = rng.random_range(0..=cfg.cols - b);
        for r in top..top + b {
            for c in left..left + b {
                let cell = r * cfg.cols + c;
                let tok = &mut values[cell * cfg.dim..(cell + 1) * cfg.dim];
                tok.iter_mut().zip(dir).for_each(|(t, d)| *t += cfg.motif_strength * d);
            }
        }
    }
    // Stored precision is f32; round here so in-memory and on-disk bags agree.
    values.iter_mut().for_each(|v| *v = f64::from(*v as f32));
    GridTokens::new(cfg.rows, cfg.cols, cfg.dim, values).expect("sizes validated")
}

/// Generate all bags in memory, class by class.
pub fn synthesize_bags(cfg: &SynthConfig) -> Result<Vec<TokenBag>> {
    cfg.validate()?;
    let dirs = class_directions(cfg);
    let mut bags = Vec::with_capacity(NUM_CLASSES * cfg.patients_per_class);
    for (label, dir) in dirs.iter().enumerate() {
        for i in 0..cfg.patients_per_class {
            let index = (label * cfg.patients_per_class + i) as u64;
            let mut rng = rng::stream(cfg.seed, Stream::Synth, index);
            let patches = rng.random_range(cfg.min_patches..=cfg.max_patches);
            let mut carriers: Vec<bool> = (0..patches).map(|_| rng.random_bool(cfg.motif_prob)).collect();
            if !carriers.iter().any(|&c| c) {
                let p = rng.random_range(0..patches);
                carriers[p] = true;
            }
            let grids = carriers
                .iter()
                .map(|&has| patch(cfg, &mut rng, has.then_some(dir.as_slice())))
                .collect();
            let id = format!("{}-{i:03}", CLASS_NAMES[label].to_lowercase());
            bags.push(TokenBag::new(id, label, grids)?);
        }
    }
    Ok(bags)
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
    /// Stratified hold-out, also written to `test_ids.json`.
    pub test_ids: Vec<String>,
}

/// Write bags under `out_dir/bags/`, plus `manifest.json`, `test_ids.json`
/// and a snapshot of the generator config.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let out_dir = out_dir.as_ref();
    let bags = synthesize_bags(cfg)?;
    let bag_dir = out_dir.join("bags");
    fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;

    let mut manifest = DatasetManifest::new(cfg.rows, cfg.cols, cfg.dim);
    for bag in &bags {
        let rel = PathBuf::from("bags").join(format!("{}.raab", bag.patient_id));
        write_bag(bag, out_dir.join(&rel))?;
        manifest.patients.push(PatientEntry {
            id: bag.patient_id.clone(),
            label: bag.label,
            path: rel,
            patches: bag.patches(),
        });
    }
    let manifest_path = out_dir.join("manifest.json");
    manifest.save(&manifest_path)?;

    let test_ids = holdout_split(&manifest.labels(), cfg.test_folds, cfg.seed)?;
    write_json(&out_dir.join("test_ids.json"), &test_ids)?;
    write_json(&out_dir.join("synth_config.json"), cfg)?;

    Ok(SyntheticDataset {
        manifest,
        manifest_path,
        test_ids,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
