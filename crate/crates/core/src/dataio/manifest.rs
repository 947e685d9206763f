use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_bag, TokenBag, CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientEntry {
    pub id: String,
    pub label: usize,
    /// Token file, relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub patches: usize,
}

/// JSON index of a token-bag dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub classes: Vec<String>,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub patients: Vec<PatientEntry>,
}

impl DatasetManifest {
    pub fn new(rows: usize, cols: usize, dim: usize) -> Self {
        Self {
            version: MANIFEST_VERSION,
            classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            rows,
            cols,
            dim,
            patients: Vec::new(),
        }
    }

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

    pub fn entry(&self, id: &str) -> Option<&PatientEntry> {
        self.patients.iter().find(|p| p.id == id)
    }

    pub fn labels(&self) -> Vec<(String, usize)> {
        self.patients.iter().map(|p| (p.id.clone(), p.label)).collect()
    }

    /// Append the patients of a featurizer fragment. Paths in the fragment
    /// are taken relative to `fragment_dir` and rewritten relative to
    /// `manifest_dir` when possible.
    pub fn merge_fragment(
        &mut self,
        fragment: &ManifestFragment,
        fragment_dir: &Path,
        manifest_dir: &Path,
    ) -> Result<()> {
        if (fragment.rows, fragment.cols, fragment.dim) != (self.rows, self.cols, self.dim) {
            return Err(Error::Invalid(format!(
                "fragment grid {}x{}x{} does not match manifest grid {}x{}x{}",
                fragment.rows, fragment.cols, fragment.dim, self.rows, self.cols, self.dim
            )));
        }
        for p in &fragment.patients {
            if self.entry(&p.id).is_some() {
                return Err(Error::Invalid(format!("duplicate patient id `{}`", p.id)));
            }
            let abs = fragment_dir.join(&p.path);
            let path = abs.strip_prefix(manifest_dir).map(Path::to_path_buf).unwrap_or(abs);
            self.patients.push(PatientEntry { path, ..p.clone() });
        }
        Ok(())
    }
}

/// Output of an external featurizer run: the patients it wrote plus the
/// ones it had to skip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFragment {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub patients: Vec<PatientEntry>,
    #[serde(default)]
    pub errors: Vec<FragmentError>,
    /// Free-form provenance (model id, preprocessing statistics, ...).
    #[serde(default)]
    pub provenance: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FragmentError {
    pub id: String,
    pub message: String,
}

impl ManifestFragment {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientStatus {
    pub id: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub manifest: PathBuf,
    pub ok: bool,
    /// Problems with the manifest itself (parse errors, class table, ...).
    pub errors: Vec<String>,
    pub patients: Vec<PatientStatus>,
}

/// Check a manifest and every bag it references. Problems are collected
/// into the report rather than returned as errors.
pub fn validate_manifest(path: impl AsRef<Path>) -> ValidationReport {
    let path = path.as_ref();
    let mut report = ValidationReport {
        manifest: path.to_path_buf(),
        ok: false,
        errors: Vec::new(),
        patients: Vec::new(),
    };
    let manifest = match DatasetManifest::load(path) {
        Ok(m) => m,
        Err(e) => {
            report.errors.push(e.to_string());
            return report;
        }
    };
    if manifest.version != MANIFEST_VERSION {
        report
            .errors
            .push(format!("unsupported manifest version {}", manifest.version));
    }
    if manifest.classes != CLASS_NAMES {
        report.errors.push(format!(
            "class table {:?} differs from {:?}",
            manifest.classes, CLASS_NAMES
        ));
    }
    if manifest.patients.is_empty() {
        report.errors.push("manifest lists no patients".into());
    }

    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = BTreeSet::new();
    for entry in &manifest.patients {
        let message = check_entry(&manifest, entry, base, &mut seen).err();
        report.patients.push(PatientStatus {
            id: entry.id.clone(),
            ok: message.is_none(),
            message,
        });
    }
    report.ok = report.errors.is_empty() && report.patients.iter().all(|p| p.ok);
    report
}

fn check_entry(
    m: &DatasetManifest,
    entry: &PatientEntry,
    base: &Path,
    seen: &mut BTreeSet<String>,
) -> std::result::Result<(), String> {
    if !seen.insert(entry.id.clone()) {
        return Err(format!("duplicate patient id `{}`", entry.id));
    }
    if entry.label >= NUM_CLASSES {
        return Err(format!("label {} out of range 0..{NUM_CLASSES}", entry.label));
    }
    let file = base.join(&entry.path);
    if !file.exists() {
        return Err(format!("missing token file {}", file.display()));
    }
    let grids = read_bag(&file).map_err(|e| e.to_string())?;
    let g = &grids[0];
    if g.dim != m.dim {
        return Err(format!(
            "patient `{}`: token dim {} but manifest dim {}",
            entry.id, g.dim, m.dim
        ));
    }
    if (g.rows, g.cols) != (m.rows, m.cols) {
        return Err(format!(
            "patient `{}`: grid {}x{} but manifest grid {}x{}",
            entry.id, g.rows, g.cols, m.rows, m.cols
        ));
    }
    if grids.len() != entry.patches {
        return Err(format!(
            "patient `{}`: file has {} patches, manifest says {}",
            entry.id,
            grids.len(),
            entry.patches
        ));
    }
    Ok(())
}

/// A manifest with every bag loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub bags: Vec<TokenBag>,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let report = validate_manifest(manifest_path);
        if !report.ok {
            let mut problems = report.errors.clone();
            problems.extend(report.patients.iter().filter_map(|p| p.message.clone()));
            return Err(Error::Invalid(format!(
                "{} failed validation: {}",
                manifest_path.display(),
                problems.join("; ")
            )));
        }
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let bags = manifest
            .patients
            .iter()
            .map(|e| TokenBag::new(e.id.clone(), e.label, read_bag(base.join(&e.path))?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, bags })
    }

    pub fn from_bags(bags: Vec<TokenBag>) -> Result<Self> {
        let (rows, cols, dim) = bags
            .first()
            .ok_or_else(|| Error::Invalid("empty dataset".into()))?
            .grid_shape();
        let mut manifest = DatasetManifest::new(rows, cols, dim);
        for b in &bags {
            b.validate()?;
            if b.grid_shape() != (rows, cols, dim) {
                return Err(Error::Invalid(format!("bag `{}` has a different grid", b.patient_id)));
            }
            manifest.patients.push(PatientEntry {
                id: b.patient_id.clone(),
                label: b.label,
                path: PathBuf::from(format!("{}.raab", b.patient_id)),
                patches: b.patches(),
            });
        }
        Ok(Self { manifest, bags })
    }

    pub fn bag(&self, id: &str) -> Option<&TokenBag> {
        self.bags.iter().find(|b| b.patient_id == id)
    }

    pub fn labels(&self) -> Vec<(String, usize)> {
        self.bags.iter().map(|b| (b.patient_id.clone(), b.label)).collect()
    }
}
