//! Token bags, their on-disk format, dataset manifests, synthetic data and
//! stratified fold planning.

mod folds;
mod format;
mod manifest;
mod synth;

pub use folds::{holdout_split, stratified_kfold, FoldPlan};
pub use format::{read_bag, write_bag, HEADER_BYTES, MAGIC as BAG_MAGIC, VERSION as BAG_VERSION};
pub use manifest::{
    validate_manifest, Dataset, DatasetManifest, FragmentError, ManifestFragment, PatientEntry, PatientStatus,
    ValidationReport, MANIFEST_VERSION,
};
pub use synth::{generate_synthetic_dataset, synthesize_bags, SynthConfig, SyntheticDataset};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 4;

/// Class names in label-index order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["Healthy", "Benign", "OPMD", "OSCC"];

/// One patch: a `rows x cols` grid of `dim`-dimensional tokens, stored
/// row-major as `[row][col][dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridTokens {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl GridTokens {
    pub fn new(rows: usize, cols: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || dim == 0 {
            return Err(Error::Invalid(format!("empty grid {rows}x{cols}x{dim}")));
        }
        if values.len() != rows * cols * dim {
            return Err(Error::Invalid(format!(
                "grid {rows}x{cols}x{dim} needs {} values, got {}",
                rows * cols * dim,
                values.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            dim,
            values,
        })
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn token(&self, cell: usize) -> &[f64] {
        &self.values[cell * self.dim..(cell + 1) * self.dim]
    }

    /// `[rows * cols, dim]` view as a tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.cells(), self.dim], self.values.clone()).expect("validated grid")
    }

    pub fn from_tensor(rows: usize, cols: usize, t: Tensor) -> Result<Self> {
        let dim = t.cols();
        Self::new(rows, cols, dim, t.into_data())
    }

    pub fn same_shape(&self, other: &GridTokens) -> bool {
        (self.rows, self.cols, self.dim) == (other.rows, other.cols, other.dim)
    }
}

/// One patient: a label and `P >= 1` token grids of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBag {
    pub patient_id: String,
    pub label: usize,
    pub grids: Vec<GridTokens>,
}

impl TokenBag {
    pub fn new(patient_id: impl Into<String>, label: usize, grids: Vec<GridTokens>) -> Result<Self> {
        let bag = Self {
            patient_id: patient_id.into(),
            label,
            grids,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange(self.label, NUM_CLASSES));
        }
        let first = self
            .grids
            .first()
            .ok_or_else(|| Error::Invalid(format!("bag `{}` has no patches", self.patient_id)))?;
        for (p, g) in self.grids.iter().enumerate() {
            if !g.same_shape(first) {
                return Err(Error::Invalid(format!(
                    "bag `{}`: patch {p} is {}x{}x{}, patch 0 is {}x{}x{}",
                    self.patient_id, g.rows, g.cols, g.dim, first.rows, first.cols, first.dim
                )));
            }
            if let Some(i) = g.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!(
                    "bag `{}`: non-finite value in patch {p} at index {i}",
                    self.patient_id
                )));
            }
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        self.grids.len()
    }

    /// `(rows, cols, dim)` shared by every patch.
    pub fn grid_shape(&self) -> (usize, usize, usize) {
        let g = &self.grids[0];
        (g.rows, g.cols, g.dim)
    }

    /// Total instance count `M = P * rows * cols`.
    pub fn instances(&self) -> usize {
        self.grids.iter().map(GridTokens::cells).sum()
    }

    /// All tokens stacked patch by patch: `[M, dim]`.
    pub fn tokens(&self) -> Tensor {
        let (_, _, dim) = self.grid_shape();
        let data: Vec<f64> = self.grids.iter().flat_map(|g| g.values.iter().copied()).collect();
        Tensor::new(vec![data.len() / dim, dim], data).expect("consistent grids")
    }
}
