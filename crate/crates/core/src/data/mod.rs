//! Volumes, subjects, phantom cohorts, preprocessing and fold plans.

mod folds;
mod io;
mod phantom;
mod preprocess;

pub use folds::{parse_fold_plans, plan_folds, render_fold_plans, FoldPlan, Role};
pub use io::{
    load_dataset, read_subject, read_volume, validate_dataset, write_subject, write_volume, DatasetSummary,
    VOLUME_HEADER_BYTES, VOLUME_MAGIC,
};
pub use phantom::{generate_phantom, generate_phantom_with_stats, PhantomSpec, PhantomStats};
pub use preprocess::{gaussian_normalize, CropPad};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    T1,
    Flair,
    Label,
    SynthFlair,
}

impl Modality {
    pub fn file_stem(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::Flair => "flair",
            Modality::Label => "label",
            Modality::SynthFlair => "synth_flair",
        }
    }
}

/// A `D x H x W` scalar image stored slice-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: [usize; 3],
    voxels: Vec<T>,
    modality: Modality,
}

impl<T: Scalar> Volume<T> {
    /// Label volumes must be binary.
    pub fn new(dims: [usize; 3], voxels: Vec<T>, modality: Modality) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid("volume", format!("dimensions must be positive, got {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "volume",
                dim: "voxel count",
                expected: n,
                actual: voxels.len(),
            });
        }
        if modality == Modality::Label && !is_binary(&voxels) {
            return Err(Error::invalid("volume", "label volume contains values other than 0 and 1"));
        }
        Ok(Self { dims, voxels, modality })
    }

    pub fn zeros(dims: [usize; 3], modality: Modality) -> Self {
        Self::new(dims, vec![T::zero(); dims.iter().product()], modality).expect("zeros are always valid")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn depth(&self) -> usize {
        self.dims[0]
    }

    pub fn slice_dims(&self) -> (usize, usize) {
        (self.dims[1], self.dims[2])
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn voxels(&self) -> &[T] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<T> {
        self.voxels
    }

    pub fn slice(&self, z: usize) -> &[T] {
        let n = self.dims[1] * self.dims[2];
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn with_modality(self, modality: Modality) -> Result<Self> {
        Self::new(self.dims, self.voxels, modality)
    }

    pub fn cast<U: Scalar>(&self) -> Volume<U> {
        Volume {
            dims: self.dims,
            voxels: self.voxels.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossless())).collect(),
            modality: self.modality,
        }
    }

    /// Number of voxels equal to one.
    pub fn positives(&self) -> usize {
        self.voxels.iter().filter(|&&v| v == T::one()).count()
    }
}

pub(crate) fn is_binary<T: Scalar>(values: &[T]) -> bool {
    values.iter().all(|&v| v == T::zero() || v == T::one())
}

/// Paired T1, FLAIR and lesion label volumes of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject<T> {
    pub id: String,
    pub t1: Volume<T>,
    pub flair: Volume<T>,
    pub label: Volume<T>,
}

impl<T: Scalar> Subject<T> {
    pub fn new(id: impl Into<String>, t1: Volume<T>, flair: Volume<T>, label: Volume<T>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id.contains(['/', '\\', ',']) || id.trim() != id {
            return Err(Error::invalid("subject", format!("unusable subject id {id:?}")));
        }
        for (v, want) in [(&t1, Modality::T1), (&flair, Modality::Flair), (&label, Modality::Label)] {
            if v.modality() != want {
                return Err(Error::invalid(
                    "subject",
                    format!("{id}: expected {want:?} volume, got {:?}", v.modality()),
                ));
            }
        }
        if t1.dims() != flair.dims() || t1.dims() != label.dims() {
            return Err(Error::invalid(
                "subject",
                format!(
                    "{id}: volume dims differ (t1 {:?}, flair {:?}, label {:?})",
                    t1.dims(),
                    flair.dims(),
                    label.dims()
                ),
            ));
        }
        Ok(Self { id, t1, flair, label })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.t1.dims()
    }
}
