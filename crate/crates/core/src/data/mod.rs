//! Domain types, label scheme, manifests, fold splitting and volume IO.

mod folds;
mod manifest;
pub mod nifti;
pub mod raw;
mod scheme;
mod volume;

pub use folds::{make_folds, Fold, FoldSplit};
pub use manifest::{
    load_case, load_mask, load_volume, write_mask, write_raw_case, DatasetManifest, ManifestEntry,
};
pub use scheme::{ClassScheme, BACKGROUND, BLOOD_POOL, MVO, MYOCARDIUM, SCAR};
pub use volume::{argmax_channels, flat_index, one_hot, voxel_count, LabelMask, Shape3, Spacing, Volume};
