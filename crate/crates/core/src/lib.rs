//! Error-correcting 2D-to-3D cascaded U-Net segmentation of myocardial scar
//! and microvascular obstruction in late gadolinium enhancement cardiac MR.

pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod inference;
pub mod networks;
pub mod par;
pub mod perturbation;
pub mod preprocess;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
