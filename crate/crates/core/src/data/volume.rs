use serde::{Deserialize, Serialize};

use super::scheme::ClassScheme;
use crate::error::{Error, Result};

/// Grid extent as `(z, y, x)`.
pub type Shape3 = [usize; 3];

/// Physical voxel size in mm as `(sz, sy, sx)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub fn new(sz: f64, sy: f64, sx: f64) -> Result<Self> {
        let s = Spacing([sz, sy, sx]);
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Input(format!("spacing must be positive, got {:?}", self.0)))
        }
    }

    pub fn voxel_volume(&self) -> f64 {
        self.0[0] * self.0[1] * self.0[2]
    }
}

pub fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[inline]
pub fn flat_index(shape: Shape3, z: usize, y: usize, x: usize) -> usize {
    (z * shape[1] + y) * shape[2] + x
}

/// A grayscale image stack, z-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Vec<f32>,
    shape: Shape3,
    spacing: Spacing,
    case_id: String,
    original_shape: Shape3,
}

impl Volume {
    pub fn new(case_id: impl Into<String>, shape: Shape3, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        spacing.validate()?;
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::Shape(format!("empty volume shape {shape:?}")));
        }
        if data.len() != voxel_count(shape) {
            return Err(Error::Shape(format!(
                "volume shape {shape:?} needs {} voxels, got {}",
                voxel_count(shape),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite intensity at voxel {i}")));
        }
        Ok(Volume {
            data,
            shape,
            spacing,
            case_id: case_id.into(),
            original_shape: shape,
        })
    }

    /// Same case and metadata, different data; used by the transforms in this crate.
    pub(crate) fn with_data(&self, shape: Shape3, data: Vec<f32>) -> Volume {
        debug_assert_eq!(data.len(), voxel_count(shape));
        Volume {
            data,
            shape,
            spacing: self.spacing,
            case_id: self.case_id.clone(),
            original_shape: self.original_shape,
        }
    }

    pub fn with_original_shape(mut self, original: Shape3) -> Self {
        self.original_shape = original;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn depth(&self) -> usize {
        self.shape[0]
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn original_shape(&self) -> Shape3 {
        self.original_shape
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.shape[1] * self.shape[2];
        &self.data[z * n..(z + 1) * n]
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[flat_index(self.shape, z, y, x)]
    }
}

/// Integer class labels aligned to a [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    labels: Vec<u8>,
    shape: Shape3,
    spacing: Spacing,
    scheme: ClassScheme,
}

impl LabelMask {
    pub fn new(shape: Shape3, spacing: Spacing, scheme: ClassScheme, labels: Vec<u8>) -> Result<Self> {
        spacing.validate()?;
        if labels.len() != voxel_count(shape) {
            return Err(Error::Shape(format!(
                "mask shape {shape:?} needs {} voxels, got {}",
                voxel_count(shape),
                labels.len()
            )));
        }
        if let Some(index) = labels.iter().position(|&l| !scheme.is_valid(l)) {
            return Err(Error::InvalidLabel {
                value: labels[index],
                index,
                scheme: scheme.label().to_string(),
            });
        }
        Ok(LabelMask {
            labels,
            shape,
            spacing,
            scheme,
        })
    }

    pub fn empty(shape: Shape3, spacing: Spacing, scheme: ClassScheme) -> Self {
        LabelMask {
            labels: vec![0; voxel_count(shape)],
            shape,
            spacing,
            scheme,
        }
    }

    pub(crate) fn with_labels(&self, shape: Shape3, labels: Vec<u8>) -> LabelMask {
        debug_assert_eq!(labels.len(), voxel_count(shape));
        LabelMask {
            labels,
            shape,
            spacing: self.spacing,
            scheme: self.scheme,
        }
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn scheme(&self) -> ClassScheme {
        self.scheme
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let n = self.shape[1] * self.shape[2];
        &self.labels[z * n..(z + 1) * n]
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[flat_index(self.shape, z, y, x)]
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// Binary indicator of the voxels whose label is in `classes`.
    pub fn binary(&self, classes: &[u8]) -> Vec<bool> {
        self.labels.iter().map(|l| classes.contains(l)).collect()
    }
}

/// Per-class binary channels of a mask, `[class][voxel]`. Channels sum to one
/// at every voxel.
pub fn one_hot(mask: &LabelMask) -> Vec<Vec<u8>> {
    let k = mask.scheme().num_classes();
    let mut out = vec![vec![0u8; mask.labels.len()]; k];
    for (i, &l) in mask.labels.iter().enumerate() {
        out[l as usize][i] = 1;
    }
    out
}

/// Per-voxel argmax over class channels; ties go to the lowest class index.
pub fn argmax_channels<T: PartialOrd + Copy>(channels: &[Vec<T>]) -> Vec<u8> {
    let n = channels.first().map_or(0, |c| c.len());
    (0..n)
        .map(|i| {
            let mut best = 0usize;
            for c in 1..channels.len() {
                if channels[c][i] > channels[best][i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scheme::{BACKGROUND, SCAR};
    use proptest::prelude::*;

    fn spacing() -> Spacing {
        Spacing::new(10.0, 1.458, 1.458).unwrap()
    }

    #[test]
    fn rejects_bad_spacing_and_shape() {
        assert!(Spacing::new(0.0, 1.0, 1.0).is_err());
        assert!(Volume::new("a", [2, 2, 2], spacing(), vec![0.0; 7]).is_err());
        assert!(Volume::new("a", [1, 1, 2], spacing(), vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn rejects_out_of_scheme_labels() {
        let err = LabelMask::new([1, 1, 2], spacing(), ClassScheme::Emidec, vec![0, 7]).unwrap_err();
        assert!(matches!(err, Error::InvalidLabel { value: 7, index: 1, .. }));
        assert!(LabelMask::new([1, 1, 1], spacing(), ClassScheme::Myops, vec![4]).is_err());
    }

    #[test]
    fn one_hot_background_and_scar() {
        let m = LabelMask::empty([1, 2, 2], spacing(), ClassScheme::Emidec);
        let oh = one_hot(&m);
        assert!(oh[BACKGROUND as usize].iter().all(|&v| v == 1));
        assert!(oh[1..].iter().all(|c| c.iter().all(|&v| v == 0)));

        let m = LabelMask::new([1, 1, 2], spacing(), ClassScheme::Emidec, vec![0, SCAR]).unwrap();
        let oh = one_hot(&m);
        for (c, ch) in oh.iter().enumerate() {
            assert_eq!(ch[1], u8::from(c == SCAR as usize));
        }
    }

    proptest! {
        #[test]
        fn one_hot_argmax_roundtrip(labels in proptest::collection::vec(0u8..5, 1..200)) {
            let n = labels.len();
            let m = LabelMask::new([1, 1, n], spacing(), ClassScheme::Emidec, labels.clone()).unwrap();
            let oh = one_hot(&m);
            for i in 0..n {
                prop_assert_eq!(oh.iter().map(|c| c[i] as u32).sum::<u32>(), 1);
            }
            prop_assert_eq!(argmax_channels(&oh), labels);
        }
    }
}
