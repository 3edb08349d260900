//! Input preparation: LV-centred in-plane crop, per-examination z-score
//! normalisation, and fitting the slice count to the network input depth.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{voxel_count, LabelMask, Shape3, Volume, BACKGROUND};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetProfile {
    Emidec,
    Myops,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// In-plane crop `(Y', X')`.
    pub crop_size: [usize; 2],
    /// Slice count of the 3D network input during training.
    pub depth: usize,
    pub profile: DatasetProfile,
    /// Compute normalisation statistics on the cropped volume (default) or on
    /// the full field of view.
    #[serde(default = "default_true")]
    pub normalize_after_crop: bool,
}

fn default_true() -> bool {
    true
}

impl PreprocessConfig {
    pub fn emidec() -> Self {
        PreprocessConfig {
            crop_size: [96, 96],
            depth: 7,
            profile: DatasetProfile::Emidec,
            normalize_after_crop: true,
        }
    }

    pub fn myops() -> Self {
        PreprocessConfig {
            crop_size: [320, 320],
            depth: 5,
            profile: DatasetProfile::Myops,
            normalize_after_crop: true,
        }
    }

    pub fn custom(crop_size: [usize; 2], depth: usize) -> Self {
        PreprocessConfig {
            crop_size,
            depth,
            profile: DatasetProfile::Custom,
            normalize_after_crop: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size.contains(&0) || self.depth == 0 {
            return Err(Error::Config("crop size and depth must be positive".into()));
        }
        let expected = match self.profile {
            DatasetProfile::Emidec => Some(([96, 96], 7)),
            DatasetProfile::Myops => Some(([320, 320], 5)),
            DatasetProfile::Custom => None,
        };
        if let Some((crop, depth)) = expected {
            if self.crop_size != crop || self.depth != depth {
                return Err(Error::Config(format!(
                    "{:?} profile requires crop {crop:?} and depth {depth}",
                    self.profile
                )));
            }
        }
        Ok(())
    }
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self::emidec()
    }
}

/// Placement of a crop inside the original field of view. Crop voxel `(y, x)`
/// corresponds to original voxel `(y + offset[0], x + offset[1])`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub offset: [isize; 2],
    pub crop_size: [usize; 2],
    pub original_shape: Shape3,
}

impl CropWindow {
    pub fn centered(center: [usize; 2], crop_size: [usize; 2], original_shape: Shape3) -> Self {
        CropWindow {
            offset: [
                center[0] as isize - (crop_size[0] / 2) as isize,
                center[1] as isize - (crop_size[1] / 2) as isize,
            ],
            crop_size,
            original_shape,
        }
    }

    /// Original in-plane coordinate of crop voxel `(y, x)` if it lies inside the image.
    #[inline]
    pub fn source(&self, y: usize, x: usize) -> Option<(usize, usize)> {
        let sy = y as isize + self.offset[0];
        let sx = x as isize + self.offset[1];
        let [_, h, w] = self.original_shape;
        (sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w).then(|| (sy as usize, sx as usize))
    }

    /// Whether original voxel `(y, x)` is covered by the crop.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let cy = y as isize - self.offset[0];
        let cx = x as isize - self.offset[1];
        cy >= 0 && cx >= 0 && (cy as usize) < self.crop_size[0] && (cx as usize) < self.crop_size[1]
    }

    fn crop_plane<T: Copy>(&self, plane: &[T], pad: T, out: &mut Vec<T>) {
        let w = self.original_shape[2];
        for y in 0..self.crop_size[0] {
            for x in 0..self.crop_size[1] {
                out.push(match self.source(y, x) {
                    Some((sy, sx)) => plane[sy * w + sx],
                    None => pad,
                });
            }
        }
    }

    /// Crops every slice of a z-major grid of the original in-plane extent.
    pub fn crop<T: Copy>(&self, data: &[T], depth: usize, pad: T) -> Vec<T> {
        let n = self.original_shape[1] * self.original_shape[2];
        let mut out = Vec::with_capacity(depth * self.crop_size[0] * self.crop_size[1]);
        for z in 0..depth {
            self.crop_plane(&data[z * n..(z + 1) * n], pad, &mut out);
        }
        out
    }

    /// Places a cropped z-major grid back into the original field of view,
    /// filling uncovered voxels with `pad`.
    pub fn uncrop<T: Copy>(&self, cropped: &[T], depth: usize, pad: T) -> Vec<T> {
        let [_, h, w] = self.original_shape;
        let [ch, cw] = self.crop_size;
        let mut out = vec![pad; depth * h * w];
        for z in 0..depth {
            for y in 0..ch {
                for x in 0..cw {
                    if let Some((sy, sx)) = self.source(y, x) {
                        out[(z * h + sy) * w + sx] = cropped[(z * ch + y) * cw + x];
                    }
                }
            }
        }
        out
    }
}

/// Default LV centre: the image centre.
pub fn image_center(shape: Shape3) -> [usize; 2] {
    [shape[1] / 2, shape[2] / 2]
}

/// Crops image and mask identically around `center`; out-of-image regions are
/// zero (image) or background (mask).
pub fn crop_center(
    volume: &Volume,
    mask: Option<&LabelMask>,
    center: [usize; 2],
    crop_size: [usize; 2],
) -> Result<(Volume, Option<LabelMask>, CropWindow)> {
    let shape = volume.shape();
    if center[0] >= shape[1] || center[1] >= shape[2] {
        return Err(Error::Input(format!("crop center {center:?} outside image {shape:?}")));
    }
    if crop_size.contains(&0) {
        return Err(Error::Config("crop size must be positive".into()));
    }
    if let Some(m) = mask {
        if m.shape() != shape {
            return Err(Error::Shape(format!("mask {:?} vs image {shape:?}", m.shape())));
        }
    }
    let window = CropWindow::centered(center, crop_size, shape);
    let out_shape = [shape[0], crop_size[0], crop_size[1]];
    let vol = volume.with_data(out_shape, window.crop(volume.data(), shape[0], 0.0));
    let mask = mask.map(|m| m.with_labels(out_shape, window.crop(m.labels(), shape[0], BACKGROUND)));
    Ok((vol, mask, window))
}

/// Zero-mean, unit-variance rescaling of one examination. The standard
/// deviation is clamped to at least 1e-8, so a constant image maps to zeros.
pub fn normalize_zscore(volume: &Volume) -> Volume {
    let data = volume.data();
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = data.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    let out = data.iter().map(|&v| ((f64::from(v) - mean) / std) as f32).collect();
    volume.with_data(volume.shape(), out)
}

fn take_slices<T: Copy>(data: &[T], shape: Shape3, indices: &[usize]) -> Vec<T> {
    let n = shape[1] * shape[2];
    let mut out = Vec::with_capacity(indices.len() * n);
    for &z in indices {
        out.extend_from_slice(&data[z * n..(z + 1) * n]);
    }
    out
}

/// Copies the given slices (by index, repeats allowed) into a new stack.
pub fn gather_slices(volume: &Volume, mask: Option<&LabelMask>, indices: &[usize]) -> (Volume, Option<LabelMask>) {
    let shape = volume.shape();
    let out_shape = [indices.len(), shape[1], shape[2]];
    let v = volume.with_data(out_shape, take_slices(volume.data(), shape, indices));
    let m = mask.map(|m| m.with_labels(out_shape, take_slices(m.labels(), shape, indices)));
    (v, m)
}

/// Random contiguous run of `depth` slices, start uniform on `[0, M - depth]`.
pub fn select_subvolume<R: Rng + ?Sized>(
    volume: &Volume,
    mask: Option<&LabelMask>,
    depth: usize,
    rng: &mut R,
) -> Result<(Volume, Option<LabelMask>, usize)> {
    let m = volume.depth();
    if depth == 0 || m < depth {
        return Err(Error::Input(format!(
            "cannot select {depth} contiguous slices from {m}; resize instead"
        )));
    }
    let start = rng.random_range(0..=m - depth);
    let idx: Vec<usize> = (start..start + depth).collect();
    let (v, mk) = gather_slices(volume, mask, &idx);
    Ok((v, mk, start))
}

/// Centre-aligned nearest-neighbour source index for each of `depth` output slices.
pub fn z_nearest_mapping(slices: usize, depth: usize) -> Vec<usize> {
    (0..depth)
        .map(|i| {
            let src = ((i as f64 + 0.5) * slices as f64 / depth as f64).floor() as usize;
            src.min(slices - 1)
        })
        .collect()
}

/// Nearest-neighbour resampling along z to `depth` slices, for stacks with
/// fewer slices than the network input.
pub fn resize_z_nearest(
    volume: &Volume,
    mask: Option<&LabelMask>,
    depth: usize,
) -> Result<(Volume, Option<LabelMask>, Vec<usize>)> {
    let m = volume.depth();
    if m >= depth {
        return Err(Error::Input(format!(
            "z-resize is for stacks shallower than {depth}, got {m} slices"
        )));
    }
    let mapping = z_nearest_mapping(m, depth);
    let (v, mk) = gather_slices(volume, mask, &mapping);
    Ok((v, mk, mapping))
}

/// Inverse of a nearest-neighbour z mapping for label grids: every source slice
/// takes the per-voxel majority label over the output slices mapped from it,
/// ties to the lowest class index.
pub fn invert_z_mapping(labels: &[u8], plane: usize, mapping: &[usize], slices: usize, num_classes: usize) -> Vec<u8> {
    assert_eq!(labels.len(), mapping.len() * plane);
    let mut out = vec![BACKGROUND; slices * plane];
    let mut votes = vec![0u32; num_classes];
    for (src, dst) in out.chunks_mut(plane).enumerate() {
        let from: Vec<usize> = (0..mapping.len()).filter(|&i| mapping[i] == src).collect();
        for (p, d) in dst.iter_mut().enumerate() {
            votes.iter_mut().for_each(|v| *v = 0);
            for &i in &from {
                votes[labels[i * plane + p] as usize] += 1;
            }
            let mut best = 0;
            for c in 1..num_classes {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            *d = best as u8;
        }
    }
    out
}

/// A case cropped and normalised for the networks.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub volume: Volume,
    pub mask: Option<LabelMask>,
    pub window: CropWindow,
}

pub fn prepare_case(
    volume: &Volume,
    mask: Option<&LabelMask>,
    lv_center: Option<[usize; 2]>,
    config: &PreprocessConfig,
) -> Result<PreparedCase> {
    let center = lv_center.unwrap_or_else(|| image_center(volume.shape()));
    let (volume, mask, window) = if config.normalize_after_crop {
        let (v, m, w) = crop_center(volume, mask, center, config.crop_size)?;
        (normalize_zscore(&v), m, w)
    } else {
        crop_center(&normalize_zscore(volume), mask, center, config.crop_size)?
    };
    debug_assert_eq!(volume.data().len(), voxel_count(volume.shape()));
    Ok(PreparedCase { volume, mask, window })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClassScheme, Spacing};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sp() -> Spacing {
        Spacing([10.0, 1.458, 1.458])
    }

    fn ramp(shape: Shape3) -> Volume {
        let data = (0..voxel_count(shape)).map(|i| i as f32).collect();
        Volume::new("r", shape, sp(), data).unwrap()
    }

    fn labels(shape: Shape3) -> LabelMask {
        let l = (0..voxel_count(shape)).map(|i| (i % 5) as u8).collect();
        LabelMask::new(shape, sp(), ClassScheme::Emidec, l).unwrap()
    }

    #[test]
    fn profiles_validate() {
        PreprocessConfig::emidec().validate().unwrap();
        PreprocessConfig::myops().validate().unwrap();
        let mut bad = PreprocessConfig::emidec();
        bad.depth = 5;
        assert!(bad.validate().is_err());
        assert!(PreprocessConfig::custom([0, 4], 3).validate().is_err());
    }

    #[test]
    fn crop_256_to_96() {
        let v = ramp([1, 256, 256]);
        let (c, _, w) = crop_center(&v, None, [128, 128], [96, 96]).unwrap();
        assert_eq!(c.shape(), [1, 96, 96]);
        assert_eq!(w.offset, [80, 80]);
        assert_eq!(c.get(0, 0, 0), v.get(0, 80, 80));
    }

    #[test]
    fn full_size_crop_is_identity() {
        let v = ramp([2, 10, 12]);
        let m = labels([2, 10, 12]);
        let (c, cm, _) = crop_center(&v, Some(&m), [5, 6], [10, 12]).unwrap();
        assert_eq!(c.data(), v.data());
        assert_eq!(cm.unwrap().labels(), m.labels());
    }

    #[test]
    fn corner_crop_pads_and_uncrops() {
        let shape = [2, 40, 50];
        let v = ramp(shape);
        let m = labels(shape);
        let (c, cm, w) = crop_center(&v, Some(&m), [0, 0], [96, 96]).unwrap();
        let cm = cm.unwrap();
        // brute-force index arithmetic: crop (y, x) <- original (y - 48, x - 48)
        for z in 0..2 {
            for y in 0..96 {
                for x in 0..96 {
                    let (oy, ox) = (y as isize - 48, x as isize - 48);
                    let inside = oy >= 0 && ox >= 0 && oy < 40 && ox < 50;
                    let expect_v = if inside { v.get(z, oy as usize, ox as usize) } else { 0.0 };
                    let expect_m = if inside { m.get(z, oy as usize, ox as usize) } else { 0 };
                    assert_eq!(c.get(z, y, x), expect_v);
                    assert_eq!(cm.get(z, y, x), expect_m);
                }
            }
        }
        let back = w.uncrop(cm.labels(), 2, 0u8);
        for z in 0..2 {
            for y in 0..40 {
                for x in 0..50 {
                    let expect = if y < 48 && x < 48 { m.get(z, y, x) } else { 0 };
                    assert_eq!(back[(z * 40 + y) * 50 + x], expect);
                }
            }
        }
    }

    #[test]
    fn zscore_cases() {
        let v = Volume::new("a", [1, 1, 4], sp(), vec![0.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(normalize_zscore(&v).data(), &[-1.0, 1.0, -1.0, 1.0]);
        let c = Volume::new("c", [1, 2, 2], sp(), vec![3.5; 4]).unwrap();
        assert!(normalize_zscore(&c).data().iter().all(|&x| x == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f32> = (0..3000).map(|_| rng.random_range(-5.0..40.0)).collect();
        let v = Volume::new("r", [3, 10, 100], sp(), data).unwrap();
        let n = normalize_zscore(&v);
        let len = n.data().len() as f64;
        let mean = n.data().iter().map(|&x| f64::from(x)).sum::<f64>() / len;
        let std = (n.data().iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / len).sqrt();
        assert!(mean.abs() < 1e-5 && (std - 1.0).abs() < 1e-5);
        let again = normalize_zscore(&n);
        for (a, b) in again.data().iter().zip(n.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn subvolume_start_is_uniform() {
        let v = ramp([10, 2, 2]);
        let m = labels([10, 2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let (sv, sm, start) = select_subvolume(&v, Some(&m), 7, &mut rng).unwrap();
            assert_eq!(sv.depth(), 7);
            assert_eq!(sv.slice(0), v.slice(start));
            assert_eq!(sm.unwrap().slice(6), m.slice(start + 6));
            counts[start] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.25).abs() <= 0.02, "{counts:?}");
        }
        let v7 = ramp([7, 2, 2]);
        let (same, _, _) = select_subvolume(&v7, None, 7, &mut rng).unwrap();
        assert_eq!(same.data(), v7.data());
        assert!(select_subvolume(&ramp([3, 2, 2]), None, 7, &mut rng).is_err());
    }

    #[test]
    fn z_resize_mapping() {
        assert_eq!(z_nearest_mapping(4, 7), vec![0, 0, 1, 2, 2, 3, 3]);
        let v = ramp([1, 2, 2]);
        let (r, _, map) = resize_z_nearest(&v, None, 7).unwrap();
        assert_eq!(map, vec![0; 7]);
        for z in 0..7 {
            assert_eq!(r.slice(z), v.slice(0));
        }
        let m = labels([4, 3, 3]);
        let (_, rm, _) = resize_z_nearest(&ramp([4, 3, 3]), Some(&m), 7).unwrap();
        let rm = rm.unwrap();
        assert!(rm.labels().iter().all(|l| m.labels().contains(l)));
        assert!(resize_z_nearest(&ramp([7, 2, 2]), None, 7).is_err());
    }

    #[test]
    fn inverse_mapping_recovers_labels() {
        let m = labels([4, 3, 3]);
        let (_, rm, map) = resize_z_nearest(&ramp([4, 3, 3]), Some(&m), 7).unwrap();
        let back = invert_z_mapping(rm.unwrap().labels(), 9, &map, 4, 5);
        assert_eq!(back, m.labels());
    }
}
