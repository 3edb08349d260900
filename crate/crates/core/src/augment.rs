//! Training-time augmentation.
//!
//! Intensity transforms (blur, gamma, noise, contrast, brightness, low
//! resolution) and geometric transforms (translation, flips, elastic
//! deformation, scaling). All transforms act in-plane and apply the same
//! parameters to every slice of the input, so a single-slice volume is the
//! 2D case and a stack is the 3D case. The `elevated` profile widens the
//! contrast, brightness, gamma and low-resolution ranges for cascade training.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{LabelMask, Volume, BACKGROUND};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Range { min, max }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..self.max)
        } else {
            self.min
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn covers(&self, other: &Range) -> bool {
        self.min <= other.min && self.max >= other.max
    }
}

/// A transform applied with probability `p` and parameter drawn from `range`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gated {
    pub p: f64,
    pub range: Range,
}

impl Gated {
    pub const fn new(p: f64, min: f64, max: f64) -> Self {
        Gated {
            p,
            range: Range::new(min, max),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<f64> {
        // Always consume the same number of draws so parameter streams stay aligned.
        let hit = rng.random::<f64>() < self.p;
        let v = self.range.sample(rng);
        hit.then_some(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentProfile {
    Standard,
    Elevated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub profile: AugmentProfile,
    pub gaussian_blur: Gated,
    pub gamma: Gated,
    pub additive_noise: Gated,
    pub contrast: Gated,
    pub brightness: Gated,
    pub lowres: Gated,
    /// Range is a fraction of the in-plane extent, applied symmetrically.
    pub translation: Gated,
    pub flip_p: f64,
    pub elastic_p: f64,
    pub elastic_alpha: Range,
    pub elastic_sigma: Range,
    pub scaling: Gated,
}

impl AugmentConfig {
    pub fn standard() -> Self {
        AugmentConfig {
            profile: AugmentProfile::Standard,
            gaussian_blur: Gated::new(0.2, 0.5, 1.0),
            gamma: Gated::new(0.3, 0.7, 1.5),
            additive_noise: Gated::new(0.15, 0.0, 0.1),
            contrast: Gated::new(0.15, 0.65, 1.5),
            brightness: Gated::new(0.15, -0.2, 0.2),
            lowres: Gated::new(0.25, 1.0, 2.0),
            translation: Gated::new(0.2, -0.1, 0.1),
            flip_p: 0.5,
            elastic_p: 0.2,
            elastic_alpha: Range::new(0.0, 200.0),
            elastic_sigma: Range::new(9.0, 13.0),
            scaling: Gated::new(0.2, 0.7, 1.4),
        }
    }

    pub fn elevated() -> Self {
        let s = Self::standard();
        AugmentConfig {
            profile: AugmentProfile::Elevated,
            gamma: Gated::new(s.gamma.p, 0.5, 1.8),
            contrast: Gated::new(s.contrast.p, 0.5, 1.8),
            brightness: Gated::new(s.brightness.p, -0.3, 0.3),
            lowres: Gated::new(s.lowres.p, 1.0, 3.0),
            ..s
        }
    }

    /// Every transform disabled.
    pub fn identity() -> Self {
        let mut c = Self::standard();
        for g in [
            &mut c.gaussian_blur,
            &mut c.gamma,
            &mut c.additive_noise,
            &mut c.contrast,
            &mut c.brightness,
            &mut c.lowres,
            &mut c.translation,
            &mut c.scaling,
        ] {
            g.p = 0.0;
        }
        c.flip_p = 0.0;
        c.elastic_p = 0.0;
        c
    }

    fn gates(&self) -> [(&'static str, &Gated); 8] {
        [
            ("gaussian_blur", &self.gaussian_blur),
            ("gamma", &self.gamma),
            ("additive_noise", &self.additive_noise),
            ("contrast", &self.contrast),
            ("brightness", &self.brightness),
            ("lowres", &self.lowres),
            ("translation", &self.translation),
            ("scaling", &self.scaling),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, g) in self.gates() {
            if !(0.0..=1.0).contains(&g.p) || !(g.range.min <= g.range.max) {
                return Err(Error::Config(format!("augment.{name}: bad probability or range")));
            }
        }
        for (name, p) in [("flip_p", self.flip_p), ("elastic_p", self.elastic_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} must lie in [0, 1]")));
            }
        }
        if !(self.elastic_alpha.min <= self.elastic_alpha.max && self.elastic_sigma.min <= self.elastic_sigma.max) {
            return Err(Error::Config("augment elastic ranges must have min <= max".into()));
        }
        if self.elastic_sigma.min <= 0.0 || self.lowres.range.min < 1.0 || self.scaling.range.min <= 0.0 {
            return Err(Error::Config("augment: sigma, scale and lowres factor must be positive (factor >= 1)".into()));
        }
        if self.gamma.range.min <= 0.0 || self.additive_noise.range.min < 0.0 {
            return Err(Error::Config("augment: gamma must be positive, noise variance non-negative".into()));
        }
        Ok(())
    }

    /// Checks that `self` is a valid elevated counterpart of `standard`.
    pub fn validate_elevation(&self, standard: &AugmentConfig) -> Result<()> {
        let ok = self.contrast.range.covers(&standard.contrast.range)
            && self.brightness.range.covers(&standard.brightness.range)
            && self.gamma.range.covers(&standard.gamma.range)
            && self.lowres.range.max > standard.lowres.range.max;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "elevated augmentation must widen contrast, brightness and gamma and raise the lowres factor".into(),
            ))
        }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::standard()
    }
}

/// Drawn intensity parameters; `None` means the transform is skipped.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IntensityParams {
    pub noise_variance: Option<f64>,
    pub blur_sigma: Option<f64>,
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
    pub lowres_factor: Option<f64>,
    pub gamma: Option<f64>,
}

pub fn sample_intensity<R: Rng + ?Sized>(config: &AugmentConfig, rng: &mut R) -> IntensityParams {
    IntensityParams {
        noise_variance: config.additive_noise.draw(rng),
        blur_sigma: config.gaussian_blur.draw(rng),
        brightness: config.brightness.draw(rng),
        contrast: config.contrast.draw(rng),
        lowres_factor: config.lowres.draw(rng),
        gamma: config.gamma.draw(rng),
    }
}

/// Applies drawn intensity parameters. `rng` only feeds the additive noise.
pub fn apply_intensity_params<R: Rng + ?Sized>(volume: &Volume, params: &IntensityParams, rng: &mut R) -> Volume {
    let [d, h, w] = volume.shape();
    let mut data = volume.data().to_vec();
    if let Some(var) = params.noise_variance {
        let std = var.sqrt() as f32;
        for v in &mut data {
            let n: f32 = StandardNormal.sample(rng);
            *v += std * n;
        }
    }
    if let Some(sigma) = params.blur_sigma {
        for plane in data.chunks_mut(h * w) {
            gaussian_filter(plane, h, w, sigma);
        }
    }
    if let Some(b) = params.brightness {
        let b = b as f32;
        data.iter_mut().for_each(|v| *v += b);
    }
    if let Some(s) = params.contrast {
        let mean = (data.iter().map(|&v| f64::from(v)).sum::<f64>() / data.len() as f64) as f32;
        let s = s as f32;
        data.iter_mut().for_each(|v| *v = (*v - mean) * s + mean);
    }
    if let Some(f) = params.lowres_factor {
        let nh = ((h as f64 / f).round() as usize).max(1);
        let nw = ((w as f64 / f).round() as usize).max(1);
        if nh != h || nw != w {
            for plane in data.chunks_mut(h * w) {
                let small = resize_bilinear(plane, h, w, nh, nw);
                plane.copy_from_slice(&resize_bilinear(&small, nh, nw, h, w));
            }
        }
    }
    if let Some(g) = params.gamma {
        apply_gamma(&mut data, g);
    }
    debug_assert_eq!(data.len(), d * h * w);
    volume.with_data(volume.shape(), data)
}

/// `v -> min + (max - min) * ((v - min) / (max - min))^gamma`.
pub fn apply_gamma(data: &mut [f32], gamma: f64) {
    let (lo, hi) = data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return;
    }
    for v in data.iter_mut() {
        let u = f64::from((*v - lo) / range);
        *v = lo + range * u.powf(gamma) as f32;
    }
}

pub fn apply_intensity<R: Rng + ?Sized>(volume: &Volume, config: &AugmentConfig, rng: &mut R) -> Volume {
    let params = sample_intensity(config, rng);
    apply_intensity_params(volume, &params, rng)
}

/// In-plane displacement field `(dy, dx)` per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct ElasticField {
    pub dy: Vec<f32>,
    pub dx: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeometricParams {
    /// Shift `(dy, dx)` in voxels; content moves by this amount.
    pub translation: Option<[f64; 2]>,
    /// Zoom about the slice centre (> 1 enlarges).
    pub scale: Option<f64>,
    pub elastic: Option<ElasticField>,
    pub flip_y: bool,
    pub flip_x: bool,
}

pub fn sample_geometric<R: Rng + ?Sized>(config: &AugmentConfig, h: usize, w: usize, rng: &mut R) -> GeometricParams {
    let translation = config.translation.draw(rng).map(|_| {
        [
            config.translation.range.sample(rng) * h as f64,
            config.translation.range.sample(rng) * w as f64,
        ]
    });
    let scale = config.scaling.draw(rng);
    let elastic = (rng.random::<f64>() < config.elastic_p).then(|| {
        let alpha = config.elastic_alpha.sample(rng) as f32;
        let sigma = config.elastic_sigma.sample(rng);
        let field = |rng: &mut R| {
            let mut f: Vec<f32> = (0..h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            gaussian_filter(&mut f, h, w, sigma);
            f.iter_mut().for_each(|v| *v *= alpha);
            f
        };
        let dy = field(rng);
        let dx = field(rng);
        ElasticField { dy, dx }
    });
    GeometricParams {
        translation,
        scale,
        elastic,
        flip_y: rng.random::<f64>() < config.flip_p,
        flip_x: rng.random::<f64>() < config.flip_p,
    }
}

/// Source coordinate for every output pixel, or `None` when the spatial map is the identity.
fn source_coords(params: &GeometricParams, h: usize, w: usize) -> Option<Vec<(f64, f64)>> {
    if params.translation.is_none() && params.scale.is_none() && params.elastic.is_none() {
        return None;
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let [ty, tx] = params.translation.unwrap_or([0.0, 0.0]);
    let s = params.scale.unwrap_or(1.0);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut sy = cy + (y as f64 - cy) / s - ty;
            let mut sx = cx + (x as f64 - cx) / s - tx;
            if let Some(e) = &params.elastic {
                sy += f64::from(e.dy[y * w + x]);
                sx += f64::from(e.dx[y * w + x]);
            }
            out.push((sy, sx));
        }
    }
    Some(out)
}

fn flip_plane<T: Copy>(plane: &mut [T], h: usize, w: usize, flip_y: bool, flip_x: bool) {
    if flip_y {
        for y in 0..h / 2 {
            for x in 0..w {
                plane.swap(y * w + x, (h - 1 - y) * w + x);
            }
        }
    }
    if flip_x {
        for row in plane.chunks_mut(w) {
            row.reverse();
        }
    }
}

/// Applies one spatial transform to image and mask; the mask is resampled
/// with nearest neighbour and out-of-domain voxels become 0 / background.
pub fn apply_geometric_params(
    volume: &Volume,
    mask: Option<&LabelMask>,
    params: &GeometricParams,
) -> Result<(Volume, Option<LabelMask>)> {
    let [d, h, w] = volume.shape();
    if let Some(m) = mask {
        if m.shape() != volume.shape() {
            return Err(Error::Shape(format!("mask {:?} vs image {:?}", m.shape(), volume.shape())));
        }
    }
    let coords = source_coords(params, h, w);
    let n = h * w;
    let mut img = Vec::with_capacity(d * n);
    let mut lab = mask.map(|_| Vec::with_capacity(d * n));
    for z in 0..d {
        let plane = volume.slice(z);
        let mut out_img: Vec<f32> = match &coords {
            None => plane.to_vec(),
            Some(c) => c.iter().map(|&(sy, sx)| sample_bilinear(plane, h, w, sy, sx)).collect(),
        };
        flip_plane(&mut out_img, h, w, params.flip_y, params.flip_x);
        img.extend_from_slice(&out_img);
        if let (Some(m), Some(lab)) = (mask, lab.as_mut()) {
            let lp = m.slice(z);
            let mut out_lab: Vec<u8> = match &coords {
                None => lp.to_vec(),
                Some(c) => c.iter().map(|&(sy, sx)| sample_nearest(lp, h, w, sy, sx)).collect(),
            };
            flip_plane(&mut out_lab, h, w, params.flip_y, params.flip_x);
            lab.extend_from_slice(&out_lab);
        }
    }
    let vol = volume.with_data(volume.shape(), img);
    let mask = match (mask, lab) {
        (Some(m), Some(l)) => Some(m.with_labels(m.shape(), l)),
        _ => None,
    };
    Ok((vol, mask))
}

pub fn apply_geometric<R: Rng + ?Sized>(
    volume: &Volume,
    mask: Option<&LabelMask>,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<(Volume, Option<LabelMask>)> {
    let [_, h, w] = volume.shape();
    let params = sample_geometric(config, h, w, rng);
    apply_geometric_params(volume, mask, &params)
}

/// Geometric then intensity augmentation of one training sample.
pub fn augment_sample<R: Rng + ?Sized>(
    volume: &Volume,
    mask: Option<&LabelMask>,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<(Volume, Option<LabelMask>)> {
    let (v, m) = apply_geometric(volume, mask, config, rng)?;
    Ok((apply_intensity(&v, config, rng), m))
}

fn sample_bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    if !(y > -1e-9 && x > -1e-9 && y < h as f64 - 1.0 + 1e-9 && x < w as f64 - 1.0 + 1e-9) {
        return 0.0;
    }
    let y = y.clamp(0.0, h as f64 - 1.0);
    let x = x.clamp(0.0, w as f64 - 1.0);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

fn sample_nearest(plane: &[u8], h: usize, w: usize, y: f64, x: f64) -> u8 {
    let (ry, rx) = (y.round(), x.round());
    if ry < 0.0 || rx < 0.0 || ry >= h as f64 || rx >= w as f64 {
        return BACKGROUND;
    }
    plane[ry as usize * w + rx as usize]
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(plane: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let mut out = Vec::with_capacity(nh * nw);
    for oy in 0..nh {
        let (y0, y1, fy) = coord(oy, h, nh);
        for ox in 0..nw {
            let (x0, x1, fx) = coord(ox, w, nw);
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Separable Gaussian smoothing of one plane, edge-replicating.
pub fn gaussian_filter(plane: &mut [f32], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let norm: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += kv * plane[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            plane[y * w + x] = acc;
        }
    }
}
