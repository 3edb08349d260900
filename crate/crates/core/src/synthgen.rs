//! Synthetic LGE-like phantoms: a blood-pool disc inside a myocardial
//! annulus, with a subendocardial scar arc spanning contiguous slices and an
//! optional hypointense MVO core.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    write_raw_case, ClassScheme, DatasetManifest, LabelMask, Shape3, Spacing, Volume, BACKGROUND, BLOOD_POOL, MVO,
    MYOCARDIUM, SCAR,
};
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityModel {
    pub background: f64,
    pub blood: f64,
    pub myocardium: f64,
    pub scar: f64,
    pub mvo: f64,
    pub noise_sigma: f64,
}

impl Default for IntensityModel {
    fn default() -> Self {
        IntensityModel {
            background: 0.35,
            blood: 0.85,
            myocardium: 0.2,
            scar: 0.95,
            mvo: 0.3,
            noise_sigma: 0.08,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub count: usize,
    pub shape: Shape3,
    pub spacing: [f64; 3],
    pub fraction_healthy: f64,
    /// Blood-pool radius range in voxels at the basal slice.
    pub blood_radius: [f64; 2],
    /// Myocardial wall thickness range in voxels.
    pub wall_thickness: [f64; 2],
    /// Relative radius reduction from the first to the last slice.
    pub apical_taper: f64,
    /// Maximum offset of the LV centre from the image centre, in voxels.
    pub center_jitter: f64,
    /// Angular extent range of the scar arc, in degrees.
    pub scar_arc_degrees: [f64; 2],
    /// Fraction of the wall thickness covered by scar, from the endocardium.
    pub scar_transmurality: [f64; 2],
    /// Inclusive range of contiguous scarred slices.
    pub scar_slices: [usize; 2],
    /// Per-slice drift of the arc centre, in degrees.
    pub scar_drift_degrees: f64,
    pub mvo_probability: f64,
    /// MVO blob radius range in voxels.
    pub mvo_radius: [f64; 2],
    pub intensity: IntensityModel,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            count: 40,
            shape: [7, 96, 96],
            spacing: [10.0, 1.458, 1.458],
            fraction_healthy: 1.0 / 3.0,
            blood_radius: [8.0, 12.0],
            wall_thickness: [5.0, 8.0],
            apical_taper: 0.3,
            center_jitter: 4.0,
            scar_arc_degrees: [60.0, 140.0],
            scar_transmurality: [0.5, 1.0],
            scar_slices: [2, 5],
            scar_drift_degrees: 12.0,
            mvo_probability: 0.5,
            mvo_radius: [1.5, 2.5],
            intensity: IntensityModel::default(),
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn num_healthy(&self) -> usize {
        (self.count as f64 * self.fraction_healthy).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("phantom: {m}")));
        let [d, h, w] = self.shape;
        if self.count == 0 || d == 0 {
            return bad("count and depth must be positive");
        }
        if !(0.0..=1.0).contains(&self.fraction_healthy) {
            return bad("fraction_healthy must lie in [0, 1]");
        }
        for (name, r) in [
            ("blood_radius", self.blood_radius),
            ("wall_thickness", self.wall_thickness),
            ("scar_arc_degrees", self.scar_arc_degrees),
            ("scar_transmurality", self.scar_transmurality),
            ("mvo_radius", self.mvo_radius),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return bad(&format!("{name} must be a positive increasing range"));
            }
        }
        if self.scar_transmurality[1] > 1.0 || self.scar_arc_degrees[1] > 360.0 {
            return bad("transmurality must be at most 1 and arcs at most 360 degrees");
        }
        let [lo, hi] = self.scar_slices;
        if lo < 2 || lo > hi {
            return bad("scar must span at least 2 slices");
        }
        if hi > d {
            return bad("scar slice span exceeds the depth");
        }
        let outer = self.blood_radius[1] + self.wall_thickness[1] + self.center_jitter + 2.0;
        if 2.0 * outer > h.min(w) as f64 {
            return bad("annulus does not fit the in-plane extent");
        }
        if !(0.0..1.0).contains(&self.apical_taper) || !(0.0..=1.0).contains(&self.mvo_probability) {
            return bad("apical_taper must lie in [0, 1) and mvo_probability in [0, 1]");
        }
        if !(self.intensity.noise_sigma >= 0.0) {
            return bad("noise sigma must be non-negative");
        }
        Spacing(self.spacing).validate()
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: Volume,
    pub mask: LabelMask,
    pub lv_center: [usize; 2],
    pub healthy: bool,
    /// Exact in-plane LV centre in voxel coordinates.
    pub center: [f64; 2],
    /// Endocardial and epicardial radius of every slice, in voxels.
    pub radii: Vec<[f64; 2]>,
}

fn case_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    if d > PI {
        2.0 * PI - d
    } else {
        d
    }
}

fn uniform<R: Rng + ?Sized>(r: [f64; 2], rng: &mut R) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn make_phantom(cfg: &PhantomConfig, index: usize, healthy: bool) -> Result<Phantom> {
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed(cfg.seed, index));
    let [d, h, w] = cfg.shape;
    let cy = h as f64 / 2.0 + rng.random_range(-cfg.center_jitter..=cfg.center_jitter);
    let cx = w as f64 / 2.0 + rng.random_range(-cfg.center_jitter..=cfg.center_jitter);
    let rb0 = uniform(cfg.blood_radius, &mut rng);
    let thick = uniform(cfg.wall_thickness, &mut rng);
    let radius_at = |z: usize| {
        let t = if d > 1 { z as f64 / (d - 1) as f64 } else { 0.0 };
        rb0 * (1.0 - cfg.apical_taper * t)
    };

    struct Arc {
        center: f64,
        half: f64,
        depth: f64,
    }
    let mut arcs: Vec<Option<Arc>> = (0..d).map(|_| None).collect();
    if !healthy {
        let span = rng.random_range(cfg.scar_slices[0]..=cfg.scar_slices[1]);
        let z0 = rng.random_range(0..=d - span);
        let theta0 = rng.random_range(0.0..2.0 * PI);
        let extent = uniform(cfg.scar_arc_degrees, &mut rng).to_radians();
        let trans = uniform(cfg.scar_transmurality, &mut rng);
        let drift = rng.random_range(-1.0..=1.0) * cfg.scar_drift_degrees.to_radians();
        let phase = rng.random_range(0.0..2.0 * PI);
        for (k, arc) in arcs.iter_mut().enumerate().skip(z0).take(span) {
            let i = (k - z0) as f64;
            let wobble = 0.85 + 0.15 * (phase + i).sin();
            *arc = Some(Arc {
                center: theta0 + drift * i,
                half: (extent * wobble / 2.0).max(0.35),
                depth: (trans * thick * (0.9 + 0.1 * (phase * 1.7 + i).cos())).max(2.0),
            });
        }
    }

    let mut labels = vec![BACKGROUND; d * h * w];
    for (z, arc) in arcs.iter().enumerate() {
        let rb = radius_at(z);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let r = (dy * dy + dx * dx).sqrt();
                let i = (z * h + y) * w + x;
                labels[i] = if r < rb {
                    BLOOD_POOL
                } else if r < rb + thick {
                    match arc {
                        Some(a) if r < rb + a.depth && angle_diff(dy.atan2(dx), a.center) <= a.half => SCAR,
                        _ => MYOCARDIUM,
                    }
                } else {
                    BACKGROUND
                };
            }
        }
    }

    if !healthy && rng.random_bool(cfg.mvo_probability) {
        let scarred: Vec<usize> = (0..d).filter(|&z| arcs[z].is_some()).collect();
        let n = if scarred.len() >= 2 && rng.random_bool(0.5) { 2 } else { 1 };
        let start = rng.random_range(0..=scarred.len() - n);
        let rho = uniform(cfg.mvo_radius, &mut rng);
        for &z in &scarred[start..start + n] {
            let a = arcs[z].as_ref().expect("scarred slice");
            let rm = radius_at(z) + a.depth / 2.0;
            let (my, mx) = (cy + rm * a.center.sin(), cx + rm * a.center.cos());
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    let (dy, dx) = (y as f64 + 0.5 - my, x as f64 + 0.5 - mx);
                    if labels[i] == SCAR && (dy * dy + dx * dx).sqrt() <= rho {
                        labels[i] = MVO;
                    }
                }
            }
        }
    }

    let im = &cfg.intensity;
    let means = [im.background, im.blood, im.myocardium, im.scar, im.mvo];
    let noise = Normal::new(0.0, im.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let data: Vec<f32> = labels
        .iter()
        .map(|&l| (means[l as usize] + noise.sample(&mut rng)) as f32)
        .collect();
    let spacing = Spacing(cfg.spacing);
    let id = format!("phantom_{index:03}");
    Ok(Phantom {
        volume: Volume::new(id, cfg.shape, spacing, data)?,
        mask: LabelMask::new(cfg.shape, spacing, ClassScheme::Emidec, labels)?,
        lv_center: [cy.floor() as usize, cx.floor() as usize],
        healthy,
        center: [cy, cx],
        radii: (0..d).map(|z| [radius_at(z), radius_at(z) + thick]).collect(),
    })
}

/// Generates `config.count` phantoms; the first `floor(count * fraction_healthy)`
/// indices after a seeded shuffle are healthy.
pub fn generate_phantoms(config: &PhantomConfig) -> Result<Vec<Phantom>> {
    config.validate()?;
    let mut order: Vec<usize> = (0..config.count).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(config.seed));
    let mut healthy = vec![false; config.count];
    for &i in &order[..config.num_healthy()] {
        healthy[i] = true;
    }
    par::map_range(config.count, |i| make_phantom(config, i, healthy[i]))
        .into_iter()
        .collect()
}

/// Writes phantoms in the raw format with a `manifest.json` under `dir`.
pub fn write_phantoms(dir: &Path, phantoms: &[Phantom]) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = phantoms
        .iter()
        .map(|p| write_raw_case(dir, &p.volume, Some(&p.mask), Some(p.lv_center)))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(ClassScheme::Emidec, entries)?;
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
