//! Perturbation of 2D-predicted scar/MVO masks during cascade training.
//!
//! Each operator imitates an error a slice-wise network makes for lack of
//! inter-slice context: dropping a class on one slice, dropping the whole
//! mask, hallucinating scar from bright myocardium, or hallucinating MVO
//! inside predicted scar. At most one operator is applied per sample, and
//! the operators touch only the auxiliary mask channels, never the image or
//! the ground truth.

mod components;

pub use components::{connected_components_2d, percentile_nearest_rank, Components, Connectivity};

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassScheme, LabelMask, Shape3, Volume, MVO, MYOCARDIUM, SCAR};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbClass {
    Scar,
    Mvo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub p_delete_class: f64,
    pub p_zero_mask: f64,
    pub p_fake_scar: f64,
    pub p_fake_mvo: f64,
    /// Probability of the elevated-augmentation branch. It is exclusive with the
    /// mask operators and is realised by the cascade trainer, not here.
    pub p_elevated_augmentation: f64,
    pub scar_percentile: f64,
    /// Inclusive `[min, max]` number of neighbours grown around a fake MVO seed.
    pub mvo_neighbor_count: [usize; 2],
    pub enable_after_epoch: usize,
    pub active_classes: Vec<PerturbClass>,
    /// Slices with fewer ground-truth myocardium voxels are not used for fake scar.
    pub min_myocardium_voxels: usize,
    pub fake_scar_attempts: usize,
}

impl PerturbationConfig {
    pub fn emidec() -> Self {
        PerturbationConfig {
            p_delete_class: 0.10,
            p_zero_mask: 0.10,
            p_fake_scar: 0.10,
            p_fake_mvo: 0.02,
            p_elevated_augmentation: 0.10,
            scar_percentile: 85.0,
            mvo_neighbor_count: [1, 8],
            enable_after_epoch: 100,
            active_classes: vec![PerturbClass::Scar, PerturbClass::Mvo],
            min_myocardium_voxels: 16,
            fake_scar_attempts: 5,
        }
    }

    pub fn myops() -> Self {
        PerturbationConfig {
            p_fake_mvo: 0.0,
            active_classes: vec![PerturbClass::Scar],
            ..Self::emidec()
        }
    }

    pub fn for_scheme(scheme: ClassScheme) -> Self {
        match scheme {
            ClassScheme::Emidec => Self::emidec(),
            ClassScheme::Myops => Self::myops(),
        }
    }

    pub fn mask_operator_probability(&self) -> f64 {
        self.p_delete_class + self.p_zero_mask + self.p_fake_scar + self.p_fake_mvo
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [
            self.p_delete_class,
            self.p_zero_mask,
            self.p_fake_scar,
            self.p_fake_mvo,
            self.p_elevated_augmentation,
        ];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("perturbation probabilities must lie in [0, 1]".into()));
        }
        if ps.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "perturbation probabilities sum to {} > 1",
                ps.iter().sum::<f64>()
            )));
        }
        if !(self.scar_percentile > 0.0 && self.scar_percentile < 100.0) {
            return Err(Error::Config("scar_percentile must lie in (0, 100)".into()));
        }
        let [lo, hi] = self.mvo_neighbor_count;
        if lo > hi {
            return Err(Error::Config("mvo_neighbor_count must satisfy min <= max".into()));
        }
        if self.active_classes.is_empty() {
            return Err(Error::Config("at least one perturbation class must be active".into()));
        }
        if self.p_fake_mvo > 0.0 && !self.active_classes.contains(&PerturbClass::Mvo) {
            return Err(Error::Config("p_fake_mvo > 0 requires MVO among active classes".into()));
        }
        Ok(())
    }

    /// Checks the profile against a label scheme (MyoPS has no MVO).
    pub fn validate_for(&self, scheme: ClassScheme) -> Result<()> {
        self.validate()?;
        if !scheme.has_mvo() && (self.active_classes != [PerturbClass::Scar] || self.p_fake_mvo != 0.0) {
            return Err(Error::Config(
                "MyoPS perturbation must act on scar only with p_fake_mvo = 0".into(),
            ));
        }
        Ok(())
    }
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self::emidec()
    }
}

/// Binary scar (and optionally MVO) channels of a 2D-predicted stack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuxMasks {
    shape: Shape3,
    scar: Vec<u8>,
    mvo: Option<Vec<u8>>,
}

impl AuxMasks {
    pub fn new(shape: Shape3, scar: Vec<u8>, mvo: Option<Vec<u8>>) -> Result<Self> {
        let n = shape.iter().product::<usize>();
        let binary = |c: &[u8]| c.len() == n && c.iter().all(|&v| v <= 1);
        if !binary(&scar) || !mvo.as_deref().is_none_or(binary) {
            return Err(Error::Shape(format!("aux channels must be binary grids of shape {shape:?}")));
        }
        Ok(AuxMasks { shape, scar, mvo })
    }

    /// Scar/MVO indicator channels of a hard label grid.
    pub fn from_labels(labels: &[u8], shape: Shape3, scheme: ClassScheme) -> Self {
        let scar = labels.iter().map(|&l| u8::from(l == SCAR)).collect();
        let mvo = scheme
            .has_mvo()
            .then(|| labels.iter().map(|&l| u8::from(l == MVO)).collect());
        AuxMasks { shape, scar, mvo }
    }

    pub fn from_mask(mask: &LabelMask) -> Self {
        Self::from_labels(mask.labels(), mask.shape(), mask.scheme())
    }

    pub fn zeros(shape: Shape3, with_mvo: bool) -> Self {
        let n = shape.iter().product();
        AuxMasks {
            shape,
            scar: vec![0; n],
            mvo: with_mvo.then(|| vec![0; n]),
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn scar(&self) -> &[u8] {
        &self.scar
    }

    pub fn mvo(&self) -> Option<&[u8]> {
        self.mvo.as_deref()
    }

    pub fn num_channels(&self) -> usize {
        1 + usize::from(self.mvo.is_some())
    }

    /// Channels as network input, `[channel][voxel]`.
    pub fn channels(&self) -> Vec<Vec<f32>> {
        std::iter::once(&self.scar)
            .chain(self.mvo.as_ref())
            .map(|c| c.iter().map(|&v| f32::from(v)).collect())
            .collect()
    }

    fn plane(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    fn channel(&self, class: PerturbClass) -> Option<&[u8]> {
        match class {
            PerturbClass::Scar => Some(&self.scar),
            PerturbClass::Mvo => self.mvo.as_deref(),
        }
    }

    fn channel_mut(&mut self, class: PerturbClass) -> Option<&mut Vec<u8>> {
        match class {
            PerturbClass::Scar => Some(&mut self.scar),
            PerturbClass::Mvo => self.mvo.as_mut(),
        }
    }

    pub fn count(&self, class: PerturbClass) -> usize {
        self.channel(class).map_or(0, |c| c.iter().filter(|&&v| v == 1).count())
    }

    pub fn count_in_slice(&self, class: PerturbClass, z: usize) -> usize {
        let n = self.plane();
        self.channel(class)
            .map_or(0, |c| c[z * n..(z + 1) * n].iter().filter(|&&v| v == 1).count())
    }

    /// Slices that differ between two stacks of equal shape.
    pub fn changed_slices(&self, other: &AuxMasks) -> Vec<usize> {
        let n = self.plane();
        (0..self.shape[0])
            .filter(|&z| {
                let r = z * n..(z + 1) * n;
                self.scar[r.clone()] != other.scar[r.clone()]
                    || match (&self.mvo, &other.mvo) {
                        (Some(a), Some(b)) => a[r.clone()] != b[r],
                        _ => false,
                    }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationOperator {
    None,
    DeleteClass,
    ZeroMask,
    FakeScar,
    FakeMvo,
}

impl PerturbationOperator {
    pub const ALL: [PerturbationOperator; 5] = [
        PerturbationOperator::DeleteClass,
        PerturbationOperator::ZeroMask,
        PerturbationOperator::FakeScar,
        PerturbationOperator::FakeMvo,
        PerturbationOperator::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationOperator::None => "none",
            PerturbationOperator::DeleteClass => "delete_class",
            PerturbationOperator::ZeroMask => "zero_mask",
            PerturbationOperator::FakeScar => "fake_scar",
            PerturbationOperator::FakeMvo => "fake_mvo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub operator: PerturbationOperator,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slice_index: Option<usize>,
    pub affected_classes: Vec<PerturbClass>,
    pub affected_voxels: usize,
}

impl PerturbationRecord {
    pub fn none() -> Self {
        Self::noop(PerturbationOperator::None)
    }

    /// An operator that was drawn but had nothing to act on.
    pub fn noop(operator: PerturbationOperator) -> Self {
        PerturbationRecord {
            operator,
            slice_index: None,
            affected_classes: Vec::new(),
            affected_voxels: 0,
        }
    }
}

/// Which classes a deletion removes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeleteTarget {
    Scar,
    Mvo,
    Both,
}

impl DeleteTarget {
    fn classes(self) -> &'static [PerturbClass] {
        match self {
            DeleteTarget::Scar => &[PerturbClass::Scar],
            DeleteTarget::Mvo => &[PerturbClass::Mvo],
            DeleteTarget::Both => &[PerturbClass::Scar, PerturbClass::Mvo],
        }
    }
}

/// Uniform choice among the deletion targets whose classes are active and
/// present in the stack; `Both` only when both classes are present.
pub fn choose_delete_target<R: Rng + ?Sized>(
    stack: &AuxMasks,
    active: &[PerturbClass],
    rng: &mut R,
) -> Option<DeleteTarget> {
    let has = |c: PerturbClass| active.contains(&c) && stack.count(c) > 0;
    let mut options = Vec::with_capacity(3);
    if has(PerturbClass::Scar) {
        options.push(DeleteTarget::Scar);
    }
    if has(PerturbClass::Mvo) {
        options.push(DeleteTarget::Mvo);
    }
    if options.len() == 2 {
        options.push(DeleteTarget::Both);
    }
    options.choose(rng).copied()
}

/// Clears the target classes on slice `z`.
pub fn delete_class_in_slice(stack: &mut AuxMasks, target: DeleteTarget, z: usize) -> PerturbationRecord {
    let n = stack.plane();
    let mut affected = 0;
    let mut classes = Vec::new();
    for &class in target.classes() {
        if let Some(ch) = stack.channel_mut(class) {
            let removed = ch[z * n..(z + 1) * n].iter().filter(|&&v| v == 1).count();
            ch[z * n..(z + 1) * n].iter_mut().for_each(|v| *v = 0);
            affected += removed;
            classes.push(class);
        }
    }
    PerturbationRecord {
        operator: PerturbationOperator::DeleteClass,
        slice_index: Some(z),
        affected_classes: classes,
        affected_voxels: affected,
    }
}

/// Deletes the target classes on one slice drawn uniformly among the slices
/// that contain any of them. Absent classes make this a recorded no-op.
pub fn delete_class_slices<R: Rng + ?Sized>(
    stack: &mut AuxMasks,
    target: DeleteTarget,
    rng: &mut R,
) -> PerturbationRecord {
    let candidates: Vec<usize> = (0..stack.shape[0])
        .filter(|&z| target.classes().iter().any(|&c| stack.count_in_slice(c, z) > 0))
        .collect();
    match candidates.choose(rng) {
        Some(&z) => delete_class_in_slice(stack, target, z),
        None => PerturbationRecord {
            affected_classes: target.classes().to_vec(),
            ..PerturbationRecord::noop(PerturbationOperator::DeleteClass)
        },
    }
}

/// Sets every auxiliary channel to zero.
pub fn zero_mask(stack: &mut AuxMasks) -> PerturbationRecord {
    let affected = stack.count(PerturbClass::Scar) + stack.count(PerturbClass::Mvo);
    stack.scar.iter_mut().for_each(|v| *v = 0);
    if let Some(m) = stack.mvo.as_mut() {
        m.iter_mut().for_each(|v| *v = 0);
    }
    PerturbationRecord {
        operator: PerturbationOperator::ZeroMask,
        slice_index: None,
        affected_classes: if stack.mvo.is_some() {
            vec![PerturbClass::Scar, PerturbClass::Mvo]
        } else {
            vec![PerturbClass::Scar]
        },
        affected_voxels: affected,
    }
}

/// Voxels of slice `z` that a fake scar would occupy: the largest 8-connected
/// component of ground-truth myocardium brighter than the nearest-rank
/// `percentile` of that myocardium's intensities. Plane-local indices.
pub fn fake_scar_region(volume: &Volume, gt: &LabelMask, z: usize, percentile: f64) -> Result<Vec<usize>> {
    if volume.shape() != gt.shape() {
        return Err(Error::Shape(format!("image {:?} vs mask {:?}", volume.shape(), gt.shape())));
    }
    let [_, h, w] = volume.shape();
    let img = volume.slice(z);
    let lab = gt.slice(z);
    let myo: Vec<f32> = (0..h * w).filter(|&i| lab[i] == MYOCARDIUM).map(|i| img[i]).collect();
    if myo.is_empty() {
        return Ok(Vec::new());
    }
    let threshold = percentile_nearest_rank(&myo, percentile)?;
    let binary: Vec<bool> = (0..h * w).map(|i| lab[i] == MYOCARDIUM && img[i] > threshold).collect();
    let comps = connected_components_2d(&binary, h, w, Connectivity::Eight);
    Ok(comps.largest().map(|id| comps.members(id)).unwrap_or_default())
}

/// Adds the fake-scar region of slice `z` to the scar channel.
pub fn add_fake_scar_in_slice(
    stack: &mut AuxMasks,
    volume: &Volume,
    gt: &LabelMask,
    z: usize,
    percentile: f64,
) -> Result<PerturbationRecord> {
    if stack.shape != volume.shape() {
        return Err(Error::Shape(format!("aux {:?} vs image {:?}", stack.shape, volume.shape())));
    }
    let region = fake_scar_region(volume, gt, z, percentile)?;
    if region.is_empty() {
        return Ok(PerturbationRecord {
            slice_index: Some(z),
            ..PerturbationRecord::noop(PerturbationOperator::FakeScar)
        });
    }
    let off = z * stack.plane();
    for &i in &region {
        stack.scar[off + i] = 1;
        if let Some(m) = stack.mvo.as_mut() {
            m[off + i] = 0;
        }
    }
    Ok(PerturbationRecord {
        operator: PerturbationOperator::FakeScar,
        slice_index: Some(z),
        affected_classes: vec![PerturbClass::Scar],
        affected_voxels: region.len(),
    })
}

/// Fake scar on a random slice with enough ground-truth myocardium; retried
/// up to `fake_scar_attempts` times when the thresholded region is empty.
pub fn add_fake_scar<R: Rng + ?Sized>(
    stack: &mut AuxMasks,
    volume: &Volume,
    gt: &LabelMask,
    config: &PerturbationConfig,
    rng: &mut R,
) -> Result<PerturbationRecord> {
    let candidates: Vec<usize> = (0..gt.shape()[0])
        .filter(|&z| gt.slice(z).iter().filter(|&&l| l == MYOCARDIUM).count() >= config.min_myocardium_voxels)
        .collect();
    for _ in 0..config.fake_scar_attempts {
        let Some(&z) = candidates.choose(rng) else { break };
        let record = add_fake_scar_in_slice(stack, volume, gt, z, config.scar_percentile)?;
        if record.affected_voxels > 0 {
            return Ok(record);
        }
    }
    Ok(PerturbationRecord::noop(PerturbationOperator::FakeScar))
}

/// Relabels a random predicted-scar voxel and a few scar neighbours (grown
/// through the in-plane 8-neighbourhood) as MVO.
pub fn add_fake_mvo<R: Rng + ?Sized>(stack: &mut AuxMasks, config: &PerturbationConfig, rng: &mut R) -> PerturbationRecord {
    if stack.mvo.is_none() {
        return PerturbationRecord::noop(PerturbationOperator::FakeMvo);
    }
    let scar_voxels: Vec<usize> = (0..stack.scar.len()).filter(|&i| stack.scar[i] == 1).collect();
    let Some(&seed) = scar_voxels.choose(rng) else {
        return PerturbationRecord::noop(PerturbationOperator::FakeMvo);
    };
    let [lo, hi] = config.mvo_neighbor_count;
    let extra = rng.random_range(lo..=hi);
    let [_, h, w] = stack.shape;
    let n = h * w;
    let z = seed / n;

    let mut selected = vec![seed];
    let mut frontier: Vec<usize> = Vec::new();
    let push_neighbours = |v: usize, selected: &[usize], frontier: &mut Vec<usize>, scar: &[u8]| {
        let (y, x) = ((v % n) / w, v % w);
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if (dy, dx) == (0, 0) || ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let u = z * n + ny as usize * w + nx as usize;
                if scar[u] == 1 && !selected.contains(&u) && !frontier.contains(&u) {
                    frontier.push(u);
                }
            }
        }
    };
    push_neighbours(seed, &selected, &mut frontier, &stack.scar);
    while selected.len() < 1 + extra && !frontier.is_empty() {
        let v = frontier.swap_remove(rng.random_range(0..frontier.len()));
        selected.push(v);
        push_neighbours(v, &selected, &mut frontier, &stack.scar);
    }
    let mvo = stack.mvo.as_mut().expect("checked above");
    for &v in &selected {
        stack.scar[v] = 0;
        mvo[v] = 1;
    }
    PerturbationRecord {
        operator: PerturbationOperator::FakeMvo,
        slice_index: Some(z),
        affected_classes: vec![PerturbClass::Mvo],
        affected_voxels: selected.len(),
    }
}

/// Draws at most one mask operator; always `None` before `enable_after_epoch`.
pub fn draw_operator<R: Rng + ?Sized>(config: &PerturbationConfig, epoch: usize, rng: &mut R) -> PerturbationOperator {
    // The draw is consumed even when gated so random streams do not shift with the gate.
    let u: f64 = rng.random();
    if epoch < config.enable_after_epoch {
        return PerturbationOperator::None;
    }
    let mut acc = 0.0;
    for (op, p) in [
        (PerturbationOperator::DeleteClass, config.p_delete_class),
        (PerturbationOperator::ZeroMask, config.p_zero_mask),
        (PerturbationOperator::FakeScar, config.p_fake_scar),
        (PerturbationOperator::FakeMvo, config.p_fake_mvo),
    ] {
        acc += p;
        if u < acc {
            return op;
        }
    }
    PerturbationOperator::None
}

/// Applies a drawn operator to the 2D-predicted channels of one sample.
pub fn apply_operator<R: Rng + ?Sized>(
    operator: PerturbationOperator,
    stack: &mut AuxMasks,
    volume: &Volume,
    gt: &LabelMask,
    config: &PerturbationConfig,
    rng: &mut R,
) -> Result<PerturbationRecord> {
    match operator {
        PerturbationOperator::None => Ok(PerturbationRecord::none()),
        PerturbationOperator::DeleteClass => Ok(match choose_delete_target(stack, &config.active_classes, rng) {
            Some(t) => delete_class_slices(stack, t, rng),
            None => PerturbationRecord::noop(PerturbationOperator::DeleteClass),
        }),
        PerturbationOperator::ZeroMask => Ok(zero_mask(stack)),
        PerturbationOperator::FakeScar => {
            if config.active_classes.contains(&PerturbClass::Scar) {
                add_fake_scar(stack, volume, gt, config, rng)
            } else {
                Ok(PerturbationRecord::noop(operator))
            }
        }
        PerturbationOperator::FakeMvo => {
            if config.active_classes.contains(&PerturbClass::Mvo) {
                Ok(add_fake_mvo(stack, config, rng))
            } else {
                Ok(PerturbationRecord::noop(operator))
            }
        }
    }
}

/// Draws and applies at most one perturbation to a training sample.
pub fn sample_perturbation<R: Rng + ?Sized>(
    stack: &mut AuxMasks,
    volume: &Volume,
    gt: &LabelMask,
    config: &PerturbationConfig,
    epoch: usize,
    rng: &mut R,
) -> Result<PerturbationRecord> {
    config.validate()?;
    let op = draw_operator(config, epoch, rng);
    apply_operator(op, stack, volume, gt, config, rng)
}

/// Per-operator tallies, keyed by operator name.
pub fn count_operators<'a>(records: impl IntoIterator<Item = &'a PerturbationOperator>) -> BTreeMap<String, usize> {
    let mut out: BTreeMap<String, usize> = PerturbationOperator::ALL
        .iter()
        .map(|op| (op.name().to_string(), 0))
        .collect();
    for op in records {
        *out.entry(op.name().to_string()).or_default() += 1;
    }
    out
}
