//! Dice loss with deep supervision, Nesterov SGD, and the planar and cascade
//! training loops.

mod loss;
mod optim;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::*;
pub use optim::*;

use crate::augment::{augment_sample, AugmentConfig};
use crate::data::{load_case, ClassScheme, DatasetManifest, LabelMask, Volume};
use crate::error::{Error, Result};
use crate::inference::{cascade_input, predict_2d_stack};
use crate::networks::{save_checkpoint, Network, NetworkKind, NetworkSpec, Tensor};
use crate::par;
use crate::perturbation::{apply_operator, draw_operator, count_operators, PerturbationConfig, PerturbationOperator};
use crate::preprocess::{gather_slices, prepare_case, resize_z_nearest, select_subvolume, PreparedCase, PreprocessConfig};

pub const ELEVATED_KEY: &str = "elevated_augmentation";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size_2d: usize,
    pub batch_size_3d: usize,
    /// Slices per planar forward pass; fixes the grouping so results do not
    /// depend on the thread count.
    pub micro_batch_2d: usize,
    pub momentum: f64,
    pub lr_2d: f64,
    pub lr_3d: f64,
    pub lr_schedule: LrSchedule,
    /// Per-output weights, main output first; halving weights when absent.
    pub deep_supervision_weights: Option<Vec<f64>>,
    pub dice_eps: f64,
    pub grad_clip_norm: Option<f64>,
    /// Write an intermediate checkpoint every this many epochs (0: final only).
    pub checkpoint_interval: usize,
    pub seed: u64,
    pub device: String,
    /// Print one line per epoch to stderr.
    pub progress: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 750,
            steps_per_epoch: 250,
            batch_size_2d: 32,
            batch_size_3d: 4,
            micro_batch_2d: 8,
            momentum: 0.99,
            lr_2d: 0.005,
            lr_3d: 0.01,
            lr_schedule: LrSchedule::default(),
            deep_supervision_weights: None,
            dice_eps: 1e-5,
            grad_clip_norm: Some(12.0),
            checkpoint_interval: 50,
            seed: 0,
            device: "cpu".into(),
            progress: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.lr_2d > 0.0 && self.lr_3d > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("epochs and steps_per_epoch must be at least 1".into()));
        }
        if self.batch_size_2d == 0 || self.batch_size_3d == 0 || self.micro_batch_2d == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.dice_eps >= 0.0) {
            return Err(Error::Config("dice_eps must be non-negative".into()));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip_norm must be positive".into()));
            }
        }
        if let Some(w) = &self.deep_supervision_weights {
            if w.is_empty() || w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config("deep supervision weights must be non-negative with positive sum".into()));
            }
        }
        if self.device != "cpu" {
            return Err(Error::Config(format!("unsupported device {:?}; only \"cpu\" is available", self.device)));
        }
        Ok(())
    }

    fn weights_for(&self, net: &Network) -> Result<Vec<f64>> {
        let n = net.num_outputs();
        match &self.deep_supervision_weights {
            Some(w) if w.len() == n => Ok(w.clone()),
            Some(w) => Err(Error::Config(format!("{} deep supervision weights for {n} outputs", w.len()))),
            None => Ok(deep_supervision_weights(n)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub perturbation_operator_counts: BTreeMap<String, usize>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub log: Vec<EpochRecord>,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Loads and preprocesses cases; every case must have a mask.
pub fn prepare_cases(manifest: &DatasetManifest, ids: &[String], config: &PreprocessConfig) -> Result<Vec<PreparedCase>> {
    config.validate()?;
    ids.iter()
        .map(|id| {
            let entry = manifest
                .entry(id)
                .ok_or_else(|| Error::Input(format!("case {id:?} not in manifest")))?;
            let (vol, mask) = load_case(entry, manifest.scheme)?;
            let mask = mask.ok_or_else(|| Error::Input(format!("training case {id:?} has no mask")))?;
            prepare_case(&vol, Some(&mask), entry.lv_center, config)
        })
        .collect()
}

struct RunLog {
    dir: Option<PathBuf>,
    file: Option<File>,
    progress: bool,
    tag: &'static str,
}

impl RunLog {
    fn open(dir: Option<&Path>, progress: bool, tag: &'static str) -> Result<Self> {
        let file = match dir {
            Some(d) => {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let p = d.join("train_log.jsonl");
                Some(
                    OpenOptions::new()
                        .create(true)
                        .write(true)
                        .truncate(true)
                        .open(&p)
                        .map_err(|e| Error::io(&p, e))?,
                )
            }
            None => None,
        };
        Ok(RunLog {
            dir: dir.map(Path::to_path_buf),
            file,
            progress,
            tag,
        })
    }

    fn record(&mut self, rec: &EpochRecord, net: &Network, interval: usize, last: bool) -> Result<()> {
        if self.progress {
            eprintln!("[{}] epoch {} loss {:.5} lr {:.6}", self.tag, rec.epoch, rec.mean_loss, rec.lr);
        }
        if let (Some(f), Some(d)) = (self.file.as_mut(), self.dir.as_ref()) {
            let line = serde_json::to_string(rec)?;
            writeln!(f, "{line}").map_err(|e| Error::io(d, e))?;
            if interval > 0 && (rec.epoch + 1) % interval == 0 && !last {
                save_checkpoint(net, &d.join(format!("checkpoint_epoch{:04}.ckpt", rec.epoch + 1)))?;
            }
        }
        Ok(())
    }

    fn finish(&self, net: &Network) -> Result<Option<PathBuf>> {
        match &self.dir {
            Some(d) => {
                let p = d.join("final.ckpt");
                save_checkpoint(net, &p)?;
                Ok(Some(p))
            }
            None => Ok(None),
        }
    }
}

struct Sample {
    input: Tensor,
    labels: Vec<u8>,
}

/// One optimisation step over groups of forward passes, each with its own
/// labels; returns the batch loss.
fn step(
    net: &mut Network,
    opt: &mut Sgd,
    groups: Vec<Sample>,
    weights: &[f64],
    cfg: &TrainConfig,
    lr: f64,
    epoch: usize,
    step_idx: usize,
) -> Result<f64> {
    let fw = {
        let n: &Network = net;
        par::map(&groups, |s| n.forward_train(&s.input))
    };
    let mut outputs = Vec::with_capacity(groups.len());
    let mut caches = Vec::with_capacity(groups.len());
    for r in fw {
        let (o, c) = r?;
        outputs.push(o);
        caches.push(c);
    }
    let labels: Vec<Vec<u8>> = groups.into_iter().map(|s| s.labels).collect();
    let (loss, d_out) = supervised_loss(&outputs, &labels, weights, &[0], cfg.dice_eps)?;
    drop(outputs);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch, step: step_idx });
    }
    let grads = {
        let n: &Network = net;
        let jobs: Vec<_> = caches.into_iter().zip(d_out).collect();
        par::map_owned(jobs, |(c, d)| n.backward(c, &d))
    };
    let mut total = net.params().zeros_like();
    for g in grads {
        let g = g?;
        total.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    if total.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss { epoch, step: step_idx });
    }
    if let Some(c) = cfg.grad_clip_norm {
        clip_grad_norm(&mut total, c);
    }
    opt.step(net.params_mut().data_mut(), &total, lr);
    Ok(loss)
}

fn check_output_channels(spec: &NetworkSpec, scheme: ClassScheme) -> Result<()> {
    if spec.out_channels != scheme.num_classes() {
        return Err(Error::Config(format!(
            "network has {} outputs but the {} scheme has {} classes",
            spec.out_channels,
            scheme.label(),
            scheme.num_classes()
        )));
    }
    Ok(())
}

/// Trains the slice-wise network on individual slices drawn uniformly from
/// all training volumes.
pub fn train_2d(
    cases: &[PreparedCase],
    scheme: ClassScheme,
    spec: &NetworkSpec,
    augment: &AugmentConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    augment.validate()?;
    if spec.kind != NetworkKind::Planar || spec.in_channels != 1 {
        return Err(Error::Config("the 2D stage needs a planar network with one input channel".into()));
    }
    check_output_channels(spec, scheme)?;
    let slices: Vec<(usize, usize)> = cases
        .iter()
        .enumerate()
        .flat_map(|(c, p)| (0..p.volume.depth()).map(move |z| (c, z)))
        .collect();
    if slices.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    for p in cases {
        if p.mask.is_none() {
            return Err(Error::Input(format!("training case {:?} has no mask", p.volume.case_id())));
        }
        spec.check_input([1, 1, p.volume.shape()[1], p.volume.shape()[2]])?;
    }
    let mut net = Network::new(spec.clone(), cfg.seed)?;
    let weights = cfg.weights_for(&net)?;
    let mut opt = Sgd::new(net.num_params(), cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x2d2d_2d2d);
    let mut log = RunLog::open(out_dir, cfg.progress, "2d")?;
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg.epochs, cfg.lr_2d, cfg.lr_schedule);
        let mut sum = 0.0;
        for s in 0..cfg.steps_per_epoch {
            let draws: Vec<((usize, usize), u64)> = (0..cfg.batch_size_2d)
                .map(|_| (slices[rng.random_range(0..slices.len())], rng.random()))
                .collect();
            let samples = par::map(&draws, |&((c, z), seed)| -> Result<Sample> {
                let case = &cases[c];
                let (v, m) = gather_slices(&case.volume, case.mask.as_ref(), &[z]);
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let (v, m) = augment_sample(&v, m.as_ref(), augment, &mut r)?;
                let m = m.expect("mask present");
                Ok(Sample {
                    input: Tensor::from_channels(v.shape(), &[v.data()])?,
                    labels: m.into_labels(),
                })
            });
            let samples: Vec<Sample> = samples.into_iter().collect::<Result<_>>()?;
            let groups = pack_planes(samples, cfg.micro_batch_2d)?;
            sum += step(&mut net, &mut opt, groups, &weights, cfg, lr, epoch, s)?;
        }
        let rec = EpochRecord {
            epoch,
            mean_loss: sum / cfg.steps_per_epoch as f64,
            lr,
            perturbation_operator_counts: BTreeMap::new(),
        };
        log.record(&rec, &net, cfg.checkpoint_interval, epoch + 1 == cfg.epochs)?;
        records.push(rec);
    }
    let checkpoint = log.finish(&net)?;
    Ok(TrainOutcome {
        network: net,
        log: records,
        checkpoint,
    })
}

fn pack_planes(samples: Vec<Sample>, group: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    let mut it = samples.into_iter().peekable();
    while it.peek().is_some() {
        let chunk: Vec<Sample> = it.by_ref().take(group).collect();
        let inputs: Vec<Tensor> = chunk.iter().map(|s| s.input.clone()).collect();
        let labels = chunk.into_iter().flat_map(|s| s.labels).collect();
        out.push(Sample {
            input: Tensor::stack_planes(&inputs)?,
            labels,
        });
    }
    Ok(out)
}

/// Settings of the cascade stage beyond [`TrainConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeSettings {
    pub depth: usize,
    pub augment: AugmentConfig,
    pub elevated: AugmentConfig,
    pub perturbation: PerturbationConfig,
    /// Pass the planar predictions through untouched.
    pub vanilla: bool,
}

impl CascadeSettings {
    pub fn new(scheme: ClassScheme, depth: usize) -> Self {
        CascadeSettings {
            depth,
            augment: AugmentConfig::standard(),
            elevated: AugmentConfig::elevated(),
            perturbation: PerturbationConfig::for_scheme(scheme),
            vanilla: false,
        }
    }
}

/// Fits a case to the training depth: a random contiguous window, or a
/// nearest-neighbour z-resize for shallow stacks.
fn training_window<R: Rng + ?Sized>(case: &PreparedCase, depth: usize, rng: &mut R) -> Result<(Volume, LabelMask)> {
    let mask = case.mask.as_ref();
    let (v, m) = if case.volume.depth() >= depth {
        let (v, m, _) = select_subvolume(&case.volume, mask, depth, rng)?;
        (v, m)
    } else {
        let (v, m, _) = resize_z_nearest(&case.volume, mask, depth)?;
        (v, m)
    };
    let m = m.ok_or_else(|| Error::Input(format!("training case {:?} has no mask", case.volume.case_id())))?;
    Ok((v, m))
}

/// Trains the volumetric network on image plus the frozen planar network's
/// (possibly perturbed) scar and MVO channels.
pub fn train_cascade(
    cases: &[PreparedCase],
    scheme: ClassScheme,
    net2d: &Network,
    spec3d: &NetworkSpec,
    settings: &CascadeSettings,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    settings.augment.validate()?;
    settings.elevated.validate()?;
    settings.perturbation.validate_for(scheme)?;
    let s2 = net2d.spec();
    if s2.kind != NetworkKind::Planar || s2.in_channels != 1 {
        return Err(Error::Config("the frozen 2D checkpoint is not a one-channel planar network".into()));
    }
    check_output_channels(s2, scheme)?;
    if spec3d.kind != NetworkKind::Volumetric || spec3d.in_channels != 1 + scheme.aux_channels() {
        return Err(Error::Config(format!(
            "the 3D network needs {} input channels (image plus masks) for the {} scheme, got {}",
            1 + scheme.aux_channels(),
            scheme.label(),
            spec3d.in_channels
        )));
    }
    check_output_channels(spec3d, scheme)?;
    if cases.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if settings.depth == 0 {
        return Err(Error::Config("cascade depth must be positive".into()));
    }
    let mut net = Network::new(spec3d.clone(), cfg.seed ^ 0x3d3d)?;
    let weights = cfg.weights_for(&net)?;
    let mut opt = Sgd::new(net.num_params(), cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3d3d_3d3d);
    let mut log = RunLog::open(out_dir, cfg.progress, if settings.vanilla { "vanilla" } else { "cascade" })?;
    let pcfg = &settings.perturbation;
    let p_elev = if pcfg.mask_operator_probability() < 1.0 {
        pcfg.p_elevated_augmentation / (1.0 - pcfg.mask_operator_probability())
    } else {
        0.0
    };
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg.epochs, cfg.lr_3d, cfg.lr_schedule);
        let mut sum = 0.0;
        let mut ops: Vec<PerturbationOperator> = Vec::new();
        let mut elevated_count = 0usize;
        for s in 0..cfg.steps_per_epoch {
            let draws: Vec<(usize, PerturbationOperator, bool, u64)> = (0..cfg.batch_size_3d)
                .map(|_| {
                    let c = rng.random_range(0..cases.len());
                    let (op, elevated) = if settings.vanilla {
                        (PerturbationOperator::None, false)
                    } else {
                        let op = draw_operator(pcfg, epoch, &mut rng);
                        let u: f64 = rng.random();
                        let elevated =
                            op == PerturbationOperator::None && epoch >= pcfg.enable_after_epoch && u < p_elev;
                        (op, elevated)
                    };
                    (c, op, elevated, rng.random())
                })
                .collect();
            let samples = par::map(&draws, |&(c, op, elevated, seed)| -> Result<(Sample, PerturbationOperator)> {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let (v, m) = training_window(&cases[c], settings.depth, &mut r)?;
                let profile = if elevated { &settings.elevated } else { &settings.augment };
                let (v, m) = augment_sample(&v, Some(&m), profile, &mut r)?;
                let m = m.expect("mask present");
                let mut aux = predict_2d_stack(net2d, &v, scheme)?.aux;
                let record = apply_operator(op, &mut aux, &v, &m, pcfg, &mut r)?;
                Ok((
                    Sample {
                        input: cascade_input(&v, &aux)?,
                        labels: m.into_labels(),
                    },
                    record.operator,
                ))
            });
            let mut batch = Vec::with_capacity(samples.len());
            for (r, d) in samples.into_iter().zip(&draws) {
                let (sample, op) = r?;
                ops.push(op);
                elevated_count += d.2 as usize;
                batch.push(sample);
            }
            sum += step(&mut net, &mut opt, batch, &weights, cfg, lr, epoch, s)?;
        }
        let mut counts = count_operators(&ops);
        counts.insert(ELEVATED_KEY.to_string(), elevated_count);
        let rec = EpochRecord {
            epoch,
            mean_loss: sum / cfg.steps_per_epoch as f64,
            lr,
            perturbation_operator_counts: counts,
        };
        log.record(&rec, &net, cfg.checkpoint_interval, epoch + 1 == cfg.epochs)?;
        records.push(rec);
    }
    let checkpoint = log.finish(&net)?;
    Ok(TrainOutcome {
        network: net,
        log: records,
        checkpoint,
    })
}
