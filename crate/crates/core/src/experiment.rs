//! Synthetic error-correction experiment: train the planar network, then a
//! perturbation-trained and a vanilla cascade on the same budget, and probe
//! both with single-slice scar deletions on held-out phantoms.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::{ClassScheme, SCAR};
use crate::error::{Error, Result};
use crate::inference::{argmax_tensor, label_dice, predict_2d_stack, robustness_probe, run_cascade_3d};
use crate::networks::{Network, NetworkKind, NetworkSpec};
use crate::perturbation::{delete_class_slices, DeleteTarget, PerturbationOperator};
use crate::preprocess::{prepare_case, PreparedCase, PreprocessConfig};
use crate::synthgen::{generate_phantoms, PhantomConfig};
use crate::training::{train_2d, train_cascade, CascadeSettings, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErrorCorrectionConfig {
    pub phantoms: PhantomConfig,
    /// Held-out phantoms, taken from the scarred cases.
    pub test_cases: usize,
    pub preprocess: PreprocessConfig,
    pub spec_2d: NetworkSpec,
    pub spec_3d: NetworkSpec,
    pub train_2d: TrainConfig,
    pub train_3d: TrainConfig,
    pub enable_after_epoch: usize,
    pub seed: u64,
}

fn small_spec(kind: NetworkKind, in_channels: usize) -> NetworkSpec {
    NetworkSpec {
        kind,
        in_channels,
        out_channels: 5,
        levels: 3,
        base_width: 8,
        max_width: 32,
        deep_supervision_levels: vec![0, 1],
        leaky_slope: 0.01,
        norm_eps: 1e-5,
    }
}

impl Default for ErrorCorrectionConfig {
    fn default() -> Self {
        let train = TrainConfig {
            epochs: 150,
            steps_per_epoch: 10,
            batch_size_2d: 16,
            batch_size_3d: 2,
            micro_batch_2d: 8,
            checkpoint_interval: 0,
            ..TrainConfig::default()
        };
        ErrorCorrectionConfig {
            phantoms: PhantomConfig {
                count: 40,
                seed: 2024,
                ..PhantomConfig::default()
            },
            test_cases: 10,
            preprocess: PreprocessConfig::custom([48, 48], 7),
            spec_2d: small_spec(NetworkKind::Planar, 1),
            spec_3d: small_spec(NetworkKind::Volumetric, 3),
            train_2d: train.clone(),
            train_3d: train,
            enable_after_epoch: 20,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case_id: String,
    pub deleted_slice: Option<usize>,
    pub deleted_voxels: usize,
    /// Scar Dice between perturbed-input and clean-input outputs of the
    /// perturbation-trained cascade.
    pub probe_dice: f64,
    pub perturbed_dsc: f64,
    pub vanilla_dsc: f64,
    /// Scar Dice of the planar masks after deletion.
    pub planar_dsc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCorrectionReport {
    pub cases: Vec<CaseOutcome>,
    pub mean_probe_dice: f64,
    pub mean_perturbed_dsc: f64,
    pub mean_vanilla_dsc: f64,
    pub mean_planar_dsc: f64,
    pub final_loss_2d: f64,
    pub final_loss_perturbed: f64,
    pub final_loss_vanilla: f64,
    pub seconds: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Runs the whole experiment; training logs and checkpoints go under
/// `out_dir` when given.
pub fn run_error_correction(cfg: &ErrorCorrectionConfig, out_dir: Option<&Path>) -> Result<ErrorCorrectionReport> {
    let start = Instant::now();
    let scheme = ClassScheme::Emidec;
    let phantoms = generate_phantoms(&cfg.phantoms)?;
    let scarred: Vec<usize> = (0..phantoms.len()).filter(|&i| !phantoms[i].healthy).collect();
    if scarred.len() < cfg.test_cases || cfg.test_cases == 0 {
        return Err(Error::Config(format!(
            "{} scarred phantoms cannot supply {} test cases",
            scarred.len(),
            cfg.test_cases
        )));
    }
    let test_idx = &scarred[..cfg.test_cases];
    let prepare = |i: usize| -> Result<PreparedCase> {
        let p = &phantoms[i];
        prepare_case(&p.volume, Some(&p.mask), Some(p.lv_center), &cfg.preprocess)
    };
    let train: Vec<PreparedCase> = (0..phantoms.len())
        .filter(|i| !test_idx.contains(i))
        .map(prepare)
        .collect::<Result<_>>()?;
    let test: Vec<PreparedCase> = test_idx.iter().map(|&i| prepare(i)).collect::<Result<_>>()?;

    let sub = |name: &str| out_dir.map(|d| d.join(name));
    let c2 = TrainConfig {
        seed: cfg.seed,
        ..cfg.train_2d.clone()
    };
    let o2 = train_2d(&train, scheme, &cfg.spec_2d, &AugmentConfig::standard(), &c2, sub("planar").as_deref())?;
    let net2d = o2.network;
    let c3 = TrainConfig {
        seed: cfg.seed.wrapping_add(1),
        ..cfg.train_3d.clone()
    };
    let mut settings = CascadeSettings::new(scheme, cfg.preprocess.depth);
    settings.perturbation.enable_after_epoch = cfg.enable_after_epoch;
    let perturbed = train_cascade(&train, scheme, &net2d, &cfg.spec_3d, &settings, &c3, sub("cascade").as_deref())?;
    settings.vanilla = true;
    let vanilla = train_cascade(&train, scheme, &net2d, &cfg.spec_3d, &settings, &c3, sub("vanilla").as_deref())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xdead_beef);
    let mut cases = Vec::with_capacity(test.len());
    for case in &test {
        let gt = case.mask.as_ref().expect("phantoms carry masks").labels();
        let clean = predict_2d_stack(&net2d, &case.volume, scheme)?.aux;
        let probe = robustness_probe(&perturbed.network, &case.volume, &clean, |m| {
            Ok(delete_class_slices(m, DeleteTarget::Scar, &mut rng))
        })?;
        let mut deleted = clean.clone();
        if let (PerturbationOperator::DeleteClass, Some(z)) = (probe.record.operator, probe.record.slice_index) {
            crate::perturbation::delete_class_in_slice(&mut deleted, DeleteTarget::Scar, z);
        }
        let out = |net: &Network| -> Result<Vec<u8>> {
            Ok(argmax_tensor(&run_cascade_3d(net, &case.volume, &deleted, None)?))
        };
        let planar: Vec<u8> = deleted.scar().iter().map(|&b| if b == 1 { SCAR } else { 0 }).collect();
        cases.push(CaseOutcome {
            case_id: case.volume.case_id().to_string(),
            deleted_slice: probe.record.slice_index,
            deleted_voxels: probe.record.affected_voxels,
            probe_dice: probe.dice[SCAR as usize - 1],
            perturbed_dsc: label_dice(&out(&perturbed.network)?, gt, SCAR),
            vanilla_dsc: label_dice(&out(&vanilla.network)?, gt, SCAR),
            planar_dsc: label_dice(&planar, gt, SCAR),
        });
    }
    let last = |log: &[crate::training::EpochRecord]| log.last().map_or(f64::NAN, |r| r.mean_loss);
    Ok(ErrorCorrectionReport {
        mean_probe_dice: mean(cases.iter().map(|c| c.probe_dice)),
        mean_perturbed_dsc: mean(cases.iter().map(|c| c.perturbed_dsc)),
        mean_vanilla_dsc: mean(cases.iter().map(|c| c.vanilla_dsc)),
        mean_planar_dsc: mean(cases.iter().map(|c| c.planar_dsc)),
        final_loss_2d: last(&o2.log),
        final_loss_perturbed: last(&perturbed.log),
        final_loss_vanilla: last(&vanilla.log),
        cases,
        seconds: start.elapsed().as_secs_f64(),
    })
}
