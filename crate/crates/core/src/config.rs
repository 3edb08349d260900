//! Run configuration: one JSON document holding every module's settings,
//! with dotted-path overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentConfig;
use crate::data::ClassScheme;
use crate::error::{Error, Result};
use crate::evaluation::EvaluationConfig;
use crate::inference::{AuxSource, InferenceConfig, MaskFormat};
use crate::networks::NetworkSpec;
use crate::perturbation::PerturbationConfig;
use crate::preprocess::{DatasetProfile, PreprocessConfig};
use crate::synthgen::PhantomConfig;
use crate::training::{CascadeSettings, TrainConfig};

pub const CONFIG_FILE: &str = "run_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceSection {
    pub keep_probabilities: bool,
    pub z_chunk: Option<usize>,
    pub mask_format: MaskFormat,
    pub aux_source: AuxSource,
}

impl Default for InferenceSection {
    fn default() -> Self {
        InferenceSection {
            keep_probabilities: false,
            z_chunk: None,
            mask_format: MaskFormat::Raw,
            aux_source: AuxSource::Predicted,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: DatasetProfile,
    pub scheme: ClassScheme,
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub folds: usize,
    pub seed: u64,
    pub vanilla_cascade: bool,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    pub augment_elevated: AugmentConfig,
    pub perturbation: PerturbationConfig,
    pub network_2d: NetworkSpec,
    pub network_3d: NetworkSpec,
    pub train: TrainConfig,
    pub inference: InferenceSection,
    pub evaluation: EvaluationConfig,
    pub synth: PhantomConfig,
}

impl RunConfig {
    pub fn for_profile(profile: DatasetProfile) -> Self {
        let (scheme, preprocess) = match profile {
            DatasetProfile::Emidec => (ClassScheme::Emidec, PreprocessConfig::emidec()),
            DatasetProfile::Myops => (ClassScheme::Myops, PreprocessConfig::myops()),
            DatasetProfile::Custom => (ClassScheme::Emidec, PreprocessConfig::custom([96, 96], 7)),
        };
        RunConfig {
            profile,
            scheme,
            manifest: None,
            output_dir: PathBuf::from("runs"),
            folds: 5,
            seed: 0,
            vanilla_cascade: false,
            network_2d: NetworkSpec::planar(scheme, preprocess.crop_size),
            network_3d: NetworkSpec::volumetric(scheme),
            preprocess,
            augment: AugmentConfig::standard(),
            augment_elevated: AugmentConfig::elevated(),
            perturbation: PerturbationConfig::for_scheme(scheme),
            train: TrainConfig::default(),
            inference: InferenceSection::default(),
            evaluation: EvaluationConfig::for_scheme(scheme),
            synth: PhantomConfig::default(),
        }
    }

    /// Checks every section and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        if self.preprocess.profile != self.profile {
            return Err(Error::Config(format!(
                "preprocess profile {:?} differs from run profile {:?}",
                self.preprocess.profile, self.profile
            )));
        }
        self.augment.validate()?;
        self.augment_elevated.validate()?;
        self.augment_elevated.validate_elevation(&self.augment)?;
        self.perturbation.validate_for(self.scheme)?;
        self.train.validate()?;
        self.synth.validate()?;
        for (name, spec) in [("network_2d", &self.network_2d), ("network_3d", &self.network_3d)] {
            spec.validate()?;
            if spec.out_channels != self.scheme.num_classes() {
                return Err(Error::Config(format!(
                    "{name} has {} outputs, the {} scheme needs {}",
                    spec.out_channels,
                    self.scheme.label(),
                    self.scheme.num_classes()
                )));
            }
            let [h, w] = self.preprocess.crop_size;
            spec.check_input([spec.in_channels, 1, h, w])
                .map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        if self.network_2d.in_channels != 1 {
            return Err(Error::Config("network_2d must take one input channel".into()));
        }
        if self.network_3d.in_channels != 1 + self.scheme.aux_channels() {
            return Err(Error::Config(format!(
                "network_3d must take {} input channels for the {} scheme",
                1 + self.scheme.aux_channels(),
                self.scheme.label()
            )));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if let Some(0 | 1) = self.inference.z_chunk {
            return Err(Error::Config("inference.z_chunk must be at least 2".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Writes the configuration as `run_config.json` under `dir`.
    pub fn save_to(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(CONFIG_FILE);
        fs::write(&p, self.to_json()?).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    /// Sets a field by dotted path, e.g. `train.epochs=10`. The value is
    /// parsed as JSON and taken as a plain string when that fails. Unknown
    /// paths are rejected.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut cur = &mut doc;
        for key in path.split('.') {
            cur = match cur {
                Value::Object(map) => map
                    .get_mut(key)
                    .ok_or_else(|| Error::Config(format!("unknown config field {path:?}")))?,
                Value::Array(items) => {
                    let i: usize = key
                        .parse()
                        .map_err(|_| Error::Config(format!("{path:?}: {key:?} is not an index")))?;
                    items
                        .get_mut(i)
                        .ok_or_else(|| Error::Config(format!("{path:?}: index {i} out of range")))?
                }
                _ => return Err(Error::Config(format!("{path:?} does not name a config field"))),
            };
        }
        *cur = value;
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("override {path}: {e}")))?;
        Ok(())
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            scheme: self.scheme,
            preprocess: self.preprocess.clone(),
            keep_probabilities: self.inference.keep_probabilities,
            z_chunk: self.inference.z_chunk,
            aux_source: self.inference.aux_source,
        }
    }

    /// Training settings for one fold and stage, with seeds derived from the run seed.
    pub fn train_config(&self, fold: usize, stage: u64) -> TrainConfig {
        TrainConfig {
            seed: self
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add(fold as u64 * 16 + stage),
            ..self.train.clone()
        }
    }

    pub fn cascade_settings(&self) -> CascadeSettings {
        CascadeSettings {
            depth: self.preprocess.depth,
            augment: self.augment.clone(),
            elevated: self.augment_elevated.clone(),
            perturbation: self.perturbation.clone(),
            vanilla: self.vanilla_cascade,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(DatasetProfile::Emidec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        RunConfig::for_profile(DatasetProfile::Emidec).validate().unwrap();
        let m = RunConfig::for_profile(DatasetProfile::Myops);
        m.validate().unwrap();
        assert_eq!(m.network_3d.in_channels, 2);
        assert_eq!(m.network_2d.levels, 6);
    }

    #[test]
    fn json_roundtrip_is_identity() {
        let c = RunConfig::for_profile(DatasetProfile::Myops);
        let s = c.to_json().unwrap();
        let back = RunConfig::from_json(&s).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json().unwrap(), s);
    }

    #[test]
    fn dotted_overrides() {
        let mut c = RunConfig::default();
        c.apply_override("train.epochs=3").unwrap();
        c.apply_override("perturbation.enable_after_epoch=20").unwrap();
        c.apply_override("network_2d.deep_supervision_levels=[0,1]").unwrap();
        c.apply_override("network_3d.deep_supervision_levels.1=2").unwrap();
        c.apply_override("output_dir=/tmp/x").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.perturbation.enable_after_epoch, 20);
        assert_eq!(c.network_2d.deep_supervision_levels, vec![0, 1]);
        assert_eq!(c.output_dir, PathBuf::from("/tmp/x"));
        assert!(c.apply_override("train.epoch=3").is_err());
        assert!(c.apply_override("train.epochs=-1").is_err());
        assert!(c.apply_override("nonsense").is_err());
    }

    #[test]
    fn inconsistent_channels_are_rejected() {
        let mut c = RunConfig::default();
        c.network_3d.in_channels = 2;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.perturbation.p_zero_mask = 0.9;
        assert!(c.validate().is_err());
    }
}
