use std::fs;
use std::path::{Path, PathBuf};

use diffseg_core::bitcodec::{Encoding, EncodingKind};
use diffseg_core::datagen::SceneConfig;
use diffseg_core::diffusion::{PredictionType, SamplerConfig};
use diffseg_core::nn::NetConfig;
use diffseg_core::palette::{LapMode, Palette};
use diffseg_core::schedule::{LossWeighting, NoiseSchedule, WeightingKind};
use diffseg_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub input_scale: f64,
    pub weighting: WeightingKind,
    pub bias: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let w = LossWeighting::default();
        Self { input_scale: NoiseSchedule::default().input_scale, weighting: w.kind, bias: w.bias }
    }
}

/// The full description of one training and evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub encoding: EncodingKind,
    pub n_bits: u32,
    pub lap_mode: LapMode,
    pub palette_seed: u64,
    pub schedule: ScheduleConfig,
    pub prediction: PredictionType,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub scene: SceneConfig,
    /// Validation images scored at every evaluation.
    pub eval_images: usize,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            encoding: EncodingKind::AnalogBits,
            n_bits: 4,
            lap_mode: LapMode::Similar,
            palette_seed: 0,
            schedule: ScheduleConfig::default(),
            prediction: PredictionType::X,
            net: NetConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            scene: SceneConfig::default(),
            eval_images: 100,
            dataset: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn n_classes(&self) -> u32 {
        1 << self.n_bits.min(31)
    }

    pub fn encoding(&self) -> Result<Encoding> {
        Encoding::new(self.encoding, self.n_classes()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn palette(&self) -> Result<Palette> {
        Palette::new(self.lap_mode, self.n_classes(), self.palette_seed).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn noise_schedule(&self) -> NoiseSchedule {
        NoiseSchedule { input_scale: self.schedule.input_scale }
    }

    pub fn weighting(&self) -> LossWeighting {
        LossWeighting { kind: self.schedule.weighting, bias: self.schedule.bias }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec {
            net: self.net,
            prediction: self.prediction,
            encoding: self.encoding()?,
            n_bits: self.n_bits,
            schedule: self.noise_schedule(),
            weighting: self.weighting(),
            palette: self.palette()?,
        })
    }

    /// Checks internal consistency; every error names the offending field.
    pub fn validate(&self) -> Result<()> {
        let cfg = |field: &str, e: diffseg_core::Error| Error::Config(format!("{field}: {e}"));
        if !(1..=8).contains(&self.n_bits) {
            return Err(Error::Config(format!("n_bits: {} outside 1..=8", self.n_bits)));
        }
        self.encoding()?;
        let palette = self.palette()?;
        self.noise_schedule().validate().map_err(|e| cfg("schedule", e))?;
        self.net.validate().map_err(|e| cfg("net", e))?;
        self.train.validate().map_err(|e| cfg("train", e))?;
        self.sampler.validate().map_err(|e| cfg("sampler", e))?;
        self.scene.validate().map_err(|e| cfg("scene", e))?;
        self.scene.check_capacity(palette.capacity()).map_err(|e| cfg("scene.max_entities", e))?;
        self.net.check_input_size(self.scene.size, self.scene.size).map_err(|e| cfg("net.levels", e))?;
        if self.eval_images == 0 {
            return Err(Error::Config("eval_images: must be positive".into()));
        }
        Ok(())
    }
}

pub fn encoding_name(kind: EncodingKind) -> &'static str {
    match kind {
        EncodingKind::AnalogBits => "bits",
        EncodingKind::OneHot => "onehot",
        EncodingKind::Rgb => "rgb",
    }
}

pub fn weighting_name(kind: WeightingKind) -> &'static str {
    match kind {
        WeightingKind::SigmoidBias => "sigmoid",
        WeightingKind::Constant => "constant",
        WeightingKind::SnrEps => "snr_eps",
    }
}
