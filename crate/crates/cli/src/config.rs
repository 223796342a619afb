use std::path::{Path, PathBuf};

use egoaction::ego::CompensationParams;
use egoaction::flow::FlowParams;
use egoaction::model::{EncoderConfig, Fusion};
use egoaction::preprocess::CropConfig;
use egoaction::streams::{FlowStreamParams, StreamKind};
use egoaction::synth::SynthConfig;
use egoaction::training::{CurriculumSchedule, StreamSchedule, TrainOptions};
use egoaction::dataset::LabelMap;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Env var that overrides the cache root.
pub const CACHE_ENV: &str = "EGOACTION_CACHE";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Existing dataset manifest. When absent the `synth` output is used.
    pub manifest: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Defaults to the toy encoder sized for `crop.resize_to`.
    pub encoder: Option<EncoderConfig>,
    pub hidden_dim: usize,
    pub window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: None,
            hidden_dim: 64,
            window: 11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub preset: Preset,
    /// Replaces the preset's base learning rate in every stage.
    pub base_lr: Option<f64>,
    /// Full per-stream schedules; take precedence over the preset.
    pub rgb: Option<StreamSchedule>,
    pub flow: Option<StreamSchedule>,
    pub splice_stride: usize,
    pub validation_every: usize,
    pub validation_splices: usize,
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            base_lr: Some(0.01),
            rgb: None,
            flow: None,
            splice_stride: 1,
            validation_every: 100,
            validation_splices: 64,
            checkpoint_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    /// Opposite-action pairs by class name.
    pub merge_pairs: Vec<(String, String)>,
    pub phase1_iterations: usize,
    pub phase2_iterations: usize,
    #[serde(default = "default_noise")]
    pub split_noise_std: f64,
}

fn default_noise() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fusion: Fusion,
    /// Frames rendered by `gradcam` per held-out video.
    pub gradcam_frames: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fusion: Fusion::Mean,
            gradcam_frames: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub crop: CropConfig,
    pub flow: FlowParams,
    pub compensation: CompensationParams,
    /// Feed raw flow to the flow stream instead of compensated flow.
    pub compensate: bool,
    /// Flow magnitude rendered at full color saturation.
    pub flow_max_norm: Option<f64>,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub curriculum: Option<CurriculumConfig>,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let stream = FlowStreamParams::default();
        Self {
            seed: 7,
            paths: Paths::default(),
            synth: SynthConfig::toy(),
            crop: CropConfig::toy(),
            flow: stream.flow,
            compensation: stream.compensation,
            compensate: stream.compensate,
            flow_max_norm: stream.max_norm,
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            curriculum: None,
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            key: String::new(),
            message: e.to_string(),
        })?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            key: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        cfg.validate(path)?;
        Ok(cfg)
    }

    fn validate(&self, path: &Path) -> Result<(), CliError> {
        let bad = |key: &str, message: String| CliError::Config {
            path: path.display().to_string(),
            key: key.into(),
            message,
        };
        self.crop.validate().map_err(|e| bad("crop", e.to_string()))?;
        self.flow.validate().map_err(|e| bad("flow", e.to_string()))?;
        self.synth.validate().map_err(|e| bad("synth", e.to_string()))?;
        if self.model.window % 2 == 0 {
            return Err(bad("model.window", format!("window must be odd, got {}", self.model.window)));
        }
        for k in [StreamKind::Rgb, StreamKind::Flow] {
            let s = self.schedule(k);
            for (stage, c) in [("encoder", Some(s.encoder)), ("lstm", Some(s.lstm)), ("finetune", s.finetune)] {
                if let Some(c) = c {
                    c.validate().map_err(|e| bad(&format!("training.{k}.{stage}"), e.to_string()))?;
                }
            }
        }
        Ok(())
    }

    pub fn schedule(&self, kind: StreamKind) -> StreamSchedule {
        let explicit = match kind {
            StreamKind::Rgb => self.training.rgb,
            StreamKind::Flow => self.training.flow,
        };
        let s = explicit.unwrap_or_else(|| match self.training.preset {
            Preset::Paper => StreamSchedule::paper(kind),
            Preset::Desk => StreamSchedule::desk(kind),
        });
        match self.training.base_lr {
            Some(lr) if explicit.is_none() => s.with_base_lr(lr),
            _ => s,
        }
    }

    pub fn encoder(&self, channels: usize) -> EncoderConfig {
        self.model
            .encoder
            .clone()
            .unwrap_or_else(|| EncoderConfig::toy(channels, self.crop.resize_to))
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            encoder: self.encoder(3),
            hidden_dim: self.model.hidden_dim,
            window: self.model.window,
            crop: self.crop,
            splice_stride: self.training.splice_stride,
            validation_every: self.training.validation_every,
            validation_splices: self.training.validation_splices,
            checkpoint_every: self.training.checkpoint_every,
            seed: self.seed,
        }
    }

    pub fn curriculum(&self, labels: &LabelMap) -> Result<Option<CurriculumSchedule>, CliError> {
        let Some(c) = &self.curriculum else { return Ok(None) };
        let index = |name: &str| {
            labels.index_of(name).ok_or_else(|| CliError::Config {
                path: "<config>".into(),
                key: "curriculum.merge_pairs".into(),
                message: format!("unknown class `{name}`"),
            })
        };
        let merge_pairs = c
            .merge_pairs
            .iter()
            .map(|(a, b)| Ok((index(a)?, index(b)?)))
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(Some(CurriculumSchedule {
            merge_pairs,
            phase1_iterations: c.phase1_iterations,
            phase2_iterations: c.phase2_iterations,
            split_noise_std: c.split_noise_std,
        }))
    }

    pub fn output_root(&self) -> PathBuf {
        self.paths.output.clone().unwrap_or_else(|| PathBuf::from("egoaction-out"))
    }

    /// Env var first, then the config, then `<output>/cache`.
    pub fn cache_root(&self) -> PathBuf {
        if let Some(p) = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(p);
        }
        self.paths.cache.clone().unwrap_or_else(|| self.output_root().join("cache"))
    }
}
