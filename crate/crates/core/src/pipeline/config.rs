use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aligner::{Ablation, AlignOptions};
use crate::dataset::{Roi, SynthConfig};
use crate::encoders::{AutoencoderConfig, AutoencoderTraining, VisualConfig};
use crate::error::{Error, Result};
use crate::generator::{DenoiserConfig, DenoiserTraining, SamplerConfig};
use crate::rng::stage_seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiChoice {
    #[default]
    All,
    Lvc,
    Hvc,
}

impl RoiChoice {
    pub fn rois(self) -> Vec<Roi> {
        match self {
            Self::All => vec![Roi::Lvc, Roi::Hvc],
            Self::Lvc => vec![Roi::Lvc],
            Self::Hvc => vec![Roi::Hvc],
        }
    }
}

impl FromStr for RoiChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "lvc" => Ok(Self::Lvc),
            "hvc" => Ok(Self::Hvc),
            _ => Err(Error::Config(format!("unknown roi '{s}' (all|lvc|hvc)"))),
        }
    }
}

impl std::fmt::Display for RoiChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::All => "all",
            Self::Lvc => "lvc",
            Self::Hvc => "hvc",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub text_dim: usize,
    /// Visual layers (1-based) whose activations form the structural targets.
    pub low_layers: Vec<usize>,
    /// Relative ridge penalty when aligning the visual head to caption embeddings.
    pub head_lambda: f64,
    pub visual: VisualConfig,
    pub autoencoder: AutoencoderConfig,
    pub ae_training: AutoencoderTraining,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            text_dim: 32,
            low_layers: vec![1, 2, 3],
            head_lambda: 1e-3,
            visual: VisualConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            ae_training: AutoencoderTraining::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSection {
    pub lambda: f64,
    pub voxels_per_target: usize,
    pub k_percent: f64,
    pub cv_folds: usize,
    /// Tail of the training split held out by the k-sweep.
    pub validation_fraction: f64,
}

impl Default for DecoderSection {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            voxels_per_target: 100,
            k_percent: 25.0,
            cv_folds: 5,
            validation_fraction: 0.125,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sampler: SamplerConfig,
    pub denoiser: DenoiserConfig,
    pub training: DenoiserTraining,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            timesteps: 50,
            beta_min: 1e-4,
            beta_max: 0.02,
            sampler: SamplerConfig::default(),
            denoiser: DenoiserConfig::default(),
            training: DenoiserTraining::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub roi: RoiChoice,
    pub drop: Ablation,
    pub upper_bound: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: PathBuf,
    /// Load this dataset directory instead of synthesizing one.
    pub dataset: Option<PathBuf>,
    /// `png` or `ppm`.
    pub image_format: String,
    pub data: SynthConfig,
    pub encoders: EncoderSection,
    pub decoder: DecoderSection,
    pub generator: GeneratorSection,
    pub align: AlignOptions,
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output: PathBuf::from("runs/default"),
            dataset: None,
            image_format: "png".into(),
            data: SynthConfig::default(),
            encoders: EncoderSection::default(),
            decoder: DecoderSection::default(),
            generator: GeneratorSection::default(),
            align: AlignOptions::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.align.validate()?;
        let d = &self.decoder;
        if !(d.lambda >= 0.0 && d.lambda.is_finite()) || d.voxels_per_target == 0 || d.cv_folds < 2 {
            return Err(Error::Config("decoder needs lambda >= 0, voxels_per_target >= 1, cv_folds >= 2".into()));
        }
        if !(d.k_percent > 0.0 && d.k_percent <= 100.0) {
            return Err(Error::Config(format!("k_percent must be in (0, 100], got {}", d.k_percent)));
        }
        if !(d.validation_fraction > 0.0 && d.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must be in (0, 1)".into()));
        }
        let layers = self.encoders.visual.layers.len();
        let low = &self.encoders.low_layers;
        if low.is_empty() || low.iter().any(|&l| l == 0 || l > layers) || low.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "low_layers must be ascending within 1..={layers}, got {low:?}"
            )));
        }
        if self.encoders.visual.embed_dim != self.encoders.text_dim {
            return Err(Error::Config(format!(
                "visual embed_dim ({}) must equal text_dim ({})",
                self.encoders.visual.embed_dim, self.encoders.text_dim
            )));
        }
        if !(self.encoders.head_lambda > 0.0 && self.encoders.head_lambda.is_finite()) {
            return Err(Error::Config("head_lambda must be positive".into()));
        }
        let g = &self.generator;
        if g.sampler.forward_steps == 0 || g.sampler.forward_steps > g.timesteps || g.sampler.reverse_steps == 0 {
            return Err(Error::Config(format!(
                "sampler needs 1 <= forward_steps <= T ({}) and reverse_steps >= 1",
                g.timesteps
            )));
        }
        if !matches!(self.image_format.as_str(), "png" | "ppm") {
            return Err(Error::Config(format!("image_format must be png or ppm, got '{}'", self.image_format)));
        }
        Ok(())
    }

    /// Applies a `dotted.key=value` override; the value is parsed as TOML and
    /// falls back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut doc;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("'{key}' does not name a config field")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            slot = table
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown config section '{part}' in '{key}'")))?;
        }
        let updated: Self = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override '{assignment}': {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds::from_master(self.seed)
    }
}

/// Per-stage seeds fanned out from the master seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub master: u64,
    pub dataset: u64,
    pub text: u64,
    pub visual: u64,
    pub autoencoder: u64,
    pub denoiser: u64,
    pub sampler: u64,
}

impl StageSeeds {
    pub fn from_master(master: u64) -> Self {
        Self {
            master,
            dataset: stage_seed(master, "dataset"),
            text: stage_seed(master, "text"),
            visual: stage_seed(master, "visual"),
            autoencoder: stage_seed(master, "autoencoder"),
            denoiser: stage_seed(master, "denoiser"),
            sampler: stage_seed(master, "sampler"),
        }
    }
}
