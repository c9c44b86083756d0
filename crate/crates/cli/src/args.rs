//! Flag groups shared by several commands, and config-file loading. Flags
//! given on the command line override values from `--config`.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;
use sonovis_core::dataset::Modality;
use sonovis_core::dsp::{AudioPipeline, SpectrumScale};
use sonovis_core::train::TrainConfig;
use sonovis_core::vq::{ManifoldVariant, VqConfig};

use crate::error::{CliError, Result};

/// Reads a TOML config; a missing `--config` gives the defaults.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))
}

pub fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
    if let Some(v) = src {
        *dst = v.clone();
    }
}

pub fn required(p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.clone().ok_or_else(|| CliError::config(format!("`{what}` is required (flag or config)")))
}

#[derive(Args, Debug, Default, Clone)]
pub struct TrainArgs {
    /// Hard cap on optimizer steps
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Steps per plateau evaluation
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Evaluations without relative improvement before stopping
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub rel_threshold: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainArgs {
    pub fn apply(&self, c: &mut TrainConfig) {
        set(&mut c.max_steps, &self.max_steps);
        set(&mut c.batch_size, &self.batch_size);
        set(&mut c.lr, &self.lr);
        set(&mut c.eval_every, &self.eval_every);
        set(&mut c.patience, &self.patience);
        set(&mut c.rel_threshold, &self.rel_threshold);
        set(&mut c.seed, &self.seed);
    }
}

#[derive(Args, Debug, Default, Clone)]
pub struct PipelineArgs {
    /// Target sample rate in Hz
    #[arg(long)]
    pub rate: Option<u32>,
    /// Segment length in seconds
    #[arg(long)]
    pub window_sec: Option<f64>,
    /// STFT window (and FFT) length in samples
    #[arg(long)]
    pub fft: Option<usize>,
    #[arg(long)]
    pub hop: Option<usize>,
    #[arg(long)]
    pub mels: Option<usize>,
    /// Side of the resized spectrogram image
    #[arg(long)]
    pub size: Option<usize>,
    /// Use the power spectrum instead of the magnitude
    #[arg(long)]
    pub power: bool,
    /// Skip log(1 + x) compression
    #[arg(long)]
    pub no_log: bool,
}

impl PipelineArgs {
    pub fn apply(&self, p: &mut AudioPipeline) {
        set(&mut p.mel.sample_rate, &self.rate);
        set(&mut p.window_seconds, &self.window_sec);
        set(&mut p.mel.window_length, &self.fft);
        set(&mut p.mel.hop_length, &self.hop);
        set(&mut p.mel.mel_bins, &self.mels);
        set(&mut p.size, &self.size);
        if self.power {
            p.mel.scale = SpectrumScale::Power;
        }
        if self.no_log {
            p.mel.log_compress = false;
        }
    }
}

#[derive(Args, Debug, Default, Clone)]
pub struct VisualArgs {
    #[arg(long, value_enum)]
    pub modality: Option<ModalityArg>,
    /// Side of the visual images the model works on
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Side of the latent grid
    #[arg(long)]
    pub latent_size: Option<usize>,
    #[arg(long)]
    pub codebook_size: Option<usize>,
    #[arg(long)]
    pub code_dim: Option<usize>,
    #[arg(long)]
    pub first_features: Option<usize>,
    #[arg(long)]
    pub hidden_features: Option<usize>,
    #[arg(long)]
    pub residual_blocks: Option<usize>,
}

impl VisualArgs {
    pub fn apply(&self, c: &mut VqConfig) {
        if let Some(m) = self.modality {
            c.modality = m.into();
        }
        set(&mut c.image_size, &self.image_size);
        set(&mut c.latent_size, &self.latent_size);
        set(&mut c.codebook_size, &self.codebook_size);
        set(&mut c.code_dim, &self.code_dim);
        set(&mut c.first_features, &self.first_features);
        set(&mut c.hidden_features, &self.hidden_features);
        set(&mut c.residual_blocks, &self.residual_blocks);
    }
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModalityArg {
    Depth,
    Segmentation,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Depth => Modality::Depth,
            ModalityArg::Segmentation => Modality::Segmentation,
        }
    }
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantArg {
    Vq,
    Vae,
}

impl From<VariantArg> for ManifoldVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Vq => ManifoldVariant::Vq,
            VariantArg::Vae => ManifoldVariant::Vae,
        }
    }
}
