//! Configuration structs for the feature frontend, encoder, training loop,
//! and augmentation sampler. Defaults reproduce the published recipe; every
//! field can be overridden from the CLI's TOML config.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-mel spectrogram extraction parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    /// Expected input sample rate; other rates are rejected.
    pub sample_rate: u32,
    /// FFT window length in samples.
    pub fft_size: usize,
    /// Hop between successive frames in samples.
    pub hop_size: usize,
    /// Number of mel filterbank channels.
    pub mel_bins: usize,
    /// Lower filterbank edge in Hz.
    pub fmin: f64,
    /// Upper filterbank edge in Hz.
    pub fmax: f64,
    /// Power values are clamped to at least this before the log.
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            fft_size: 1024,
            hop_size: 512,
            mel_bins: 128,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || !self.fft_size.is_power_of_two() {
            return Err(Error::Config("fft_size must be a power of two".into()));
        }
        if self.hop_size == 0 || self.hop_size > self.fft_size {
            return Err(Error::Config("hop_size must be in 1..=fft_size".into()));
        }
        if self.mel_bins == 0 {
            return Err(Error::Config("mel_bins must be positive".into()));
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin) {
            return Err(Error::Config("need 0 <= fmin < fmax".into()));
        }
        if self.fmax > self.sample_rate as f64 / 2.0 {
            return Err(Error::Config("fmax exceeds Nyquist".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }

    /// Number of frames produced for a clip of `samples` samples
    /// (reflect-centered framing).
    pub fn frame_count(&self, samples: usize) -> usize {
        samples / self.hop_size + 1
    }
}

/// Which normalization the conformer convolution module uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvNorm {
    /// Batch normalization over the batch and time axes (the default).
    Batch,
    /// Layer normalization over channels; useful for batch-size-1 work.
    Layer,
}

/// Conformer encoder architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Input feature dimension (mel bins).
    pub input_dim: usize,
    /// Model (residual stream) width.
    pub model_dim: usize,
    /// Number of conformer blocks.
    pub num_blocks: usize,
    /// Attention heads per block; must divide `model_dim`.
    pub num_heads: usize,
    /// Hidden width of the feed-forward modules.
    pub ffn_dim: usize,
    /// Depthwise convolution kernel size (odd).
    pub conv_kernel: usize,
    /// Dropout probability used throughout.
    pub dropout: f64,
    /// Output embedding dimension after attentive pooling.
    pub embedding_dim: usize,
    /// Normalization inside the convolution module.
    pub conv_norm: ConvNorm,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 128,
            model_dim: 128,
            num_blocks: 3,
            num_heads: 4,
            ffn_dim: 512,
            conv_kernel: 7,
            dropout: 0.1,
            embedding_dim: 64,
            conv_norm: ConvNorm::Batch,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_blocks == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config("num_heads must divide model_dim".into()));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("conv_kernel must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// A small architecture for tests and smoke runs.
    pub fn tiny() -> Self {
        Self {
            input_dim: 128,
            model_dim: 32,
            num_blocks: 1,
            num_heads: 2,
            ffn_dim: 64,
            conv_kernel: 7,
            dropout: 0.0,
            embedding_dim: 16,
            conv_norm: ConvNorm::Batch,
        }
    }
}

/// Angular-margin head settings for machine-identity classification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArcFaceConfig {
    /// Logit scale applied after the margin.
    pub scale: f64,
    /// Additive angular margin in radians.
    pub margin: f64,
}

impl Default for ArcFaceConfig {
    fn default() -> Self {
        Self { scale: 16.0, margin: 1.28 }
    }
}

/// Two-stage training schedule and optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Epochs for the warm-up stage (type head frozen, normals only).
    pub stage1_epochs: usize,
    /// Epochs for the joint stage (pseudo-anomalies mixed in).
    pub stage2_epochs: usize,
    /// Clips per batch.
    pub batch_size: usize,
    /// Adam learning rate.
    pub learning_rate: f64,
    /// Weight of the identity loss in the total.
    pub id_loss_weight: f64,
    /// Weight of the augmentation loss in the total.
    pub aug_loss_weight: f64,
    /// Reset Adam moments when entering the joint stage.
    pub reset_optimizer_between_stages: bool,
    /// Optional global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// RNG seed controlling init, batching, augmentation, and dropout.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 80,
            stage2_epochs: 40,
            batch_size: 28,
            learning_rate: 1e-3,
            id_loss_weight: 1.0,
            aug_loss_weight: 1.0,
            reset_optimizer_between_stages: true,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.id_loss_weight < 0.0 || self.aug_loss_weight < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Waveform/spectrogram augmentation ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Pitch shift range in semitones (symmetric).
    pub pitch_semitones: f64,
    /// Circular time shift range in seconds (symmetric).
    pub time_shift_seconds: f64,
    /// Time stretch factor bounds.
    pub stretch_min: f64,
    pub stretch_max: f64,
    /// Fade length bounds as a fraction of the clip.
    pub fade_min_frac: f64,
    pub fade_max_frac: f64,
    /// White-noise SNR bounds in dB.
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    /// Maximum masked extent, in frames / mel bins.
    pub max_time_mask_frames: usize,
    pub max_freq_mask_bins: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            pitch_semitones: 2.0,
            time_shift_seconds: 1.0,
            stretch_min: 0.9,
            stretch_max: 1.1,
            fade_min_frac: 0.1,
            fade_max_frac: 0.5,
            snr_min_db: 6.0,
            snr_max_db: 20.0,
            max_time_mask_frames: 32,
            max_freq_mask_bins: 16,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stretch_min > 0.0 && self.stretch_min <= self.stretch_max) {
            return Err(Error::Config("need 0 < stretch_min <= stretch_max".into()));
        }
        if !(0.0 < self.fade_min_frac
            && self.fade_min_frac <= self.fade_max_frac
            && self.fade_max_frac <= 1.0)
        {
            return Err(Error::Config("fade fractions must satisfy 0 < min <= max <= 1".into()));
        }
        if self.snr_min_db > self.snr_max_db {
            return Err(Error::Config("need snr_min_db <= snr_max_db".into()));
        }
        if self.max_time_mask_frames == 0 || self.max_freq_mask_bins == 0 {
            return Err(Error::Config("mask extents must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a training run needs, bundled for config files and checkpoints.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub arcface: ArcFaceConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        if self.encoder.input_dim != self.frontend.mel_bins {
            return Err(Error::Config(format!(
                "encoder input_dim {} != frontend mel_bins {}",
                self.encoder.input_dim, self.frontend.mel_bins
            )));
        }
        if !(self.arcface.scale > 0.0) {
            return Err(Error::Config("arcface scale must be positive".into()));
        }
        if !(0.0..std::f64::consts::PI).contains(&self.arcface.margin) {
            return Err(Error::Config("arcface margin must be in [0, pi)".into()));
        }
        Ok(())
    }
}
