//! Audio clip representation and WAV input/output.
//!
//! Clips are mono `F` sample buffers in [-1, 1] tagged with their sample
//! rate. Multichannel files are downmixed by averaging; sample formats are
//! converted to float on load.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Machine category (fan, pump, slider, valve, ...). Free-form so synthetic
/// corpora can invent their own.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct MachineType(pub String);

impl std::fmt::Display for MachineType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for MachineType {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// Ground-truth condition of a recording.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Normal,
    Anomaly,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Normal => "normal",
            Condition::Anomaly => "anomaly",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Condition::Normal),
            "anomaly" | "abnormal" => Ok(Condition::Anomaly),
            other => Err(Error::Manifest(format!("unknown condition {other:?}"))),
        }
    }
}

/// Contiguous index band `[start, start + len)` scheduled for masking in the
/// spectrogram domain (frames for time masks, mel bins for frequency masks).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MaskBand {
    pub start: usize,
    pub len: usize,
}

/// A mono audio clip, possibly carrying spectral mask bands scheduled by an
/// augmentation; feature extraction applies them so waveform-domain and
/// spectrogram-domain augmentations share one interface.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip<F: Scalar> {
    pub samples: Vec<F>,
    pub sample_rate: u32,
    pub time_masks: Vec<MaskBand>,
    pub freq_masks: Vec<MaskBand>,
}

impl<F: Scalar> AudioClip<F> {
    pub fn new(samples: Vec<F>, sample_rate: u32) -> Self {
        Self { samples, sample_rate, time_masks: Vec::new(), freq_masks: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> F {
        if self.samples.is_empty() {
            return F::zero();
        }
        let sum: F = self.samples.iter().map(|&x| x * x).sum();
        sum / F::of(self.samples.len() as f64)
    }
}

/// Reads a WAV file as mono `F` samples; stereo is averaged down.
pub fn read_wav<F: Scalar>(path: &Path) -> Result<AudioClip<F>> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Wav(format!("{}: zero channels", path.display())));
    }

    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?
        }
    };

    let frames = interleaved.len() / channels;
    let mut samples = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut acc = 0.0;
        for c in 0..channels {
            acc += interleaved[f * channels + c];
        }
        samples.push(F::of(acc / channels as f64));
    }
    Ok(AudioClip::new(samples, spec.sample_rate))
}

/// Writes a clip as 16-bit PCM WAV. Samples are clamped to [-1, 1].
pub fn write_wav<F: Scalar>(path: &Path, clip: &AudioClip<F>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    for &s in &clip.samples {
        let v = s.as_f64().clamp(-1.0, 1.0);
        let q = (v * 32767.0).round() as i16;
        writer.write_sample(q).map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    }
    writer.finalize().map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    Ok(())
}
