//! Labeled waveform and spectrogram augmentations.
//!
//! Each augmentation carries a stable integer identity that the auxiliary
//! head learns to predict: none=0, pitch_shift=1, time_shift=2,
//! time_stretch=3, fade_in=4, fade_out=5, white_noise=6, time_mask=7,
//! freq_mask=8. Waveform ops transform samples directly; the two masking ops
//! are recorded on the clip and executed during feature extraction, so both
//! families share one interface. Machine labels live on the manifest entry,
//! not the clip, so augmentation cannot disturb them. All samples stay in
//! [-1, 1]; clipped samples are counted for tests.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{AudioClip, MaskBand};
use crate::config::{AugmentConfig, FrontendConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fieldless augmentation tag; the id ordering is part of the public
/// contract (checkpoints and score files refer to it).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    None,
    PitchShift,
    TimeShift,
    TimeStretch,
    FadeIn,
    FadeOut,
    WhiteNoise,
    TimeMask,
    FreqMask,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; 9] = [
        AugmentationKind::None,
        AugmentationKind::PitchShift,
        AugmentationKind::TimeShift,
        AugmentationKind::TimeStretch,
        AugmentationKind::FadeIn,
        AugmentationKind::FadeOut,
        AugmentationKind::WhiteNoise,
        AugmentationKind::TimeMask,
        AugmentationKind::FreqMask,
    ];

    /// Number of augmentation classes the auxiliary head predicts.
    pub const COUNT: usize = 9;

    pub fn id(self) -> u8 {
        Self::ALL.iter().position(|&k| k == self).unwrap() as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            AugmentationKind::None => "none",
            AugmentationKind::PitchShift => "pitch_shift",
            AugmentationKind::TimeShift => "time_shift",
            AugmentationKind::TimeStretch => "time_stretch",
            AugmentationKind::FadeIn => "fade_in",
            AugmentationKind::FadeOut => "fade_out",
            AugmentationKind::WhiteNoise => "white_noise",
            AugmentationKind::TimeMask => "time_mask",
            AugmentationKind::FreqMask => "freq_mask",
        }
    }
}

/// An augmentation with its drawn parameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    PitchShift { semitones: f64 },
    TimeShift { seconds: f64 },
    TimeStretch { factor: f64 },
    FadeIn { fraction: f64 },
    FadeOut { fraction: f64 },
    WhiteNoise { snr_db: f64 },
    TimeMask { frames: usize },
    FreqMask { bins: usize },
}

impl Augmentation {
    pub fn kind(&self) -> AugmentationKind {
        match self {
            Augmentation::None => AugmentationKind::None,
            Augmentation::PitchShift { .. } => AugmentationKind::PitchShift,
            Augmentation::TimeShift { .. } => AugmentationKind::TimeShift,
            Augmentation::TimeStretch { .. } => AugmentationKind::TimeStretch,
            Augmentation::FadeIn { .. } => AugmentationKind::FadeIn,
            Augmentation::FadeOut { .. } => AugmentationKind::FadeOut,
            Augmentation::WhiteNoise { .. } => AugmentationKind::WhiteNoise,
            Augmentation::TimeMask { .. } => AugmentationKind::TimeMask,
            Augmentation::FreqMask { .. } => AugmentationKind::FreqMask,
        }
    }
}

/// An augmentation plus the seed for its internal randomness (noise
/// realization, mask placement), making application reproducible.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentationSpec {
    pub augmentation: Augmentation,
    pub rng_seed: u64,
}

impl AugmentationSpec {
    pub fn augmentation_id(&self) -> u8 {
        self.augmentation.kind().id()
    }
}

/// Result of applying an augmentation.
#[derive(Clone, Debug)]
pub struct Augmented<F: Scalar> {
    pub clip: AudioClip<F>,
    pub augmentation_id: u8,
    /// Samples clamped back into [-1, 1].
    pub clipped_samples: usize,
}

fn check_range(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Augment(format!("{what} outside configured range")))
    }
}

/// Applies `spec` to a clip. The frontend config is consulted only by the
/// masking kinds (to bound band placement in frames/bins).
pub fn apply_augmentation<F: Scalar>(
    clip: &AudioClip<F>,
    spec: &AugmentationSpec,
    cfg: &AugmentConfig,
    frontend: &FrontendConfig,
) -> Result<Augmented<F>> {
    cfg.validate()?;
    let n = clip.samples.len();
    if n == 0 {
        return Err(Error::Augment("empty clip".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut out = clip.clone();
    let mut clipped = 0usize;

    match spec.augmentation {
        Augmentation::None => {}
        Augmentation::PitchShift { semitones } => {
            check_range(semitones.abs() <= cfg.pitch_semitones, "pitch shift")?;
            let rate = 2f64.powf(semitones / 12.0);
            out.samples = crop_or_pad(&resample(&clip.samples, rate), n);
        }
        Augmentation::TimeShift { seconds } => {
            check_range(seconds.abs() <= cfg.time_shift_seconds, "time shift")?;
            let k = (seconds * clip.sample_rate as f64).round() as i64;
            let k = k.rem_euclid(n as i64) as usize;
            let mut rotated = Vec::with_capacity(n);
            rotated.extend_from_slice(&clip.samples[n - k..]);
            rotated.extend_from_slice(&clip.samples[..n - k]);
            out.samples = rotated;
        }
        Augmentation::TimeStretch { factor } => {
            check_range(
                (cfg.stretch_min..=cfg.stretch_max).contains(&factor),
                "stretch factor",
            )?;
            out.samples = crop_or_pad(&ola_stretch(&clip.samples, factor), n);
        }
        Augmentation::FadeIn { fraction } => {
            check_range(
                (cfg.fade_min_frac..=cfg.fade_max_frac).contains(&fraction),
                "fade fraction",
            )?;
            let len = ((n as f64 * fraction) as usize).max(1);
            for i in 0..len.min(n) {
                let g = F::of(i as f64 / len as f64);
                out.samples[i] = out.samples[i] * g;
            }
        }
        Augmentation::FadeOut { fraction } => {
            check_range(
                (cfg.fade_min_frac..=cfg.fade_max_frac).contains(&fraction),
                "fade fraction",
            )?;
            let len = ((n as f64 * fraction) as usize).max(1);
            for i in 0..len.min(n) {
                let g = F::of(i as f64 / len as f64);
                let idx = n - 1 - i;
                out.samples[idx] = out.samples[idx] * g;
            }
        }
        Augmentation::WhiteNoise { snr_db } => {
            check_range((cfg.snr_min_db..=cfg.snr_max_db).contains(&snr_db), "noise snr")?;
            // Scale the noise so the realized SNR is the target by
            // construction (up to later clipping).
            let noise: Vec<f64> = (0..n).map(|_| gaussian(&mut rng)).collect();
            let sig_rms = rms_f(&clip.samples);
            let noise_rms = rms64(&noise);
            if sig_rms > 0.0 && noise_rms > 0.0 {
                let g = sig_rms * 10f64.powf(-snr_db / 20.0) / noise_rms;
                for (s, &w) in out.samples.iter_mut().zip(&noise) {
                    *s = *s + F::of(g * w);
                }
            }
        }
        Augmentation::TimeMask { frames } => {
            check_range(frames >= 1 && frames <= cfg.max_time_mask_frames, "time mask")?;
            let total = frontend.frame_count(n);
            let len = frames.min(total);
            let start = rng.gen_range(0..=total - len);
            out.time_masks.push(MaskBand { start, len });
        }
        Augmentation::FreqMask { bins } => {
            check_range(bins >= 1 && bins <= cfg.max_freq_mask_bins, "freq mask")?;
            let total = frontend.mel_bins;
            let len = bins.min(total);
            let start = rng.gen_range(0..=total - len);
            out.freq_masks.push(MaskBand { start, len });
        }
    }

    for s in out.samples.iter_mut() {
        if *s > F::one() {
            *s = F::one();
            clipped += 1;
        } else if *s < -F::one() {
            *s = -F::one();
            clipped += 1;
        }
    }

    Ok(Augmented {
        clip: out,
        augmentation_id: spec.augmentation.kind().id(),
        clipped_samples: clipped,
    })
}

/// Draws a kind uniformly from `allowed` and its parameters uniformly from
/// the configured ranges. Advance of `rng` is the only state change.
pub fn sample_augmentation(
    rng: &mut ChaCha8Rng,
    cfg: &AugmentConfig,
    allowed: &[AugmentationKind],
) -> AugmentationSpec {
    assert!(!allowed.is_empty(), "allowed kinds must be non-empty");
    let kind = allowed[rng.gen_range(0..allowed.len())];
    let augmentation = match kind {
        AugmentationKind::None => Augmentation::None,
        AugmentationKind::PitchShift => Augmentation::PitchShift {
            semitones: rng.gen_range(-cfg.pitch_semitones..=cfg.pitch_semitones),
        },
        AugmentationKind::TimeShift => Augmentation::TimeShift {
            seconds: rng.gen_range(-cfg.time_shift_seconds..=cfg.time_shift_seconds),
        },
        AugmentationKind::TimeStretch => {
            Augmentation::TimeStretch { factor: rng.gen_range(cfg.stretch_min..=cfg.stretch_max) }
        }
        AugmentationKind::FadeIn => {
            Augmentation::FadeIn { fraction: rng.gen_range(cfg.fade_min_frac..=cfg.fade_max_frac) }
        }
        AugmentationKind::FadeOut => {
            Augmentation::FadeOut { fraction: rng.gen_range(cfg.fade_min_frac..=cfg.fade_max_frac) }
        }
        AugmentationKind::WhiteNoise => {
            Augmentation::WhiteNoise { snr_db: rng.gen_range(cfg.snr_min_db..=cfg.snr_max_db) }
        }
        AugmentationKind::TimeMask => {
            Augmentation::TimeMask { frames: rng.gen_range(1..=cfg.max_time_mask_frames) }
        }
        AugmentationKind::FreqMask => {
            Augmentation::FreqMask { bins: rng.gen_range(1..=cfg.max_freq_mask_bins) }
        }
    };
    AugmentationSpec { augmentation, rng_seed: rng.gen() }
}

// =========================================================================
// signal helpers
// =========================================================================

/// Linear-interpolation resampling by playback rate `r` (output is shorter
/// for r > 1).
fn resample<F: Scalar>(samples: &[F], rate: f64) -> Vec<F> {
    let n = samples.len();
    let out_len = ((n - 1) as f64 / rate).floor() as usize + 1;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * rate;
        let j = pos.floor() as usize;
        let frac = pos - j as f64;
        let a = samples[j.min(n - 1)];
        let b = samples[(j + 1).min(n - 1)];
        out.push(a + (b - a) * F::of(frac));
    }
    out
}

/// Overlap-add time stretch that preserves pitch: Hann-windowed grains
/// advance by `hop * factor` on analysis and `hop` on synthesis.
fn ola_stretch<F: Scalar>(samples: &[F], factor: f64) -> Vec<F> {
    let n = samples.len();
    let win = 1024.min(n);
    let hop = win / 2;
    if hop == 0 {
        return samples.to_vec();
    }
    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos()))
        .collect();
    let out_len = (n as f64 / factor).ceil() as usize + win;
    let mut acc = vec![0.0f64; out_len];
    let mut norm = vec![0.0f64; out_len];
    let mut t = 0usize;
    loop {
        let analysis = (t as f64 * hop as f64 * factor).round() as usize;
        if analysis + win > n {
            break;
        }
        let synthesis = t * hop;
        for i in 0..win {
            acc[synthesis + i] += window[i] * samples[analysis + i].as_f64();
            norm[synthesis + i] += window[i];
        }
        t += 1;
    }
    acc.iter()
        .zip(&norm)
        .map(|(&a, &w)| if w > 1e-8 { F::of(a / w) } else { F::zero() })
        .collect()
}

fn crop_or_pad<F: Scalar>(samples: &[F], n: usize) -> Vec<F> {
    let mut out = samples.to_vec();
    out.resize(n, F::zero());
    out
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn rms_f<F: Scalar>(samples: &[F]) -> f64 {
    rms64(&samples.iter().map(|s| s.as_f64()).collect::<Vec<_>>())
}

fn rms64(samples: &[f64]) -> f64 {
    (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt()
}
