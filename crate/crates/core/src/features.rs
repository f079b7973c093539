//! Log-mel spectrogram extraction.
//!
//! Reflect-centered STFT with a periodic Hann window, power spectrum, HTK
//! mel filterbank, floor-clamped natural log. Internals run in f64 regardless
//! of the output scalar so extraction is bit-stable across precisions.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::AudioClip;
use crate::config::FrontendConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequency (Hz) of each mel filter under `cfg`.
pub fn mel_center_frequencies(cfg: &FrontendConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    (1..=cfg.mel_bins)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bins + 1) as f64))
        .collect()
}

/// Triangular mel filterbank, `[mel_bins, fft_size/2 + 1]`, peak weight 1.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Tensor<f64> {
    let n_bins = cfg.fft_size / 2 + 1;
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.mel_bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bins + 1) as f64))
        .collect();
    let mut fb = Tensor::zeros([cfg.mel_bins, n_bins]);
    for m in 0..cfg.mel_bins {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
            let w = if f <= c { (f - l) / (c - l) } else { (r - f) / (r - c) };
            if w > 0.0 {
                fb.set2(m, k, w);
            }
        }
    }
    fb
}

fn reflect_pad(samples: &[f64], pad: usize) -> Vec<f64> {
    let n = samples.len();
    debug_assert!(n > pad, "reflect padding needs len > pad");
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(samples[i]);
    }
    out.extend_from_slice(samples);
    for i in 1..=pad {
        out.push(samples[n - 1 - i]);
    }
    out
}

/// Computes the `[T, mel_bins]` log-mel spectrogram of a clip and applies any
/// mask bands the clip carries (masked cells become `ln(log_floor)`).
pub fn compute_log_mel<F: Scalar>(clip: &AudioClip<F>, cfg: &FrontendConfig) -> Result<Tensor<F>> {
    cfg.validate().map_err(|e| Error::Feature(e.to_string()))?;
    if clip.sample_rate != cfg.sample_rate {
        return Err(Error::Feature(format!(
            "clip sample rate {} != configured {}",
            clip.sample_rate, cfg.sample_rate
        )));
    }
    if clip.samples.len() < cfg.fft_size {
        return Err(Error::Feature(format!(
            "clip of {} samples shorter than one FFT window ({})",
            clip.samples.len(),
            cfg.fft_size
        )));
    }
    let samples: Vec<f64> = clip.samples.iter().map(|&s| s.as_f64()).collect();
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Feature("non-finite sample in input".into()));
    }

    let n_fft = cfg.fft_size;
    let hop = cfg.hop_size;
    let t_frames = cfg.frame_count(samples.len());
    let padded = reflect_pad(&samples, n_fft / 2);

    // Periodic Hann window.
    let window: Vec<f64> = (0..n_fft)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / n_fft as f64).cos()))
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;
    let fb = mel_filterbank(cfg);
    let ln_floor = cfg.log_floor.ln();

    let mut out = Tensor::<F>::zeros([t_frames, cfg.mel_bins]);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0f64; n_bins];
    for t in 0..t_frames {
        let start = t * hop;
        for n in 0..n_fft {
            buf[n] = Complex::new(padded[start + n] * window[n], 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for m in 0..cfg.mel_bins {
            let row = &fb.data()[m * n_bins..(m + 1) * n_bins];
            let mut acc = 0.0;
            for (w, p) in row.iter().zip(&power) {
                acc += w * p;
            }
            out.set2(t, m, F::of(acc.max(cfg.log_floor).ln()));
        }
    }

    // Scheduled spectral masks: whole frame rows / mel bin columns to floor.
    let floor = F::of(ln_floor);
    for band in &clip.time_masks {
        let end = (band.start + band.len).min(t_frames);
        for t in band.start.min(t_frames)..end {
            for m in 0..cfg.mel_bins {
                out.set2(t, m, floor);
            }
        }
    }
    for band in &clip.freq_masks {
        let end = (band.start + band.len).min(cfg.mel_bins);
        for m in band.start.min(cfg.mel_bins)..end {
            for t in 0..t_frames {
                out.set2(t, m, floor);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::MaskBand;

    fn sine_clip(freq: f64, seconds: f64, rate: u32) -> AudioClip<f64> {
        let n = (seconds * rate as f64) as usize;
        let samples = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect();
        AudioClip::new(samples, rate)
    }

    #[test]
    fn canonical_clip_shape() {
        let cfg = FrontendConfig::default();
        let clip = AudioClip::new(vec![0.01f64; 160_000], 16_000);
        let spec = compute_log_mel(&clip, &cfg).unwrap();
        assert_eq!(spec.shape(), &[313, 128]);
    }

    #[test]
    fn all_zero_clip_hits_log_floor_everywhere() {
        let cfg = FrontendConfig::default();
        let clip = AudioClip::new(vec![0.0f64; 32_000], 16_000);
        let spec = compute_log_mel(&clip, &cfg).unwrap();
        let floor = 1e-10f64.ln();
        for &v in spec.data() {
            assert_eq!(v, floor);
        }
    }

    #[test]
    fn sine_argmax_bin_brackets_its_frequency() {
        // Independent oracle: filter center m sits at the mel midpoint; the
        // winning bin's neighbors must straddle the tone.
        let hz2mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let mel2hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let centers: Vec<f64> = (1..=128)
            .map(|i| mel2hz(hz2mel(0.0) + (hz2mel(8000.0) - hz2mel(0.0)) * i as f64 / 129.0))
            .collect();

        let cfg = FrontendConfig::default();
        let clip = sine_clip(1000.0, 2.0, 16_000);
        let spec = compute_log_mel(&clip, &cfg).unwrap();
        let t_frames = spec.rows();
        let mut winners = std::collections::BTreeSet::new();
        for t in 1..t_frames - 2 {
            let row = spec.row(t);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            winners.insert(argmax);
        }
        assert_eq!(winners.len(), 1, "argmax bin must be constant on interior frames");
        let m = *winners.iter().next().unwrap();
        let lo = if m == 0 { 0.0 } else { centers[m - 1] };
        let hi = if m == 127 { 8000.0 } else { centers[m + 1] };
        assert!(lo < 1000.0 && 1000.0 < hi, "bin {m} covers [{lo}, {hi}]");
    }

    #[test]
    fn amplification_never_decreases_cells() {
        let cfg = FrontendConfig::default();
        let clip = sine_clip(440.0, 2.0, 16_000);
        let spec = compute_log_mel(&clip, &cfg).unwrap();
        let louder = AudioClip::new(clip.samples.iter().map(|&s| s * 2.0).collect(), 16_000);
        let spec2 = compute_log_mel(&louder, &cfg).unwrap();
        for (&a, &b) in spec.data().iter().zip(spec2.data()) {
            assert!(b >= a);
        }
    }

    #[test]
    fn masks_floor_exact_bands() {
        let cfg = FrontendConfig::default();
        let mut clip = sine_clip(500.0, 2.0, 16_000);
        clip.time_masks.push(MaskBand { start: 5, len: 30 });
        clip.freq_masks.push(MaskBand { start: 40, len: 10 });
        let spec = compute_log_mel(&clip, &cfg).unwrap();
        let floor = 1e-10f64.ln();
        for t in 0..spec.rows() {
            for m in 0..spec.cols() {
                let in_t = (5..35).contains(&t);
                let in_f = (40..50).contains(&m);
                if in_t || in_f {
                    assert_eq!(spec.at2(t, m), floor, "({t},{m}) should be masked");
                } else if spec.at2(t, m) == floor {
                    // Unmasked cells of a loud sine shouldn't sit at the floor
                    // near the tone; allow it far away.
                    continue;
                }
            }
        }
        // Exactly 30 masked frame rows.
        let masked_rows = (0..spec.rows())
            .filter(|&t| (0..spec.cols()).all(|m| spec.at2(t, m) == floor))
            .count();
        assert_eq!(masked_rows, 30);
    }

    #[test]
    fn rejects_rate_mismatch_and_short_clips() {
        let cfg = FrontendConfig::default();
        let clip = AudioClip::new(vec![0.0f64; 16_000], 22_050);
        assert!(compute_log_mel(&clip, &cfg).is_err());
        let clip = AudioClip::new(vec![0.0f64; 512], 16_000);
        assert!(compute_log_mel(&clip, &cfg).is_err());
    }

    #[test]
    fn extraction_is_deterministic() {
        let cfg = FrontendConfig::default();
        let clip = sine_clip(777.0, 2.0, 16_000);
        let a = compute_log_mel(&clip, &cfg).unwrap();
        let b = compute_log_mel(&clip, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
