//! Synthetic machine-sound corpus generator.
//!
//! Produces small MIMII-shaped datasets for tests and smoke runs: each
//! machine ID is a harmonic stack at its own fundamental (placed at least
//! three mel bins from every other ID), with per-type amplitude modulation
//! and harmonic decay for timbre. Anomalies alter spectral content —
//! detuning, transient bursts, or harmonic dropout — never just level: every
//! clip is RMS-normalized before noise is added. Output is fully determined
//! by the seed.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav, AudioClip, Condition, MachineType};
use crate::config::FrontendConfig;
use crate::error::{Error, Result};
use crate::features::mel_center_frequencies;
use crate::manifest::{DatasetManifest, ManifestEntry, Split};

/// One synthetic machine type: a name plus one fundamental per machine ID.
#[derive(Clone, Debug)]
pub struct SynthMachine {
    pub name: String,
    pub fundamentals_hz: Vec<f64>,
}

/// Corpus layout and signal parameters.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub sample_rate: u32,
    pub clip_seconds: f64,
    pub machines: Vec<SynthMachine>,
    /// Normal clips per ID that land in the train split.
    pub train_per_id: usize,
    /// Held-out normal clips per ID in the test split.
    pub test_normal_per_id: usize,
    /// Anomalous clips per ID (always test).
    pub test_anomaly_per_id: usize,
    /// SNR of the additive noise floor, in dB.
    pub noise_snr_db: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            clip_seconds: 2.0,
            machines: vec![
                SynthMachine {
                    name: "hum".into(),
                    fundamentals_hz: vec![120.0, 190.0, 300.0, 475.0],
                },
                SynthMachine {
                    name: "whir".into(),
                    fundamentals_hz: vec![750.0, 1190.0, 1890.0, 3000.0],
                },
            ],
            train_per_id: 8,
            test_normal_per_id: 4,
            test_anomaly_per_id: 4,
            noise_snr_db: 20.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate != 16_000 {
            return Err(Error::Synth("only 16 kHz corpora are supported".into()));
        }
        if self.machines.len() < 2 {
            return Err(Error::Synth("need at least two machine types".into()));
        }
        if self.clip_seconds <= 0.0 {
            return Err(Error::Synth("clip_seconds must be positive".into()));
        }
        if self.train_per_id == 0 {
            return Err(Error::Synth("train_per_id must be positive".into()));
        }
        let fc = FrontendConfig { sample_rate: self.sample_rate, ..Default::default() };
        let centers = mel_center_frequencies(&fc);
        let mut bins: Vec<(usize, String)> = Vec::new();
        for m in &self.machines {
            if m.fundamentals_hz.len() < 2 {
                return Err(Error::Synth(format!("{}: need at least two machine IDs", m.name)));
            }
            for (id, &f0) in m.fundamentals_hz.iter().enumerate() {
                if !(f0 > 0.0 && f0 < fc.fmax) {
                    return Err(Error::Synth(format!(
                        "{} id {id}: fundamental {f0} Hz outside (0, {})",
                        m.name, fc.fmax
                    )));
                }
                bins.push((nearest_mel_bin(&centers, f0), format!("{}/id_{id:02}", m.name)));
            }
        }
        for i in 0..bins.len() {
            for j in i + 1..bins.len() {
                let d = bins[i].0.abs_diff(bins[j].0);
                if d < 3 {
                    return Err(Error::Synth(format!(
                        "fundamentals of {} and {} are only {d} mel bins apart (need >= 3)",
                        bins[i].1, bins[j].1
                    )));
                }
            }
        }
        Ok(())
    }
}

fn nearest_mel_bin(centers: &[f64], hz: f64) -> usize {
    centers
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - hz).abs().partial_cmp(&(b.1 - hz).abs()).unwrap())
        .map(|(i, _)| i)
        .unwrap()
}

/// Stable per-file seed derived from the corpus seed and file coordinates.
fn file_seed(seed: u64, type_idx: usize, id: usize, condition: Condition, file_idx: usize) -> u64 {
    let mut z = seed
        ^ (type_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (id as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ ((condition == Condition::Anomaly) as u64).wrapping_mul(0x94D0_49BB_1331_11EB)
        ^ (file_idx as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0,1] so the log is finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// How an anomalous clip deviates; cycled by file index so every mode occurs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum AnomalyMode {
    Detune,
    Bursts,
    HarmonicDropout,
}

const ANOMALY_MODES: [AnomalyMode; 3] =
    [AnomalyMode::Detune, AnomalyMode::Bursts, AnomalyMode::HarmonicDropout];

/// Renders one clip. Pure given its arguments.
fn synth_clip(
    spec: &SynthSpec,
    type_idx: usize,
    id: usize,
    condition: Condition,
    file_idx: usize,
    seed: u64,
) -> AudioClip<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(file_seed(seed, type_idx, id, condition, file_idx));
    let n = (spec.clip_seconds * spec.sample_rate as f64).round() as usize;
    let sr = spec.sample_rate as f64;

    let mut f0 = spec.machines[type_idx].fundamentals_hz[id];
    let mode = if condition == Condition::Anomaly {
        Some(ANOMALY_MODES[file_idx % ANOMALY_MODES.len()])
    } else {
        None
    };
    if mode == Some(AnomalyMode::Detune) {
        // >= 8% shift, direction alternating per file.
        let sign = if file_idx % 2 == 0 { 1.0 } else { -1.0 };
        f0 *= 1.0 + sign * 0.10;
    }
    // Normal manufacturing spread: tiny per-clip drift, well under a mel bin.
    f0 *= 1.0 + (rng.gen::<f64>() - 0.5) * 0.004;

    // Per-type timbre: harmonic decay and amplitude-modulation rate.
    let decay = 1.0 + 0.5 * type_idx as f64;
    let am_rate = 3.0 + 2.5 * type_idx as f64;
    let am_depth = 0.3;
    let n_harmonics = 5usize;
    let dropped = |h: usize| mode == Some(AnomalyMode::HarmonicDropout) && (2..=4).contains(&h);

    let mut harm_amp: Vec<f64> = (1..=n_harmonics)
        .map(|h| if dropped(h) { 0.0 } else { (h as f64).powf(-decay) })
        .collect();
    // Small random amplitude jitter so clips are not copies of each other.
    for a in harm_amp.iter_mut() {
        *a *= 1.0 + (rng.gen::<f64>() - 0.5) * 0.1;
    }
    let phases: Vec<f64> =
        (0..n_harmonics).map(|_| rng.gen::<f64>() * 2.0 * std::f64::consts::PI).collect();
    let am_phase = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;

    let mut samples = vec![0.0f64; n];
    for (i, s) in samples.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let am = 1.0 + am_depth * (2.0 * std::f64::consts::PI * am_rate * t + am_phase).sin();
        let mut v = 0.0;
        for h in 0..n_harmonics {
            let f = f0 * (h + 1) as f64;
            if f >= sr / 2.0 {
                continue;
            }
            v += harm_amp[h] * (2.0 * std::f64::consts::PI * f * t + phases[h]).sin();
        }
        *s = am * v;
    }

    if mode == Some(AnomalyMode::Bursts) {
        // Short broadband clicks scattered through the clip.
        let tone_rms = rms(&samples);
        let burst_len = (0.005 * sr) as usize;
        for _ in 0..8 {
            let start = rng.gen_range(0..n.saturating_sub(burst_len));
            for j in 0..burst_len {
                samples[start + j] += 3.0 * tone_rms * gaussian(&mut rng);
            }
        }
    }

    // Same loudness for every clip: anomalies must not be separable by level.
    let target_rms = 0.1;
    let r = rms(&samples);
    if r > 0.0 {
        let g = target_rms / r;
        for s in samples.iter_mut() {
            *s *= g;
        }
    }

    // Noise floor at the configured SNR relative to the normalized signal.
    let noise_rms = target_rms * 10f64.powf(-spec.noise_snr_db / 20.0);
    for s in samples.iter_mut() {
        *s += noise_rms * gaussian(&mut rng);
        *s = s.clamp(-1.0, 1.0);
    }

    AudioClip::new(samples, spec.sample_rate)
}

/// Generates the corpus under `out_dir`: a `<type>/id_XX/{normal,abnormal}`
/// tree plus a `manifest.csv` carrying the train/test split (held-out test
/// normals cannot be expressed by the tree alone). Returns the manifest.
pub fn synth_corpus(spec: &SynthSpec, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = DatasetManifest::default();

    for (type_idx, machine) in spec.machines.iter().enumerate() {
        for id in 0..machine.fundamentals_hz.len() {
            let base = out_dir.join(&machine.name).join(format!("id_{id:02}"));
            std::fs::create_dir_all(base.join("normal"))?;
            std::fs::create_dir_all(base.join("abnormal"))?;

            let n_normal = spec.train_per_id + spec.test_normal_per_id;
            for file_idx in 0..n_normal {
                let clip = synth_clip(spec, type_idx, id, Condition::Normal, file_idx, seed);
                let path = base.join("normal").join(format!("{file_idx:08}.wav"));
                write_wav(&path, &clip)?;
                manifest.entries.push(ManifestEntry {
                    path,
                    machine_type: MachineType(machine.name.clone()),
                    machine_id: id as u32,
                    condition: Condition::Normal,
                    split: if file_idx < spec.train_per_id { Split::Train } else { Split::Test },
                });
            }
            for file_idx in 0..spec.test_anomaly_per_id {
                let clip = synth_clip(spec, type_idx, id, Condition::Anomaly, file_idx, seed);
                let path = base.join("abnormal").join(format!("{file_idx:08}.wav"));
                write_wav(&path, &clip)?;
                manifest.entries.push(ManifestEntry {
                    path,
                    machine_type: MachineType(machine.name.clone()),
                    machine_id: id as u32,
                    condition: Condition::Anomaly,
                    split: Split::Test,
                });
            }
        }
    }

    manifest.entries.sort_by(|a, b| a.path.cmp(&b.path));
    crate::manifest::write_manifest_csv(&out_dir.join("manifest.csv"), &manifest)?;
    manifest.validate()?;
    Ok(manifest)
}

fn rms(samples: &[f64]) -> f64 {
    (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt()
}
