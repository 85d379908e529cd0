//! Synthetic desk-scale corpus: a few speakers with disjoint spectral
//! bands and syllabic on/off envelopes, written as PCM16 WAVs plus the
//! speakers table. Mixtures of these are separable by an oracle mask and
//! carry enough temporal structure for intelligibility scoring.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav, Waveform};
use crate::error::{Error, Result};

/// 16 kHz / 1024-point FFT bin width in Hz.
const BIN_HZ: f64 = 16_000.0 / 1024.0;
/// Speaker bands live inside FFT bins [6, 62) so the whole corpus sits
/// below 1 kHz; a 64-bin network band then covers it.
const BAND_LO_BIN: usize = 6;
const BAND_HI_BIN: usize = 62;

#[derive(Debug, Clone)]
pub struct SynthCorpusConfig {
    pub speakers_per_gender: usize,
    pub clips_per_speaker: usize,
    pub clip_seconds: f64,
    pub seed: u64,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        SynthCorpusConfig {
            speakers_per_gender: 2,
            clips_per_speaker: 3,
            clip_seconds: 4.0,
            seed: 1,
        }
    }
}

/// Frequency band (Hz) assigned to global speaker index `k` of `n`.
fn speaker_band(k: usize, n: usize) -> (f64, f64) {
    let span = BAND_HI_BIN - BAND_LO_BIN;
    let width = span / n;
    let lo_bin = BAND_LO_BIN + k * width;
    // Keep a 2-bin guard on each side of the slot against window leakage.
    let lo = (lo_bin + 2) as f64 * BIN_HZ;
    let hi = (lo_bin + width - 2) as f64 * BIN_HZ;
    (lo, hi)
}

/// One clip: a few tones confined to the speaker band, gated by a shared
/// syllabic envelope with raised-cosine ramps, over a faint in-band noise
/// bed. Peak-bounded to 0.6 so PCM16 quantization never clips.
fn synth_clip(band: (f64, f64), n_samples: usize, rng: &mut ChaCha8Rng) -> Waveform<f64> {
    let rate = 16_000.0;
    let (lo, hi) = band;
    let n_tones = 3;
    let tones: Vec<(f64, f64, f64)> = (0..n_tones)
        .map(|_| {
            (
                rng.gen_range(lo..hi),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.5..1.0),
            )
        })
        .collect();
    let noise: Vec<(f64, f64, f64)> = (0..24)
        .map(|_| {
            (
                rng.gen_range(lo..hi),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.01..0.03),
            )
        })
        .collect();

    // Syllable gate: on 150-400 ms, off 50-150 ms, 20 ms ramps.
    let ramp = (0.020 * rate) as usize;
    let mut gate = vec![0.0f64; n_samples];
    let mut pos = 0usize;
    let mut on = true;
    while pos < n_samples {
        let dur = if on {
            rng.gen_range((0.15 * rate) as usize..(0.40 * rate) as usize)
        } else {
            rng.gen_range((0.05 * rate) as usize..(0.15 * rate) as usize)
        };
        let end = (pos + dur).min(n_samples);
        if on {
            for (i, g) in gate.iter_mut().enumerate().take(end).skip(pos) {
                let into = (i - pos).min(end - 1 - i).min(ramp) as f64 / ramp as f64;
                *g = 0.5 * (1.0 - (std::f64::consts::PI * into).cos());
            }
        }
        pos = end;
        on = !on;
    }

    let norm = 0.6 / (n_tones as f64 + 0.5);
    let samples: Vec<f64> = (0..n_samples)
        .map(|i| {
            let t = i as f64 / rate;
            let mut v = 0.0;
            for &(f, p, a) in &tones {
                v += a * (std::f64::consts::TAU * f * t + p).sin();
            }
            v *= gate[i];
            for &(f, p, a) in &noise {
                v += a * (std::f64::consts::TAU * f * t + p).sin();
            }
            norm * v
        })
        .collect();
    Waveform::new(samples, 16_000)
}

/// Generate the corpus under `dir`: `m1, m2, ... f1, f2, ...` speaker
/// directories plus `speakers.csv`. Fully determined by the config.
pub fn generate_demo_corpus(dir: &Path, cfg: &SynthCorpusConfig) -> Result<()> {
    if cfg.speakers_per_gender == 0 || cfg.clips_per_speaker == 0 {
        return Err(Error::Config(
            "demo corpus needs at least one speaker and one clip".into(),
        ));
    }
    let n_speakers = 2 * cfg.speakers_per_gender;
    if (BAND_HI_BIN - BAND_LO_BIN) / n_speakers < 5 {
        return Err(Error::Config(format!(
            "cannot fit {n_speakers} disjoint speaker bands below 1 kHz"
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let n_samples = (cfg.clip_seconds * 16_000.0).round() as usize;
    let mut table = Vec::new();
    for g in 0..2 {
        for s in 0..cfg.speakers_per_gender {
            let (prefix, gender) = if g == 0 { ("m", "M") } else { ("f", "F") };
            let id = format!("{}{}", prefix, s + 1);
            let k = g * cfg.speakers_per_gender + s;
            let band = speaker_band(k, n_speakers);
            let spk_dir = dir.join(&id);
            std::fs::create_dir_all(&spk_dir).map_err(|e| Error::io(&spk_dir, e))?;
            for c in 0..cfg.clips_per_speaker {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    cfg.seed ^ ((k as u64) << 32) ^ ((c as u64) << 16) ^ 0x5EED,
                );
                let clip = synth_clip(band, n_samples, &mut rng);
                write_wav(&clip, &spk_dir.join(format!("clip{c:02}.wav")))?;
            }
            table.push((id, gender));
        }
    }

    let table_path = dir.join("speakers.csv");
    let mut w = csv::Writer::from_path(&table_path).map_err(|e| Error::Csv {
        path: table_path.clone(),
        source: e,
    })?;
    w.write_record(["speaker_id", "gender"]).map_err(|e| Error::Csv {
        path: table_path.clone(),
        source: e,
    })?;
    for (id, gender) in table {
        w.write_record([id.as_str(), gender]).map_err(|e| Error::Csv {
            path: table_path.clone(),
            source: e,
        })?;
    }
    w.flush().map_err(|e| Error::io(&table_path, e))?;
    Ok(())
}
