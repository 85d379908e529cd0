//! Mono PCM audio: WAV I/O, linear resampling, loudness normalization,
//! segment length fitting.
//!
//! Everything downstream assumes canonical 16 kHz segments of
//! [`SEGMENT_SAMPLES`] samples (3.2 s), which maps to exactly 320 STFT
//! frames at the 160-sample hop.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Canonical sample rate for the whole pipeline.
pub const CANONICAL_RATE_HZ: u32 = 16_000;
/// Canonical segment length: 3.2 s at 16 kHz (320 frames at hop 160).
pub const SEGMENT_SAMPLES: usize = 51_200;
/// Default loudness target; leaves headroom so two summed sources rarely clip.
pub const DEFAULT_TARGET_RMS: f64 = 0.05;

/// Mono waveform with a sample rate. Samples are dimensionless amplitudes,
/// nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T> {
    pub samples: Vec<T>,
    pub sample_rate_hz: u32,
}

impl<T: Scalar> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate_hz: u32) -> Self {
        assert!(sample_rate_hz > 0, "sample rate must be positive");
        Waveform {
            samples,
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        // Accumulate in f64 regardless of T so the normalization contract
        // holds at its stated tolerance.
        let sum_sq: f64 = self
            .samples
            .iter()
            .map(|&s| {
                let v = s.to_f64().unwrap();
                v * v
            })
            .sum();
        (sum_sq / self.samples.len() as f64).sqrt()
    }

    pub fn peak(&self) -> T {
        self.samples
            .iter()
            .fold(T::zero(), |acc, &s| acc.max(s.abs()))
    }

    /// Same samples at a different precision.
    pub fn convert<U: Scalar>(&self) -> Waveform<U> {
        Waveform {
            samples: self
                .samples
                .iter()
                .map(|&s| U::from_f64c(s.to_f64().unwrap()))
                .collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

/// Read a mono PCM signed 16-bit WAV file; samples are scaled to [-1, 1]
/// by dividing by 32768.
pub fn read_wav<T: Scalar>(path: &Path) -> Result<Waveform<T>> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::WavUnreadable {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::WavNotMono {
            path: path.to_path_buf(),
            channels: spec.channels,
        });
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::WavNotPcm16 {
            path: path.to_path_buf(),
            detail: format!("{:?} {} bit", spec.sample_format, spec.bits_per_sample),
        });
    }
    let scale = T::from_f64c(1.0 / 32768.0);
    let samples = reader
        .into_samples::<i16>()
        .map(|s| {
            s.map(|v| T::from_i16(v).unwrap() * scale)
                .map_err(|e| Error::WavUnreadable {
                    path: path.to_path_buf(),
                    detail: e.to_string(),
                })
        })
        .collect::<Result<Vec<T>>>()?;
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Number of samples and sample rate from the header alone.
pub fn wav_info(path: &Path) -> Result<(usize, u32)> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::WavUnreadable {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    })?;
    Ok((reader.duration() as usize, reader.spec().sample_rate))
}

/// Write a mono PCM signed 16-bit WAV file. Samples outside [-1, 1] are
/// clamped before quantization.
pub fn write_wav<T: Scalar>(w: &Waveform<T>, path: &Path) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::WavUnreadable {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    })?;
    for &s in &w.samples {
        let v = (s.to_f64().unwrap() * 32768.0).round();
        let q = v.clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| Error::WavUnreadable {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    }
    writer.finalize().map_err(|e| Error::WavUnreadable {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    Ok(())
}

/// Linear-interpolation resample to an arbitrary rate.
///
/// Output length is `round(len * target / in_rate)`; output sample `j` is
/// read at input position `j * in_rate / target`. Rates below 8000 Hz are
/// rejected as a quality floor.
pub fn resample<T: Scalar>(w: &Waveform<T>, target_hz: u32) -> Result<Waveform<T>> {
    if w.sample_rate_hz < 8000 {
        return Err(Error::SampleRateTooLow {
            rate_hz: w.sample_rate_hz,
        });
    }
    if w.sample_rate_hz == target_hz {
        return Ok(w.clone());
    }
    let n_in = w.samples.len();
    let n_out =
        ((n_in as f64) * (target_hz as f64) / (w.sample_rate_hz as f64)).round() as usize;
    let mut out = Vec::with_capacity(n_out);
    let ratio = w.sample_rate_hz as f64 / target_hz as f64;
    for j in 0..n_out {
        let pos = j as f64 * ratio;
        let i0 = pos.floor() as usize;
        let frac = pos - i0 as f64;
        let a = w.samples[i0.min(n_in - 1)];
        let b = w.samples[(i0 + 1).min(n_in - 1)];
        let t = T::from_f64c(frac);
        out.push(a + (b - a) * t);
    }
    Ok(Waveform::new(out, target_hz))
}

/// Resample to the canonical 16 kHz rate.
pub fn resample_to_16k<T: Scalar>(w: &Waveform<T>) -> Result<Waveform<T>> {
    resample(w, CANONICAL_RATE_HZ)
}

/// Scale so the output RMS equals `target_rms`. Silent inputs (RMS below
/// 1e-8) are rejected as unusable sources.
pub fn rms_normalize<T: Scalar>(w: &Waveform<T>, target_rms: f64) -> Result<Waveform<T>> {
    let rms = w.rms();
    if rms <= 1e-8 {
        return Err(Error::SilentSource { rms });
    }
    let gain = T::from_f64c(target_rms / rms);
    Ok(Waveform::new(
        w.samples.iter().map(|&s| s * gain).collect(),
        w.sample_rate_hz,
    ))
}

/// Largest valid truncation offset for `fit_length_at`.
pub fn max_fit_offset(input_len: usize, n_samples: usize) -> usize {
    input_len.saturating_sub(n_samples)
}

/// Force length to exactly `n_samples`: longer inputs are truncated starting
/// at `offset` (clamped to keep the window in range), shorter inputs are
/// zero-padded at the end.
pub fn fit_length_at<T: Scalar>(w: &Waveform<T>, n_samples: usize, offset: usize) -> Waveform<T> {
    assert!(n_samples > 0, "requested length must be positive");
    let mut out = Vec::with_capacity(n_samples);
    if w.samples.len() >= n_samples {
        let start = offset.min(max_fit_offset(w.samples.len(), n_samples));
        out.extend_from_slice(&w.samples[start..start + n_samples]);
    } else {
        out.extend_from_slice(&w.samples);
        out.resize(n_samples, T::zero());
    }
    Waveform::new(out, w.sample_rate_hz)
}

/// As `fit_length_at`, drawing the truncation offset uniformly from the
/// supplied seeded generator.
pub fn fit_length<T: Scalar, R: Rng>(w: &Waveform<T>, n_samples: usize, rng: &mut R) -> Waveform<T> {
    let hi = max_fit_offset(w.samples.len(), n_samples);
    let offset = if hi == 0 { 0 } else { rng.gen_range(0..=hi) };
    fit_length_at(w, n_samples, offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("maskbench-audio-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn pcm_scaling_reads_half_scale_sample() {
        let path = tmp("half.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(16384i16).unwrap();
        w.finalize().unwrap();
        let wave: Waveform<f64> = read_wav(&path).unwrap();
        assert_eq!(wave.sample_rate_hz, 16_000);
        assert_eq!(wave.samples, vec![0.5]);
    }

    #[test]
    fn empty_data_chunk_reads_as_empty_waveform() {
        let path = tmp("empty.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 22_050,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let w = hound::WavWriter::create(&path, spec).unwrap();
        w.finalize().unwrap();
        let wave: Waveform<f64> = read_wav(&path).unwrap();
        assert!(wave.is_empty());
        assert_eq!(wave.sample_rate_hz, 22_050);
    }

    #[test]
    fn stereo_and_wrong_encoding_are_reported_distinctly() {
        let stereo = tmp("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        match read_wav::<f64>(&stereo) {
            Err(Error::WavNotMono { channels, .. }) => assert_eq!(channels, 2),
            other => panic!("expected WavNotMono, got {other:?}"),
        }

        let float = tmp("float.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&float, spec).unwrap();
        w.write_sample(0.0f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            read_wav::<f64>(&float),
            Err(Error::WavNotPcm16 { .. })
        ));

        assert!(matches!(
            read_wav::<f64>(&tmp("missing.wav")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn write_clamps_out_of_range_samples() {
        let path = tmp("clamp.wav");
        let wave = Waveform::new(vec![0.0f64, 2.0, -2.0], 16_000);
        write_wav(&wave, &path).unwrap();
        let mut rd = hound::WavReader::open(&path).unwrap();
        let raw: Vec<i16> = rd.samples::<i16>().map(|s| s.unwrap()).collect();
        assert_eq!(raw, vec![0, 32767, -32768]);
    }

    #[test]
    fn wav_round_trip_within_quantization_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<f64> = (0..2048).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wave = Waveform::new(samples, 16_000);
        let path = tmp("round.wav");
        write_wav(&wave, &path).unwrap();
        let back: Waveform<f64> = read_wav(&path).unwrap();
        assert_eq!(back.len(), wave.len());
        for (a, b) in wave.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0, "a={a} b={b}");
        }
    }

    #[test]
    fn resample_identity_at_16k() {
        let wave = Waveform::new(vec![0.1f64, -0.2, 0.3], 16_000);
        let out = resample_to_16k(&wave).unwrap();
        assert_eq!(out.samples, wave.samples);
    }

    #[test]
    fn resample_preserves_constants() {
        let wave = Waveform::new(vec![0.25f64; 4800], 48_000);
        let out = resample_to_16k(&wave).unwrap();
        assert_eq!(out.sample_rate_hz, 16_000);
        assert_eq!(out.len(), 1600);
        assert!(out.samples.iter().all(|&s| (s - 0.25).abs() < 1e-12));
    }

    #[test]
    fn resample_sine_matches_analytic_form() {
        let f = 1000.0;
        let n = 32_000;
        let wave = Waveform::new(
            (0..n)
                .map(|i| (TAU * f * i as f64 / 32_000.0).sin())
                .collect::<Vec<f64>>(),
            32_000,
        );
        let out = resample_to_16k(&wave).unwrap();
        assert_eq!(out.len(), 16_000);
        let max_err = out
            .samples
            .iter()
            .enumerate()
            .map(|(j, &s)| (s - (TAU * f * j as f64 / 16_000.0).sin()).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 0.01, "max_err={max_err}");
    }

    #[test]
    fn resample_rejects_low_rates() {
        let wave = Waveform::new(vec![0.1f64; 100], 4000);
        assert!(matches!(
            resample_to_16k(&wave),
            Err(Error::SampleRateTooLow { rate_hz: 4000 })
        ));
    }

    #[test]
    fn rms_normalize_identity_and_scaling() {
        let wave = Waveform::new(vec![0.5f64, -0.5], 16_000);
        let out = rms_normalize(&wave, 0.5).unwrap();
        assert_eq!(out.samples, vec![0.5, -0.5]);

        let wave = Waveform::new(vec![1.0f64, -1.0], 16_000);
        let out = rms_normalize(&wave, 0.05).unwrap();
        assert_eq!(out.samples, vec![0.05, -0.05]);
    }

    #[test]
    fn rms_normalize_hits_target_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let wave = Waveform::new(
            (0..51_200).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
            16_000,
        );
        let out = rms_normalize(&wave, 0.05).unwrap();
        assert!((out.rms() - 0.05).abs() / 0.05 < 1e-9);
    }

    #[test]
    fn rms_normalize_rejects_silence() {
        let wave = Waveform::new(vec![0.0f64; 100], 16_000);
        assert!(matches!(
            rms_normalize(&wave, 0.05),
            Err(Error::SilentSource { .. })
        ));
    }

    #[test]
    fn fit_length_pads_truncates_and_repeats() {
        let wave = Waveform::new((0..100).map(|i| i as f64).collect::<Vec<f64>>(), 16_000);
        let padded = fit_length_at(&wave, 200, 0);
        assert_eq!(padded.len(), 200);
        assert_eq!(padded.samples[99], 99.0);
        assert!(padded.samples[100..].iter().all(|&s| s == 0.0));

        let exact = fit_length_at(&wave, 100, 0);
        assert_eq!(exact.samples, wave.samples);

        let long = Waveform::new((0..100_000).map(|i| i as f64).collect::<Vec<f64>>(), 16_000);
        let mut rng_a = ChaCha8Rng::seed_from_u64(3);
        let mut rng_b = ChaCha8Rng::seed_from_u64(3);
        let a = fit_length(&long, 51_200, &mut rng_a);
        let b = fit_length(&long, 51_200, &mut rng_b);
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.len(), 51_200);
    }
}
