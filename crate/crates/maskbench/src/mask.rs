//! Oracle masks and masked reconstruction.
//!
//! The binary mask compares target and interferer magnitudes per cell and is
//! the training target; reconstruction multiplies the mixture spectrogram by
//! a real mask, which keeps the mixture phase by construction.

use crate::audio::Waveform;
use crate::dsp::{istft, ComplexSpectrogram, MagnitudeSpectrogram};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Scalar;

/// Real-valued mask in [0, 1], same shape as the spectrogram it applies to.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeFreqMask<T> {
    pub grid: Grid<T>,
}

impl<T: Scalar> TimeFreqMask<T> {
    /// Wraps a grid, checking the [0, 1] range.
    pub fn new(grid: Grid<T>) -> Result<Self> {
        for &v in grid.data() {
            if !(v >= T::zero() && v <= T::one()) {
                return Err(Error::NonFinite {
                    context: format!("mask entry {v} outside [0, 1]"),
                });
            }
        }
        Ok(TimeFreqMask { grid })
    }

    pub fn uniform(rows: usize, cols: usize, value: T) -> Self {
        TimeFreqMask {
            grid: Grid::filled(rows, cols, value),
        }
    }
}

/// Ideal binary mask: 1 where the target magnitude is at least the
/// interferer magnitude (ties award the target), else 0.
pub fn ideal_binary_mask<T: Scalar>(
    target_mag: &MagnitudeSpectrogram<T>,
    interf_mag: &MagnitudeSpectrogram<T>,
) -> Result<TimeFreqMask<T>> {
    if !target_mag.grid.same_shape(&interf_mag.grid) {
        return Err(Error::shape(
            "ideal_binary_mask",
            target_mag.grid.shape_string(),
            interf_mag.grid.shape_string(),
        ));
    }
    let data = target_mag
        .grid
        .data()
        .iter()
        .zip(interf_mag.grid.data())
        .map(|(&t, &i)| if t >= i { T::one() } else { T::zero() })
        .collect();
    Ok(TimeFreqMask {
        grid: Grid::from_vec(target_mag.grid.rows(), target_mag.grid.cols(), data),
    })
}

/// Soft ratio mask t / (t + i); degenerate cells (t + i below 1e-12) get 0.5
/// so neither source is favored.
pub fn ideal_ratio_mask<T: Scalar>(
    target_mag: &MagnitudeSpectrogram<T>,
    interf_mag: &MagnitudeSpectrogram<T>,
) -> Result<TimeFreqMask<T>> {
    if !target_mag.grid.same_shape(&interf_mag.grid) {
        return Err(Error::shape(
            "ideal_ratio_mask",
            target_mag.grid.shape_string(),
            interf_mag.grid.shape_string(),
        ));
    }
    let floor = T::from_f64c(1e-12);
    let half = T::from_f64c(0.5);
    let data = target_mag
        .grid
        .data()
        .iter()
        .zip(interf_mag.grid.data())
        .map(|(&t, &i)| {
            let denom = t + i;
            if denom < floor {
                half
            } else {
                t / denom
            }
        })
        .collect();
    Ok(TimeFreqMask {
        grid: Grid::from_vec(target_mag.grid.rows(), target_mag.grid.cols(), data),
    })
}

/// Apply a mask to the mixture spectrogram and invert. Scaling the complex
/// cell by the real mask value is exactly mask * |mix| * exp(i*phase(mix)).
pub fn reconstruct<T: Scalar>(
    mix_spec: &ComplexSpectrogram<T>,
    mask: &TimeFreqMask<T>,
    out_len: usize,
) -> Result<Waveform<T>> {
    if mix_spec.grid.rows() != mask.grid.rows() || mix_spec.grid.cols() != mask.grid.cols() {
        return Err(Error::shape(
            "reconstruct",
            format!("{}x{}", mix_spec.grid.rows(), mix_spec.grid.cols()),
            mask.grid.shape_string(),
        ));
    }
    let mut est = mix_spec.clone();
    for (z, &m) in est.grid.data_mut().iter_mut().zip(mask.grid.data()) {
        *z = *z * m;
    }
    istft(&est, out_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{magnitude_phase, stft, StftConfig};
    use crate::metrics::{bss_decompose, sdr};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn mag_from(rows: usize, cols: usize, data: Vec<f64>) -> MagnitudeSpectrogram<f64> {
        MagnitudeSpectrogram {
            grid: Grid::from_vec(rows, cols, data),
        }
    }

    #[test]
    fn ibm_all_ones_against_silent_interferer() {
        let t = mag_from(2, 2, vec![1.0, 2.0, 3.0, 0.0]);
        let i = mag_from(2, 2, vec![0.0; 4]);
        let m = ideal_binary_mask(&t, &i).unwrap();
        assert!(m.grid.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ibm_elementwise_comparison_with_tie() {
        let t = mag_from(2, 2, vec![1.0, 3.0, 2.0, 0.0]);
        let i = mag_from(2, 2, vec![2.0, 1.0, 2.0, 5.0]);
        let m = ideal_binary_mask(&t, &i).unwrap();
        assert_eq!(m.grid.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn ibm_complementarity_without_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = mag_from(16, 16, (0..256).map(|_| rng.gen_range(0.0..1.0)).collect());
        let b = mag_from(16, 16, (0..256).map(|_| rng.gen_range(0.0..1.0)).collect());
        let mab = ideal_binary_mask(&a, &b).unwrap();
        let mba = ideal_binary_mask(&b, &a).unwrap();
        for (x, y) in mab.grid.data().iter().zip(mba.grid.data()) {
            assert_eq!(x + y, 1.0);
        }
    }

    #[test]
    fn irm_constants_and_complementarity() {
        let t = mag_from(1, 3, vec![0.5, 0.5, 0.5]);
        let m = ideal_ratio_mask(&t, &t).unwrap();
        assert!(m.grid.data().iter().all(|&v| v == 0.5));

        let zero = mag_from(1, 3, vec![0.0; 3]);
        let ones = ideal_ratio_mask(&t, &zero).unwrap();
        assert!(ones.grid.data().iter().all(|&v| v == 1.0));
        // Degenerate cells fall back to 0.5.
        let deg = ideal_ratio_mask(&zero, &zero).unwrap();
        assert!(deg.grid.data().iter().all(|&v| v == 0.5));

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = mag_from(8, 8, (0..64).map(|_| rng.gen_range(0.1..1.0)).collect());
        let b = mag_from(8, 8, (0..64).map(|_| rng.gen_range(0.1..1.0)).collect());
        let mab = ideal_ratio_mask(&a, &b).unwrap();
        let mba = ideal_ratio_mask(&b, &a).unwrap();
        for (x, y) in mab.grid.data().iter().zip(mba.grid.data()) {
            assert!((x + y - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_shape_mismatch_is_rejected() {
        let t = mag_from(2, 2, vec![0.0; 4]);
        let i = mag_from(2, 3, vec![0.0; 6]);
        assert!(matches!(
            ideal_binary_mask(&t, &i),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn reconstruct_identity_and_zero_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = Waveform::new(
            (0..6400).map(|_| rng.gen_range(-0.5..0.5)).collect::<Vec<f64>>(),
            16_000,
        );
        let cfg = StftConfig::default();
        let spec = stft(&w, &cfg).unwrap();

        let ones = TimeFreqMask::uniform(spec.bins(), spec.frames(), 1.0);
        let direct = istft(&spec, w.len()).unwrap();
        let via_mask = reconstruct(&spec, &ones, w.len()).unwrap();
        assert_eq!(via_mask.samples, direct.samples);

        let zeros = TimeFreqMask::uniform(spec.bins(), spec.frames(), 0.0);
        let silent = reconstruct(&spec, &zeros, w.len()).unwrap();
        assert!(silent.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn ibm_separates_band_disjoint_sines() {
        let len = 16_000;
        let a = Waveform::new(
            (0..len).map(|i| 0.3 * (TAU * 1000.0 * i as f64 / 16_000.0).sin()).collect::<Vec<f64>>(),
            16_000,
        );
        let b = Waveform::new(
            (0..len).map(|i| 0.3 * (TAU * 3000.0 * i as f64 / 16_000.0).sin()).collect::<Vec<f64>>(),
            16_000,
        );
        let mix = Waveform::new(
            a.samples.iter().zip(&b.samples).map(|(&x, &y)| x + y).collect::<Vec<f64>>(),
            16_000,
        );
        let cfg = StftConfig::default();
        let (mag_a, _) = magnitude_phase(&stft(&a, &cfg).unwrap());
        let (mag_b, _) = magnitude_phase(&stft(&b, &cfg).unwrap());
        let mix_spec = stft(&mix, &cfg).unwrap();
        let ibm = ideal_binary_mask(&mag_a, &mag_b).unwrap();
        let est = reconstruct(&mix_spec, &ibm, len).unwrap();
        let d = bss_decompose(&est, &[a.clone(), b], 0).unwrap();
        let score = sdr(&d);
        assert!(score > 30.0, "oracle separation sdr {score}");
    }

    #[test]
    fn mask_range_is_validated() {
        assert!(TimeFreqMask::new(Grid::from_vec(1, 2, vec![0.0, 1.0])).is_ok());
        assert!(TimeFreqMask::new(Grid::from_vec(1, 2, vec![-0.1, 0.5])).is_err());
        assert!(TimeFreqMask::new(Grid::from_vec(1, 2, vec![0.1, 1.5])).is_err());
    }
}
