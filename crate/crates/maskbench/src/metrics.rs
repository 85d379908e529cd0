//! Separation scoring: SDR/SIR/SAR from an exact least-squares
//! decomposition of the estimate, STOI intelligibility, and the
//! relative-improvement statistic used by the report tables.
//!
//! The decomposition uses time-invariant gains: the estimate is projected
//! onto the span of the raw references (no filtered variants), so the three
//! components are exact and the toy examples are reproducible by hand.
//! Scores are always computed in f64 regardless of the waveform precision.

use std::path::Path;

use crate::audio::{resample, Waveform};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// dB cap applied when an energy falls below `ENERGY_FLOOR`.
pub const DB_CAP: f64 = 300.0;
/// Energies below this are treated as exactly zero.
pub const ENERGY_FLOOR: f64 = 1e-30;

/// The three additive components of an estimate.
#[derive(Debug, Clone)]
pub struct BssDecomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
}

/// One scored source: BSS ratios in dB plus STOI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationScores {
    pub sdr_db: f64,
    pub sir_db: f64,
    pub sar_db: f64,
    pub stoi: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn energy(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.
fn sym_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off < 1e-28 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Solve the (small) SPD system by Gaussian elimination with partial pivots.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::RankDeficientReferences { cond: f64::INFINITY });
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut v = b[col];
        for k in (col + 1)..n {
            v -= a[col][k] * x[k];
        }
        x[col] = v / a[col][col];
    }
    Ok(x)
}

/// Decompose `estimate` into target, interference, and artifact parts.
///
/// `s_target` is the orthogonal projection of the estimate onto the target
/// reference; `e_interf` extends this to the span of all references;
/// `e_artif` is the remainder.
pub fn bss_decompose<T: Scalar>(
    estimate: &Waveform<T>,
    references: &[Waveform<T>],
    target_index: usize,
) -> Result<BssDecomposition> {
    assert!(target_index < references.len(), "target index in range");
    let n = estimate.len();
    for r in references {
        if r.len() != n {
            return Err(Error::shape(
                "bss_decompose",
                format!("{n} samples"),
                format!("{} samples", r.len()),
            ));
        }
    }
    let est: Vec<f64> = estimate.samples.iter().map(|&s| s.to_f64().unwrap()).collect();
    let refs: Vec<Vec<f64>> = references
        .iter()
        .map(|r| r.samples.iter().map(|&s| s.to_f64().unwrap()).collect())
        .collect();

    let k = refs.len();
    let mut gram = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i..k {
            let g = dot(&refs[i], &refs[j]);
            gram[i][j] = g;
            gram[j][i] = g;
        }
    }
    let eigs = sym_eigenvalues(gram.clone());
    let max_e = eigs.iter().cloned().fold(f64::MIN, f64::max);
    let min_e = eigs.iter().cloned().fold(f64::MAX, f64::min);
    let cond = if min_e <= 0.0 {
        f64::INFINITY
    } else {
        max_e / min_e
    };
    if !(cond < 1e12) {
        return Err(Error::RankDeficientReferences { cond });
    }

    let rhs: Vec<f64> = (0..k).map(|i| dot(&est, &refs[i])).collect();
    let coeffs = solve_linear(gram.clone(), rhs.clone())?;

    let target = &refs[target_index];
    let alpha = rhs[target_index] / gram[target_index][target_index];

    let mut s_target = vec![0.0; n];
    let mut proj_all = vec![0.0; n];
    for i in 0..n {
        s_target[i] = alpha * target[i];
        let mut p = 0.0;
        for (c, r) in coeffs.iter().zip(&refs) {
            p += c * r[i];
        }
        proj_all[i] = p;
    }
    let e_interf: Vec<f64> = (0..n).map(|i| proj_all[i] - s_target[i]).collect();
    let e_artif: Vec<f64> = (0..n).map(|i| est[i] - proj_all[i]).collect();

    let d = BssDecomposition {
        s_target,
        e_interf,
        e_artif,
    };
    #[cfg(debug_assertions)]
    d.check_invariants(&est);
    Ok(d)
}

impl BssDecomposition {
    /// Additivity and orthogonality, checked on every call in test builds.
    #[cfg(debug_assertions)]
    fn check_invariants(&self, estimate: &[f64]) {
        let scale = energy(estimate).sqrt().max(1e-12);
        for i in 0..estimate.len() {
            let sum = self.s_target[i] + self.e_interf[i] + self.e_artif[i];
            debug_assert!(
                (sum - estimate[i]).abs() <= 1e-9 * scale,
                "decomposition additivity violated at sample {i}"
            );
        }
        // Components below float-residue scale are exactly zero for the
        // purposes of orthogonality.
        let floor = 1e-9 * scale;
        let nt = energy(&self.s_target).sqrt();
        let ni = energy(&self.e_interf).sqrt();
        let na = energy(&self.e_artif).sqrt();
        if nt > floor && ni > floor {
            debug_assert!(dot(&self.s_target, &self.e_interf).abs() / (nt * ni) < 1e-6);
        }
        let spatial: Vec<f64> = self
            .s_target
            .iter()
            .zip(&self.e_interf)
            .map(|(a, b)| a + b)
            .collect();
        let ns = energy(&spatial).sqrt();
        if ns > floor && na > floor {
            debug_assert!(dot(&spatial, &self.e_artif).abs() / (ns * na) < 1e-6);
        }
    }
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den < ENERGY_FLOOR {
        DB_CAP
    } else if num < ENERGY_FLOOR {
        -DB_CAP
    } else {
        10.0 * (num / den).log10()
    }
}

/// Overall separation quality: target energy over total error energy.
pub fn sdr(d: &BssDecomposition) -> f64 {
    let err: Vec<f64> = d
        .e_interf
        .iter()
        .zip(&d.e_artif)
        .map(|(i, a)| i + a)
        .collect();
    ratio_db(energy(&d.s_target), energy(&err))
}

/// Interference suppression: target energy over interference energy.
pub fn sir(d: &BssDecomposition) -> f64 {
    ratio_db(energy(&d.s_target), energy(&d.e_interf))
}

/// Artifact suppression: in-span energy over artifact energy.
pub fn sar(d: &BssDecomposition) -> f64 {
    let spatial: Vec<f64> = d
        .s_target
        .iter()
        .zip(&d.e_interf)
        .map(|(a, b)| a + b)
        .collect();
    ratio_db(energy(&spatial), energy(&d.e_artif))
}

// ---------------------------------------------------------------------------
// STOI

const STOI_RATE: u32 = 10_000;
const STOI_FRAME: usize = 256;
const STOI_HOP: usize = 128;
const STOI_FFT: usize = 512;
const STOI_BANDS: usize = 15;
const STOI_LOWEST_CF: f64 = 150.0;
const STOI_SEGMENT: usize = 30;
const STOI_DYN_RANGE_DB: f64 = 40.0;
const STOI_SDR_BOUND_DB: f64 = -15.0;

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / n as f64).cos()))
        .collect()
}

/// Frames (windowed) of a 10 kHz signal.
fn stoi_frames(samples: &[f64], window: &[f64]) -> Vec<Vec<f64>> {
    if samples.len() < STOI_FRAME {
        return Vec::new();
    }
    let n_frames = (samples.len() - STOI_FRAME) / STOI_HOP + 1;
    (0..n_frames)
        .map(|m| {
            (0..STOI_FRAME)
                .map(|i| samples[m * STOI_HOP + i] * window[i])
                .collect()
        })
        .collect()
}

/// Power spectrum (bins 0..=256) of one zero-padded frame via a direct
/// radix-2 FFT-sized DFT; frames are short so a simple loop is fine here,
/// but we reuse rustfft for speed.
fn frame_band_envelopes(frames: &[Vec<f64>], bands: &[Vec<usize>]) -> Vec<Vec<f64>> {
    use rustfft::num_complex::Complex;
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(STOI_FFT);
    let mut envelopes = vec![vec![0.0; frames.len()]; bands.len()];
    let mut buf = vec![Complex::new(0.0, 0.0); STOI_FFT];
    for (m, frame) in frames.iter().enumerate() {
        for (i, item) in buf.iter_mut().enumerate() {
            *item = if i < frame.len() {
                Complex::new(frame[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (j, band) in bands.iter().enumerate() {
            let e: f64 = band.iter().map(|&k| buf[k].norm_sqr()).sum();
            envelopes[j][m] = e.sqrt();
        }
    }
    envelopes
}

/// FFT bin lists for the 15 one-third-octave bands starting at 150 Hz.
fn third_octave_bands() -> Vec<Vec<usize>> {
    let bin_hz = STOI_RATE as f64 / STOI_FFT as f64;
    (0..STOI_BANDS)
        .map(|j| {
            let cf = STOI_LOWEST_CF * 2f64.powf(j as f64 / 3.0);
            let lo = cf / 2f64.powf(1.0 / 6.0);
            let hi = cf * 2f64.powf(1.0 / 6.0);
            (0..=STOI_FFT / 2)
                .filter(|&k| {
                    let f = k as f64 * bin_hz;
                    f >= lo && f < hi
                })
                .collect()
        })
        .collect()
}

/// Short-time objective intelligibility of `degraded` against `clean`.
///
/// Both signals are resampled to 10 kHz; frames more than 40 dB below the
/// clean signal's loudest frame are dropped from both before one-third-octave
/// envelopes are correlated over 30-frame segments with the -15 dB bound.
pub fn stoi<T: Scalar>(clean: &Waveform<T>, degraded: &Waveform<T>) -> Result<f64> {
    if clean.len() != degraded.len() {
        return Err(Error::shape(
            "stoi",
            format!("{} samples", clean.len()),
            format!("{} samples", degraded.len()),
        ));
    }
    let clean10 = resample(&clean.convert::<f64>(), STOI_RATE)?;
    let degr10 = resample(&degraded.convert::<f64>(), STOI_RATE)?;

    let window = hann(STOI_FRAME);
    let clean_frames = stoi_frames(&clean10.samples, &window);
    let degr_frames = stoi_frames(&degr10.samples, &window);

    // Silence removal keyed on the clean signal's frame energies.
    let energies: Vec<f64> = clean_frames
        .iter()
        .map(|f| 20.0 * energy(f).sqrt().max(1e-300).log10())
        .collect();
    let max_db = energies.iter().cloned().fold(f64::MIN, f64::max);
    let keep: Vec<usize> = (0..clean_frames.len())
        .filter(|&m| energies[m] > max_db - STOI_DYN_RANGE_DB)
        .collect();
    if keep.len() < STOI_SEGMENT {
        return Err(Error::TooShortForStoi {
            frames: keep.len(),
            needed: STOI_SEGMENT,
        });
    }
    let kept_clean: Vec<Vec<f64>> = keep.iter().map(|&m| clean_frames[m].clone()).collect();
    let kept_degr: Vec<Vec<f64>> = keep.iter().map(|&m| degr_frames[m].clone()).collect();

    let bands = third_octave_bands();
    let x_env = frame_band_envelopes(&kept_clean, &bands);
    let y_env = frame_band_envelopes(&kept_degr, &bands);

    // The -15 dB bound caps how far the normalized degraded envelope may
    // overshoot the clean one: y' <= x * (1 + 10^(15/20)).
    let clip_gain = 1.0 + 10f64.powf(-STOI_SDR_BOUND_DB / 20.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for j in 0..bands.len() {
        for m in STOI_SEGMENT..=x_env[j].len() {
            let x = &x_env[j][m - STOI_SEGMENT..m];
            let y = &y_env[j][m - STOI_SEGMENT..m];
            let ny = energy(y).sqrt();
            let alpha = if ny > 0.0 { energy(x).sqrt() / ny } else { 0.0 };
            let y_norm: Vec<f64> = y
                .iter()
                .zip(x)
                .map(|(&yi, &xi)| (alpha * yi).min(xi * clip_gain))
                .collect();
            let mx = x.iter().sum::<f64>() / x.len() as f64;
            let my = y_norm.iter().sum::<f64>() / y_norm.len() as f64;
            let xc: Vec<f64> = x.iter().map(|&v| v - mx).collect();
            let yc: Vec<f64> = y_norm.iter().map(|&v| v - my).collect();
            let nxc = energy(&xc).sqrt();
            let nyc = energy(&yc).sqrt();
            if nxc < 1e-20 || nyc < 1e-20 {
                continue;
            }
            total += dot(&xc, &yc) / (nxc * nyc);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::TooShortForStoi {
            frames: keep.len(),
            needed: STOI_SEGMENT,
        });
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// Aggregates

/// Relative improvement in percent, with the new value as the denominator
/// (the convention the report tables use).
pub fn relative_improvement(base: f64, new: f64) -> Result<f64> {
    if new == 0.0 {
        return Err(Error::NonFinite {
            context: "relative_improvement with new = 0".into(),
        });
    }
    Ok(100.0 * (new - base) / new)
}

/// Score two estimates against their conditioned-for references.
///
/// Assignment is by index (the conditioning identity), never by best
/// permutation: estimate `i` is scored against reference `i`.
pub fn score_pair<T: Scalar>(
    estimates: &[Waveform<T>; 2],
    references: &[Waveform<T>; 2],
) -> Result<[SeparationScores; 2]> {
    let refs = references.to_vec();
    let mut out = [SeparationScores {
        sdr_db: 0.0,
        sir_db: 0.0,
        sar_db: 0.0,
        stoi: 0.0,
    }; 2];
    for i in 0..2 {
        let d = bss_decompose(&estimates[i], &refs, i)?;
        out[i] = SeparationScores {
            sdr_db: sdr(&d),
            sir_db: sir(&d),
            sar_db: sar(&d),
            stoi: stoi(&references[i], &estimates[i])?,
        };
    }
    Ok(out)
}

/// One row of a scores file.
#[derive(Debug, Clone)]
pub struct ScoreRow {
    pub mixture_id: String,
    pub source_index: usize,
    pub scores: SeparationScores,
}

/// Write the scores export: mixture_id, source_index, sdr_db, sir_db,
/// sar_db, stoi.
pub fn write_scores_csv(rows: &[ScoreRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    w.write_record(["mixture_id", "source_index", "sdr_db", "sir_db", "sar_db", "stoi"])
        .map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
    for r in rows {
        w.write_record([
            r.mixture_id.clone(),
            r.source_index.to_string(),
            format!("{:.6}", r.scores.sdr_db),
            format!("{:.6}", r.scores.sir_db),
            format!("{:.6}", r.scores.sar_db),
            format!("{:.6}", r.scores.stoi),
        ])
        .map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a scores file back.
pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::Config(format!("bad scores row in {}", path.display())))
        };
        rows.push(ScoreRow {
            mixture_id: rec.get(0).unwrap_or("").to_string(),
            source_index: rec
                .get(1)
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| Error::Config(format!("bad scores row in {}", path.display())))?,
            scores: SeparationScores {
                sdr_db: parse(2)?,
                sir_db: parse(3)?,
                sar_db: parse(4)?,
                stoi: parse(5)?,
            },
        });
    }
    Ok(rows)
}

/// Mean of each metric over rows.
pub fn mean_scores(rows: &[ScoreRow]) -> SeparationScores {
    let n = rows.len().max(1) as f64;
    let mut acc = SeparationScores {
        sdr_db: 0.0,
        sir_db: 0.0,
        sar_db: 0.0,
        stoi: 0.0,
    };
    for r in rows {
        acc.sdr_db += r.scores.sdr_db;
        acc.sir_db += r.scores.sir_db;
        acc.sar_db += r.scores.sar_db;
        acc.stoi += r.scores.stoi;
    }
    acc.sdr_db /= n;
    acc.sir_db /= n;
    acc.sar_db /= n;
    acc.stoi /= n;
    acc
}
