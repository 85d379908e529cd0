//! Deterministic synthetic-mixture corpora: manifest generation, mixture
//! realization, and a synthetic demo corpus generator for desk-scale runs.
//!
//! Corpus layout on disk: `corpus_dir/<speaker_id>/<clip>.wav` plus a
//! `speakers.csv` table (speaker_id, gender). Manifests are CSV with one
//! header row and are byte-identical across reruns of the same config.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{
    fit_length_at, max_fit_offset, read_wav, resample_to_16k, rms_normalize, wav_info, Waveform,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub mod synth;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn parse(s: &str) -> Result<Gender> {
        match s.trim().to_ascii_uppercase().as_str() {
            "M" | "MALE" => Ok(Gender::Male),
            "F" | "FEMALE" => Ok(Gender::Female),
            other => Err(Error::Config(format!("unknown gender '{other}'"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Gender::Male => "M",
            Gender::Female => "F",
        }
    }
}

/// Pair category by the two sources' genders. Mixed pairs always store the
/// male source first, so the category fixes both genders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    MaleMale,
    FemaleFemale,
    MaleFemale,
}

pub const ALL_CATEGORIES: [Category; 3] =
    [Category::MaleMale, Category::FemaleFemale, Category::MaleFemale];

impl Category {
    pub fn tag(&self) -> &'static str {
        match self {
            Category::MaleMale => "mm",
            Category::FemaleFemale => "ff",
            Category::MaleFemale => "mf",
        }
    }

    pub fn parse(s: &str) -> Result<Category> {
        match s {
            "mm" => Ok(Category::MaleMale),
            "ff" => Ok(Category::FemaleFemale),
            "mf" => Ok(Category::MaleFemale),
            other => Err(Error::Config(format!("unknown category '{other}'"))),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// One source clip of a mixture; `clip` is relative to the corpus dir.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceRef {
    pub speaker_id: String,
    pub clip: PathBuf,
    /// Truncation offset into the 16 kHz resampled clip.
    pub offset: usize,
}

/// One synthetic mixture, fully determined by its fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixtureRecord {
    pub mixture_id: String,
    pub source_a: SourceRef,
    pub source_b: SourceRef,
    pub category: Category,
    pub split: Split,
    pub seed: u64,
}

/// Corpus-forging parameters.
#[derive(Debug, Clone)]
pub struct ForgeConfig {
    pub corpus_dir: PathBuf,
    pub n_per_category: usize,
    pub train_fraction: f64,
    pub segment_samples: usize,
    pub target_rms: f64,
    pub master_seed: u64,
}

impl ForgeConfig {
    pub fn new(corpus_dir: impl Into<PathBuf>) -> Self {
        ForgeConfig {
            corpus_dir: corpus_dir.into(),
            n_per_category: 20,
            train_fraction: 12_000.0 / 13_200.0,
            segment_samples: crate::audio::SEGMENT_SAMPLES,
            target_rms: crate::audio::DEFAULT_TARGET_RMS,
            master_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} must lie strictly between 0 and 1",
                self.train_fraction
            )));
        }
        if self.n_per_category == 0 {
            return Err(Error::Config("n_per_category must be at least 1".into()));
        }
        Ok(())
    }
}

/// A speaker with clip pools per split. Clips of speakers with at least two
/// clips never cross splits; single-clip speakers share the clip between
/// pools, which is the best available fallback.
#[derive(Debug, Clone)]
pub struct Speaker {
    pub id: String,
    pub gender: Gender,
    pub clips: Vec<PathBuf>,
    train_pool: Vec<usize>,
    val_pool: Vec<usize>,
}

impl Speaker {
    fn pool(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_pool,
            Split::Val => &self.val_pool,
        }
    }
}

/// Read `speakers.csv` and enumerate each speaker's clips (sorted by name).
pub fn load_speakers(corpus_dir: &Path, train_fraction: f64) -> Result<Vec<Speaker>> {
    let table = corpus_dir.join("speakers.csv");
    let mut rd = csv::Reader::from_path(&table).map_err(|e| Error::Csv {
        path: table.clone(),
        source: e,
    })?;
    let mut speakers = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::Csv {
            path: table.clone(),
            source: e,
        })?;
        let id = rec
            .get(0)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Config("speakers.csv row missing speaker_id".into()))?
            .to_string();
        let gender = Gender::parse(rec.get(1).unwrap_or(""))?;

        let dir = corpus_dir.join(&id);
        let mut clips: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|x| x == "wav").unwrap_or(false))
            .map(|p| PathBuf::from(&id).join(p.file_name().unwrap()))
            .collect();
        clips.sort();
        if clips.is_empty() {
            return Err(Error::Config(format!("speaker '{id}' has no clips")));
        }

        let n = clips.len();
        let (train_pool, val_pool) = if n == 1 {
            (vec![0], vec![0])
        } else {
            let n_val = (((1.0 - train_fraction) * n as f64).round() as usize).clamp(1, n - 1);
            let split_at = n - n_val;
            ((0..split_at).collect(), (split_at..n).collect())
        };
        speakers.push(Speaker {
            id,
            gender,
            clips,
            train_pool,
            val_pool,
        });
    }
    if speakers.is_empty() {
        return Err(Error::Config(format!(
            "empty speakers table at {}",
            table.display()
        )));
    }
    Ok(speakers)
}

/// Stated per-record seed mixing function.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-record seed: master seed mixed with the category/record index.
pub fn record_seed(master_seed: u64, category_index: usize, record_index: usize) -> u64 {
    splitmix64(
        splitmix64(master_seed) ^ splitmix64(((category_index as u64) << 32) | record_index as u64),
    )
}

fn pick_pair<'a, R: Rng>(
    speakers: &'a [&'a Speaker],
    rng: &mut R,
) -> (&'a Speaker, &'a Speaker) {
    let a = rng.gen_range(0..speakers.len());
    let mut b = rng.gen_range(0..speakers.len() - 1);
    if b >= a {
        b += 1;
    }
    (speakers[a], speakers[b])
}

fn pick_source<R: Rng>(
    speaker: &Speaker,
    split: Split,
    segment_samples: usize,
    corpus_dir: &Path,
    rng: &mut R,
) -> Result<SourceRef> {
    let pool = speaker.pool(split);
    let clip_idx = pool[rng.gen_range(0..pool.len())];
    let clip = speaker.clips[clip_idx].clone();
    let (len, rate) = wav_info(&corpus_dir.join(&clip))?;
    if rate < 8000 {
        return Err(Error::SampleRateTooLow { rate_hz: rate });
    }
    let res_len = ((len as f64) * 16_000.0 / rate as f64).round() as usize;
    let hi = max_fit_offset(res_len, segment_samples);
    let offset = if hi == 0 { 0 } else { rng.gen_range(0..=hi) };
    Ok(SourceRef {
        speaker_id: speaker.id.clone(),
        clip,
        offset,
    })
}

/// Build the full mixture manifest. Byte-identical across reruns of the
/// same config.
pub fn forge_corpus(cfg: &ForgeConfig) -> Result<Vec<MixtureRecord>> {
    cfg.validate()?;
    let speakers = load_speakers(&cfg.corpus_dir, cfg.train_fraction)?;
    let males: Vec<&Speaker> = speakers.iter().filter(|s| s.gender == Gender::Male).collect();
    let females: Vec<&Speaker> = speakers
        .iter()
        .filter(|s| s.gender == Gender::Female)
        .collect();

    for (cat, need_m, need_f) in [
        (Category::MaleMale, 2usize, 0usize),
        (Category::FemaleFemale, 0, 2),
        (Category::MaleFemale, 1, 1),
    ] {
        if males.len() < need_m || females.len() < need_f {
            return Err(Error::InfeasibleCategory {
                category: cat.tag().to_string(),
                detail: format!(
                    "need {} male / {} female speakers, corpus has {} / {}",
                    need_m,
                    need_f,
                    males.len(),
                    females.len()
                ),
            });
        }
    }

    let n = cfg.n_per_category;
    let n_train = (cfg.train_fraction * n as f64).round() as usize;
    let mut records = Vec::with_capacity(3 * n);
    for (ci, cat) in ALL_CATEGORIES.iter().enumerate() {
        for i in 0..n {
            let split = if i < n_train { Split::Train } else { Split::Val };
            let seed = record_seed(cfg.master_seed, ci, i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (spk_a, spk_b) = match cat {
                Category::MaleMale => pick_pair(&males, &mut rng),
                Category::FemaleFemale => pick_pair(&females, &mut rng),
                Category::MaleFemale => (
                    males[rng.gen_range(0..males.len())],
                    females[rng.gen_range(0..females.len())],
                ),
            };
            let source_a = pick_source(spk_a, split, cfg.segment_samples, &cfg.corpus_dir, &mut rng)?;
            let source_b = pick_source(spk_b, split, cfg.segment_samples, &cfg.corpus_dir, &mut rng)?;
            records.push(MixtureRecord {
                mixture_id: format!("{}-{:05}", cat.tag(), i),
                source_a,
                source_b,
                category: *cat,
                split,
                seed,
            });
        }
    }
    Ok(records)
}

/// The mixture and its two post-scaling references.
///
/// `mixture` is built as `ref_a + ref_b` after the shared anti-clip gain is
/// applied to both references, so the additivity is bitwise exact.
#[derive(Debug, Clone)]
pub struct RealizedMixture<T> {
    pub mixture: Waveform<T>,
    pub ref_a: Waveform<T>,
    pub ref_b: Waveform<T>,
}

fn prepare_source<T: Scalar>(src: &SourceRef, cfg: &ForgeConfig) -> Result<Waveform<T>> {
    let raw = read_wav::<T>(&cfg.corpus_dir.join(&src.clip))?;
    let res = resample_to_16k(&raw)?;
    let cut = fit_length_at(&res, cfg.segment_samples, src.offset);
    rms_normalize(&cut, cfg.target_rms)
}

/// Realize one record: source -> resample -> fit length -> normalize,
/// then apply the shared anti-clip gain and sum.
pub fn realize_mixture<T: Scalar>(
    rec: &MixtureRecord,
    cfg: &ForgeConfig,
) -> Result<RealizedMixture<T>> {
    let a = prepare_source::<T>(&rec.source_a, cfg)?;
    let b = prepare_source::<T>(&rec.source_b, cfg)?;
    let peak = a
        .samples
        .iter()
        .zip(&b.samples)
        .fold(T::zero(), |acc, (&x, &y)| acc.max((x + y).abs()));
    let limit = T::from_f64c(0.99);
    let gain = if peak > limit { limit / peak } else { T::one() };
    let ref_a = Waveform::new(a.samples.iter().map(|&s| s * gain).collect(), 16_000);
    let ref_b = Waveform::new(b.samples.iter().map(|&s| s * gain).collect(), 16_000);
    let mixture = Waveform::new(
        ref_a
            .samples
            .iter()
            .zip(&ref_b.samples)
            .map(|(&x, &y)| x + y)
            .collect(),
        16_000,
    );
    Ok(RealizedMixture {
        mixture,
        ref_a,
        ref_b,
    })
}

// ---------------------------------------------------------------------------
// Manifest I/O

const MANIFEST_HEADER: [&str; 10] = [
    "mixture_id",
    "speaker_a",
    "clip_a",
    "offset_a",
    "speaker_b",
    "clip_b",
    "offset_b",
    "category",
    "split",
    "seed",
];

pub fn write_manifest(records: &[MixtureRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    w.write_record(MANIFEST_HEADER).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    for r in records {
        w.write_record([
            r.mixture_id.clone(),
            r.source_a.speaker_id.clone(),
            r.source_a.clip.to_string_lossy().into_owned(),
            r.source_a.offset.to_string(),
            r.source_b.speaker_id.clone(),
            r.source_b.clip.to_string_lossy().into_owned(),
            r.source_b.offset.to_string(),
            r.category.tag().to_string(),
            r.split.tag().to_string(),
            r.seed.to_string(),
        ])
        .map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<MixtureRecord>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut records = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| Error::Config(format!("short manifest row in {}", path.display())))
        };
        let int = |i: usize| -> Result<u64> {
            field(i)?.parse::<u64>().map_err(|_| {
                Error::Config(format!("bad integer in manifest {}", path.display()))
            })
        };
        records.push(MixtureRecord {
            mixture_id: field(0)?.to_string(),
            source_a: SourceRef {
                speaker_id: field(1)?.to_string(),
                clip: PathBuf::from(field(2)?),
                offset: int(3)? as usize,
            },
            source_b: SourceRef {
                speaker_id: field(4)?.to_string(),
                clip: PathBuf::from(field(5)?),
                offset: int(6)? as usize,
            },
            category: Category::parse(field(7)?)?,
            split: Split::parse(field(8)?)?,
            seed: int(9)?,
        });
    }
    Ok(records)
}

/// Records of one split, erroring if the split is empty.
pub fn split_records(records: &[MixtureRecord], split: Split) -> Result<Vec<MixtureRecord>> {
    let out: Vec<MixtureRecord> = records
        .iter()
        .filter(|r| r.split == split)
        .cloned()
        .collect();
    if out.is_empty() {
        return Err(Error::EmptySplit {
            split: split.tag().to_string(),
        });
    }
    Ok(out)
}

/// Distinct speaker ids appearing in a manifest, sorted.
pub fn manifest_speakers(records: &[MixtureRecord]) -> Vec<String> {
    let mut ids: Vec<String> = records
        .iter()
        .flat_map(|r| {
            [
                r.source_a.speaker_id.clone(),
                r.source_b.speaker_id.clone(),
            ]
        })
        .collect();
    ids.sort();
    ids.dedup();
    ids
}

/// Deterministic shuffle helper used by the training loop.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx
}
