//! Conditioning embeddings and their providers.
//!
//! A provider turns (speaker, query index) into a length-K vector. Lookup
//! providers are trainable per-speaker tables; fixed providers are seeded
//! constants standing in for pretrained encoders; a corruptor wraps a
//! provider and swaps an exact fraction of each pass's queries to a wrong
//! speaker.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Sign,
    Fused,
}

/// A single conditioning vector bound to a source.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningEmbedding<T> {
    pub values: Vec<T>,
    pub source_id: String,
    pub modality: Modality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    #[default]
    Add,
    Multiply,
    Concat,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<FusionMode> {
        match s {
            "add" => Ok(FusionMode::Add),
            "multiply" => Ok(FusionMode::Multiply),
            "concat" => Ok(FusionMode::Concat),
            other => Err(Error::Config(format!("unknown fusion mode '{other}'"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            FusionMode::Add => "add",
            FusionMode::Multiply => "multiply",
            FusionMode::Concat => "concat",
        }
    }
}

/// Fuse two optional embeddings. With one side absent the present embedding
/// passes through unchanged; concat applies the learned K x 2K projection.
pub fn fuse<T: Scalar>(
    visual: Option<&ConditioningEmbedding<T>>,
    sign: Option<&ConditioningEmbedding<T>>,
    mode: FusionMode,
    concat_proj: Option<&Tensor<T>>,
) -> Result<ConditioningEmbedding<T>> {
    match (visual, sign) {
        (None, None) => Err(Error::FusionEmpty),
        (Some(e), None) | (None, Some(e)) => Ok(e.clone()),
        (Some(v), Some(s)) => {
            if v.values.len() != s.values.len() {
                return Err(Error::EmbeddingLength {
                    expected: v.values.len(),
                    actual: s.values.len(),
                });
            }
            let k = v.values.len();
            let values = match mode {
                FusionMode::Add => v
                    .values
                    .iter()
                    .zip(&s.values)
                    .map(|(&a, &b)| a + b)
                    .collect(),
                FusionMode::Multiply => v
                    .values
                    .iter()
                    .zip(&s.values)
                    .map(|(&a, &b)| a * b)
                    .collect(),
                FusionMode::Concat => {
                    let proj = concat_proj.ok_or_else(|| {
                        Error::Config("concat fusion requires the projection matrix".into())
                    })?;
                    if proj.shape() != [k, 2 * k] {
                        return Err(Error::shape(
                            "concat projection",
                            format!("[{k}, {}]", 2 * k),
                            format!("{:?}", proj.shape()),
                        ));
                    }
                    let mut cat = Vec::with_capacity(2 * k);
                    cat.extend_from_slice(&v.values);
                    cat.extend_from_slice(&s.values);
                    (0..k)
                        .map(|o| {
                            (0..2 * k)
                                .map(|i| proj.data()[o * 2 * k + i] * cat[i])
                                .sum()
                        })
                        .collect()
                }
            };
            Ok(ConditioningEmbedding {
                values,
                source_id: v.source_id.clone(),
                modality: Modality::Fused,
            })
        }
    }
}

/// Sorted speaker vocabulary with stable indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeakerVocab {
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl SpeakerVocab {
    pub fn new(mut ids: Vec<String>) -> Self {
        ids.sort();
        ids.dedup();
        let index = ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        SpeakerVocab { ids, index }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownSpeaker { id: id.to_string() })
    }

    pub fn id_at(&self, idx: usize) -> &str {
        &self.ids[idx]
    }
}

/// Provider backing for one modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    /// Trainable per-speaker table.
    Lookup,
    /// Seeded constant per speaker (stand-in for a pretrained encoder).
    Fixed { seed: u64 },
}

impl ProviderKind {
    pub fn parse(s: &str) -> Result<ProviderKind> {
        match s {
            "lookup" => Ok(ProviderKind::Lookup),
            "fixed" => Ok(ProviderKind::Fixed { seed: 7 }),
            other => Err(Error::Config(format!("unknown provider kind '{other}'"))),
        }
    }
}

/// Deterministic constant embedding for a fixed provider.
pub fn fixed_embedding<T: Scalar>(seed: u64, speaker_id: &str, k: usize) -> Vec<T> {
    let mut h = seed ^ 0xFEED_FACE_CAFE_BEEF;
    for b in speaker_id.bytes() {
        h = h.wrapping_mul(0x0100_0000_01B3).wrapping_add(b as u64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let scale = 2.0 / (k as f64).sqrt();
    (0..k)
        .map(|_| T::from_f64c(rng.gen_range(-1.0..1.0) * scale))
        .collect()
}

/// Swaps an exact fraction of a pass's queries to a uniformly chosen wrong
/// speaker. Rebuild with `begin_pass` once per epoch or evaluation pass.
#[derive(Debug, Clone)]
pub struct Corruptor {
    pub fraction: f64,
    pub seed: u64,
    pass: u64,
    corrupted: Vec<bool>,
}

impl Corruptor {
    pub fn new(fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!(
                "corruption fraction {fraction} outside [0, 1]"
            )));
        }
        Ok(Corruptor {
            fraction,
            seed,
            pass: 0,
            corrupted: Vec::new(),
        })
    }

    /// Choose exactly `round(fraction * n_queries)` corrupted query indices
    /// for this pass.
    pub fn begin_pass(&mut self, n_queries: usize, pass: u64) {
        self.pass = pass;
        let n_corrupt = (self.fraction * n_queries as f64).round() as usize;
        let order = crate::forge::shuffled_indices(
            n_queries,
            self.seed ^ pass.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let mut flags = vec![false; n_queries];
        for &i in order.iter().take(n_corrupt) {
            flags[i] = true;
        }
        self.corrupted = flags;
    }

    pub fn is_corrupted(&self, query_idx: usize) -> bool {
        self.corrupted.get(query_idx).copied().unwrap_or(false)
    }

    /// Resolve a query to a (possibly wrong) speaker index.
    pub fn resolve(&self, query_idx: usize, speaker_idx: usize, n_speakers: usize) -> usize {
        if !self.is_corrupted(query_idx) || n_speakers < 2 {
            return speaker_idx;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed
                ^ self.pass.wrapping_mul(0xD134_2543_DE82_EF95)
                ^ (query_idx as u64).wrapping_mul(0x2545_F491_4F6C_DD1D),
        );
        let r = rng.gen_range(0..n_speakers - 1);
        if r >= speaker_idx {
            r + 1
        } else {
            r
        }
    }
}
