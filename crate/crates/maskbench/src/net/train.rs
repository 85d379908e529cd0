//! Seeded training loop: realize mixtures, build binary-mask targets,
//! forward the conditioned trunk, descend the summed per-source BCE.

use rayon::prelude::*;

use crate::dsp::{magnitude_phase, stft, StftConfig};
use crate::error::{Error, Result};
use crate::forge::{realize_mixture, shuffled_indices, ForgeConfig, MixtureRecord};
use crate::grid::Grid;
use crate::mask::ideal_binary_mask;
use crate::net::embedding::{fixed_embedding, Corruptor, ProviderKind};
use crate::net::model::{
    assemble_embeddings, bind_params, forward_trunk, masks_from_features, BnPhase,
    EmbeddingAssembly, EmbeddingQuery, ModelSpec, ParamStore,
};
use crate::nn::{OptimizerState, SgdConfig, Tape, Tensor};
use crate::scalar::Scalar;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Frames per training crop (the frequency extent is the network's
    /// `freq_bins`); crops are taken at seeded offsets.
    pub crop_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sgd: SgdConfig::default(),
            epochs: 10,
            batch_size: 24,
            seed: 0,
            crop_frames: 48,
        }
    }
}

/// One realized, cropped training item.
struct TrainItem<T> {
    mix_plane: Vec<T>,
    target_a: Vec<T>,
    target_b: Vec<T>,
}

fn crop_plane<T: Scalar>(grid: &Grid<T>, rows: usize, col0: usize, cols: usize) -> Grid<T> {
    grid.window(0, col0, rows, cols)
}

fn realize_item<T: Scalar>(
    rec: &MixtureRecord,
    forge_cfg: &ForgeConfig,
    stft_cfg: &StftConfig,
    freq_bins: usize,
    crop_frames: usize,
    crop_seed: u64,
) -> Result<TrainItem<T>> {
    let rm = realize_mixture::<T>(rec, forge_cfg)?;
    let mix_spec = stft(&rm.mixture, stft_cfg)?;
    let (mix_mag, _) = magnitude_phase(&mix_spec);
    let (mag_a, _) = magnitude_phase(&stft(&rm.ref_a, stft_cfg)?);
    let (mag_b, _) = magnitude_phase(&stft(&rm.ref_b, stft_cfg)?);

    let frames = mix_mag.grid.cols();
    let max_off = frames.saturating_sub(crop_frames);
    let mut rng = ChaCha8Rng::seed_from_u64(crop_seed);
    let off = if max_off == 0 {
        0
    } else {
        rng.gen_range(0..=max_off)
    };

    let mix_crop = crop_plane(&mix_mag.grid, freq_bins, off, crop_frames);
    let a_crop = crate::dsp::MagnitudeSpectrogram {
        grid: crop_plane(&mag_a.grid, freq_bins, off, crop_frames),
    };
    let b_crop = crate::dsp::MagnitudeSpectrogram {
        grid: crop_plane(&mag_b.grid, freq_bins, off, crop_frames),
    };
    let ibm_a = ideal_binary_mask(&a_crop, &b_crop)?;
    let ibm_b = ideal_binary_mask(&b_crop, &a_crop)?;

    Ok(TrainItem {
        mix_plane: mix_crop.data().to_vec(),
        target_a: ibm_a.grid.data().to_vec(),
        target_b: ibm_b.grid.data().to_vec(),
    })
}

/// Resolve the (possibly corrupted) embedding queries for a batch.
/// `positions` are epoch-order positions of the items; queries are numbered
/// `2*pos + source`.
fn resolve_queries<T: Scalar>(
    spec: &ModelSpec,
    kind: ProviderKind,
    table: &'static str,
    batch: &[&MixtureRecord],
    positions: &[usize],
    corruptor: Option<&Corruptor>,
) -> Result<Vec<EmbeddingQuery<T>>> {
    let n_spk = spec.vocab.len();
    let mut queries = Vec::with_capacity(batch.len() * 2);
    for (rec, &pos) in batch.iter().zip(positions) {
        for (s, speaker) in [&rec.source_a.speaker_id, &rec.source_b.speaker_id]
            .into_iter()
            .enumerate()
        {
            let idx = spec.vocab.index_of(speaker)?;
            let query_idx = 2 * pos + s;
            let resolved = match corruptor {
                Some(c) => c.resolve(query_idx, idx, n_spk),
                None => idx,
            };
            queries.push(match kind {
                ProviderKind::Lookup => EmbeddingQuery::Row {
                    table,
                    row: resolved,
                },
                ProviderKind::Fixed { seed } => EmbeddingQuery::Constant(fixed_embedding::<T>(
                    seed,
                    spec.vocab.id_at(resolved),
                    spec.net.k,
                )),
            });
        }
    }
    Ok(queries)
}

pub(crate) fn batch_assembly<T: Scalar>(
    spec: &ModelSpec,
    batch: &[&MixtureRecord],
    positions: &[usize],
    visual_corruptor: Option<&Corruptor>,
) -> Result<EmbeddingAssembly<T>> {
    let visual = match spec.visual {
        Some(kind) => Some(resolve_queries(
            spec,
            kind,
            "embed.visual.table",
            batch,
            positions,
            visual_corruptor,
        )?),
        None => None,
    };
    let sign = match spec.sign {
        Some(kind) => Some(resolve_queries(
            spec,
            kind,
            "embed.sign.table",
            batch,
            positions,
            None,
        )?),
        None => None,
    };
    let slots = if spec.is_audio_only() {
        Some((0..batch.len()).flat_map(|_| [0usize, 1]).collect())
    } else {
        None
    };
    Ok(EmbeddingAssembly {
        visual,
        sign,
        slots,
    })
}

fn crop_seed(train_seed: u64, epoch: usize, record_idx: usize) -> u64 {
    train_seed
        ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F)
        ^ (record_idx as u64).wrapping_mul(0xE703_7ED1_A0B4_28DB)
}

/// Train a model on the given records. Returns the final parameters and the
/// per-step mean binary cross entropy trace. Fully determined by
/// (spec, records, forge_cfg, cfg, corruptor settings).
pub fn train<T: Scalar>(
    spec: &ModelSpec,
    records: &[MixtureRecord],
    forge_cfg: &ForgeConfig,
    cfg: &TrainConfig,
    mut visual_corruptor: Option<Corruptor>,
) -> Result<(ParamStore<T>, Vec<f64>)> {
    spec.validate()?;
    cfg.sgd.validate()?;
    if records.is_empty() {
        return Err(Error::EmptySplit {
            split: "train".into(),
        });
    }
    let stft_cfg = StftConfig::default();
    let mut store = crate::net::model::init_params::<T>(spec, cfg.seed)?;
    let mut opt = OptimizerState::<T>::new();
    let mut losses = Vec::new();

    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(
            records.len(),
            cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x0E70,
        );
        if let Some(c) = visual_corruptor.as_mut() {
            c.begin_pass(2 * records.len(), epoch as u64);
        }

        for (chunk_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&MixtureRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let chunk_start = chunk_idx * cfg.batch_size;
            let positions: Vec<usize> = (chunk_start..chunk_start + chunk.len()).collect();

            let items: Vec<TrainItem<T>> = chunk
                .par_iter()
                .map(|&rec_idx| {
                    realize_item::<T>(
                        &records[rec_idx],
                        forge_cfg,
                        &stft_cfg,
                        spec.net.freq_bins,
                        cfg.crop_frames,
                        crop_seed(cfg.seed, epoch, rec_idx),
                    )
                })
                .collect::<Result<Vec<_>>>()?;

            let n = items.len();
            let (f, c) = (spec.net.freq_bins, cfg.crop_frames);
            let mut input = Vec::with_capacity(n * f * c);
            let mut target = Vec::with_capacity(n * 2 * f * c);
            for item in &items {
                input.extend_from_slice(&item.mix_plane);
            }
            for item in &items {
                target.extend_from_slice(&item.target_a);
                target.extend_from_slice(&item.target_b);
            }
            let input = Tensor::from_vec(&[n, 1, f, c], input);
            let target = Tensor::from_vec(&[n, 2, f, c], target);

            let mut tape = Tape::<T>::new();
            let ids = bind_params(&mut tape, &store, true);
            let x = tape.leaf(input, false);
            let xp = tape.pad_hw(
                x,
                spec.net.pad_to_divisible(f),
                spec.net.pad_to_divisible(c),
            )?;
            let mut updates = Vec::new();
            let features_padded = {
                let mut phase = BnPhase::Train(&mut updates);
                forward_trunk(&mut tape, &ids, &spec.net, xp, &mut phase)?
            };
            let features = tape.crop_hw(features_padded, f, c)?;
            let assembly = batch_assembly::<T>(&spec.clone(), &batch, &positions, visual_corruptor.as_ref())?;
            let emb = assemble_embeddings(&mut tape, &ids, spec, &assembly, n, 2)?;
            let masks = masks_from_features(&mut tape, features, emb, spec.net.mask_activation)?;
            let mean_bce = tape.bce_loss(masks, target)?;
            // Summed over the two sources = twice the overall mean.
            let loss = tape.scale(mean_bce, 2.0);
            tape.backward(loss)?;

            let mean_val = tape.value(mean_bce).item().to_f64().unwrap();
            if !mean_val.is_finite() {
                return Err(Error::NonFinite {
                    context: "training loss".into(),
                });
            }
            losses.push(mean_val);

            for (name, id) in &ids {
                if let Some(grad) = tape.grad(*id) {
                    let param = store.params.get_mut(name).unwrap();
                    opt.apply(name, param, grad, &cfg.sgd);
                }
            }
            for (name, stats) in updates {
                store
                    .buffers
                    .get_mut(&name)
                    .expect("buffer exists for bn layer")
                    .update(&stats);
            }
        }
    }
    Ok((store, losses))
}
