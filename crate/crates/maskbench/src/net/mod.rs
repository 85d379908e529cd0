//! The conditioned separation network: model definition, embedding
//! providers, training, inference, checkpoints.

pub mod checkpoint;
pub mod embedding;
pub mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};
pub use embedding::{
    fixed_embedding, fuse, ConditioningEmbedding, Corruptor, FusionMode, Modality, ProviderKind,
    SpeakerVocab,
};
pub use model::{init_params, MaskActivation, ModelSpec, ParamStore, ResUNetConfig};
pub use train::{train, TrainConfig};

use crate::audio::Waveform;
use crate::dsp::{magnitude_phase, stft, StftConfig};
use crate::error::Result;
use crate::forge::MixtureRecord;
use crate::grid::Grid;
use crate::mask::{reconstruct, TimeFreqMask};
use crate::nn::{Tape, Tensor};
use crate::scalar::Scalar;

use model::{
    assemble_embeddings, bind_params, forward_trunk, masks_from_features, BnPhase,
};

/// A trained (or initialized) model ready for inference.
pub struct Separator<T> {
    pub spec: ModelSpec,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Separator<T> {
    pub fn new(spec: ModelSpec, store: ParamStore<T>) -> Self {
        Separator { spec, store }
    }

    /// Predict one mask per source for a mixture. `positions` numbers this
    /// mixture within the evaluation pass (for corruption schedules).
    pub fn predict_masks(
        &self,
        mixture: &Waveform<T>,
        record: &MixtureRecord,
        pass_position: usize,
        visual_corruptor: Option<&Corruptor>,
    ) -> Result<(Vec<TimeFreqMask<T>>, crate::dsp::ComplexSpectrogram<T>)> {
        let stft_cfg = StftConfig::default();
        let spec_grid = stft(mixture, &stft_cfg)?;
        let (mag, _) = magnitude_phase(&spec_grid);

        let cfg = &self.spec.net;
        let bins = mag.grid.rows();
        let frames = mag.grid.cols();
        let f = cfg.freq_bins.min(bins);
        let band = mag.grid.window(0, 0, f, frames);

        let mut tape = Tape::<T>::new();
        let ids = bind_params(&mut tape, &self.store, false);
        let x = tape.leaf(Tensor::from_vec(&[1, 1, f, frames], band.data().to_vec()), false);
        let xp = tape.pad_hw(x, cfg.pad_to_divisible(f), cfg.pad_to_divisible(frames))?;
        let features_padded = {
            let mut phase = BnPhase::Eval(&self.store.buffers);
            forward_trunk(&mut tape, &ids, cfg, xp, &mut phase)?
        };
        let features = tape.crop_hw(features_padded, f, frames)?;

        let batch = [record];
        let positions = [pass_position];
        let assembly =
            train::batch_assembly::<T>(&self.spec, &batch, &positions, visual_corruptor)?;
        let emb = assemble_embeddings(&mut tape, &ids, &self.spec, &assembly, 1, 2)?;
        let masks_id = masks_from_features(&mut tape, features, emb, cfg.mask_activation)?;

        // Rows the network does not model fall back to a neutral 0.5.
        let half = T::from_f64c(0.5);
        let mask_vals = tape.value(masks_id);
        let mut out = Vec::with_capacity(2);
        for s in 0..2 {
            let mut grid = Grid::filled(bins, frames, half);
            for row in 0..f {
                for col in 0..frames {
                    *grid.at_mut(row, col) =
                        mask_vals.data()[(s * f + row) * frames + col];
                }
            }
            out.push(TimeFreqMask::new(grid)?);
        }
        Ok((out, spec_grid))
    }

    /// Separate a mixture into per-source estimates using the mixture phase.
    pub fn separate(
        &self,
        mixture: &Waveform<T>,
        record: &MixtureRecord,
        pass_position: usize,
        visual_corruptor: Option<&Corruptor>,
    ) -> Result<Vec<Waveform<T>>> {
        let (masks, spec_grid) = self.predict_masks(mixture, record, pass_position, visual_corruptor)?;
        masks
            .iter()
            .map(|m| reconstruct(&spec_grid, m, mixture.len()))
            .collect()
    }
}
