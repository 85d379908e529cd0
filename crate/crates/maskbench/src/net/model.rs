//! The conditioned mask predictor: a strided-convolution encoder with
//! residual units, a mirrored transposed-convolution decoder with skip
//! concatenations, and a 1x1 head producing a K-channel feature map that is
//! contracted against per-source conditioning embeddings into soft masks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::embedding::{FusionMode, ProviderKind, SpeakerVocab};
use crate::nn::ops::{BatchStats, RunningStats, BCE_CLAMP};
use crate::nn::{Tape, Tensor, VarId};
use crate::scalar::Scalar;

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 1;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Where the sigmoid sits relative to the embedding contraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskActivation {
    /// Linear K-channel features; sigmoid after the contraction. The mask is
    /// then strictly inside (0, 1), which the BCE contract needs.
    #[default]
    PostContraction,
    /// Sigmoid on the K-channel map first, then the contraction, clamped
    /// into the BCE range. Provided for comparison.
    PreContraction,
}

impl MaskActivation {
    pub fn parse(s: &str) -> Result<MaskActivation> {
        match s {
            "post" => Ok(MaskActivation::PostContraction),
            "pre" => Ok(MaskActivation::PreContraction),
            other => Err(Error::Config(format!("unknown mask activation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResUNetConfig {
    pub n_down: usize,
    pub n_up: usize,
    pub base_channels: usize,
    pub k: usize,
    /// Low-frequency rows the network consumes (512 at paper scale; smaller
    /// desk configurations crop the band the synthetic corpus occupies).
    pub freq_bins: usize,
    pub mask_activation: MaskActivation,
}

impl Default for ResUNetConfig {
    fn default() -> Self {
        ResUNetConfig {
            n_down: 6,
            n_up: 6,
            base_channels: 32,
            k: 32,
            freq_bins: 512,
            mask_activation: MaskActivation::PostContraction,
        }
    }
}

impl ResUNetConfig {
    pub fn desk() -> Self {
        ResUNetConfig {
            base_channels: 16,
            freq_bins: 64,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_down == 0 || self.n_down != self.n_up {
            return Err(Error::Config(format!(
                "need matching encoder/decoder depths, got {} down / {} up",
                self.n_down, self.n_up
            )));
        }
        if self.k == 0 || self.base_channels == 0 || self.freq_bins == 0 {
            return Err(Error::Config("k, base_channels, freq_bins must be positive".into()));
        }
        Ok(())
    }

    /// Channel widths after each encoder stage: base * (1,2,4,8,8,8,...).
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.n_down)
            .map(|i| self.base_channels * (1 << i.min(3)))
            .collect()
    }

    /// Output channel widths of each decoder stage (mirror of the encoder,
    /// ending at base width before the 1x1 head).
    pub fn decoder_channels(&self) -> Vec<usize> {
        let enc = self.encoder_channels();
        let mut out: Vec<usize> = (0..self.n_up - 1)
            .map(|j| enc[self.n_down - 2 - j])
            .collect();
        out.push(self.base_channels);
        out
    }

    /// Smallest multiple of 2^n_down at or above `v`.
    pub fn pad_to_divisible(&self, v: usize) -> usize {
        let q = 1 << self.n_down;
        v.div_ceil(q) * q
    }
}

/// Everything that defines a separator besides its learned values.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub net: ResUNetConfig,
    pub fusion: FusionMode,
    pub visual: Option<ProviderKind>,
    pub sign: Option<ProviderKind>,
    pub vocab: SpeakerVocab,
}

impl ModelSpec {
    pub fn is_audio_only(&self) -> bool {
        self.visual.is_none() && self.sign.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.vocab.is_empty() {
            return Err(Error::Config("model needs a speaker vocabulary".into()));
        }
        Ok(())
    }
}

/// Named tensors: trainable parameters and non-trainable batch-norm buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, RunningStats<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn convert<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.convert::<U>()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: v.mean.iter().map(|&x| U::from_f64c(x.to_f64().unwrap())).collect(),
                            var: v.var.iter().map(|&x| U::from_f64c(x.to_f64().unwrap())).collect(),
                        },
                    )
                })
                .collect(),
        }
    }
}

fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| T::from_f64c(rng.gen_range(-bound..bound)))
            .collect(),
    )
}

/// Initialize all parameters and buffers for a spec, deterministically from
/// the seed.
pub fn init_params<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ParamStore<T>> {
    spec.validate()?;
    let cfg = &spec.net;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5E9A_7A70_0000_0001);
    let mut params: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    let mut buffers: BTreeMap<String, RunningStats<T>> = BTreeMap::new();

    let enc = cfg.encoder_channels();
    let mut in_ch = 1usize;
    for (i, &out_ch) in enc.iter().enumerate() {
        let name = format!("enc{i}");
        params.insert(
            format!("{name}.down.weight"),
            kaiming_uniform(&[out_ch, in_ch, KERNEL, KERNEL], in_ch * KERNEL * KERNEL, &mut rng),
        );
        params.insert(format!("{name}.down.bn.gamma"), Tensor::from_vec(&[out_ch], vec![T::one(); out_ch]));
        params.insert(format!("{name}.down.bn.beta"), Tensor::zeros(&[out_ch]));
        buffers.insert(format!("{name}.down.bn"), RunningStats::new(out_ch));

        params.insert(
            format!("{name}.res.weight"),
            kaiming_uniform(&[out_ch, out_ch, 3, 3], out_ch * 9, &mut rng),
        );
        params.insert(format!("{name}.res.bn.gamma"), Tensor::from_vec(&[out_ch], vec![T::one(); out_ch]));
        params.insert(format!("{name}.res.bn.beta"), Tensor::zeros(&[out_ch]));
        buffers.insert(format!("{name}.res.bn"), RunningStats::new(out_ch));
        in_ch = out_ch;
    }

    let dec = cfg.decoder_channels();
    let mut up_in = enc[cfg.n_down - 1];
    for (j, &out_ch) in dec.iter().enumerate() {
        let name = format!("dec{j}");
        // Transposed-conv kernels are [in, out, kh, kw].
        params.insert(
            format!("{name}.up.weight"),
            kaiming_uniform(&[up_in, out_ch, KERNEL, KERNEL], up_in * KERNEL * KERNEL, &mut rng),
        );
        params.insert(format!("{name}.up.bn.gamma"), Tensor::from_vec(&[out_ch], vec![T::one(); out_ch]));
        params.insert(format!("{name}.up.bn.beta"), Tensor::zeros(&[out_ch]));
        buffers.insert(format!("{name}.up.bn"), RunningStats::new(out_ch));
        // Next stage consumes this output concatenated with its mirror skip.
        if j + 1 < cfg.n_up {
            up_in = out_ch + enc[cfg.n_down - 2 - j];
        }
    }

    params.insert(
        "head.weight".into(),
        kaiming_uniform(&[cfg.k, cfg.base_channels, 1, 1], cfg.base_channels, &mut rng),
    );

    let table_scale = 0.2;
    let n_spk = spec.vocab.len();
    let mut table = |rows: usize, rng: &mut ChaCha8Rng| -> Tensor<T> {
        Tensor::from_vec(
            &[rows, cfg.k],
            (0..rows * cfg.k)
                .map(|_| T::from_f64c(rng.gen_range(-table_scale..table_scale)))
                .collect(),
        )
    };
    if let Some(kind) = spec.visual {
        if kind == ProviderKind::Lookup {
            params.insert("embed.visual.table".into(), table(n_spk, &mut rng));
        }
    }
    if let Some(kind) = spec.sign {
        if kind == ProviderKind::Lookup {
            params.insert("embed.sign.table".into(), table(n_spk, &mut rng));
        }
    }
    if spec.is_audio_only() {
        // Two positional slot embeddings: no speaker information, only the
        // source-slot index. This is the audio-only baseline.
        params.insert("embed.slot.table".into(), table(2, &mut rng));
    }
    if spec.fusion == FusionMode::Concat && spec.visual.is_some() && spec.sign.is_some() {
        params.insert(
            "fusion.proj.weight".into(),
            kaiming_uniform(&[cfg.k, 2 * cfg.k], 2 * cfg.k, &mut rng),
        );
    }

    Ok(ParamStore { params, buffers })
}

/// Bind every parameter as a tape leaf.
pub fn bind_params<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    trainable: bool,
) -> BTreeMap<String, VarId> {
    store
        .params
        .iter()
        .map(|(name, tensor)| (name.clone(), tape.leaf(tensor.clone(), trainable)))
        .collect()
}

/// Whether batch norm uses batch statistics (recording them for running
/// updates) or the stored running statistics.
pub enum BnPhase<'a, T> {
    Train(&'a mut Vec<(String, BatchStats<T>)>),
    Eval(&'a BTreeMap<String, RunningStats<T>>),
}

impl<'a, T: Scalar> BnPhase<'a, T> {
    fn apply(
        &mut self,
        tape: &mut Tape<T>,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        name: &str,
    ) -> Result<VarId> {
        match self {
            BnPhase::Train(updates) => {
                let (y, stats) = tape.batchnorm2d_train(x, gamma, beta)?;
                updates.push((name.to_string(), stats));
                Ok(y)
            }
            BnPhase::Eval(buffers) => {
                let running = buffers.get(name).ok_or_else(|| {
                    Error::Config(format!("missing running stats for '{name}'"))
                })?;
                tape.batchnorm2d_eval(x, gamma, beta, running)
            }
        }
    }
}

fn pid(ids: &BTreeMap<String, VarId>, name: &str) -> Result<VarId> {
    ids.get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
}

/// Run the trunk on `[N,1,H,W]` (already padded to divisible dims) and
/// produce the K-channel feature map `[N,K,H,W]`.
pub fn forward_trunk<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &BTreeMap<String, VarId>,
    cfg: &ResUNetConfig,
    input: VarId,
    phase: &mut BnPhase<'_, T>,
) -> Result<VarId> {
    let shape = tape.value(input).shape().to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::shape("trunk input", "[N,1,H,W]", format!("{shape:?}")));
    }
    let q = 1 << cfg.n_down;
    if shape[2] % q != 0 || shape[3] % q != 0 {
        return Err(Error::shape(
            "trunk input",
            format!("spatial dims divisible by {q}"),
            format!("{}x{}", shape[2], shape[3]),
        ));
    }

    let mut skips = Vec::with_capacity(cfg.n_down);
    let mut h = input;
    for i in 0..cfg.n_down {
        let name = format!("enc{i}");
        let w = pid(ids, &format!("{name}.down.weight"))?;
        h = tape.conv2d(h, w, STRIDE, PADDING)?;
        let gamma = pid(ids, &format!("{name}.down.bn.gamma"))?;
        let beta = pid(ids, &format!("{name}.down.bn.beta"))?;
        h = phase.apply(tape, h, gamma, beta, &format!("{name}.down.bn"))?;
        h = tape.leaky_relu(h, LEAKY_SLOPE);

        // Residual unit: one 3x3 conv + BN added back onto the stage input.
        let rw = pid(ids, &format!("{name}.res.weight"))?;
        let mut r = tape.conv2d(h, rw, 1, 1)?;
        let rg = pid(ids, &format!("{name}.res.bn.gamma"))?;
        let rb = pid(ids, &format!("{name}.res.bn.beta"))?;
        r = phase.apply(tape, r, rg, rb, &format!("{name}.res.bn"))?;
        h = tape.add(h, r)?;
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        skips.push(h);
    }

    let mut u = skips[cfg.n_down - 1];
    for j in 0..cfg.n_up {
        let name = format!("dec{j}");
        let input = if j == 0 {
            u
        } else {
            tape.concat_channels(u, skips[cfg.n_down - 1 - j])?
        };
        let w = pid(ids, &format!("{name}.up.weight"))?;
        u = tape.conv_transpose2d(input, w, STRIDE, PADDING)?;
        let gamma = pid(ids, &format!("{name}.up.bn.gamma"))?;
        let beta = pid(ids, &format!("{name}.up.bn.beta"))?;
        u = phase.apply(tape, u, gamma, beta, &format!("{name}.up.bn"))?;
        u = tape.relu(u);
    }

    let head = pid(ids, "head.weight")?;
    tape.conv2d(u, head, 1, 0)
}

/// Contract features against embeddings and apply the mask activation.
/// `features` is `[N,K,H,W]`, `embeddings` is `[N,S,K]`; the result is
/// `[N,S,H,W]` with every entry in (0, 1).
pub fn masks_from_features<T: Scalar>(
    tape: &mut Tape<T>,
    features: VarId,
    embeddings: VarId,
    activation: MaskActivation,
) -> Result<VarId> {
    match activation {
        MaskActivation::PostContraction => {
            let logits = tape.contract_channels(features, embeddings)?;
            Ok(tape.sigmoid(logits))
        }
        MaskActivation::PreContraction => {
            let squashed = tape.sigmoid(features);
            let raw = tape.contract_channels(squashed, embeddings)?;
            Ok(tape.clamp(raw, BCE_CLAMP, 1.0 - BCE_CLAMP))
        }
    }
}

/// Resolved embedding source for one (item, source) query.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingQuery<T> {
    /// Row of a named trainable table.
    Row { table: &'static str, row: usize },
    /// Constant vector (fixed provider).
    Constant(Vec<T>),
}

/// Assemble per-source embeddings `[N,S,K]` on the tape from per-query
/// resolutions for each modality. Either modality list may be absent; with
/// both absent the slot table provides positional embeddings.
pub struct EmbeddingAssembly<T> {
    pub visual: Option<Vec<EmbeddingQuery<T>>>,
    pub sign: Option<Vec<EmbeddingQuery<T>>>,
    pub slots: Option<Vec<usize>>,
}

fn modality_tensor<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &BTreeMap<String, VarId>,
    queries: &[EmbeddingQuery<T>],
    k: usize,
) -> Result<VarId> {
    // All queries of one modality hit the same table (or are constants);
    // constants and rows can mix only by materializing constants into rows
    // of a throwaway leaf, so keep it simple: either all rows or all consts.
    let all_rows = queries
        .iter()
        .all(|q| matches!(q, EmbeddingQuery::Row { .. }));
    if all_rows {
        let table_name = match &queries[0] {
            EmbeddingQuery::Row { table, .. } => *table,
            EmbeddingQuery::Constant(_) => unreachable!(),
        };
        let rows: Vec<usize> = queries
            .iter()
            .map(|q| match q {
                EmbeddingQuery::Row { row, .. } => *row,
                EmbeddingQuery::Constant(_) => unreachable!(),
            })
            .collect();
        let table = pid(ids, table_name)?;
        tape.row_select(table, &rows)
    } else {
        let mut data = Vec::with_capacity(queries.len() * k);
        for q in queries {
            match q {
                EmbeddingQuery::Constant(v) => {
                    if v.len() != k {
                        return Err(Error::EmbeddingLength {
                            expected: k,
                            actual: v.len(),
                        });
                    }
                    data.extend_from_slice(v);
                }
                EmbeddingQuery::Row { .. } => {
                    return Err(Error::Config(
                        "cannot mix table rows and constants in one modality".into(),
                    ))
                }
            }
        }
        Ok(tape.leaf(Tensor::from_vec(&[queries.len(), k], data), false))
    }
}

/// Build the `[N,S,K]` embedding tensor for `n_items` items with `n_sources`
/// sources each (queries ordered item-major).
pub fn assemble_embeddings<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &BTreeMap<String, VarId>,
    spec: &ModelSpec,
    assembly: &EmbeddingAssembly<T>,
    n_items: usize,
    n_sources: usize,
) -> Result<VarId> {
    let k = spec.net.k;
    let n_q = n_items * n_sources;

    let flat = match (&assembly.visual, &assembly.sign) {
        (None, None) => {
            let slots = assembly
                .slots
                .as_ref()
                .ok_or_else(|| Error::Config("audio-only assembly needs slot indices".into()))?;
            let table = pid(ids, "embed.slot.table")?;
            tape.row_select(table, slots)?
        }
        (Some(v), None) => modality_tensor(tape, ids, v, k)?,
        (None, Some(s)) => modality_tensor(tape, ids, s, k)?,
        (Some(v), Some(s)) => {
            let ev = modality_tensor(tape, ids, v, k)?;
            let es = modality_tensor(tape, ids, s, k)?;
            match spec.fusion {
                FusionMode::Add => tape.add(ev, es)?,
                FusionMode::Multiply => tape.mul(ev, es)?,
                FusionMode::Concat => {
                    let ev4 = tape.reshape(ev, &[n_q, k, 1, 1])?;
                    let es4 = tape.reshape(es, &[n_q, k, 1, 1])?;
                    let cat = tape.concat_channels(ev4, es4)?;
                    let cat2 = tape.reshape(cat, &[n_q, 2 * k])?;
                    let proj = pid(ids, "fusion.proj.weight")?;
                    tape.linear(cat2, proj)?
                }
            }
        }
    };
    tape.reshape(flat, &[n_items, n_sources, k])
}
