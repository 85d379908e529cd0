//! Checkpoint file: magic + version, network config fields as little-endian
//! integers, the speaker vocabulary, then named parameter blocks (name,
//! shape, 32-bit floats) and batch-norm running-stat blocks.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::embedding::{FusionMode, ProviderKind, SpeakerVocab};
use crate::net::model::{MaskActivation, ModelSpec, ParamStore, ResUNetConfig};
use crate::nn::ops::RunningStats;
use crate::nn::Tensor;

const MAGIC: [u8; 4] = *b"MBCK";
const VERSION: u32 = 1;

fn kind_code(kind: Option<ProviderKind>) -> (u32, u64) {
    match kind {
        None => (0, 0),
        Some(ProviderKind::Lookup) => (1, 0),
        Some(ProviderKind::Fixed { seed }) => (2, seed),
    }
}

fn kind_from_code(code: u32, seed: u64, path: &Path) -> Result<Option<ProviderKind>> {
    match code {
        0 => Ok(None),
        1 => Ok(Some(ProviderKind::Lookup)),
        2 => Ok(Some(ProviderKind::Fixed { seed })),
        other => Err(Error::CheckpointCorrupt {
            path: path.to_path_buf(),
            detail: format!("bad provider kind code {other}"),
        }),
    }
}

/// Serialize parameters at 32-bit precision.
pub fn save_checkpoint(spec: &ModelSpec, store: &ParamStore<f32>, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let cfg = &spec.net;
    for v in [
        cfg.n_down as u32,
        cfg.n_up as u32,
        cfg.base_channels as u32,
        cfg.k as u32,
        cfg.freq_bins as u32,
        match cfg.mask_activation {
            MaskActivation::PostContraction => 0,
            MaskActivation::PreContraction => 1,
        },
        match spec.fusion {
            FusionMode::Add => 0,
            FusionMode::Multiply => 1,
            FusionMode::Concat => 2,
        },
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let (vc, vs) = kind_code(spec.visual);
    let (sc, ss) = kind_code(spec.sign);
    buf.extend_from_slice(&vc.to_le_bytes());
    buf.extend_from_slice(&vs.to_le_bytes());
    buf.extend_from_slice(&sc.to_le_bytes());
    buf.extend_from_slice(&ss.to_le_bytes());

    buf.extend_from_slice(&(spec.vocab.len() as u32).to_le_bytes());
    for id in spec.vocab.ids() {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }

    buf.extend_from_slice(&(store.params.len() as u32).to_le_bytes());
    for (name, tensor) in &store.params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    buf.extend_from_slice(&(store.buffers.len() as u32).to_le_bytes());
    for (name, stats) in &store.buffers {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(stats.mean.len() as u32).to_le_bytes());
        for &v in &stats.mean {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &stats.var {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointCorrupt {
                path: self.path.to_path_buf(),
                detail: format!(
                    "truncated: wanted {} bytes at offset {}, file has {}",
                    n,
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::CheckpointCorrupt {
            path: self.path.to_path_buf(),
            detail: "non-utf8 name".into(),
        })
    }
}

/// Read a checkpoint back; the file is self-describing.
pub fn load_checkpoint(path: &Path) -> Result<(ModelSpec, ParamStore<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(4)? != MAGIC {
        return Err(Error::CheckpointCorrupt {
            path: path.to_path_buf(),
            detail: "bad magic".into(),
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointCorrupt {
            path: path.to_path_buf(),
            detail: format!("unsupported version {version}"),
        });
    }
    let n_down = cur.u32()? as usize;
    let n_up = cur.u32()? as usize;
    let base_channels = cur.u32()? as usize;
    let k = cur.u32()? as usize;
    let freq_bins = cur.u32()? as usize;
    let mask_activation = match cur.u32()? {
        0 => MaskActivation::PostContraction,
        1 => MaskActivation::PreContraction,
        other => {
            return Err(Error::CheckpointCorrupt {
                path: path.to_path_buf(),
                detail: format!("bad mask activation code {other}"),
            })
        }
    };
    let fusion = match cur.u32()? {
        0 => FusionMode::Add,
        1 => FusionMode::Multiply,
        2 => FusionMode::Concat,
        other => {
            return Err(Error::CheckpointCorrupt {
                path: path.to_path_buf(),
                detail: format!("bad fusion code {other}"),
            })
        }
    };
    let vc = cur.u32()?;
    let vs = cur.u64()?;
    let sc = cur.u32()?;
    let ss = cur.u64()?;
    let visual = kind_from_code(vc, vs, path)?;
    let sign = kind_from_code(sc, ss, path)?;

    let n_speakers = cur.u32()? as usize;
    let mut ids = Vec::with_capacity(n_speakers);
    for _ in 0..n_speakers {
        ids.push(cur.string()?);
    }

    let n_params = cur.u32()? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..n_params {
        let name = cur.string()?;
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = cur.f32s(numel)?;
        params.insert(name, Tensor::from_vec(&shape, data));
    }

    let n_buffers = cur.u32()? as usize;
    let mut buffers = BTreeMap::new();
    for _ in 0..n_buffers {
        let name = cur.string()?;
        let channels = cur.u32()? as usize;
        let mean = cur.f32s(channels)?;
        let var = cur.f32s(channels)?;
        buffers.insert(name, RunningStats { mean, var });
    }

    let spec = ModelSpec {
        net: ResUNetConfig {
            n_down,
            n_up,
            base_channels,
            k,
            freq_bins,
            mask_activation,
        },
        fusion,
        visual,
        sign,
        vocab: SpeakerVocab::new(ids),
    };
    Ok((spec, ParamStore { params, buffers }))
}

/// Load and verify key fields against an expected spec, naming the first
/// mismatching field.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: &ModelSpec,
) -> Result<(ModelSpec, ParamStore<f32>)> {
    let (spec, store) = load_checkpoint(path)?;
    let checks: [(&str, String, String); 5] = [
        ("k", spec.net.k.to_string(), expected.net.k.to_string()),
        (
            "n_down",
            spec.net.n_down.to_string(),
            expected.net.n_down.to_string(),
        ),
        (
            "base_channels",
            spec.net.base_channels.to_string(),
            expected.net.base_channels.to_string(),
        ),
        (
            "freq_bins",
            spec.net.freq_bins.to_string(),
            expected.net.freq_bins.to_string(),
        ),
        (
            "fusion",
            spec.fusion.tag().to_string(),
            expected.fusion.tag().to_string(),
        ),
    ];
    for (field, actual, wanted) in checks {
        if actual != wanted {
            return Err(Error::CheckpointField {
                field: field.into(),
                expected: wanted,
                actual,
            });
        }
    }
    Ok((spec, store))
}
