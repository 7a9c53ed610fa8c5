use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::backbone::{AttentionMode, Backbone};
use crate::error::{CheckpointError, Error, Result};
use crate::heads::{liveness_scores, DiscriminatorParams, RegressorParams};
use crate::params::{Bound, ParamStore};
use crate::raster::Image;
use crate::tensor::{DType, Real, Tape, Tensor, Var};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Backbone plus both heads, with all weights in one store.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub backbone: Backbone,
    pub regressor: RegressorParams,
    pub discriminator: DiscriminatorParams,
    pub store: ParamStore<T>,
}

/// Variables produced by one training forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub features: Var,
    pub probs: Var,
    pub scores: Var,
}

impl<T: Real> Model<T> {
    /// Fresh weights for a fold with `n_sources` source domains.
    pub fn new<R: Rng>(cfg: &ModelConfig, n_sources: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&cfg.backbone, &mut store, rng)?;
        let d = cfg.backbone.embed_dim;
        let hidden = cfg.heads.hidden_for(d);
        let regressor = RegressorParams::new(&mut store, d, hidden, cfg.heads.grid()?, rng);
        let discriminator = DiscriminatorParams::new(&mut store, d, hidden, n_sources, rng)?;
        Ok(Model {
            backbone,
            regressor,
            discriminator,
            store,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, images: &[&Image]) -> Result<Forward> {
        let out = self.backbone.forward(tape, bound, images, AttentionMode::Configured)?;
        let (probs, scores) = liveness_scores(tape, bound, &self.regressor, out.features)?;
        Ok(Forward {
            features: out.features,
            probs,
            scores,
        })
    }

    /// Liveness scores of `images`, evaluated in chunks of `chunk`.
    pub fn score_images(&self, images: &[&Image], chunk: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let bound = self.store.bind(&mut tape);
            let f = self.forward(&mut tape, &bound, part)?;
            out.extend(tape.value(f.scores).data().iter().map(|v| v.as_f64()));
        }
        Ok(out)
    }
}

/// A model at whichever precision a checkpoint was written in.
#[derive(Debug, Clone)]
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl AnyModel {
    pub fn score_images(&self, images: &[&Image], chunk: usize) -> Result<Vec<f64>> {
        match self {
            AnyModel::F32(m) => m.score_images(images, chunk),
            AnyModel::F64(m) => m.score_images(images, chunk),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyModel::F32(_) => DType::F32,
            AnyModel::F64(_) => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Offset from the start of the data section.
    pub byte_offset: usize,
    pub byte_len: usize,
}

/// First line of a checkpoint file; raw little-endian tensor data follows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: DType,
    /// The config text the model was trained with.
    pub config: String,
    pub sources: Vec<String>,
    pub entries: Vec<EntryHeader>,
}

fn ck_io(path: &Path, source: std::io::Error) -> Error {
    Error::Checkpoint(CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, cfg: &ModelConfig, sources: &[String], path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut data = Vec::with_capacity(model.store.num_scalars() * T::DTYPE.size());
    for (_, name, t) in model.store.iter() {
        let start = data.len();
        for &v in t.data() {
            v.write_le(&mut data);
        }
        entries.push(EntryHeader {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            byte_offset: start,
            byte_len: data.len() - start,
        });
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        dtype: T::DTYPE,
        config: cfg.source_text.clone(),
        sources: sources.to_vec(),
        entries,
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(CheckpointError::Header(e.to_string())))?;
    out.push(b'\n');
    out.extend_from_slice(&data);
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ck_io(path, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| ck_io(path, e))?;
    file.write_all(&out).map_err(|e| ck_io(path, e))?;
    Ok(())
}

/// Splits a checkpoint into its header and data section.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| ck_io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Header("no header line".into()))?;
    let header: serde_json::Value =
        serde_json::from_slice(&bytes[..newline]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let version = header
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CheckpointError::Header("missing format_version".into()))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(CheckpointError::Version {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    let header: CheckpointHeader =
        serde_json::from_value(header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok((header, bytes[newline + 1..].to_vec()))
}

fn fill_store<T: Real>(store: &mut ParamStore<T>, header: &CheckpointHeader, data: &[u8]) -> Result<()> {
    if header.dtype != T::DTYPE {
        return Err(CheckpointError::Dtype {
            found: header.dtype.as_str().into(),
            expected: T::DTYPE.as_str().into(),
        }
        .into());
    }
    let size = T::DTYPE.size();
    let ids: Vec<_> = store
        .iter()
        .map(|(id, name, t)| (id, name.to_string(), t.shape().to_vec()))
        .collect();
    for (id, name, expected) in ids {
        let entry = header
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        if entry.shape != expected {
            return Err(CheckpointError::ShapeMismatch {
                name,
                found: entry.shape.clone(),
                expected,
            }
            .into());
        }
        let numel: usize = expected.iter().product();
        let end = entry.byte_offset + entry.byte_len;
        if entry.byte_len != numel * size || end > data.len() {
            return Err(CheckpointError::Truncated {
                name,
                start: entry.byte_offset,
                end,
                available: data.len(),
            }
            .into());
        }
        let values = data[entry.byte_offset..end]
            .chunks_exact(size)
            .map(T::read_le)
            .collect();
        *store.get_mut(id) = Tensor::new(expected, values)?.with_requires_grad(true);
    }
    Ok(())
}

/// Loads a checkpoint, rebuilding the model from its embedded config and
/// validating every tensor against it.
pub fn load_checkpoint(path: &Path) -> Result<(AnyModel, ModelConfig, CheckpointHeader)> {
    let (header, data) = read_checkpoint(path)?;
    let cfg = ModelConfig::from_toml_str(&header.config)?;
    let model = load_into(&cfg, &header, &data)?;
    Ok((model, cfg, header))
}

/// Fills a model built from `cfg` with the checkpoint's weights.
pub fn load_into(cfg: &ModelConfig, header: &CheckpointHeader, data: &[u8]) -> Result<AnyModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = header.sources.len();
    Ok(match header.dtype {
        DType::F32 => {
            let mut m = Model::<f32>::new(cfg, n, &mut rng)?;
            fill_store(&mut m.store, header, data)?;
            AnyModel::F32(m)
        }
        DType::F64 => {
            let mut m = Model::<f64>::new(cfg, n, &mut rng)?;
            fill_store(&mut m.store, header, data)?;
            AnyModel::F64(m)
        }
    })
}
