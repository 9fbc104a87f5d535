//! Versioned checkpoint container.
//!
//! Layout: the magic bytes `ICECKPT\0`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then every tensor as
//! little-endian `f64` values at the element offsets listed in the header.

use std::collections::BTreeMap;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams, ParamSlot};
use crate::optim::{Moments, Optimizer, OptimizerKind};
use crate::trainer::{TrainConfig, TrainState, ValidationPoint};

const MAGIC: &[u8; 8] = b"ICECKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "implicit-ce-checkpoint";

/// Parameters that scored best on validation.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub step: usize,
    pub correlation: f64,
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub model: Model,
    pub step: usize,
    pub history: Vec<ValidationPoint>,
    pub aux_item_ids: Vec<String>,
    pub target_item_ids: Vec<String>,
    /// Present in resumable checkpoints.
    pub optimizer: Option<Optimizer>,
    /// Best-so-far snapshot carried by resumable checkpoints.
    pub best: Option<BestSnapshot>,
    pub skipped_users: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerHeader {
    kind: OptimizerKind,
    t: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BestHeader {
    step: usize,
    correlation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config_hash: String,
    train_config: TrainConfig,
    model_config: ModelConfig,
    step: usize,
    history: Vec<ValidationPoint>,
    aux_item_ids: Vec<String>,
    target_item_ids: Vec<String>,
    optimizer: Option<OptimizerHeader>,
    best: Option<BestHeader>,
    skipped_users: u64,
    tensors: Vec<TensorEntry>,
}

fn slot_shape(params: &ModelParams, slot: ParamSlot) -> Vec<usize> {
    let dims = |a: &ndarray::Array2<f64>| vec![a.nrows(), a.ncols()];
    match slot {
        ParamSlot::AuxEmbeddings => dims(&params.aux_embeddings),
        ParamSlot::TargetEmbeddings => dims(&params.target_embeddings),
        ParamSlot::HiddenWeight(l) => dims(&params.hidden[l].affine.weight),
        ParamSlot::OutputWeight => dims(&params.output.as_ref().expect("output layer").weight),
        _ => vec![params.slot(slot).len()],
    }
}

/// Every tensor of a parameter set, running statistics included.
fn param_tensors<'a>(prefix: &str, params: &'a ModelParams) -> Vec<(String, Vec<usize>, &'a [f64])> {
    let mut out: Vec<_> = params
        .slots()
        .into_iter()
        .map(|s| (format!("{prefix}{}", s.name()), slot_shape(params, s), params.slot(s)))
        .collect();
    for (l, layer) in params.hidden.iter().enumerate() {
        if let Some(bn) = &layer.norm {
            for (stat, v) in [("running_mean", &bn.running_mean), ("running_var", &bn.running_var)] {
                out.push((
                    format!("{prefix}hidden.{l}.norm.{stat}"),
                    vec![v.len()],
                    v.as_slice().expect("contiguous"),
                ));
            }
        }
    }
    out
}

impl Checkpoint {
    pub fn from_state(cfg: &TrainConfig, state: &TrainState, item_ids: (Vec<String>, Vec<String>)) -> Self {
        Self {
            train_config: cfg.clone(),
            model: state.model.clone(),
            step: state.step,
            history: state.history.clone(),
            aux_item_ids: item_ids.0,
            target_item_ids: item_ids.1,
            optimizer: Some(state.optimizer.clone()),
            best: state.best.clone(),
            skipped_users: state.skipped_users,
        }
    }

    /// A non-resumable checkpoint holding the best snapshot's parameters.
    pub fn best_of(
        cfg: &TrainConfig,
        state: &TrainState,
        best: &BestSnapshot,
        item_ids: (Vec<String>, Vec<String>),
    ) -> Self {
        Self {
            train_config: cfg.clone(),
            model: Model::from_parts(state.model.config.clone(), best.params.clone()),
            step: best.step,
            history: state.history.clone(),
            aux_item_ids: item_ids.0,
            target_item_ids: item_ids.1,
            optimizer: None,
            best: None,
            skipped_users: state.skipped_users,
        }
    }

    pub fn into_state(self) -> Result<TrainState> {
        let optimizer = self
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state and cannot be resumed".into()))?;
        Ok(TrainState {
            model: self.model,
            optimizer,
            step: self.step,
            history: self.history,
            best: self.best,
            skipped_users: self.skipped_users,
        })
    }

    pub fn config_hash(&self) -> String {
        self.train_config.hash()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, Vec<usize>, &[f64])> = param_tensors("params.", &self.model.params);
        if let Some(opt) = &self.optimizer {
            for (slot, Moments { m, v }) in opt.moments() {
                let shape = slot_shape(&self.model.params, *slot);
                tensors.push((format!("adam.m.{}", slot.name()), shape.clone(), m));
                tensors.push((format!("adam.v.{}", slot.name()), shape, v));
            }
        }
        if let Some(best) = &self.best {
            tensors.extend(param_tensors("best.", &best.params));
        }
        let mut offset = 0u64;
        let entries = tensors
            .iter()
            .map(|(name, shape, data)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                };
                offset += data.len() as u64;
                e
            })
            .collect();
        let header = Header {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            config_hash: self.config_hash(),
            train_config: self.train_config.clone(),
            model_config: self.model.config.clone(),
            step: self.step,
            history: self.history.clone(),
            aux_item_ids: self.aux_item_ids.clone(),
            target_item_ids: self.target_item_ids.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                kind: o.kind(),
                t: o.step_count(),
            }),
            best: self.best.as_ref().map(|b| BestHeader {
                step: b.step,
                correlation: b.correlation,
            }),
            skipped_users: self.skipped_users,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &tensors {
            for v in data.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..data_start])?;
        if header.format != FORMAT_NAME {
            return Err(bad("unknown container format"));
        }
        if header.config_hash != header.train_config.hash() {
            return Err(bad("config hash does not match the stored config"));
        }
        let data = &bytes[data_start..];
        let read = |e: &TensorEntry, dst: &mut [f64]| -> Result<()> {
            let numel: usize = e.shape.iter().product();
            if numel != dst.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has {numel} elements but the model expects {}",
                    e.name,
                    dst.len()
                )));
            }
            let start = e.offset as usize * 8;
            let end = start + numel * 8;
            let src = data.get(start..end).ok_or_else(|| Error::Checkpoint(format!("tensor {} is truncated", e.name)))?;
            for (d, chunk) in dst.iter_mut().zip(src.chunks_exact(8)) {
                *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            Ok(())
        };
        let by_name: BTreeMap<&str, &TensorEntry> = header.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
        let lookup = |name: &str| {
            by_name
                .get(name)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let fill = |prefix: &str, params: &mut ModelParams| -> Result<()> {
            for slot in params.slots() {
                read(lookup(&format!("{prefix}{}", slot.name()))?, params.slot_mut(slot))?;
            }
            for (l, layer) in params.hidden.iter_mut().enumerate() {
                if let Some(bn) = &mut layer.norm {
                    let mean = lookup(&format!("{prefix}hidden.{l}.norm.running_mean"))?;
                    read(mean, bn.running_mean.as_slice_mut().expect("contiguous"))?;
                    let var = lookup(&format!("{prefix}hidden.{l}.norm.running_var"))?;
                    read(var, bn.running_var.as_slice_mut().expect("contiguous"))?;
                }
            }
            Ok(())
        };

        let mut model = Model::init(header.model_config.clone(), 0)?;
        fill("params.", &mut model.params)?;
        model.check_shapes()?;

        let optimizer = match &header.optimizer {
            None => None,
            Some(oh) => {
                let mut moments = BTreeMap::new();
                if let OptimizerKind::Adam { .. } = oh.kind {
                    for slot in model.params.slots() {
                        let n = model.params.slot(slot).len();
                        let mut mo = Moments {
                            m: vec![0.0; n],
                            v: vec![0.0; n],
                        };
                        for (which, dst) in [("m", &mut mo.m), ("v", &mut mo.v)] {
                            read(lookup(&format!("adam.{which}.{}", slot.name()))?, dst)?;
                        }
                        moments.insert(slot, mo);
                    }
                }
                Some(Optimizer::from_state(oh.kind, oh.t, moments, &model.params)?)
            }
        };
        let best = match &header.best {
            None => None,
            Some(bh) => {
                let mut params = model.params.clone();
                fill("best.", &mut params)?;
                Some(BestSnapshot {
                    step: bh.step,
                    correlation: bh.correlation,
                    params,
                })
            }
        };
        if header.aux_item_ids.len() != model.config.n_aux_items
            || header.target_item_ids.len() != model.config.n_target_items
        {
            return Err(bad("item id lists do not match the model dimensions"));
        }
        Ok(Self {
            train_config: header.train_config,
            model,
            step: header.step,
            history: header.history,
            aux_item_ids: header.aux_item_ids,
            target_item_ids: header.target_item_ids,
            optimizer,
            best,
            skipped_users: header.skipped_users,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
