//! Self-describing checkpoints in safetensors format.
//!
//! Tensors are stored as `param/<name>`, `adam_m/<name>` and `adam_v/<name>`;
//! a single metadata entry holds the JSON [`CheckpointMeta`] (format
//! version, progress counters and the full training config).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::optim::Adam;
use crate::model::Model;

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub global_step: u64,
    /// Batches of the current epoch already consumed.
    pub batch_offset: usize,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

fn st_dtype(d: DType) -> Result<StDtype> {
    match d {
        DType::F32 => Ok(StDtype::F32),
        DType::F64 => Ok(StDtype::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat
            .to_vec1::<f32>()?
            .into_iter()
            .flat_map(f32::to_le_bytes)
            .collect(),
        DType::F64 => flat
            .to_vec1::<f64>()?
            .into_iter()
            .flat_map(f64::to_le_bytes)
            .collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn from_view(view: &TensorView) -> Result<Tensor> {
    let dtype = match view.dtype() {
        StDtype::F32 => DType::F32,
        StDtype::F64 => DType::F64,
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    Ok(Tensor::from_raw_buffer(
        view.data(),
        dtype,
        view.shape(),
        &Device::Cpu,
    )?)
}

impl Checkpoint {
    /// Snapshot of the model parameters and optimizer state.
    pub fn capture(
        model: &Model,
        adam: &Adam,
        epoch: usize,
        batch_offset: usize,
        config: &TrainConfig,
    ) -> Result<Self> {
        let params = model
            .params()
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?.detach())))
            .collect::<Result<_>>()?;
        Ok(Self {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                epoch,
                global_step: adam.step,
                batch_offset,
                config: config.clone(),
            },
            params,
            adam_m: adam.first_moment.clone(),
            adam_v: adam.second_moment.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut owned: Vec<(String, StDtype, Vec<usize>, Vec<u8>)> = Vec::new();
        for (prefix, map) in [
            ("param", &self.params),
            ("adam_m", &self.adam_m),
            ("adam_v", &self.adam_v),
        ] {
            for (name, t) in map {
                owned.push((
                    format!("{prefix}/{name}"),
                    st_dtype(t.dtype())?,
                    t.dims().to_vec(),
                    tensor_bytes(t)?,
                ));
            }
        }
        let views = owned
            .iter()
            .map(|(n, d, s, b)| Ok((n.as_str(), TensorView::new(*d, s.clone(), b)?)))
            .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&self.meta)?)]);
        safetensors::tensor::serialize(views, Some(meta))
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st_err = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(st_err)?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("missing checkpoint metadata".into()))?;
        let probe: serde_json::Value = serde_json::from_str(meta_json)?;
        let version = probe.get("format_version").and_then(|v| v.as_u64());
        if version != Some(FORMAT_VERSION as u64) {
            return Err(Error::Checkpoint(format!(
                "format version {version:?} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let meta: CheckpointMeta = serde_json::from_value(probe)?;
        let st = SafeTensors::deserialize(bytes).map_err(st_err)?;
        let mut ck = Self {
            meta,
            params: BTreeMap::new(),
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
        };
        for (name, view) in st.iter() {
            let (prefix, rest) = name
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            let map = match prefix {
                "param" => &mut ck.params,
                "adam_m" => &mut ck.adam_m,
                "adam_v" => &mut ck.adam_v,
                _ => return Err(Error::Checkpoint(format!("unexpected tensor {name}"))),
            };
            map.insert(rest.to_string(), from_view(&view)?);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model from the embedded config and loads the parameters.
    pub fn build_model(&self) -> Result<Model> {
        let cfg = &self.meta.config;
        let model = Model::new(&cfg.model, cfg.precision.dtype(), cfg.seed)?;
        let store = model.params();
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            store.set(name, t)?;
        }
        Ok(model)
    }

    pub fn restore_optimizer(&self) -> Adam {
        let cfg = &self.meta.config;
        let mut adam = Adam::new(cfg.learning_rate, cfg.adam.clone());
        adam.step = self.meta.global_step;
        adam.first_moment = self.adam_m.clone();
        adam.second_moment = self.adam_v.clone();
        adam
    }
}
