//! Single-file checkpoints in safetensors format.
//!
//! Tensors are stored under `network.path` names with their native dtype and
//! little-endian bytes, so a save/load cycle is bit-exact. The metadata block
//! carries the format version, the architecture echo and free-form entries
//! (step counter, training config echo, optimizer step counts).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use safetensors::tensor::{Dtype as StDtype, TensorView};
use safetensors::SafeTensors;

use super::{tensor_bytes, ModelBundle, NetConfig};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

const KEY_VERSION: &str = "format_version";
const KEY_NET: &str = "net_config";

/// Everything read back from a checkpoint file.
#[derive(Debug)]
pub struct Checkpoint {
    pub models: ModelBundle,
    pub metadata: BTreeMap<String, String>,
    /// Tensors that do not belong to a network (e.g. optimizer moments).
    pub extra: BTreeMap<String, Tensor>,
}

fn st_dtype(d: DType) -> Result<StDtype> {
    match d {
        DType::F32 => Ok(StDtype::F32),
        DType::F64 => Ok(StDtype::F64),
        other => Err(Error::Format(format!("unsupported dtype {other:?}"))),
    }
}

fn from_view(view: &TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let bytes = view.data();
    let dev = Device::Cpu;
    Ok(match view.dtype() {
        StDtype::F32 => {
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        StDtype::F64 => {
            let v: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        other => return Err(Error::Format(format!("unsupported stored dtype {other:?}"))),
    })
}

impl ModelBundle {
    /// Writes all networks plus `extra` tensors and `metadata` to `path`.
    pub fn save_checkpoint(
        &self,
        path: &Path,
        metadata: &BTreeMap<String, String>,
        extra: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        let mut named: Vec<(String, Tensor)> = self
            .all_tensors()
            .into_iter()
            .map(|(n, v, _)| (n, v.as_tensor().clone()))
            .collect();
        named.extend(extra.iter().map(|(k, t)| (k.clone(), t.clone())));

        let bytes: Vec<(String, Vec<usize>, StDtype, Vec<u8>)> = named
            .iter()
            .map(|(n, t)| Ok((n.clone(), t.dims().to_vec(), st_dtype(t.dtype())?, tensor_bytes(t)?)))
            .collect::<Result<_>>()?;
        let views: Vec<(String, TensorView<'_>)> = bytes
            .iter()
            .map(|(n, shape, dt, b)| {
                TensorView::new(*dt, shape.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Format(e.to_string()))
            })
            .collect::<Result<_>>()?;

        let mut meta: HashMap<String, String> = metadata.clone().into_iter().collect();
        meta.insert(KEY_VERSION.into(), FORMAT_VERSION.to_string());
        meta.insert(KEY_NET.into(), self.config.to_text());

        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        safetensors::serialize_to_file(views, Some(meta), &tmp).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint. When `expected` is given, the stored architecture
    /// must match it exactly.
    pub fn load_checkpoint(path: &Path, expected: Option<&NetConfig>) -> Result<Checkpoint> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&raw).map_err(|e| Error::Format(e.to_string()))?;
        let metadata: BTreeMap<String, String> = header
            .metadata()
            .clone()
            .map(|m| m.into_iter().collect())
            .unwrap_or_default();
        let version = metadata
            .get(KEY_VERSION)
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::Format("missing format version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let config = NetConfig::from_text(
            metadata
                .get(KEY_NET)
                .ok_or_else(|| Error::Format("missing architecture echo".into()))?,
        )?;
        if let Some(want) = expected {
            if want != &config {
                return Err(Error::Config(format!(
                    "checkpoint architecture does not match the configured one:\n{}vs\n{}",
                    config.to_text(),
                    want.to_text()
                )));
            }
        }

        let st = SafeTensors::deserialize(&raw).map_err(|e| Error::Format(e.to_string()))?;
        let mut stored: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, view) in st.tensors() {
            stored.insert(name, from_view(&view)?);
        }
        let dtype = stored
            .values()
            .next()
            .map(|t| t.dtype())
            .ok_or_else(|| Error::Format("empty checkpoint".into()))?;
        let models = ModelBundle::new(&config, 0, dtype)?;
        for (name, var, _) in models.all_tensors() {
            let t = stored
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("tensor `{name}` missing")))?;
            assign(&var, &t, &name)?;
        }
        Ok(Checkpoint {
            models,
            metadata,
            extra: stored,
        })
    }

    /// Copies every tensor of `other` into `self` (same architecture required).
    pub fn copy_from(&self, other: &ModelBundle) -> Result<()> {
        for ((n, dst, _), (_, src, _)) in self.all_tensors().into_iter().zip(other.all_tensors()) {
            assign(&dst, src.as_tensor(), &n)?;
        }
        Ok(())
    }

    /// Copies one network's tensors (parameters and buffers) from `other`.
    pub fn copy_network_from(&self, other: &ModelBundle, network: &str) -> Result<()> {
        let get = |b: &ModelBundle| {
            b.network(network)
                .map(|n| n.named(network, None))
                .ok_or_else(|| Error::Config(format!("unknown network `{network}`")))
        };
        let (dst, src) = (get(self)?, get(other)?);
        if dst.len() != src.len() {
            return Err(Error::Config(format!("`{network}` differs between bundles")));
        }
        for ((n, d), (_, s)) in dst.iter().zip(&src) {
            assign(d, s.as_tensor(), n)?;
        }
        Ok(())
    }
}

pub(crate) fn assign(var: &Var, t: &Tensor, name: &str) -> Result<()> {
    if var.dims() != t.dims() || var.dtype() != t.dtype() {
        return Err(Error::Format(format!(
            "tensor `{name}`: stored {:?}/{:?}, expected {:?}/{:?}",
            t.dims(),
            t.dtype(),
            var.dims(),
            var.dtype()
        )));
    }
    var.set(t)?;
    Ok(())
}
