//! Named-tensor checkpoints in the safetensors container format.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::engine::Phase;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "agd-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub epoch: usize,
    pub config_hash: String,
    pub lambda: f64,
    /// Further string metadata, e.g. quantization parameters.
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

const RESERVED: [&str; 6] = ["format", "version", "phase", "epoch", "config_hash", "lambda"];

fn to_st_dtype(d: DType) -> Result<Dtype> {
    Ok(match d {
        DType::F32 => Dtype::F32,
        DType::F64 => Dtype::F64,
        DType::U8 => Dtype::U8,
        DType::U32 => Dtype::U32,
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn raw_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::U8 => flat.to_vec1::<u8>()?,
        DType::U32 => flat.to_vec1::<u32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn from_view(view: &TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let dev = &Device::Cpu;
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, dev)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, dev)?
        }
        Dtype::U8 => Tensor::from_vec(data.to_vec(), shape, dev)?,
        Dtype::U32 => {
            let v: Vec<u32> = data.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, dev)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    Ok(t)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta: HashMap<String, String> = HashMap::new();
        meta.insert("format".into(), CHECKPOINT_FORMAT.into());
        meta.insert("version".into(), CHECKPOINT_VERSION.to_string());
        meta.insert("phase".into(), self.meta.phase.to_string());
        meta.insert("epoch".into(), self.meta.epoch.to_string());
        meta.insert("config_hash".into(), self.meta.config_hash.clone());
        meta.insert("lambda".into(), format!("{:e}", self.meta.lambda));
        for (k, v) in &self.meta.extra {
            if RESERVED.contains(&k.as_str()) {
                return Err(Error::Checkpoint(format!("metadata key `{k}` is reserved")));
            }
            meta.insert(k.clone(), v.clone());
        }
        let raw = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), to_st_dtype(t.dtype())?, t.dims().to_vec(), raw_bytes(t)?)))
            .collect::<Result<Vec<_>>>()?;
        let views = raw
            .iter()
            .map(|(k, d, s, b)| Ok((k.clone(), TensorView::new(*d, s.clone(), b).map_err(st_err)?)))
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize(views, Some(meta)).map_err(st_err)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(st_err)?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::Checkpoint("missing metadata header".into()))?;
        let get = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata field `{k}`")))
        };
        if get("format")? != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint("not an agd checkpoint".into()));
        }
        let version = get("version")?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let phase = Phase::parse(&get("phase")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let epoch = get("epoch")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad epoch field".into()))?;
        let lambda = get("lambda")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad lambda field".into()))?;
        let extra = meta
            .iter()
            .filter(|(k, _)| !RESERVED.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let st = SafeTensors::deserialize(bytes).map_err(st_err)?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            tensors.insert(name, from_view(&view)?);
        }
        Ok(Checkpoint {
            meta: CheckpointMeta {
                phase,
                epoch,
                config_hash: get("config_hash")?,
                lambda,
                extra,
            },
            tensors,
        })
    }

    /// Writes to a sibling temporary file, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.tensors.get(name).cloned()
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn st_err(e: safetensors::SafeTensorError) -> Error {
    Error::Checkpoint(e.to_string())
}
