//! Checkpoint files: a magic line, one line of JSON header, then raw
//! little-endian data.
//!
//! The header lists every parameter with its kind, shape and byte offset into
//! the data section, the batch-norm running statistics (always f64), and the
//! optional Adam moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::RunningStats;
use crate::error::{Error, Result};
use crate::network::{count_parameters, zero_model, ModelConfig, ParamKind, Parameter, ParameterStore};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &str = "VOLSEG-CHECKPOINT 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Element> {
    pub store: ParameterStore<T>,
    pub adam: Option<AdamState<T>>,
    /// Free-form run state (epoch counters, configs) stored in the header.
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: DType,
    model: ModelConfig,
    parameter_count: usize,
    params: Vec<ParamEntry>,
    running: Vec<RunningEntry>,
    adam: Option<AdamEntry>,
    data_bytes: usize,
    extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunningEntry {
    name: String,
    channels: usize,
    momentum: f64,
    updates: u64,
    /// Means then variances, f64 each.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamEntry {
    config: AdamConfig,
    t: u64,
    /// Per parameter: first-moment offset, second-moment offset.
    moments: Vec<(usize, usize)>,
}

fn push_tensor<T: Element>(data: &mut Vec<u8>, t: &Tensor<T>) -> usize {
    let offset = data.len();
    for &v in t.data() {
        v.extend_le_bytes(data);
    }
    offset
}

impl<T: Element> Checkpoint<T> {
    pub fn new(store: ParameterStore<T>) -> Self {
        Checkpoint { store, adam: None, extra: serde_json::Value::Null }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let params = self
            .store
            .params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                kind: p.kind,
                shape: p.value.shape().to_vec(),
                offset: push_tensor(&mut data, &p.value),
            })
            .collect();
        let running = self
            .store
            .running
            .iter()
            .map(|(name, s)| {
                let offset = data.len();
                for &v in s.mean.iter().chain(&s.var) {
                    data.extend_from_slice(&v.to_le_bytes());
                }
                RunningEntry { name: name.clone(), channels: s.mean.len(), momentum: s.momentum, updates: s.updates, offset }
            })
            .collect();
        let adam = match &self.adam {
            Some(a) => {
                if a.m.len() != self.store.len() || a.v.len() != self.store.len() {
                    return Err(Error::State("optimizer state does not match parameter count".into()));
                }
                let moments = a.m.iter().zip(&a.v).map(|(m, v)| (push_tensor(&mut data, m), push_tensor(&mut data, v))).collect();
                Some(AdamEntry { config: a.config, t: a.t, moments })
            }
            None => None,
        };
        let header = Header {
            dtype: T::DTYPE,
            model: self.store.config.clone(),
            parameter_count: count_parameters(&self.store),
            params,
            running,
            adam,
            data_bytes: data.len(),
            extra: self.extra.clone(),
        };
        let mut out = Vec::with_capacity(data.len() + 4096);
        writeln!(out, "{MAGIC}")?;
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        let magic = lines.next().unwrap_or_default();
        if magic != MAGIC.as_bytes() {
            return Err(Error::Format("not a checkpoint (bad magic line)".into()));
        }
        let header_line = lines.next().ok_or_else(|| Error::Format("checkpoint header missing".into()))?;
        let data = lines.next().ok_or_else(|| Error::Format("checkpoint data missing".into()))?;
        let header: Header = serde_json::from_slice(header_line)?;
        if header.dtype != T::DTYPE {
            return Err(Error::Format(format!("checkpoint holds {} data, expected {}", header.dtype, T::DTYPE)));
        }
        if data.len() != header.data_bytes {
            return Err(Error::Format(format!("data section is {} bytes, header declares {}", data.len(), header.data_bytes)));
        }
        header.model.validate()?;
        let size = T::DTYPE.size_of();
        let read = |offset: usize, shape: &[usize]| -> Result<Tensor<T>> {
            let n: usize = shape.iter().product();
            let bytes = offset
                .checked_add(n * size)
                .and_then(|end| data.get(offset..end))
                .ok_or_else(|| Error::Format(format!("tensor at offset {offset} runs past the data section")))?;
            Tensor::new(shape.to_vec(), bytes.chunks_exact(size).map(T::from_le_slice).collect())
        };

        let mut params = Vec::with_capacity(header.params.len());
        for e in &header.params {
            params.push(Parameter { name: e.name.clone(), kind: e.kind, value: read(e.offset, &e.shape)? });
        }
        let mut running = std::collections::BTreeMap::new();
        for e in &header.running {
            let bytes = data
                .get(e.offset..e.offset + 16 * e.channels)
                .ok_or_else(|| Error::Format(format!("running statistics `{}` run past the data section", e.name)))?;
            let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let (mean, var) = vals.split_at(e.channels);
            running.insert(
                e.name.clone(),
                RunningStats { mean: mean.to_vec(), var: var.to_vec(), momentum: e.momentum, updates: e.updates },
            );
        }
        let store = ParameterStore { config: header.model.clone(), params, running };
        check_layout(&store)?;
        if count_parameters(&store) != header.parameter_count {
            return Err(Error::Format("parameter count does not match header".into()));
        }

        let adam = match header.adam {
            Some(a) => {
                if a.moments.len() != store.len() {
                    return Err(Error::Format("optimizer moments do not match parameter count".into()));
                }
                let mut m = Vec::with_capacity(store.len());
                let mut v = Vec::with_capacity(store.len());
                for (p, &(mo, vo)) in store.params.iter().zip(&a.moments) {
                    m.push(read(mo, p.value.shape())?);
                    v.push(read(vo, p.value.shape())?);
                }
                Some(AdamState { config: a.config, t: a.t, m, v })
            }
            None => None,
        };
        Ok(Checkpoint { store, adam, extra: header.extra })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.store.bitwise_eq(&other.store)
            && self.extra == other.extra
            && match (&self.adam, &other.adam) {
                (Some(a), Some(b)) => a.bitwise_eq(b),
                (None, None) => true,
                _ => false,
            }
    }
}

/// The stored parameters must be exactly those `build_model` would allocate
/// for the stored config.
fn check_layout<T: Element>(store: &ParameterStore<T>) -> Result<()> {
    let reference: ParameterStore<f32> = zero_model(&store.config)?;
    let same = reference.params.len() == store.params.len()
        && reference
            .params
            .iter()
            .zip(&store.params)
            .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.value.shape() == b.value.shape())
        && reference.running.keys().eq(store.running.keys());
    if !same {
        return Err(Error::Format("checkpoint parameters do not match its model config".into()));
    }
    Ok(())
}
