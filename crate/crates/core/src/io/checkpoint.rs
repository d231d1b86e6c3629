//! Checkpoint layout:
//!
//! ```text
//! b"SCAACKPT" | u32 version | u32 manifest_len | manifest JSON | payload
//! ```
//!
//! The payload is three f32 sections (parameters, Adam first moments, Adam
//! second moments), each laid out by the manifest's element offsets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{f32_to_le, le_to_f32, read_bytes, write_bytes};
use crate::error::Error;
use crate::model::ScaaConfig;
use crate::tensor::Tensor;
use crate::train::TrainState;

pub const MAGIC: &[u8; 8] = b"SCAACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset inside each section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: ScaaConfig,
    step: usize,
    adam: AdamState,
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
    section_len: usize,
}

/// Decoded checkpoint contents, independent of any live model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ScaaConfig,
    pub step: usize,
    pub adam: AdamState,
    /// Echoed command-line flags.
    pub meta: BTreeMap<String, String>,
    pub params: Vec<(String, Tensor<f32>)>,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn capture(
        config: &ScaaConfig,
        state: &TrainState<f32>,
        meta: BTreeMap<String, String>,
    ) -> Self {
        Self {
            config: config.clone(),
            step: state.step,
            adam: AdamState {
                beta1: state.adam.beta1,
                beta2: state.adam.beta2,
                eps: state.adam.eps,
                t: state.adam.t,
            },
            meta,
            params: state
                .store
                .iter()
                .map(|(n, p)| (n.to_string(), (*p.value).clone()))
                .collect(),
            m: state.adam.m.clone(),
            v: state.adam.v.clone(),
        }
    }

    /// Copies every tensor into `state`, matched by name.
    pub fn restore(&self, state: &mut TrainState<f32>) -> Result<(), Error> {
        let index: BTreeMap<&str, usize> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.as_str(), i))
            .collect();
        let names: Vec<String> = state.store.names().map(str::to_string).collect();
        let mut order = Vec::with_capacity(names.len());
        for name in &names {
            let &i = index
                .get(name.as_str())
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            let expected = state.store.tensor(name)?.shape().to_vec();
            let found = self.params[i].1.shape().to_vec();
            if expected != found {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    expected,
                    found,
                });
            }
            order.push(i);
        }
        for (k, name) in names.iter().enumerate() {
            state.store.set(name, self.params[order[k]].1.clone())?;
            state.adam.m[k] = self.m[order[k]].clone();
            state.adam.v[k] = self.v[order[k]].clone();
        }
        state.adam.beta1 = self.adam.beta1;
        state.adam.beta2 = self.adam.beta2;
        state.adam.eps = self.adam.eps;
        state.adam.t = self.adam.t;
        state.step = self.step;
        Ok(())
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, Error> {
    let mut tensors = Vec::with_capacity(ckpt.params.len());
    let mut offset = 0;
    for (name, t) in &ckpt.params {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let manifest = Manifest {
        config: ckpt.config.clone(),
        step: ckpt.step,
        adam: ckpt.adam.clone(),
        meta: ckpt.meta.clone(),
        tensors,
        section_len: offset,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 12 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for section in [
        ckpt.params.iter().map(|(_, t)| t).collect::<Vec<_>>(),
        ckpt.m.iter().collect(),
        ckpt.v.iter().collect(),
    ] {
        if section.len() != ckpt.params.len() {
            return Err(Error::Header(
                "optimizer state does not match parameter count".into(),
            ));
        }
        for (t, (name, p)) in section.iter().zip(&ckpt.params) {
            if t.shape() != p.shape() {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    expected: p.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            f32_to_le(t.data().iter().copied(), &mut out);
        }
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> Result<u32, Error> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::TruncatedPayload {
            expected: at + 4,
            found: bytes.len(),
        })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, Error> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::Header("not a checkpoint (bad magic)".into()));
    }
    let version = u32_at(bytes, 8)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let len = u32_at(bytes, 12)? as usize;
    let json = bytes.get(16..16 + len).ok_or(Error::TruncatedPayload {
        expected: 16 + len,
        found: bytes.len(),
    })?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::Header(e.to_string()))?;
    manifest.config.validate()?;

    let mut expected_offset = 0usize;
    for t in &manifest.tensors {
        let n = t
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Header(format!("tensor '{}' shape overflows", t.name)))?;
        if t.offset != expected_offset {
            return Err(Error::Header(format!(
                "tensor '{}' offset {} breaks packing",
                t.name, t.offset
            )));
        }
        expected_offset = expected_offset
            .checked_add(n)
            .ok_or_else(|| Error::Header("tensor sizes overflow".into()))?;
    }
    if expected_offset != manifest.section_len {
        return Err(Error::Header(format!(
            "manifest tensors cover {expected_offset} elements, section length is {}",
            manifest.section_len
        )));
    }
    let payload = &bytes[16 + len..];
    let need = manifest
        .section_len
        .checked_mul(12)
        .ok_or_else(|| Error::Header("section length overflows".into()))?;
    if payload.len() < need {
        return Err(Error::TruncatedPayload {
            expected: need,
            found: payload.len(),
        });
    }
    if payload.len() > need {
        return Err(Error::DimMismatch(format!(
            "{} trailing bytes after payload",
            payload.len() - need
        )));
    }
    let section = |k: usize| -> Result<Vec<Tensor<f32>>, Error> {
        let base = k * manifest.section_len * 4;
        manifest
            .tensors
            .iter()
            .map(|t| {
                let n: usize = t.shape.iter().product();
                let start = base + t.offset * 4;
                Ok(Tensor::new(
                    t.shape.clone(),
                    le_to_f32(&payload[start..start + n * 4]),
                )?)
            })
            .collect()
    };
    let params = section(0)?;
    Ok(Checkpoint {
        config: manifest.config,
        step: manifest.step,
        adam: manifest.adam,
        meta: manifest.meta,
        params: manifest
            .tensors
            .iter()
            .map(|t| t.name.clone())
            .zip(params)
            .collect(),
        m: section(1)?,
        v: section(2)?,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), Error> {
    write_bytes(path, &encode_checkpoint(ckpt)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, Error> {
    decode_checkpoint(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScaaModel;

    fn sample() -> Checkpoint {
        let config = ScaaConfig::micro(3);
        let (_, store) = ScaaModel::init::<f32>(config.clone(), 7).unwrap();
        let mut state = TrainState::new(store);
        state.step = 5;
        state.adam.t = 5;
        state.adam.m[0].data_mut()[0] = 0.25;
        let mut meta = BTreeMap::new();
        meta.insert("seed".to_string(), "7".to_string());
        Checkpoint::capture(&config, &state, meta)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = sample();
        let bytes = encode_checkpoint(&c).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn version_and_truncation_are_reported() {
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        let cut = bytes[..bytes.len() - 4].to_vec();
        assert!(matches!(
            decode_checkpoint(&cut),
            Err(Error::TruncatedPayload { .. })
        ));
        bytes[8] = 9;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::VersionMismatch {
                expected: 1,
                found: 9
            })
        ));
    }

    #[test]
    fn mismatched_config_names_the_tensor() {
        let c = sample();
        let other = ScaaConfig::desk(3);
        let (_, store) = ScaaModel::init::<f32>(other, 0).unwrap();
        let mut state = TrainState::new(store);
        match c.restore(&mut state) {
            Err(Error::TensorShape { name, .. }) => assert_eq!(name, "ctx.stem.0.conv.weight"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_tensor_is_reported() {
        let mut c = sample();
        let (name, _) = c.params.remove(3);
        c.m.remove(3);
        c.v.remove(3);
        let (_, store) = ScaaModel::init::<f32>(ScaaConfig::micro(3), 0).unwrap();
        let mut state = TrainState::new(store);
        assert!(matches!(c.restore(&mut state), Err(Error::MissingTensor(n)) if n == name));
    }
}
