//! Binary checkpoint files.
//!
//! Layout: the magic bytes `BLUN`, a little-endian `u32` format version, a
//! little-endian `u32` header length, the UTF-8 JSON header, then every
//! tensor as little-endian `f32` values in directory order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::BatchNormState;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::segnet::SegNet;
use crate::tensor::Tensor;
use crate::text::Vocab;

pub const MAGIC: &[u8; 4] = b"BLUN";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param { frozen: bool },
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    role: Role,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BnMeta {
    momentum: f64,
    eps: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    vocab: Vocab,
    epoch: usize,
    best_val: Option<f64>,
    batchnorm: BTreeMap<String, BnMeta>,
    tensors: Vec<Entry>,
}

/// A trained model snapshot. Tensors are held at `f32` precision so that a
/// save/load round trip is exact.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocab,
    params: ModelParams,
    pub epoch: usize,
    /// Validation overall IoU at `epoch`.
    pub best_val: Option<f64>,
}

impl Checkpoint {
    /// Snapshots `params`, rounding every value to `f32`.
    pub fn new(
        config: RunConfig,
        vocab: Vocab,
        params: &ModelParams,
        epoch: usize,
        best_val: Option<f64>,
    ) -> Self {
        Checkpoint {
            config,
            vocab,
            params: params.rounded_to_f32(),
            epoch,
            best_val,
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    /// Network and parameters, after checking the tensors match what the
    /// stored configuration expects.
    pub fn model(&self) -> Result<(SegNet, &ModelParams)> {
        let net = SegNet::new(self.config.net.clone())?;
        let fresh = net.init_params(self.vocab.len(), &mut rand::rngs::mock::StepRng::new(0, 1))?;
        let mismatch = |what: String| {
            Error::Version {
                found: VERSION,
                supported: VERSION,
            }
            .context(format!(
                "checkpoint does not match its configuration: {what}"
            ))
        };
        for (name, p) in fresh.iter() {
            let got = self
                .params
                .value(name)
                .map_err(|_| mismatch(format!("missing {name}")))?;
            if got.shape() != p.value.shape() {
                return Err(mismatch(format!(
                    "{name} has shape {:?}, expected {:?}",
                    got.shape(),
                    p.value.shape()
                )));
            }
        }
        if fresh.len() != self.params.len() {
            return Err(mismatch(format!(
                "{} tensors stored, configuration has {}",
                self.params.len(),
                fresh.len()
            )));
        }
        for (name, s) in fresh.batchnorm_iter() {
            let got = self
                .params
                .batchnorm(name)
                .map_err(|_| mismatch(format!("missing {name} statistics")))?;
            if got.channels() != s.channels() {
                return Err(mismatch(format!("{name} has {} channels", got.channels())));
            }
        }
        Ok((net, &self.params))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push =
            |name: &str, role: Role, shape: Vec<usize>, data: &[f64], entries: &mut Vec<Entry>| {
                entries.push(Entry {
                    name: name.to_string(),
                    role,
                    shape,
                    offset: payload.len(),
                });
                for &v in data {
                    payload.extend_from_slice(&(v as f32).to_le_bytes());
                }
            };
        for (name, p) in self.params.iter() {
            push(
                name,
                Role::Param { frozen: p.frozen },
                p.value.shape().to_vec(),
                p.value.data(),
                &mut entries,
            );
        }
        let mut bn_meta = BTreeMap::new();
        for (name, s) in self.params.batchnorm_iter() {
            let c = s.channels();
            push(
                name,
                Role::RunningMean,
                vec![c],
                &s.running_mean,
                &mut entries,
            );
            push(
                name,
                Role::RunningVar,
                vec![c],
                &s.running_var,
                &mut entries,
            );
            bn_meta.insert(
                name.to_string(),
                BnMeta {
                    momentum: s.momentum,
                    eps: s.eps,
                },
            );
        }
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            epoch: self.epoch,
            best_val: self.best_val,
            batchnorm: bn_meta,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |what: &str| Error::Format(format!("truncated checkpoint: {what}"));
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
        }
        let u32_at = |at: usize, what: &str| -> Result<u32> {
            let b = bytes.get(at..at + 4).ok_or_else(|| truncated(what))?;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
        };
        let version = u32_at(4, "version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                supported: VERSION,
            });
        }
        let hlen = u32_at(8, "header length")? as usize;
        let json = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| truncated("header"))?;
        let header: Header = serde_json::from_slice(json)
            .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
        let payload = &bytes[12 + hlen..];

        let mut params = ModelParams::new();
        let mut means: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut vars: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = payload
                .get(e.offset..e.offset + 4 * n)
                .ok_or_else(|| truncated(&format!("tensor {}", e.name)))?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            match e.role {
                Role::Param { frozen } => {
                    params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
                    params.get_mut(&e.name)?.frozen = frozen;
                }
                Role::RunningMean => {
                    means.insert(e.name.clone(), data);
                }
                Role::RunningVar => {
                    vars.insert(e.name.clone(), data);
                }
            }
        }
        for (name, meta) in header.batchnorm {
            let (Some(running_mean), Some(running_var)) = (means.remove(&name), vars.remove(&name))
            else {
                return Err(Error::Format(format!(
                    "batch-norm statistics for {name} missing"
                )));
            };
            params.insert_batchnorm(
                name,
                BatchNormState {
                    running_mean,
                    running_var,
                    momentum: meta.momentum,
                    eps: meta.eps,
                },
            );
        }
        Ok(Checkpoint {
            config: header.config,
            vocab: header.vocab,
            params,
            epoch: header.epoch,
            best_val: header.best_val,
        })
    }

    /// Writes through a temporary sibling file and renames it into place,
    /// so a failed write leaves any previous file intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
    }
}
