//! Binary checkpoints.
//!
//! Layout: the magic `MMRC`, a little-endian `u32` format version, a `u64`
//! header length, a JSON header, then one record per tensor in header order.
//! A record is a `u64` element count followed by that many little-endian
//! `f64` bit patterns, so a round trip is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptive::{EwcState, OptimizerState, Reliability};
use crate::dataset::Dataset;
use crate::debias::{Adversary, PropensityModel};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Rng, Tensor};

use super::config::ExperimentConfig;
use super::model::{ModelParams, ModelShape};
use super::train::TrainState;

pub const MAGIC: [u8; 4] = *b"MMRC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    /// Fingerprint of the dataset the state was trained on.
    pub dataset: String,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ExperimentConfig,
    config_hash: String,
    dataset: String,
    seed: u64,
    epoch: u64,
    step: u64,
    rejected: u64,
    shape: ModelShape,
    adversary_width: Option<usize>,
    propensity_floor: Option<f64>,
    ewc_lambda: Option<f64>,
    reliability: Reliability,
    tensors: Vec<TensorRecord>,
}

fn prefixed<'a, P: ParamSet>(prefix: &str, p: &'a P, out: &mut Vec<(String, &'a Tensor)>) {
    out.extend(p.named().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
}

fn prefixed_mut<'a, P: ParamSet>(prefix: &str, p: &'a mut P, out: &mut Vec<(String, &'a mut Tensor)>) {
    out.extend(p.named_mut().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
}

impl Checkpoint {
    pub fn new(config: &ExperimentConfig, data: &Dataset, state: TrainState) -> Self {
        Checkpoint {
            config: config.clone(),
            dataset: data.fingerprint(),
            state,
        }
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let s = &self.state;
        let mut out = Vec::new();
        prefixed("model", &s.model, &mut out);
        prefixed("opt.v", &s.opt.v, &mut out);
        if let Some(a) = &s.adversary {
            prefixed("adversary", a, &mut out);
        }
        if let Some(p) = &s.propensity {
            prefixed("propensity", p, &mut out);
        }
        if let Some(e) = &s.ewc {
            prefixed("ewc.fisher", &e.fisher, &mut out);
            prefixed("ewc.anchor", &e.anchor, &mut out);
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let tensors = self.tensors();
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config.hash()?,
            dataset: self.dataset.clone(),
            seed: self.config.seed,
            epoch: s.epoch,
            step: s.opt.step,
            rejected: s.opt.rejected,
            shape: s.shape.clone(),
            adversary_width: s.adversary.as_ref().map(|a| a.w.rows()),
            propensity_floor: s.propensity.as_ref().map(|p| p.floor),
            ewc_lambda: s.ewc.as_ref().map(|e| e.lambda),
            reliability: s.reliability,
            tensors: tensors
                .iter()
                .map(|(n, t)| TensorRecord {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * s.model.num_params() * 2);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in tensors {
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, expected {VERSION}")));
        }
        let len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        if header.config.hash()? != header.config_hash {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        header.config.validate()?;

        let rng = Rng::new(header.seed);
        let model = ModelParams::new(&header.shape, &rng)?;
        let groups = header.shape.n_groups;
        let mut state = TrainState {
            opt: OptimizerState {
                v: model.zeroed(),
                step: header.step,
                rejected: header.rejected,
            },
            adversary: header
                .adversary_width
                .map(|w| Adversary::new(w, groups, &mut rng.fork(5)))
                .transpose()?,
            propensity: header.propensity_floor.map(|f| PropensityModel::new(header.shape.propensity_dim, f)),
            ewc: header.ewc_lambda.map(|lambda| EwcState {
                fisher: model.zeroed(),
                anchor: model.zeroed(),
                lambda,
            }),
            reliability: header.reliability,
            shape: header.shape,
            model,
            epoch: header.epoch,
        };

        let mut slots = Vec::new();
        prefixed_mut("model", &mut state.model, &mut slots);
        prefixed_mut("opt.v", &mut state.opt.v, &mut slots);
        if let Some(a) = state.adversary.as_mut() {
            prefixed_mut("adversary", a, &mut slots);
        }
        if let Some(p) = state.propensity.as_mut() {
            prefixed_mut("propensity", p, &mut slots);
        }
        if let Some(e) = state.ewc.as_mut() {
            prefixed_mut("ewc.fisher", &mut e.fisher, &mut slots);
            prefixed_mut("ewc.anchor", &mut e.anchor, &mut slots);
        }
        if slots.len() != header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensor records for {} tensors",
                header.tensors.len(),
                slots.len()
            )));
        }
        for ((name, t), rec) in slots.into_iter().zip(&header.tensors) {
            if name != rec.name || t.shape() != rec.shape.as_slice() {
                return Err(Error::Checkpoint(format!("unexpected tensor {} {:?}", rec.name, rec.shape)));
            }
            let n = r.u64()? as usize;
            if n != t.len() {
                return Err(Error::Checkpoint(format!("tensor {name} holds {n} values, expected {}", t.len())));
            }
            for v in t.data_mut() {
                *v = f64::from_bits(r.u64()?);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
        }
        Ok(Checkpoint {
            config: header.config,
            dataset: header.dataset,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    /// Fails unless `data` is the dataset the checkpoint was trained on.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let fp = data.fingerprint();
        if fp != self.dataset {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on dataset {}, got {fp}",
                self.dataset
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
