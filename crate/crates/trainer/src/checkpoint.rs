//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | field | type |
//! |---|---|
//! | magic | `b"SIFT"` |
//! | version | u32 |
//! | metadata | u32 length + UTF-8 JSON |
//! | record count | u32 |
//! | records | kind u8, name (u32 length + UTF-8), ndim u32, dims u32 × ndim, payload |
//!
//! Tensor payloads are `f32` values in row-major order. Mask payloads are a
//! u32 count followed by strictly increasing u32 flat indices.

use std::path::Path;

use forge_masks::{MaskError, SparseMask};
use forge_network::{build, BuildOptions, Network};
use forge_planner::{NetworkPlan, Nonlinearity};
use forge_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Result, TrainError};

pub const MAGIC: &[u8; 4] = b"SIFT";
pub const VERSION: u32 = 1;

const KIND_TENSOR: u8 = 1;
const KIND_MASK: u8 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub plan: NetworkPlan,
    pub hidden_activation: Nonlinearity,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub regression: bool,
    pub epoch: usize,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Tensor(Tensor<f32>),
    Mask(SparseMask),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub records: Vec<(String, Record)>,
}

fn mask_name(weight: &str) -> String {
    match weight.strip_suffix(".weight") {
        Some(stem) => format!("{stem}.mask"),
        None => format!("{weight}.mask"),
    }
}

impl Checkpoint {
    /// Snapshot of every parameter, mask and running statistic.
    pub fn capture(net: &Network<f32>, meta: CheckpointMeta) -> Self {
        let mut records = Vec::new();
        for p in net.params() {
            records.push((p.name.clone(), Record::Tensor(p.value.clone())));
            if let Some(m) = &p.mask {
                records.push((mask_name(&p.name), Record::Mask((**m).clone())));
            }
        }
        for n in net.norms() {
            let f = n.stats.features();
            let t =
                |v: &Vec<f32>| Record::Tensor(Tensor::new(&[f], v.clone()).expect("stats length"));
            records.push((format!("{}.running_mean", n.name), t(&n.stats.running_mean)));
            records.push((format!("{}.running_var", n.name), t(&n.stats.running_var)));
        }
        Self { meta, records }
    }

    fn build_options(&self) -> BuildOptions {
        BuildOptions {
            hidden: self.meta.hidden_activation,
            bn_eps: self.meta.bn_eps,
            bn_momentum: self.meta.bn_momentum,
            ..BuildOptions::default()
        }
    }

    /// Rebuilds the network described by the metadata and loads every record.
    pub fn to_network(&self) -> Result<Network<f32>> {
        let mut net = build(&self.meta.plan, &self.build_options())?;
        self.apply_to(&mut net)?;
        Ok(net)
    }

    /// Loads masks, then parameters, then running statistics into `net`.
    /// Every parameter must be present.
    pub fn apply_to(&self, net: &mut Network<f32>) -> Result<()> {
        let missing =
            |name: &str| TrainError::invalid("init_checkpoint", format!("record `{name}` missing"));
        let find = |name: &str| self.records.iter().find(|(n, _)| n == name).map(|(_, r)| r);
        let names: Vec<(String, bool)> = net
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.mask.is_some()))
            .collect();
        for (name, masked) in names {
            if masked {
                match find(&mask_name(&name)) {
                    Some(Record::Mask(m)) => net.set_mask(&name, m.clone())?,
                    _ => return Err(missing(&mask_name(&name))),
                }
            }
            match find(&name) {
                Some(Record::Tensor(t)) => net.set_param(&name, t.clone())?,
                _ => return Err(missing(&name)),
            }
        }
        for n in net.norms_mut() {
            for (suffix, slot) in [
                ("running_mean", &mut n.stats.running_mean),
                ("running_var", &mut n.stats.running_var),
            ] {
                let key = format!("{}.{suffix}", n.name);
                match find(&key) {
                    Some(Record::Tensor(t)) if t.len() == slot.len() => {
                        slot.copy_from_slice(t.data())
                    }
                    _ => return Err(missing(&key)),
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        put_u32(&mut out, meta.len());
        out.extend_from_slice(&meta);
        put_u32(&mut out, self.records.len());
        for (name, record) in &self.records {
            let (kind, shape) = match record {
                Record::Tensor(t) => (KIND_TENSOR, t.shape()),
                Record::Mask(m) => (KIND_MASK, m.shape()),
            };
            out.push(kind);
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, shape.len());
            for &d in shape {
                put_u32(&mut out, d);
            }
            match record {
                Record::Tensor(t) => t
                    .data()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Record::Mask(m) => {
                    put_u32(&mut out, m.active().len());
                    m.active()
                        .iter()
                        .for_each(|i| out.extend_from_slice(&i.to_le_bytes()));
                }
            }
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(4, "magic")? != MAGIC {
            return Err(TrainError::format(path, "bad magic, not a checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(TrainError::format(
                path,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| TrainError::format(path, format!("metadata: {e}")))?;
        let count = r.u32("record count")?;
        let mut records = Vec::with_capacity(count.min(1 << 16) as usize);
        for i in 0..count {
            let what = format!("record {i}");
            let kind = r.take(1, &what)?[0];
            let name_len = r.u32(&what)? as usize;
            let name = std::str::from_utf8(r.take(name_len, &what)?)
                .map_err(|_| TrainError::format(path, format!("{what}: name is not UTF-8")))?
                .to_string();
            let ndim = r.u32(&name)? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u32(&name)? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| {
                    TrainError::format(path, format!("record `{name}`: shape overflows"))
                })?;
            let record = match kind {
                KIND_TENSOR => {
                    let raw = r.take(len.saturating_mul(4), &name)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Record::Tensor(Tensor::new(&shape, data)?)
                }
                KIND_MASK => {
                    let n = r.u32(&name)? as usize;
                    let raw = r.take(n.saturating_mul(4), &name)?;
                    let idx = raw
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Record::Mask(SparseMask::from_indices(&shape, idx, 0).map_err(|e| match e {
                        MaskError::Unsorted(at) => TrainError::format(
                            path,
                            format!("mask record `{name}`: indices not strictly increasing at position {at}"),
                        ),
                        other => TrainError::format(path, format!("mask record `{name}`: {other}")),
                    })?)
                }
                other => {
                    return Err(TrainError::format(
                        path,
                        format!("record `{name}`: unknown kind {other}"),
                    ))
                }
            };
            records.push((name, record));
        }
        if r.pos != bytes.len() {
            return Err(TrainError::format(path, "trailing bytes after last record"));
        }
        Ok(Self { meta, records })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(
        &u32::try_from(v)
            .expect("checkpoint field exceeds u32")
            .to_le_bytes(),
    );
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(TrainError::format(
                self.path,
                format!("truncated at {what}"),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()).map_err(TrainError::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(TrainError::io(path))?;
    Checkpoint::from_bytes(path, &bytes)
}
