//! Binary checkpoint bundle.
//!
//! Layout: the 8-byte magic `RADACKPT`, a little-endian `u64` header length,
//! a JSON header, then every tensor as raw little-endian `f64` in header
//! order. Tensors are keyed by parameter path and grouped as parameters,
//! Adam first and second moments, and a pending accumulated gradient.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RADACKPT";
pub const CHECKPOINT_FORMAT: u32 = 1;

/// Gradient summed over batches not yet applied.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PendingGradient {
    pub sum: BTreeMap<String, Tensor>,
    pub batches: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Optimizer updates applied.
    pub step: u64,
    /// Batches consumed.
    pub batches: u64,
    pub fingerprint: String,
    /// Training configuration, stored verbatim.
    pub config: serde_json::Value,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub pending: PendingGradient,
    /// Loss sums of the pending batches.
    pub pending_losses: BTreeMap<String, f64>,
    pub starved_pairs: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    step: u64,
    batches: u64,
    fingerprint: String,
    config: serde_json::Value,
    adam: AdamConfig,
    adam_t: u64,
    pending_batches: u64,
    pending_losses: BTreeMap<String, f64>,
    starved_pairs: u64,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: Group,
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    AdamM,
    AdamV,
    Pending,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let payload: Vec<(Group, &str, &Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (Group::Param, n, t))
            .chain(self.optimizer.m.iter().map(|(n, t)| (Group::AdamM, n.as_str(), t)))
            .chain(self.optimizer.v.iter().map(|(n, t)| (Group::AdamV, n.as_str(), t)))
            .chain(self.pending.sum.iter().map(|(n, t)| (Group::Pending, n.as_str(), t)))
            .collect();
        let entries = payload.iter().map(|(group, n, t)| Entry { group: *group, name: n.to_string(), shape: t.shape().to_vec() }).collect();
        let header = Header {
            format_version: CHECKPOINT_FORMAT,
            step: self.step,
            batches: self.batches,
            fingerprint: self.fingerprint.clone(),
            config: self.config.clone(),
            adam: self.optimizer.config,
            adam_t: self.optimizer.t,
            pending_batches: self.pending.batches,
            pending_losses: self.pending_losses.clone(),
            starved_pairs: self.starved_pairs,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * payload.iter().map(|(_, _, t)| t.numel()).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in payload {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing RADACKPT magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.format_version != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported format_version {}", header.format_version)));
        }
        let mut data = &bytes[16 + hlen..];
        let mut params = ParamStore::new();
        let mut optimizer = Adam::new(header.adam);
        optimizer.t = header.adam_t;
        let mut pending = PendingGradient { sum: BTreeMap::new(), batches: header.pending_batches };
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if data.len() < 8 * n {
                return Err(bad(format!("truncated tensor `{}`", e.name)));
            }
            let (chunk, rest) = data.split_at(8 * n);
            data = rest;
            let values = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            let t = Tensor::new(e.shape, values);
            match e.group {
                Group::Param => params.insert(e.name, t),
                Group::AdamM => {
                    optimizer.m.insert(e.name, t);
                }
                Group::AdamV => {
                    optimizer.v.insert(e.name, t);
                }
                Group::Pending => {
                    pending.sum.insert(e.name, t);
                }
            }
        }
        if !data.is_empty() {
            return Err(bad(format!("{} trailing bytes", data.len())));
        }
        Ok(Self {
            step: header.step,
            batches: header.batches,
            fingerprint: header.fingerprint,
            config: header.config,
            params,
            optimizer,
            pending,
            pending_losses: header.pending_losses,
            starved_pairs: header.starved_pairs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Fails with [`Error::FingerprintMismatch`] unless the fingerprints
    /// agree or `allow_mismatch` is set.
    pub fn check_fingerprint(&self, expected: &str, allow_mismatch: bool) -> Result<()> {
        if self.fingerprint == expected || allow_mismatch {
            Ok(())
        } else {
            Err(Error::FingerprintMismatch { checkpoint: self.fingerprint.clone(), config: expected.to_owned() })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.w", Tensor::new([2, 2], vec![1.0, -2.5, 1e-300, f64::MAX]));
        params.insert("b", Tensor::new([1], vec![0.1]));
        let mut optimizer = Adam::new(AdamConfig::default());
        optimizer.t = 7;
        optimizer.m.insert("b".into(), Tensor::new([1], vec![0.3]));
        optimizer.v.insert("b".into(), Tensor::new([1], vec![0.09]));
        let pending = PendingGradient { sum: BTreeMap::from([("b".to_string(), Tensor::new([1], vec![-1.0]))]), batches: 1 };
        Checkpoint {
            step: 12,
            batches: 25,
            fingerprint: "abc".into(),
            config: serde_json::json!({"seed": 3}),
            params,
            optimizer,
            pending,
            pending_losses: BTreeMap::from([("total".to_string(), 0.1 + 0.2)]),
            starved_pairs: 2,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.encode();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        assert_eq!(header["format_version"], 1);
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), c);
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn fingerprint_gate() {
        let c = sample();
        assert!(c.check_fingerprint("abc", false).is_ok());
        assert!(matches!(c.check_fingerprint("xyz", false), Err(Error::FingerprintMismatch { .. })));
        assert!(c.check_fingerprint("xyz", true).is_ok());
    }
}
