//! Binary checkpoints holding parameters, BN running statistics, optimizer
//! moments and a JSON metadata block. The layout is described in
//! `docs/checkpoint-format.md`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::optim::AdamState;
use crate::autodiff::ParamMap;
use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig};
use crate::tensor::{Shape, Tensor};
use crate::volume::write_atomic;

pub const MAGIC: &[u8; 8] = b"ASFSEGCK";
pub const VERSION: u32 = 1;

const PARAM: &str = "param/";
const BUFFER: &str = "buffer/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: NetworkConfig,
    adam_step: u64,
    extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: ParamMap,
    pub buffers: ParamMap,
    pub adam: AdamState,
    /// Free-form run metadata (training config, step, seed).
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &Model, adam: &AdamState, extra: serde_json::Value) -> Self {
        Checkpoint {
            config: model.config.clone(),
            params: model.params.clone(),
            buffers: model.buffers.clone(),
            adam: adam.clone(),
            extra,
        }
    }

    /// Rebuilds the model, checking that every tensor the architecture
    /// declares is present with the right shape and nothing else is.
    pub fn to_model(&self) -> Result<Model> {
        let fresh = Model::new(self.config.clone())?;
        check_same_layout("parameter", &fresh.params, &self.params)?;
        check_same_layout("buffer", &fresh.buffers, &self.buffers)?;
        Ok(Model {
            config: self.config.clone(),
            params: self.params.clone(),
            buffers: self.buffers.clone(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            config: self.config.clone(),
            adam_step: self.adam.step,
            extra: self.extra.clone(),
        };
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);

        let groups: [(&str, &BTreeMap<String, Tensor>); 4] = [
            (PARAM, &self.params),
            (BUFFER, &self.buffers),
            (ADAM_M, &self.adam.m),
            (ADAM_V, &self.adam.v),
        ];
        let count: usize = groups.iter().map(|(_, g)| g.len()).sum();
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for (prefix, group) in groups {
            for (name, t) in group {
                let full = format!("{prefix}{name}");
                out.extend_from_slice(&(full.len() as u32).to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                for d in t.shape().0 {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32().ok_or_else(|| bad("truncated header".into()))?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = r.u64().ok_or_else(|| bad("truncated header".into()))? as usize;
        let meta_bytes = r
            .take(meta_len)
            .ok_or_else(|| bad("truncated metadata".into()))?;
        let meta: Meta =
            serde_json::from_slice(meta_bytes).map_err(|e| bad(format!("metadata: {e}")))?;

        let count = r
            .u64()
            .ok_or_else(|| bad("truncated tensor table".into()))?;
        let mut params = ParamMap::new();
        let mut buffers = ParamMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for _ in 0..count {
            let (name, t) = r
                .tensor()
                .ok_or_else(|| bad("truncated tensor record".into()))?;
            let t = t.map_err(|e| bad(e.to_string()))?;
            let slot = [
                (PARAM, &mut params),
                (BUFFER, &mut buffers),
                (ADAM_M, &mut m),
                (ADAM_V, &mut v),
            ]
            .into_iter()
            .find_map(|(p, map)| name.strip_prefix(p).map(|rest| (rest.to_string(), map)));
            match slot {
                Some((key, map)) => {
                    if map.insert(key, t).is_some() {
                        return Err(bad(format!("duplicate tensor `{name}`")));
                    }
                }
                None => return Err(bad(format!("unknown tensor group in `{name}`"))),
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after tensor table".into()));
        }
        Ok(Checkpoint {
            config: meta.config,
            params,
            buffers,
            adam: AdamState {
                step: meta.adam_step,
                m,
                v,
            },
            extra: meta.extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

fn check_same_layout(kind: &str, want: &ParamMap, got: &ParamMap) -> Result<()> {
    for (name, t) in want {
        match got.get(name) {
            Some(g) if g.shape() == t.shape() => {}
            Some(g) => {
                return Err(Error::usage(format!(
                    "checkpoint {kind} `{name}` has shape {}, architecture expects {}",
                    g.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::usage(format!("checkpoint lacks {kind} `{name}`"))),
        }
    }
    if let Some(extra) = got.keys().find(|k| !want.contains_key(*k)) {
        return Err(Error::usage(format!(
            "checkpoint has unexpected {kind} `{extra}`"
        )));
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Option<(String, Result<Tensor>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).ok()?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = usize::try_from(self.u64()?).ok()?;
        }
        let shape = Shape(dims);
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
        let raw = self.take(n.checked_mul(4)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Some((name, Tensor::new(shape, data)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        NetworkConfig {
            base_channels: 4,
            encoder_depth: 2,
            stage_blocks: vec![1, 1],
            ..Default::default()
        }
    }

    #[test]
    fn bytes_round_trip() {
        let model = Model::new(small()).unwrap();
        let mut adam = AdamState::default();
        adam.step = 7;
        for (k, p) in &model.params {
            adam.m.insert(k.clone(), p.map(|v| v * 0.5));
            adam.v.insert(k.clone(), p.map(|v| v * v));
        }
        let ck = Checkpoint::from_model(&model, &adam, serde_json::json!({"step": 7}));
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap().params, model.params);
    }

    #[test]
    fn corruption_is_detected() {
        let model = Model::new(small()).unwrap();
        let mut bytes =
            Checkpoint::from_model(&model, &AdamState::default(), serde_json::Value::Null)
                .to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("x")),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"nonsense", Path::new("x")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn layout_mismatch_is_usage_error() {
        let model = Model::new(small()).unwrap();
        let mut ck = Checkpoint::from_model(&model, &AdamState::default(), serde_json::Value::Null);
        let first = ck.params.keys().next().unwrap().clone();
        ck.params.remove(&first);
        assert!(matches!(ck.to_model(), Err(Error::Usage(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let model = Model::new(small()).unwrap();
        let ck = Checkpoint::from_model(&model, &AdamState::default(), serde_json::Value::Null);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
