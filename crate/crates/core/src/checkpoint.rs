//! Binary checkpoints of all parameter sets, optional optimizer moments and
//! stage provenance.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "BWA1" | version u32 | file length u64 | header length u32 | header JSON
//! | record count u32 | records sorted by name
//! record = name length u16 | name | ndim u8 | dims u32* | f32 payload
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use bwarea_tensor::{Adam, AdamConfig, Moments, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::model::{ModelConfig, ModelKind, Models};
use crate::train::Stage;

pub const MAGIC: &[u8; 4] = b"BWA1";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;
const MOMENT_M: &str = "~adam.m.";
const MOMENT_V: &str = "~adam.v.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub steps: u64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub history: Vec<StageRecord>,
}

impl Provenance {
    pub fn last(&self) -> Option<&StageRecord> {
        self.history.last()
    }

    pub fn has(&self, stage: Stage) -> bool {
        self.history.iter().any(|r| r.stage == stage)
    }

    /// Refuses stages whose prerequisites are missing from the history.
    pub fn check_can_start(&self, stage: Stage) -> Result<()> {
        let (ok, need) = match stage {
            Stage::Pretrain2 => (self.has(Stage::Pretrain1) || self.has(Stage::Sft), "pretrain1"),
            Stage::Rl => (self.has(Stage::Pretrain2) || self.has(Stage::Sft), "pretrain2 or sft"),
            _ => (true, ""),
        };
        if ok {
            Ok(())
        } else {
            let seen: Vec<&str> = self.history.iter().map(|r| r.stage.as_str()).collect();
            Err(CoreError::Validation(format!(
                "stage {stage} requires a checkpoint with {need} provenance (history: {seen:?}); pass --force to override"
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub provenance: Provenance,
    pub optimizer: Option<OptimizerMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub records: BTreeMap<String, Tensor<f32>>,
}

/// Hex SHA-256 prefix of any serializable configuration.
pub fn config_hash<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn integrity(msg: impl Into<String>) -> CoreError {
    CoreError::Integrity(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            integrity(format!("record overruns the file at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn new(models: &Models<f32>, provenance: Provenance, optimizer: Option<&Adam<f32>>) -> Self {
        let mut records = BTreeMap::new();
        for kind in ModelKind::ALL {
            for (k, v) in models.store(kind).iter() {
                records.insert(k.clone(), v.clone());
            }
        }
        let meta = optimizer.map(|opt| {
            for (name, m) in opt.moments() {
                records.insert(format!("{MOMENT_M}{name}"), m.m.clone());
                records.insert(format!("{MOMENT_V}{name}"), m.v.clone());
            }
            let c = opt.config;
            OptimizerMeta {
                learning_rate: c.learning_rate,
                beta1: c.beta1,
                beta2: c.beta2,
                epsilon: c.epsilon,
                step_count: opt.step_count(),
            }
        });
        Self {
            header: CheckpointHeader {
                model: models.config,
                provenance,
                optimizer: meta,
            },
            records,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut body = Vec::new();
        body.extend_from_slice(&(header.len() as u32).to_le_bytes());
        body.extend_from_slice(&header);
        body.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            body.extend_from_slice(&(name.len() as u16).to_le_bytes());
            body.extend_from_slice(name.as_bytes());
            body.push(t.shape().len() as u8);
            for &d in t.shape() {
                body.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                body.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(PREAMBLE + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&((PREAMBLE + body.len()) as u64).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < PREAMBLE {
            return Err(integrity(format!("file of {} bytes is shorter than the preamble", buf.len())));
        }
        if &buf[..4] != MAGIC {
            return Err(integrity("missing BWA1 magic bytes"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CoreError::Version {
                found: version,
                expected: VERSION,
                hint: "load it with the release that wrote it and re-save, or re-run the stage".into(),
            });
        }
        let declared = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes"));
        if declared != buf.len() as u64 {
            return Err(integrity(format!(
                "declared length {declared} but file holds {} bytes",
                buf.len()
            )));
        }
        let mut r = Reader { buf, pos: PREAMBLE };
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| integrity(format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut records = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| integrity("record name is not UTF-8"))?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(4 * n)?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| integrity(e.to_string()))?;
            if records.insert(name.clone(), t).is_some() {
                return Err(integrity(format!("duplicate record {name}")));
            }
        }
        if r.pos != buf.len() {
            return Err(integrity(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { header, records })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| CoreError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Rebuilds the models, checking every expected parameter and shape.
    pub fn models(&self) -> Result<Models<f32>> {
        let mut m = Models::<f32>::init(self.header.model, 0)?;
        for kind in ModelKind::ALL {
            let store = m.store_mut(kind);
            let names: Vec<String> = store.names().cloned().collect();
            for name in names {
                let t = self
                    .records
                    .get(&name)
                    .ok_or_else(|| integrity(format!("missing parameter {name}")))?;
                let slot = store.get_mut(&name).expect("listed name");
                if slot.shape() != t.shape() {
                    return Err(integrity(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.clone();
            }
        }
        let expected: usize = ModelKind::ALL.iter().map(|&k| m.store(k).len()).sum();
        let params = self.records.keys().filter(|k| !k.starts_with('~')).count();
        if params != expected {
            return Err(integrity(format!("{params} parameter records, expected {expected}")));
        }
        Ok(m)
    }

    pub fn optimizer(&self) -> Option<Adam<f32>> {
        let meta = self.header.optimizer?;
        let mut moments = BTreeMap::new();
        for (k, m) in self.records.range(MOMENT_M.to_string()..) {
            let Some(name) = k.strip_prefix(MOMENT_M) else { break };
            if let Some(v) = self.records.get(&format!("{MOMENT_V}{name}")) {
                moments.insert(
                    name.to_string(),
                    Moments {
                        m: m.clone(),
                        v: v.clone(),
                    },
                );
            }
        }
        let config = AdamConfig {
            learning_rate: meta.learning_rate,
            beta1: meta.beta1,
            beta2: meta.beta2,
            epsilon: meta.epsilon,
        };
        Some(Adam::from_parts(config, meta.step_count, moments))
    }
}

/// Exclusive ownership of a checkpoint directory for the life of a run.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CoreError::Validation(format!(
                "{} is locked by another run; remove {} if that run is gone",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CoreError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Models<f32> {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            ffn_hidden: 16,
            max_context: 8,
            n_codes: 4,
            d_code: 2,
            ..ModelConfig::default()
        };
        Models::init(cfg, 2).unwrap()
    }

    #[test]
    fn byte_round_trip() {
        let m = tiny();
        let ck = Checkpoint::new(&m, Provenance::default(), None);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.models().unwrap(), m);
    }

    #[test]
    fn truncation_and_version() {
        let bytes = Checkpoint::new(&tiny(), Provenance::default(), None).to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CoreError::Integrity(_))
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(CoreError::Version { found: 2, .. })));
    }

    #[test]
    fn stage_prerequisites() {
        let mut p = Provenance::default();
        p.history.push(StageRecord {
            stage: Stage::Pretrain1,
            steps: 1,
            seed: 0,
            config_hash: String::new(),
        });
        assert!(p.check_can_start(Stage::Rl).is_err());
        assert!(p.check_can_start(Stage::Pretrain2).is_ok());
        p.history.push(StageRecord {
            stage: Stage::Pretrain2,
            steps: 1,
            seed: 0,
            config_hash: String::new(),
        });
        assert!(p.check_can_start(Stage::Rl).is_ok());
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(a);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }
}
