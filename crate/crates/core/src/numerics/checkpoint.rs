//! Checkpoint layout: `u32` little-endian manifest length, the JSON manifest,
//! then a raw little-endian `f32` blob addressed by byte offsets in the manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    entries: Vec<ManifestEntry>,
    config: serde_json::Value,
    #[serde(default)]
    meta: serde_json::Value,
}

/// In-memory checkpoint. Entry names prefixed with [`Checkpoint::AUX_PREFIX`]
/// hold auxiliary state (optimizer moments) rather than model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<ManifestEntry>,
    pub blob: Vec<u8>,
    pub config_snapshot: serde_json::Value,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub const AUX_PREFIX: &'static str = "aux/";

    pub fn new(config_snapshot: serde_json::Value) -> Self {
        Self { entries: Vec::new(), blob: Vec::new(), config_snapshot, meta: serde_json::Value::Null }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        let offset = self.blob.len();
        self.blob.reserve(data.len() * 4);
        for v in data {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.push(ManifestEntry { name: name.to_string(), shape: shape.to_vec(), offset });
    }

    pub fn from_params(params: &ParamStore, config_snapshot: serde_json::Value) -> Self {
        let mut ck = Self::new(config_snapshot);
        for (_, name, t) in params.iter() {
            ck.push(name, t.shape(), t.data());
        }
        ck
    }

    fn extent(&self, e: &ManifestEntry) -> Result<(usize, usize), NumericsError> {
        let n: usize = e.shape.iter().product();
        let end = e.offset.checked_add(n * 4).ok_or_else(|| NumericsError::CorruptCheckpoint(format!("{} overflows", e.name)))?;
        if end > self.blob.len() || e.offset % 4 != 0 {
            return Err(NumericsError::CorruptCheckpoint(format!(
                "entry {} spans bytes {}..{} but blob has {}",
                e.name,
                e.offset,
                end,
                self.blob.len()
            )));
        }
        Ok((e.offset, end))
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        for e in &self.entries {
            self.extent(e)?;
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor, NumericsError> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        let (start, end) = self.extent(e)?;
        let data = self.blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::new(e.shape.clone(), data).map_err(|err| NumericsError::CorruptCheckpoint(format!("{name}: {err}")))
    }

    /// All non-auxiliary entries as a parameter store, in manifest order.
    pub fn to_params(&self) -> Result<ParamStore, NumericsError> {
        let mut store = ParamStore::new();
        for e in self.entries.iter().filter(|e| !e.name.starts_with(Self::AUX_PREFIX)) {
            store.insert(e.name.clone(), self.tensor(&e.name)?);
        }
        Ok(store)
    }

    /// Overwrites `store` values. Every model entry must name a known parameter
    /// of the same shape, and every parameter must be present.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), NumericsError> {
        let model_entries: Vec<&ManifestEntry> =
            self.entries.iter().filter(|e| !e.name.starts_with(Self::AUX_PREFIX)).collect();
        let unknown: Vec<String> =
            model_entries.iter().filter(|e| store.id(&e.name).is_none()).map(|e| e.name.clone()).collect();
        if !unknown.is_empty() {
            return Err(NumericsError::UnknownCheckpointParams(unknown));
        }
        let missing: Vec<&str> = store
            .names()
            .iter()
            .filter(|n| !model_entries.iter().any(|e| &e.name == *n))
            .map(|n| n.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(NumericsError::CorruptCheckpoint(format!("missing parameters: {}", missing.join(", "))));
        }
        for e in model_entries {
            let t = self.tensor(&e.name)?;
            let id = store.id(&e.name).expect("checked");
            let dst = store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(NumericsError::CorruptCheckpoint(format!(
                    "{}: shape {:?} in checkpoint, {:?} in model",
                    e.name,
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            entries: self.entries.clone(),
            config: self.config_snapshot.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(4 + json.len() + self.blob.len());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NumericsError> {
        if bytes.len() < 4 {
            return Err(NumericsError::CorruptCheckpoint("missing manifest length prefix".into()));
        }
        let len = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
        let json = bytes
            .get(4..4 + len)
            .ok_or_else(|| NumericsError::CorruptCheckpoint(format!("manifest length {len} exceeds file")))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| NumericsError::CorruptCheckpoint(format!("manifest: {e}")))?;
        let ck = Self {
            entries: manifest.entries,
            blob: bytes[4 + len..].to_vec(),
            config_snapshot: manifest.config,
            meta: manifest.meta,
        };
        ck.validate()?;
        Ok(ck)
    }
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), NumericsError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&ck.to_bytes())?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, NumericsError> {
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes)
}

pub fn save_checkpoint(params: &ParamStore, config: serde_json::Value, path: &Path) -> Result<(), NumericsError> {
    write_checkpoint(&Checkpoint::from_params(params, config), path)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore, NumericsError> {
    read_checkpoint(path)?.to_params()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_params() -> ParamStore {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut p = ParamStore::new();
        p.normal("lm.w", vec![3, 5], 1.0, &mut rng);
        p.normal("detector.b", vec![7], 0.3, &mut rng);
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let p = random_params();
        save_checkpoint(&p, serde_json::json!({"seed": 3}), &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        for ((_, n1, a), (_, n2, b)) in p.iter().zip(q.iter()) {
            assert_eq!(n1, n2);
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        let bytes = fs::read(&path).unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let ck = Checkpoint::from_params(&random_params(), serde_json::Value::Null);
        let mut bytes = ck.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(NumericsError::CorruptCheckpoint(_))));
    }

    #[test]
    fn unknown_parameter_is_listed() {
        let mut ck = Checkpoint::from_params(&random_params(), serde_json::Value::Null);
        ck.push("lm.ghost", &[2], &[1.0, 2.0]);
        let mut store = random_params();
        let err = ck.load_into(&mut store).unwrap_err();
        assert!(err.to_string().contains("lm.ghost"), "{err}");
    }
}
