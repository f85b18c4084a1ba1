//! Write-once store of sparse KVs keyed by (timestep, block).
//!
//! The joint pass fills the cache and seals it; the intermediate pass only
//! reads. Reads before sealing, writes after sealing, duplicate writes and
//! misses are all hard errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{SparseKV, SPARSE_KV_LAYOUT_VERSION};
use crate::error::{CacheError, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "kv.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub timestep: u32,
    pub block: u32,
}

impl CacheKey {
    pub fn new(timestep: u32, block: u32) -> Self {
        Self { timestep, block }
    }
}

#[derive(Debug, Clone, Default)]
pub struct KVCache {
    entries: BTreeMap<CacheKey, SparseKV>,
    sealed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryStats {
    pub timestep: u32,
    pub block: u32,
    pub kv_tokens: usize,
    pub dim: usize,
    pub payload_bytes: usize,
    pub serialized_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub entries: usize,
    pub payload_bytes: usize,
    pub serialized_bytes: usize,
    pub per_entry: Vec<EntryStats>,
}

impl KVCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, key: CacheKey, sparse: SparseKV) -> Result<()> {
        if self.sealed {
            return Err(CacheError::Sealed.into());
        }
        if self.entries.contains_key(&key) {
            return Err(CacheError::DuplicateKey { timestep: key.timestep, block: key.block }.into());
        }
        self.entries.insert(key, sparse);
        Ok(())
    }

    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn get(&self, key: CacheKey) -> Result<&SparseKV> {
        if !self.sealed {
            return Err(CacheError::NotSealed.into());
        }
        self.entries
            .get(&key)
            .ok_or_else(|| CacheError::Miss { timestep: key.timestep, block: key.block }.into())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = CacheKey> + '_ {
        self.entries.keys().copied()
    }

    /// Entries in key order, regardless of seal state.
    pub fn iter(&self) -> impl Iterator<Item = (CacheKey, &SparseKV)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn stats(&self) -> CacheStats {
        let per_entry: Vec<EntryStats> = self
            .entries
            .iter()
            .map(|(k, kv)| EntryStats {
                timestep: k.timestep,
                block: k.block,
                kv_tokens: kv.len(),
                dim: kv.dim(),
                payload_bytes: kv.payload_bytes(),
                serialized_bytes: kv.serialized_len(),
            })
            .collect();
        CacheStats {
            entries: per_entry.len(),
            payload_bytes: per_entry.iter().map(|e| e.payload_bytes).sum(),
            serialized_bytes: per_entry.iter().map(|e| e.serialized_bytes).sum(),
            per_entry,
        }
    }

    /// Writes `manifest.json` and `kv.bin` into `dir`. Only sealed caches
    /// are saved.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if !self.sealed {
            return Err(CacheError::NotSealed.into());
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut records = Vec::with_capacity(self.entries.len());
        for (key, kv) in &self.entries {
            let bytes = kv.to_bytes();
            records.push(ManifestRecord {
                timestep: key.timestep,
                block: key.block,
                offset: blob.len() as u64,
                length: bytes.len() as u64,
                crc32: crc32fast::hash(&bytes),
            });
            blob.extend_from_slice(&bytes);
        }
        let manifest = Manifest {
            layout_version: SPARSE_KV_LAYOUT_VERSION,
            blob: BLOB_FILE.to_string(),
            blob_bytes: blob.len() as u64,
            entries: records,
        };
        let blob_path = dir.join(BLOB_FILE);
        fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
    }

    /// Loads a saved cache (sealed), verifying every record checksum.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let raw = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_slice(&raw)
            .map_err(|e| CacheError::Integrity(format!("manifest unreadable: {e}")))?;
        if manifest.layout_version != SPARSE_KV_LAYOUT_VERSION {
            return Err(CacheError::Version { found: manifest.layout_version, expected: SPARSE_KV_LAYOUT_VERSION }.into());
        }
        let blob_path = dir.join(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if blob.len() as u64 != manifest.blob_bytes {
            return Err(CacheError::Integrity(format!(
                "blob holds {} bytes, manifest says {}",
                blob.len(),
                manifest.blob_bytes
            ))
            .into());
        }
        let mut cache = KVCache::new();
        for rec in &manifest.entries {
            let end = rec.offset.checked_add(rec.length).filter(|&e| e <= blob.len() as u64).ok_or_else(|| {
                CacheError::Integrity(format!("record (t={}, block={}) exceeds blob", rec.timestep, rec.block))
            })?;
            let bytes = &blob[rec.offset as usize..end as usize];
            if crc32fast::hash(bytes) != rec.crc32 {
                return Err(CacheError::Integrity(format!(
                    "checksum mismatch for (t={}, block={})",
                    rec.timestep, rec.block
                ))
                .into());
            }
            let kv = SparseKV::from_bytes(bytes).map_err(|e| CacheError::Integrity(e.to_string()))?;
            cache
                .put(CacheKey::new(rec.timestep, rec.block), kv)
                .map_err(|e| CacheError::Integrity(e.to_string()))?;
        }
        cache.seal();
        Ok(cache)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestRecord {
    timestep: u32,
    block: u32,
    offset: u64,
    length: u64,
    crc32: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    layout_version: u32,
    blob: String,
    blob_bytes: u64,
    entries: Vec<ManifestRecord>,
}
