//! Append-only embedding cache.
//!
//! File layout: 4-byte magic `LCEC`, one version byte, then records of
//! `key: [u8; 32] | dim: u32 LE | dim x f64 LE`. The key is
//! `sha256(provider_id 0x00 template 0x00 text)`. A torn trailing record
//! (crash mid-write) is cut off when the file is reopened.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use sha2::{Digest, Sha256};

use super::EmbedError;

pub const CACHE_MAGIC: &[u8; 4] = b"LCEC";
pub const CACHE_VERSION: u8 = 1;

pub type CacheKey = [u8; 32];

pub struct EmbeddingCache {
    path: Option<PathBuf>,
    index: RwLock<HashMap<CacheKey, Vec<f64>>>,
    writer: Mutex<Option<File>>,
}

impl std::fmt::Debug for EmbeddingCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingCache")
            .field("path", &self.path)
            .field("entries", &self.len())
            .finish()
    }
}

fn io_err(path: &Path, e: std::io::Error) -> EmbedError {
    EmbedError::Cache(format!("{}: {e}", path.display()))
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            index: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    pub fn open(path: &Path) -> Result<Self, EmbedError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;

        let mut index = HashMap::new();
        if bytes.is_empty() {
            file.write_all(CACHE_MAGIC).map_err(|e| io_err(path, e))?;
            file.write_all(&[CACHE_VERSION]).map_err(|e| io_err(path, e))?;
        } else {
            if bytes.len() < 5 || &bytes[..4] != CACHE_MAGIC {
                return Err(EmbedError::Cache(format!(
                    "{} is not an embedding cache",
                    path.display()
                )));
            }
            if bytes[4] != CACHE_VERSION {
                return Err(EmbedError::Cache(format!(
                    "{}: unsupported cache version {}",
                    path.display(),
                    bytes[4]
                )));
            }
            let mut pos = 5;
            let mut valid_end = pos;
            while pos + 36 <= bytes.len() {
                let mut key = [0u8; 32];
                key.copy_from_slice(&bytes[pos..pos + 32]);
                let dim = u32::from_le_bytes(bytes[pos + 32..pos + 36].try_into().unwrap()) as usize;
                let end = pos + 36 + dim * 8;
                if end > bytes.len() {
                    break;
                }
                let vector = bytes[pos + 36..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                index.insert(key, vector);
                pos = end;
                valid_end = end;
            }
            if valid_end < bytes.len() {
                log::warn!(
                    "{}: dropping {} trailing byte(s) of a partial record",
                    path.display(),
                    bytes.len() - valid_end
                );
                file.set_len(valid_end as u64).map_err(|e| io_err(path, e))?;
                file.seek(SeekFrom::End(0)).map_err(|e| io_err(path, e))?;
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            index: RwLock::new(index),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn key(provider_id: &str, template: &str, text: &str) -> CacheKey {
        let mut h = Sha256::new();
        h.update(provider_id.as_bytes());
        h.update([0]);
        h.update(template.as_bytes());
        h.update([0]);
        h.update(text.as_bytes());
        h.finalize().into()
    }

    pub fn get(&self, key: &CacheKey) -> Option<Vec<f64>> {
        self.index.read().unwrap().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores `vector` under `key`; returns `false` if the key was present.
    pub fn insert(&self, key: CacheKey, vector: &[f64]) -> Result<bool, EmbedError> {
        let mut writer = self.writer.lock().unwrap();
        if self.index.read().unwrap().contains_key(&key) {
            return Ok(false);
        }
        if let (Some(file), Some(path)) = (writer.as_mut(), self.path.as_ref()) {
            let mut rec = Vec::with_capacity(36 + vector.len() * 8);
            rec.extend_from_slice(&key);
            rec.extend_from_slice(&(vector.len() as u32).to_le_bytes());
            for x in vector {
                rec.extend_from_slice(&x.to_le_bytes());
            }
            file.write_all(&rec).map_err(|e| io_err(path, e))?;
            file.flush().map_err(|e| io_err(path, e))?;
        }
        self.index.write().unwrap().insert(key, vector.to_vec());
        Ok(true)
    }
}
