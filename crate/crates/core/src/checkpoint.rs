//! Versioned binary checkpoints: `LCRS` magic, format version, payload kind,
//! then a CBOR body.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 4] = b"LCRS";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Encoder = 1,
    Intents = 2,
    Bundle = 3,
}

impl Kind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(Kind::Encoder),
            2 => Some(Kind::Intents),
            3 => Some(Kind::Bundle),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u8),
    #[error("expected a {expected:?} checkpoint, found {found}")]
    WrongKind { expected: Kind, found: String },
    #[error("checkpoint encoding: {0}")]
    Codec(String),
}

pub fn to_bytes<T: Serialize>(kind: Kind, value: &T) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::with_capacity(1 << 12);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(kind as u8);
    ciborium::into_writer(value, &mut out).map_err(|e| CheckpointError::Codec(e.to_string()))?;
    Ok(out)
}

pub fn from_bytes<T: DeserializeOwned>(kind: Kind, bytes: &[u8]) -> Result<T, CheckpointError> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes[4] != VERSION {
        return Err(CheckpointError::Version(bytes[4]));
    }
    if bytes[5] != kind as u8 {
        return Err(CheckpointError::WrongKind {
            expected: kind,
            found: Kind::from_byte(bytes[5])
                .map(|k| format!("{k:?}"))
                .unwrap_or_else(|| format!("unknown ({})", bytes[5])),
        });
    }
    ciborium::from_reader(&bytes[6..]).map_err(|e| CheckpointError::Codec(e.to_string()))
}

pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes atomically (temp file + rename) and returns the content fingerprint.
pub fn save<T: Serialize>(path: &Path, kind: Kind, value: &T) -> Result<String, CheckpointError> {
    let bytes = to_bytes(kind, value)?;
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)?;
    Ok(fingerprint(&bytes))
}

/// Loads a checkpoint and its content fingerprint.
pub fn load<T: DeserializeOwned>(path: &Path, kind: Kind) -> Result<(T, String), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let value = from_bytes(kind, &bytes)?;
    Ok((value, fingerprint(&bytes)))
}
