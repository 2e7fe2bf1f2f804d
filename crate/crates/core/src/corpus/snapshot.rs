//! Dataset snapshot: a single JSON document
//!
//! ```text
//! { "format": "latentcrs-dataset", "version": 1,
//!   "schema": {...}, "items": [{id, title, attributes}],
//!   "users": [{"user": str, "items": [item id], "timestamps": [int]}] }
//! ```
//!
//! Item references inside `users` are ids, not dense indices, so a snapshot
//! stays readable and stable across catalog re-ordering.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Catalog, CatalogSchema, CorpusError, Dataset, Item, UserSequence};

pub const SNAPSHOT_FORMAT: &str = "latentcrs-dataset";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SnapshotUser {
    user: String,
    items: Vec<String>,
    timestamps: Vec<i64>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format: String,
    version: u32,
    schema: CatalogSchema,
    items: Vec<Item>,
    users: Vec<SnapshotUser>,
}

pub fn save_snapshot(dataset: &Dataset, path: &Path) -> Result<(), CorpusError> {
    let snap = Snapshot {
        format: SNAPSHOT_FORMAT.into(),
        version: SNAPSHOT_VERSION,
        schema: dataset.catalog.schema().clone(),
        items: dataset.catalog.items().to_vec(),
        users: dataset
            .sequences
            .iter()
            .map(|s| SnapshotUser {
                user: s.user.clone(),
                items: dataset.item_ids(s).into_iter().map(str::to_owned).collect(),
                timestamps: s.timestamps.clone(),
            })
            .collect(),
    };
    let body = serde_json::to_vec_pretty(&snap)
        .map_err(|e| CorpusError::Snapshot(e.to_string()))?;
    fs::write(path, body).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_snapshot(path: &Path) -> Result<Dataset, CorpusError> {
    let body = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let snap: Snapshot =
        serde_json::from_slice(&body).map_err(|e| CorpusError::Snapshot(e.to_string()))?;
    if snap.format != SNAPSHOT_FORMAT {
        return Err(CorpusError::Snapshot(format!("unexpected format `{}`", snap.format)));
    }
    if snap.version != SNAPSHOT_VERSION {
        return Err(CorpusError::Snapshot(format!(
            "version {} is not supported (expected {SNAPSHOT_VERSION})",
            snap.version
        )));
    }
    let catalog = Catalog::new(snap.schema, snap.items)?;
    let mut sequences = Vec::with_capacity(snap.users.len());
    for u in snap.users {
        if u.items.len() != u.timestamps.len() {
            return Err(CorpusError::Snapshot(format!(
                "user `{}` has mismatched items/timestamps",
                u.user
            )));
        }
        let items = u
            .items
            .iter()
            .map(|id| {
                catalog.lookup(id).ok_or_else(|| {
                    CorpusError::Snapshot(format!("user `{}` references unknown item `{id}`", u.user))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        sequences.push(UserSequence {
            user: u.user,
            items,
            timestamps: u.timestamps,
        });
    }
    sequences.sort_by(|a, b| a.user.cmp(&b.user));
    Ok(Dataset { catalog, sequences })
}
