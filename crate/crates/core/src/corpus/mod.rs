//! Interaction data: catalog, chronological user sequences, preprocessing
//! (k-core filtering, leave-last-out split, prefix augmentation) and snapshots.

mod ingest;
mod preprocess;
mod schema;
mod snapshot;

pub use ingest::{load_dataset, load_interactions, load_items, InteractionFormat, LoadReport};
pub use preprocess::{
    apply_k_core, augment_sequences, leave_last_out_split, sample_users, Split, SplitUser,
    TrainSequence,
};
pub use schema::{AttributeKind, CatalogSchema};
pub use snapshot::{load_snapshot, save_snapshot, SNAPSHOT_FORMAT, SNAPSHOT_VERSION};

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("dataset is empty: {0}")]
    Empty(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported snapshot: {0}")]
    Snapshot(String),
}

/// Dense index of an item inside its [`Catalog`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemIdx(pub u32);

impl ItemIdx {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub title: String,
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    schema: CatalogSchema,
    items: Vec<Item>,
    index: HashMap<String, ItemIdx>,
}

impl Catalog {
    pub fn new(schema: CatalogSchema, items: Vec<Item>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if index.insert(item.id.clone(), ItemIdx(i as u32)).is_some() {
                return Err(CorpusError::InvalidArgument(format!(
                    "duplicate item id `{}`",
                    item.id
                )));
            }
            if let Some(name) = item
                .attributes
                .keys()
                .find(|a| !schema.attributes.contains_key(*a))
            {
                return Err(CorpusError::InvalidArgument(format!(
                    "item `{}` uses undeclared attribute `{name}`",
                    item.id
                )));
            }
        }
        Ok(Self {
            schema,
            items,
            index,
        })
    }

    pub fn schema(&self) -> &CatalogSchema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, idx: ItemIdx) -> &Item {
        &self.items[idx.index()]
    }

    pub fn lookup(&self, id: &str) -> Option<ItemIdx> {
        self.index.get(id).copied()
    }

    pub fn indices(&self) -> impl Iterator<Item = ItemIdx> {
        (0..self.items.len() as u32).map(ItemIdx)
    }

    /// Keeps only items whose flag is set; returns the new catalog and an
    /// old-index → new-index map.
    fn retain(&self, keep: &[bool]) -> (Catalog, Vec<Option<ItemIdx>>) {
        let mut remap = vec![None; self.items.len()];
        let mut items = Vec::new();
        for (i, item) in self.items.iter().enumerate() {
            if keep[i] {
                remap[i] = Some(ItemIdx(items.len() as u32));
                items.push(item.clone());
            }
        }
        let catalog = Catalog::new(self.schema.clone(), items)
            .expect("subset of a valid catalog is valid");
        (catalog, remap)
    }
}

/// One user's interactions, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: String,
    pub items: Vec<ItemIdx>,
    pub timestamps: Vec<i64>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Catalog plus per-user chronological sequences, ordered by user id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub catalog: Catalog,
    pub sequences: Vec<UserSequence>,
}

impl Dataset {
    pub fn num_actions(&self) -> usize {
        self.sequences.iter().map(UserSequence::len).sum()
    }

    pub fn sequence_of(&self, user: &str) -> Option<&UserSequence> {
        self.sequences
            .binary_search_by(|s| s.user.as_str().cmp(user))
            .ok()
            .map(|i| &self.sequences[i])
    }

    /// Item ids of a user's sequence, for display and tests.
    pub fn item_ids(&self, seq: &UserSequence) -> Vec<&str> {
        seq.items
            .iter()
            .map(|&i| self.catalog.item(i).id.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_users: usize,
    pub num_items: usize,
    pub num_actions: usize,
    pub avg_seq_len: f64,
    pub sparsity: f64,
}

/// Counts users, distinct interacted items and actions.
pub fn dataset_stats(dataset: &Dataset) -> Result<DatasetStats, CorpusError> {
    let num_users = dataset.sequences.len();
    let num_actions = dataset.num_actions();
    if num_users == 0 || num_actions == 0 {
        return Err(CorpusError::Empty("no interactions".into()));
    }
    let mut seen = vec![false; dataset.catalog.len()];
    for s in &dataset.sequences {
        for i in &s.items {
            seen[i.index()] = true;
        }
    }
    let num_items = seen.iter().filter(|&&b| b).count();
    Ok(DatasetStats {
        num_users,
        num_items,
        num_actions,
        avg_seq_len: num_actions as f64 / num_users as f64,
        sparsity: 1.0 - num_actions as f64 / (num_users as f64 * num_items as f64),
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn schema(attrs: &[&str]) -> CatalogSchema {
        CatalogSchema {
            attributes: attrs
                .iter()
                .map(|a| (a.to_string(), AttributeKind::Categorical))
                .collect(),
            category: None,
        }
    }

    pub fn catalog(ids: &[&str]) -> Catalog {
        let items = ids
            .iter()
            .map(|id| Item {
                id: id.to_string(),
                title: format!("Title {id}"),
                attributes: BTreeMap::new(),
            })
            .collect();
        Catalog::new(schema(&[]), items).unwrap()
    }

    /// Builds a dataset from `(user, [item ids])`, timestamps = positions.
    pub fn dataset(ids: &[&str], users: &[(&str, &[&str])]) -> Dataset {
        let catalog = catalog(ids);
        let mut sequences: Vec<UserSequence> = users
            .iter()
            .map(|(u, items)| UserSequence {
                user: u.to_string(),
                items: items.iter().map(|i| catalog.lookup(i).unwrap()).collect(),
                timestamps: (0..items.len() as i64).collect(),
            })
            .collect();
        sequences.sort_by(|a, b| a.user.cmp(&b.user));
        Dataset { catalog, sequences }
    }
}
