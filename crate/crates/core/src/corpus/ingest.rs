use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;
use serde_json::Value;

use super::{AttributeKind, Catalog, CatalogSchema, CorpusError, Dataset, Item, UserSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InteractionFormat {
    Tsv,
    Jsonl,
}

impl FromStr for InteractionFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(Self::Tsv),
            "jsonl" | "json" => Ok(Self::Jsonl),
            other => Err(CorpusError::InvalidArgument(format!(
                "unknown interaction format `{other}`"
            ))),
        }
    }
}

impl InteractionFormat {
    /// Guesses the format from a file extension, defaulting to TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Self::Jsonl,
            _ => Self::Tsv,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub records: usize,
    /// Interactions whose item has no metadata record.
    pub dropped_interactions: usize,
    pub dropped_item_ids: BTreeSet<String>,
}

#[derive(Deserialize)]
struct ItemRecord {
    id: Value,
    #[serde(default)]
    title: String,
    #[serde(default)]
    attributes: BTreeMap<String, Value>,
}

#[derive(Deserialize)]
struct InteractionRecord {
    user: Value,
    item: Value,
    timestamp: i64,
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn id_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.trim().is_empty() => Some(s.trim().to_owned()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Reads JSON-lines item metadata `{id, title, attributes:{name:value}}`.
///
/// Without a declared schema every attribute seen is treated as categorical.
pub fn load_items(path: &Path, schema: Option<CatalogSchema>) -> Result<Catalog, CorpusError> {
    let text = read(path)?;
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| CorpusError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let rec: ItemRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let id = id_text(&rec.id).ok_or_else(|| parse_err("item id must be a string or number".into()))?;
        records.push((n + 1, id, rec));
    }
    if records.is_empty() {
        return Err(CorpusError::Empty(format!("{} has no items", path.display())));
    }

    let schema = schema.unwrap_or_else(|| CatalogSchema {
        attributes: records
            .iter()
            .flat_map(|(_, _, r)| r.attributes.keys().cloned())
            .map(|k| (k, AttributeKind::Categorical))
            .collect(),
        category: None,
    });

    let mut items = Vec::with_capacity(records.len());
    for (line, id, rec) in records {
        let mut attributes = BTreeMap::new();
        for (name, raw) in &rec.attributes {
            if raw.is_null() {
                continue;
            }
            if !schema.attributes.contains_key(name) {
                return Err(CorpusError::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("attribute `{name}` is not declared in the schema"),
                });
            }
            let value = schema.categorize(name, raw).ok_or_else(|| CorpusError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("attribute `{name}` has an unusable value {raw}"),
            })?;
            attributes.insert(name.clone(), value);
        }
        items.push(Item {
            id,
            title: rec.title,
            attributes,
        });
    }
    Catalog::new(schema, items)
}

/// Reads interactions and groups them into chronological per-user sequences.
/// Interactions on items missing from `catalog` are dropped and counted.
pub fn load_interactions(
    path: &Path,
    format: InteractionFormat,
    catalog: Catalog,
) -> Result<(Dataset, LoadReport), CorpusError> {
    let text = read(path)?;
    let mut report = LoadReport::default();
    // user -> (timestamp, file order, item)
    let mut by_user: BTreeMap<String, Vec<(i64, usize, super::ItemIdx)>> = BTreeMap::new();

    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| CorpusError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let (user, item, ts) = match format {
            InteractionFormat::Tsv => {
                let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
                if n == 0 && fields == ["user", "item", "timestamp"] {
                    continue;
                }
                if fields.len() != 3 || fields[0].is_empty() || fields[1].is_empty() {
                    return Err(parse_err(format!(
                        "expected `user<TAB>item<TAB>timestamp`, found {} field(s)",
                        fields.len()
                    )));
                }
                let ts = fields[2]
                    .parse::<i64>()
                    .map_err(|e| parse_err(format!("bad timestamp `{}`: {e}", fields[2])))?;
                (fields[0].to_owned(), fields[1].to_owned(), ts)
            }
            InteractionFormat::Jsonl => {
                let rec: InteractionRecord =
                    serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
                let user = id_text(&rec.user).ok_or_else(|| parse_err("bad user id".into()))?;
                let item = id_text(&rec.item).ok_or_else(|| parse_err("bad item id".into()))?;
                (user, item, rec.timestamp)
            }
        };
        report.records += 1;
        match catalog.lookup(&item) {
            Some(idx) => by_user.entry(user).or_default().push((ts, n, idx)),
            None => {
                report.dropped_interactions += 1;
                report.dropped_item_ids.insert(item);
            }
        }
    }
    if report.records == 0 {
        return Err(CorpusError::Empty(format!("{} has no interactions", path.display())));
    }
    if by_user.is_empty() {
        return Err(CorpusError::Empty(
            "no interaction refers to an item with metadata".into(),
        ));
    }

    let sequences = by_user
        .into_iter()
        .map(|(user, mut events)| {
            // stable: equal timestamps keep file order
            events.sort_by_key(|&(ts, _, _)| ts);
            UserSequence {
                user,
                items: events.iter().map(|e| e.2).collect(),
                timestamps: events.iter().map(|e| e.0).collect(),
            }
        })
        .collect();
    Ok((Dataset { catalog, sequences }, report))
}

/// Convenience wrapper: items first, then interactions.
pub fn load_dataset(
    interactions: &Path,
    format: InteractionFormat,
    items: &Path,
    schema: Option<CatalogSchema>,
) -> Result<(Dataset, LoadReport), CorpusError> {
    let catalog = load_items(items, schema)?;
    load_interactions(interactions, format, catalog)
}
