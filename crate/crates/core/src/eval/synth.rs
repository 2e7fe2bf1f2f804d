//! Synthetic corpus with planted intent blocks.
//!
//! Items are partitioned into equal blocks whose `genre` names the block.
//! Each user belongs to one block and draws most interactions from it, with
//! Zipf-distributed popularity inside the block so that within-intent order
//! is learnable.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AttributeKind, Catalog, CatalogSchema, CorpusError, Dataset, Item, ItemIdx, UserSequence};

pub const BLOCK_NAMES: [&str; 8] = ["action", "comedy", "drama", "horror", "romance", "scifi", "western", "musical"];
const LANGUAGES: [&str; 5] = ["en", "fr", "de", "es", "ja"];
const YEAR_EDGES: [f64; 6] = [1960.0, 1970.0, 1980.0, 1990.0, 2000.0, 2010.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub blocks: usize,
    pub items_per_block: usize,
    pub users: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that an interaction stays inside the user's block.
    pub in_block: f64,
    /// Zipf exponent of within-block popularity.
    pub zipf: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            items_per_block: 20,
            users: 200,
            min_len: 8,
            max_len: 14,
            in_block: 0.9,
            zipf: 1.0,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedCorpus {
    pub dataset: Dataset,
    /// Block of each user, aligned with `dataset.sequences`.
    pub user_blocks: Vec<usize>,
    /// Block of each item, by item index.
    pub item_blocks: Vec<usize>,
}

pub fn planted_schema() -> CatalogSchema {
    let mut attributes = BTreeMap::new();
    attributes.insert("genre".to_string(), AttributeKind::Categorical);
    attributes.insert("language".to_string(), AttributeKind::Categorical);
    attributes.insert("year".to_string(), AttributeKind::Numeric { edges: YEAR_EDGES.to_vec() });
    CatalogSchema {
        attributes,
        category: Some("genre".into()),
    }
}

pub fn generate(config: &SynthConfig) -> Result<PlantedCorpus, CorpusError> {
    if config.blocks == 0 || config.blocks > BLOCK_NAMES.len() {
        return Err(CorpusError::InvalidArgument(format!(
            "blocks must be in 1..={}",
            BLOCK_NAMES.len()
        )));
    }
    if config.items_per_block < 2 || config.users == 0 || config.min_len < 3 || config.max_len < config.min_len {
        return Err(CorpusError::InvalidArgument("degenerate synthetic corpus size".into()));
    }
    if !(0.0..=1.0).contains(&config.in_block) {
        return Err(CorpusError::InvalidArgument("in_block must be a probability".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let schema = planted_schema();
    let n_items = config.blocks * config.items_per_block;
    let id_width = (n_items - 1).to_string().len();
    let mut items = Vec::with_capacity(n_items);
    let mut item_blocks = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let block = i / config.items_per_block;
        let year = rng.gen_range(1960..2020);
        let lang = LANGUAGES[rng.gen_range(0..LANGUAGES.len())];
        let raw = [
            ("genre", serde_json::json!(BLOCK_NAMES[block])),
            ("language", serde_json::json!(lang)),
            ("year", serde_json::json!(year)),
        ];
        let attributes = raw
            .iter()
            .map(|(a, v)| (a.to_string(), schema.categorize(a, v).expect("valid synthetic value")))
            .collect();
        items.push(Item {
            id: format!("i{i:0id_width$}"),
            title: format!("{} title {}", capitalise(BLOCK_NAMES[block]), i % config.items_per_block + 1),
            attributes,
        });
        item_blocks.push(block);
    }
    let catalog = Catalog::new(schema, items)?;

    // popularity order inside each block is a random permutation
    let zipf = WeightedIndex::new((0..config.items_per_block).map(|r| 1.0 / ((r + 1) as f64).powf(config.zipf)))
        .expect("positive weights");
    let popularity: Vec<Vec<usize>> = (0..config.blocks)
        .map(|b| {
            let mut members: Vec<usize> = (b * config.items_per_block..(b + 1) * config.items_per_block).collect();
            members.shuffle(&mut rng);
            members
        })
        .collect();

    let user_width = (config.users - 1).to_string().len();
    let mut sequences = Vec::with_capacity(config.users);
    let mut user_blocks = Vec::with_capacity(config.users);
    for u in 0..config.users {
        let block = u % config.blocks;
        let len = rng.gen_range(config.min_len..=config.max_len);
        let mut seq: Vec<ItemIdx> = Vec::with_capacity(len);
        while seq.len() < len {
            let item = if config.blocks == 1 || rng.gen_bool(config.in_block) {
                popularity[block][zipf.sample(&mut rng)]
            } else {
                let mut other = rng.gen_range(0..config.blocks - 1);
                if other >= block {
                    other += 1;
                }
                other * config.items_per_block + rng.gen_range(0..config.items_per_block)
            };
            let idx = ItemIdx(item as u32);
            if seq.last() != Some(&idx) {
                seq.push(idx);
            }
        }
        sequences.push(UserSequence {
            user: format!("u{u:0user_width$}"),
            timestamps: (0..seq.len() as i64).collect(),
            items: seq,
        });
        user_blocks.push(block);
    }
    Ok(PlantedCorpus {
        dataset: Dataset { catalog, sequences },
        user_blocks,
        item_blocks,
    })
}

fn capitalise(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

/// Writes `items.jsonl`, `interactions.tsv` and `schema.json` into `dir`.
pub fn write_corpus(corpus: &PlantedCorpus, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let catalog = &corpus.dataset.catalog;
    let mut items = String::new();
    for item in catalog.items() {
        items.push_str(&serde_json::to_string(item).expect("item serialises"));
        items.push('\n');
    }
    std::fs::write(dir.join("items.jsonl"), items)?;
    let mut inter = String::from("user\titem\ttimestamp\n");
    for s in &corpus.dataset.sequences {
        for (i, t) in s.items.iter().zip(&s.timestamps) {
            writeln!(inter, "{}\t{}\t{}", s.user, catalog.item(*i).id, t).expect("string write");
        }
    }
    std::fs::write(dir.join("interactions.tsv"), inter)?;
    let schema = serde_json::to_string_pretty(catalog.schema()).expect("schema serialises");
    std::fs::write(dir.join("schema.json"), schema + "\n")
}
