//! Rule-based simulated user.
//!
//! Turn 1 is a soft description: "I am looking for a <v> <category>", where
//! `v` is the target's most selective non-category attribute value. Each
//! later turn discloses one more attribute as `attr=value`, most selective
//! first. Selectivity is the number of catalog items sharing the value
//! (fewer is more selective; ties by attribute name).

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, ItemIdx};
use crate::trainer::derive_seed;

/// How many catalog items carry each `(attribute, value)` pair.
#[derive(Debug, Clone, Default)]
pub struct AttributeStats {
    counts: HashMap<(String, String), usize>,
}

impl AttributeStats {
    pub fn new(catalog: &Catalog) -> Self {
        let mut counts = HashMap::new();
        for item in catalog.items() {
            for (a, v) in &item.attributes {
                *counts.entry((a.clone(), v.clone())).or_insert(0) += 1;
            }
        }
        Self { counts }
    }

    pub fn count(&self, attribute: &str, value: &str) -> usize {
        self.counts
            .get(&(attribute.to_string(), value.to_string()))
            .copied()
            .unwrap_or(0)
    }

    /// Attributes of `attributes` ordered most selective first.
    pub fn by_selectivity<'a>(&self, attributes: &'a BTreeMap<String, String>) -> Vec<(&'a str, &'a str)> {
        let mut pairs: Vec<(&str, &str)> = attributes.iter().map(|(a, v)| (a.as_str(), v.as_str())).collect();
        pairs.sort_by_key(|(a, v)| (self.count(a, v), *a));
        pairs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorConfig {
    /// Probability that each utterance is built from a random other item
    /// instead of the target. 0 gives a truthful user.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self { noise: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedUser {
    pub user: String,
    pub target: ItemIdx,
    /// One utterance per turn; at least `max_turns` long.
    pub utterances: Vec<String>,
}

impl SimulatedUser {
    pub fn utterance(&self, turn: usize) -> &str {
        &self.utterances[turn.min(self.utterances.len() - 1)]
    }
}

/// Opening soft description for `item`, or `None` if it has no attributes.
pub fn first_utterance(catalog: &Catalog, stats: &AttributeStats, item: ItemIdx) -> Option<String> {
    let attrs = &catalog.item(item).attributes;
    let category = catalog.schema().category.as_deref();
    let ranked = stats.by_selectivity(attrs);
    let cat_value = category.and_then(|c| attrs.get(c)).map(String::as_str);
    let specific = ranked.iter().find(|(a, _)| Some(*a) != category).map(|(_, v)| *v);
    let words: Vec<&str> = match (specific, cat_value) {
        (Some(s), Some(c)) => vec![s, c],
        (Some(s), None) => {
            // no category: fall back to the two most selective values
            let mut w = vec![s];
            w.extend(ranked.iter().skip(1).take(1).map(|(_, v)| *v));
            w
        }
        (None, Some(c)) => vec![c],
        (None, None) => return None,
    };
    Some(format!("I am looking for a {}", words.join(" ")))
}

/// Disclosure plan for `target`; `None` when the item has no attributes.
pub fn simulate_user(
    catalog: &Catalog,
    stats: &AttributeStats,
    user: &str,
    target: ItemIdx,
    max_turns: usize,
    config: &SimulatorConfig,
) -> Option<SimulatedUser> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, fnv(user), target.0 as u64]));
    let mut source = || {
        if config.noise > 0.0 && rng.gen_bool(config.noise.clamp(0.0, 1.0)) {
            ItemIdx(rng.gen_range(0..catalog.len() as u32))
        } else {
            target
        }
    };
    let mut utterances = vec![first_utterance(catalog, stats, source())?];
    let disclosures: Vec<(String, String)> = stats
        .by_selectivity(&catalog.item(target).attributes)
        .into_iter()
        .map(|(a, v)| (a.to_string(), v.to_string()))
        .collect();
    for (a, v) in &disclosures {
        let from = source();
        let value = match catalog.item(from).attributes.get(a) {
            Some(other) if from != target => other.clone(),
            _ => v.clone(),
        };
        utterances.push(format!("{a}={value}"));
    }
    while utterances.len() < max_turns {
        let last = utterances.last().cloned().expect("non-empty");
        utterances.push(last);
    }
    Some(SimulatedUser {
        user: user.to_string(),
        target,
        utterances,
    })
}

/// Stable 64-bit hash of a user id for seeding.
fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
