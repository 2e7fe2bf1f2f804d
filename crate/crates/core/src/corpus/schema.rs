use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// How an attribute's raw values are turned into categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttributeKind {
    Categorical,
    /// Numeric values are binned to the largest edge not above the value
    /// (values below the first edge fall into the first bin). The stored
    /// category is the edge rendered as text, which keeps `>=`/`<=`
    /// comparisons meaningful.
    Numeric { edges: Vec<f64> },
}

/// Declared attribute set of a catalog.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CatalogSchema {
    pub attributes: BTreeMap<String, AttributeKind>,
    /// Attribute naming the item's broad category ("genre", "type", ...).
    /// Used by the simulator's opening utterance.
    #[serde(default)]
    pub category: Option<String>,
}

impl CatalogSchema {
    pub fn kind(&self, attribute: &str) -> Option<&AttributeKind> {
        self.attributes.get(attribute)
    }

    /// Case-insensitive attribute lookup returning the declared spelling.
    pub fn resolve(&self, attribute: &str) -> Option<&str> {
        let wanted = attribute.trim();
        self.attributes
            .keys()
            .find(|k| k.eq_ignore_ascii_case(wanted))
            .map(String::as_str)
    }

    pub fn is_numeric(&self, attribute: &str) -> bool {
        matches!(self.kind(attribute), Some(AttributeKind::Numeric { .. }))
    }

    /// Converts a raw metadata value into its stored category.
    pub fn categorize(&self, attribute: &str, raw: &serde_json::Value) -> Option<String> {
        let text = match raw {
            serde_json::Value::String(s) => s.trim().to_owned(),
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::Bool(b) => b.to_string(),
            _ => return None,
        };
        match self.kind(attribute) {
            Some(AttributeKind::Numeric { edges }) => {
                let x: f64 = text.parse().ok()?;
                Some(format_edge(bin_edge(edges, x)))
            }
            _ => Some(text),
        }
    }
}

fn bin_edge(edges: &[f64], x: f64) -> f64 {
    match edges.iter().rposition(|&e| e <= x) {
        Some(i) => edges[i],
        None => edges.first().copied().unwrap_or(x),
    }
}

pub(crate) fn format_edge(e: f64) -> String {
    if e.fract() == 0.0 && e.abs() < 1e15 {
        format!("{}", e as i64)
    } else {
        format!("{e}")
    }
}
