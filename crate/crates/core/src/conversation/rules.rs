//! Hard constraints: the `attr OP value` mini-grammar and catalog filtering.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{CatalogSchema, Catalog, Item, ItemIdx};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintOp {
    Eq,
    Neq,
    Ge,
    Le,
    In,
}

impl ConstraintOp {
    pub fn symbol(self) -> &'static str {
        match self {
            ConstraintOp::Eq => "=",
            ConstraintOp::Neq => "!=",
            ConstraintOp::Ge => ">=",
            ConstraintOp::Le => "<=",
            ConstraintOp::In => "in",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text.trim().to_ascii_lowercase().as_str() {
            "=" | "==" | "eq" => Some(ConstraintOp::Eq),
            "!=" | "neq" => Some(ConstraintOp::Neq),
            ">=" | "ge" => Some(ConstraintOp::Ge),
            "<=" | "le" => Some(ConstraintOp::Le),
            "in" => Some(ConstraintOp::In),
            _ => None,
        }
    }
}

/// A validated constraint. Attribute names use the schema's spelling and
/// numeric values are already binned to their category edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardConstraint {
    pub attribute: String,
    pub op: ConstraintOp,
    /// A single string, or a list for `in`.
    #[serde(rename = "value", with = "constraint_value")]
    pub values: Vec<String>,
}

mod constraint_value {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(values: &[String], s: S) -> Result<S::Ok, S::Error> {
        match values {
            [one] => one.serialize(s),
            many => many.serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            One(String),
            Many(Vec<String>),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::One(s) => vec![s],
            Raw::Many(v) => v,
        })
    }
}

impl std::fmt::Display for HardConstraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.op {
            ConstraintOp::In => write!(f, "{} in[{}]", self.attribute, self.values.join(",")),
            op => write!(f, "{}{}{}", self.attribute, op.symbol(), self.values[0]),
        }
    }
}

impl HardConstraint {
    /// Validates against `schema`: the attribute must exist (matched
    /// case-insensitively), `>=`/`<=` need a numeric attribute, and numeric
    /// values are binned.
    pub fn new(
        schema: &CatalogSchema,
        attribute: &str,
        op: ConstraintOp,
        values: &[String],
    ) -> Result<Self, String> {
        let attribute = schema
            .resolve(attribute)
            .ok_or_else(|| format!("unknown attribute {:?}", attribute.trim()))?
            .to_string();
        let numeric = schema.is_numeric(&attribute);
        if matches!(op, ConstraintOp::Ge | ConstraintOp::Le) && !numeric {
            return Err(format!("{attribute} is categorical; {} needs a numeric attribute", op.symbol()));
        }
        let values: Vec<String> = values.iter().map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(format!("no value given for {attribute}"));
        }
        if op != ConstraintOp::In && values.len() != 1 {
            return Err(format!("{} takes exactly one value", op.symbol()));
        }
        let values = if numeric {
            values
                .iter()
                .map(|v| {
                    schema
                        .categorize(&attribute, &serde_json::Value::String(v.clone()))
                        .ok_or_else(|| format!("{attribute} expects a number, got {v:?}"))
                })
                .collect::<Result<_, _>>()?
        } else {
            values
        };
        Ok(Self {
            attribute,
            op,
            values,
        })
    }

    pub fn matches(&self, item: &Item) -> bool {
        let Some(have) = item.attributes.get(&self.attribute) else {
            return false;
        };
        let eq = |v: &String| v.eq_ignore_ascii_case(have);
        match self.op {
            ConstraintOp::Eq => eq(&self.values[0]),
            ConstraintOp::Neq => !eq(&self.values[0]),
            ConstraintOp::In => self.values.iter().any(eq),
            ConstraintOp::Ge | ConstraintOp::Le => {
                let (Ok(h), Ok(t)) = (have.parse::<f64>(), self.values[0].parse::<f64>()) else {
                    return false;
                };
                if self.op == ConstraintOp::Ge {
                    h >= t
                } else {
                    h <= t
                }
            }
        }
    }
}

/// Output of the structured grammar for one message.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub constraints: Vec<HardConstraint>,
    /// Attributes named in `drop attr` expressions.
    pub retractions: Vec<String>,
    /// Per-expression rejections; the rest of the message still applies.
    pub diagnostics: Vec<String>,
}

static EXPR: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^([A-Za-z_][\w\-]*)\s*(!=|>=|<=|=)\s*(.+)$").expect("valid regex")
});
static IN_EXPR: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^([A-Za-z_][\w\-]*)\s+in\s*\[(.*)\]$").expect("valid regex")
});
static DROP_EXPR: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^drop\s+([A-Za-z_][\w\-]*)$").expect("valid regex"));

/// Splits on `,` / `;` outside square brackets.
fn split_top_level(text: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in text.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => depth = (depth - 1).max(0),
            ',' | ';' if depth == 0 => {
                parts.push(&text[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&text[start..]);
    parts
}

/// Parses every structured expression in `message`. Segments that are not
/// expressions are soft description and yield nothing.
pub fn extract_rules(message: &str, schema: &CatalogSchema) -> Extraction {
    let mut out = Extraction::default();
    for segment in split_top_level(message) {
        let seg = segment.trim();
        if seg.is_empty() {
            continue;
        }
        if let Some(c) = DROP_EXPR.captures(seg) {
            match schema.resolve(&c[1]) {
                Some(attr) => out.retractions.push(attr.to_string()),
                None => out.diagnostics.push(format!("drop: unknown attribute {:?}", &c[1])),
            }
            continue;
        }
        let parsed = if let Some(c) = IN_EXPR.captures(seg) {
            let values: Vec<String> = c[2].split(',').map(str::to_string).collect();
            Some((c[1].to_string(), ConstraintOp::In, values))
        } else {
            EXPR.captures(seg).map(|c| {
                let op = ConstraintOp::parse(&c[2]).expect("regex only admits known operators");
                (c[1].to_string(), op, vec![c[3].to_string()])
            })
        };
        if let Some((attr, op, values)) = parsed {
            match HardConstraint::new(schema, &attr, op, &values) {
                Ok(hc) => out.constraints.push(hc),
                Err(e) => out.diagnostics.push(format!("{seg:?}: {e}")),
            }
        }
    }
    out
}

/// Items satisfying every constraint; items lacking a constrained attribute
/// are excluded.
pub fn filter_candidates(catalog: &Catalog, constraints: &[HardConstraint]) -> Vec<ItemIdx> {
    catalog
        .indices()
        .filter(|&i| {
            let item = catalog.item(i);
            constraints.iter().all(|c| c.matches(item))
        })
        .collect()
}
