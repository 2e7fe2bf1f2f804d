//! Pluggable remote rule extractor and reranker sharing one JSON-over-HTTP
//! client.

use serde::{Deserialize, Serialize};

use super::rules::{ConstraintOp, HardConstraint};
use crate::corpus::{CatalogSchema, Item};
use crate::remote::{JsonClient, RemoteError};

/// Free-form constraint extraction for text the grammar does not cover.
pub trait ConstraintExtractor: Send + Sync {
    fn extract(
        &self,
        history: &[String],
        message: &str,
        schema: &CatalogSchema,
    ) -> Result<RemoteExtraction, RemoteError>;
}

/// Reorders a shortlist; returns item ids best first.
pub trait Reranker: Send + Sync {
    fn rerank(&self, intent_text: &str, items: &[&Item]) -> Result<Vec<String>, RemoteError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawConstraint {
    pub attribute: String,
    pub op: String,
    pub value: serde_json::Value,
}

impl RawConstraint {
    pub fn validate(&self, schema: &CatalogSchema) -> Result<HardConstraint, String> {
        let op = ConstraintOp::parse(&self.op).ok_or_else(|| format!("unknown operator {:?}", self.op))?;
        let scalar = |v: &serde_json::Value| match v {
            serde_json::Value::String(s) => Some(s.clone()),
            serde_json::Value::Number(n) => Some(n.to_string()),
            serde_json::Value::Bool(b) => Some(b.to_string()),
            _ => None,
        };
        let values: Vec<String> = match &self.value {
            serde_json::Value::Array(vs) => vs.iter().filter_map(scalar).collect(),
            v => scalar(v).into_iter().collect(),
        };
        HardConstraint::new(schema, &self.attribute, op, &values)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RemoteExtraction {
    pub constraints: Vec<RawConstraint>,
    #[serde(default)]
    pub intent_text: String,
}

#[derive(Serialize)]
struct ExtractRequest<'a> {
    history: &'a [String],
    message: &'a str,
    schema: &'a CatalogSchema,
}

#[derive(Debug, Clone)]
pub struct RemoteExtractor {
    client: JsonClient,
}

impl RemoteExtractor {
    pub fn new(client: JsonClient) -> Self {
        Self { client }
    }
}

impl ConstraintExtractor for RemoteExtractor {
    fn extract(
        &self,
        history: &[String],
        message: &str,
        schema: &CatalogSchema,
    ) -> Result<RemoteExtraction, RemoteError> {
        self.client.post(&ExtractRequest {
            history,
            message,
            schema,
        })
    }
}

#[derive(Serialize)]
struct RerankRequest<'a> {
    intent_text: &'a str,
    items: &'a [&'a Item],
}

#[derive(Deserialize)]
struct RerankResponse {
    order: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RemoteReranker {
    client: JsonClient,
}

impl RemoteReranker {
    pub fn new(client: JsonClient) -> Self {
        Self { client }
    }
}

impl Reranker for RemoteReranker {
    fn rerank(&self, intent_text: &str, items: &[&Item]) -> Result<Vec<String>, RemoteError> {
        let resp: RerankResponse = self.client.post(&RerankRequest { intent_text, items })?;
        Ok(resp.order)
    }
}
