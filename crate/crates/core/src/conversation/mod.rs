//! Multi-turn session engine.
//!
//! Each user message is appended to the session's accumulated intent text,
//! optionally parsed for hard constraints, and answered with a ranked list.
//! Variant B ranks the whole catalog, F filters by constraints first, and V
//! additionally passes a shortlist through an external reranker.

mod plugins;
mod rules;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use plugins::{
    ConstraintExtractor, RawConstraint, RemoteExtraction, RemoteExtractor, RemoteReranker, Reranker,
};
pub use rules::{extract_rules, filter_candidates, ConstraintOp, Extraction, HardConstraint};

use crate::corpus::{Catalog, ItemIdx};
use crate::encoder::{BehaviorEncoder, SequenceEncoder};
use crate::model::{sort_ranked, LatentCrs, RankMode, ScoredItem};
use crate::text_embed::TextEmbedder;

pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_MAX_TURNS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum ConversationError {
    #[error("message is empty")]
    EmptyMessage,
    #[error("session exhausted after {0} turns")]
    Exhausted(usize),
    #[error("session is closed")]
    Closed,
    #[error("ranking failed: {0}")]
    Rank(String),
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    B,
    F,
    V,
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "B" | "b" => Ok(Variant::B),
            "F" | "f" => Ok(Variant::F),
            "V" | "v" => Ok(Variant::V),
            other => Err(format!("unknown variant {other:?} (expected B, F or V)")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::B => "B",
            Variant::F => "F",
            Variant::V => "V",
        })
    }
}

/// Inputs a ranker sees for one turn.
#[derive(Debug, Clone, Copy)]
pub struct RankRequest<'a> {
    pub intent_text: &'a str,
    pub behavior: Option<&'a [ItemIdx]>,
}

/// Orders candidate items; results are sorted best first with at most `top_k` entries.
pub trait Ranker: Send + Sync {
    fn rank(
        &self,
        request: &RankRequest<'_>,
        candidates: &[ItemIdx],
        top_k: usize,
    ) -> Result<Vec<ScoredItem>, ConversationError>;
}

/// Ranks with the trained latent-intent model.
pub struct LatentRanker {
    pub encoder: Arc<BehaviorEncoder>,
    pub model: Arc<LatentCrs>,
    pub embedder: TextEmbedder,
    pub mode: RankMode,
    /// Behaviour embedding used when a session has no history.
    pub default_s: Vec<f64>,
}

impl Ranker for LatentRanker {
    fn rank(
        &self,
        request: &RankRequest<'_>,
        candidates: &[ItemIdx],
        top_k: usize,
    ) -> Result<Vec<ScoredItem>, ConversationError> {
        let err = |e: &dyn std::fmt::Display| ConversationError::Rank(e.to_string());
        let s = match request.behavior {
            Some(seq) if !seq.is_empty() => self.encoder.encode_sequence(seq).map_err(|e| err(&e))?,
            _ => self.default_s.clone(),
        };
        let x = self.embedder.embed(request.intent_text).map_err(|e| err(&e))?.vector;
        self.model
            .rank_items(
                &s,
                &x,
                self.encoder.item_table(),
                &self.encoder.item_ids,
                candidates,
                self.mode,
                top_k,
            )
            .map_err(|e| err(&e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendedItem {
    pub id: String,
    pub title: String,
    pub score: f64,
    pub attributes: std::collections::BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemTurn {
    pub turn: usize,
    pub items: Vec<RecommendedItem>,
    /// Active constraints after this turn.
    pub constraints: Vec<HardConstraint>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub user: String,
    pub response: SystemTurn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub variant: Variant,
    pub history: Vec<TurnRecord>,
    /// All user messages joined by single spaces.
    pub intent_text: String,
    pub constraints: Vec<HardConstraint>,
    pub behavior: Option<Vec<ItemIdx>>,
    pub closed: bool,
}

impl Session {
    pub fn new(id: impl Into<String>, variant: Variant, behavior: Option<Vec<ItemIdx>>) -> Self {
        Self {
            id: id.into(),
            variant,
            history: Vec::new(),
            intent_text: String::new(),
            constraints: Vec::new(),
            behavior,
            closed: false,
        }
    }

    pub fn turns(&self) -> usize {
        self.history.len()
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn user_messages(&self) -> Vec<String> {
        self.history.iter().map(|t| t.user.clone()).collect()
    }

    /// Appends `message` to the accumulated intent text.
    pub fn accumulate_intent(&mut self, message: &str) -> Result<(), ConversationError> {
        if self.closed {
            return Err(ConversationError::Closed);
        }
        if !self.intent_text.is_empty() {
            self.intent_text.push(' ');
        }
        self.intent_text.push_str(message);
        Ok(())
    }
}

/// Session logic over a shared catalog and ranker.
#[derive(Clone)]
pub struct Engine {
    pub catalog: Arc<Catalog>,
    ranker: Arc<dyn Ranker>,
    extractor: Option<Arc<dyn ConstraintExtractor>>,
    reranker: Option<Arc<dyn Reranker>>,
    pub top_k: usize,
    pub max_turns: usize,
}

impl Engine {
    pub fn new(catalog: Arc<Catalog>, ranker: Arc<dyn Ranker>) -> Self {
        Self {
            catalog,
            ranker,
            extractor: None,
            reranker: None,
            top_k: DEFAULT_TOP_K,
            max_turns: DEFAULT_MAX_TURNS,
        }
    }

    pub fn with_extractor(mut self, extractor: Arc<dyn ConstraintExtractor>) -> Self {
        self.extractor = Some(extractor);
        self
    }

    pub fn with_reranker(mut self, reranker: Arc<dyn Reranker>) -> Self {
        self.reranker = Some(reranker);
        self
    }

    pub fn with_limits(mut self, top_k: usize, max_turns: usize) -> Self {
        self.top_k = top_k;
        self.max_turns = max_turns;
        self
    }

    fn update_constraints(&self, session: &mut Session, message: &str, notes: &mut Vec<String>) {
        let schema = self.catalog.schema();
        let parsed = extract_rules(message, schema);
        for attr in &parsed.retractions {
            let before = session.constraints.len();
            session.constraints.retain(|c| &c.attribute != attr);
            if session.constraints.len() < before {
                notes.push(format!("dropped constraints on {attr}"));
            }
        }
        let mut incoming = parsed.constraints;
        if let Some(extractor) = &self.extractor {
            match extractor.extract(&session.user_messages(), message, schema) {
                Ok(remote) => {
                    for raw in &remote.constraints {
                        match raw.validate(schema) {
                            Ok(c) => incoming.push(c),
                            Err(e) => notes.push(format!("ignored extracted constraint: {e}")),
                        }
                    }
                }
                Err(e) => {
                    log::warn!("remote extractor failed: {e}");
                    notes.push("remote extractor unavailable".into());
                }
            }
        }
        for c in incoming {
            if !session.constraints.contains(&c) {
                session.constraints.push(c);
            }
        }
        for d in parsed.diagnostics {
            notes.push(format!("ignored {d}"));
        }
    }

    fn rerank(&self, intent_text: &str, shortlist: Vec<ScoredItem>, notes: &mut Vec<String>) -> Vec<ScoredItem> {
        let Some(reranker) = &self.reranker else {
            return shortlist;
        };
        let items: Vec<_> = shortlist.iter().map(|s| self.catalog.item(s.item)).collect();
        match reranker.rerank(intent_text, &items) {
            Ok(order) => {
                let mut out = Vec::with_capacity(shortlist.len());
                for id in &order {
                    if let Some(s) = shortlist.iter().find(|s| &self.catalog.item(s.item).id == id) {
                        if !out.iter().any(|o: &ScoredItem| o.item == s.item) {
                            out.push(*s);
                        }
                    }
                }
                for s in &shortlist {
                    if !out.iter().any(|o| o.item == s.item) {
                        out.push(*s);
                    }
                }
                out
            }
            Err(e) => {
                log::warn!("reranker failed: {e}");
                notes.push("reranker unavailable; showing filtered order".into());
                shortlist
            }
        }
    }

    /// Handles one user message and records the turn.
    pub fn respond(&self, session: &mut Session, message: &str) -> Result<SystemTurn, ConversationError> {
        if session.closed {
            return Err(ConversationError::Closed);
        }
        if session.turns() >= self.max_turns {
            return Err(ConversationError::Exhausted(self.max_turns));
        }
        let message = message.trim();
        if message.is_empty() {
            return Err(ConversationError::EmptyMessage);
        }
        session.accumulate_intent(message)?;
        let mut notes = Vec::new();
        let mut candidates: Vec<ItemIdx> = self.catalog.indices().collect();
        if session.variant != Variant::B {
            self.update_constraints(session, message, &mut notes);
            candidates = filter_candidates(&self.catalog, &session.constraints);
            if candidates.is_empty() {
                if let Some(dropped) = session.constraints.pop() {
                    notes.push(format!("no items satisfy every constraint; relaxed {dropped}"));
                    candidates = filter_candidates(&self.catalog, &session.constraints);
                }
            }
        }
        let items = if candidates.is_empty() {
            notes.push("no items match the active constraints".into());
            Vec::new()
        } else {
            let shortlist_len = match session.variant {
                Variant::V => 2 * self.top_k,
                _ => self.top_k,
            };
            let request = RankRequest {
                intent_text: &session.intent_text,
                behavior: session.behavior.as_deref(),
            };
            let mut ranked = self.ranker.rank(&request, &candidates, shortlist_len)?;
            if session.variant == Variant::V {
                ranked = self.rerank(&session.intent_text, ranked, &mut notes);
            }
            ranked.truncate(self.top_k);
            notes.insert(0, format!("{} candidate item(s)", candidates.len()));
            ranked
        };
        let turn = SystemTurn {
            turn: session.turns() + 1,
            items: items
                .iter()
                .map(|s| {
                    let item = self.catalog.item(s.item);
                    RecommendedItem {
                        id: item.id.clone(),
                        title: item.title.clone(),
                        score: s.score,
                        attributes: item.attributes.clone(),
                    }
                })
                .collect(),
            constraints: session.constraints.clone(),
            note: notes.join("; "),
        };
        session.history.push(TurnRecord {
            user: message.to_string(),
            response: turn.clone(),
        });
        Ok(turn)
    }
}

/// Ranks by a fixed per-item score table; useful as a reference ranker.
#[derive(Debug, Clone)]
pub struct StaticRanker {
    pub scores: Vec<f64>,
    pub item_ids: Vec<String>,
}

impl Ranker for StaticRanker {
    fn rank(
        &self,
        _request: &RankRequest<'_>,
        candidates: &[ItemIdx],
        top_k: usize,
    ) -> Result<Vec<ScoredItem>, ConversationError> {
        let mut scored: Vec<ScoredItem> = candidates
            .iter()
            .map(|&item| ScoredItem {
                item,
                score: self.scores[item.index()],
            })
            .collect();
        sort_ranked(&mut scored, &self.item_ids);
        scored.truncate(top_k);
        Ok(scored)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AttributeKind, CatalogSchema, Item};
    use crate::encoder::EncoderConfig;
    use crate::model::ModelConfig;
    use crate::nn::Matrix;
    use crate::remote::RemoteError;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn catalog() -> Arc<Catalog> {
        let mut attributes = BTreeMap::new();
        attributes.insert("genre".into(), AttributeKind::Categorical);
        attributes.insert("year".into(), AttributeKind::Numeric { edges: vec![1990.0, 2000.0, 2010.0] });
        let schema = CatalogSchema {
            attributes,
            category: Some("genre".into()),
        };
        let genres = ["Action", "Drama", "Action", "Comedy", "Drama", "Action"];
        let years = ["1990", "2000", "2010", "1990", "2010", "2000"];
        let items = (0..6)
            .map(|i| Item {
                id: format!("m{i}"),
                title: format!("Movie {i}"),
                attributes: [("genre", genres[i]), ("year", years[i])]
                    .iter()
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .collect(),
            })
            .collect();
        Arc::new(Catalog::new(schema, items).unwrap())
    }

    /// Hand-set latent model: every item row is random, everything else seeded.
    fn latent_engine() -> (Engine, Arc<LatentCrs>, Arc<BehaviorEncoder>, TextEmbedder) {
        let cat = catalog();
        let ids: Vec<String> = cat.items().iter().map(|i| i.id.clone()).collect();
        let enc_cfg = EncoderConfig {
            d_v: 4,
            d_u: 3,
            hidden: vec![],
            init_scale: 1.0,
            ..EncoderConfig::default()
        };
        let encoder = Arc::new(BehaviorEncoder::new(ids, &enc_cfg).unwrap());
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
        let cent = Matrix::uniform(2, 3, 1.0, &mut rng);
        let cfg = ModelConfig {
            d_a: 3,
            d_p: 3,
            d_c: 3,
            d_b: 3,
            hidden: vec![3],
            init_scale: 0.9,
            ..ModelConfig::default()
        };
        let embedder = TextEmbedder::local(16);
        let model = Arc::new(LatentCrs::new(3, 4, 16, cent, &cfg).unwrap());
        let ranker = LatentRanker {
            encoder: encoder.clone(),
            model: model.clone(),
            embedder: embedder.clone(),
            mode: RankMode::Full,
            default_s: vec![0.1, -0.2, 0.3],
        };
        (Engine::new(cat, Arc::new(ranker)), model, encoder, embedder)
    }

    #[test]
    fn intent_accumulates_verbatim() {
        let (engine, ..) = latent_engine();
        let mut s = Session::new("s", Variant::B, None);
        engine.respond(&mut s, "a").unwrap();
        assert_eq!(s.intent_text, "a");
        engine.respond(&mut s, "b").unwrap();
        assert_eq!(s.intent_text, "a b");
        engine.respond(&mut s, "a").unwrap();
        assert_eq!(s.intent_text, "a b a");
        assert_eq!(s.intent_text, s.user_messages().join(" "));
    }

    #[test]
    fn b_and_f_agree_without_constraints() {
        let (engine, ..) = latent_engine();
        let mut b = Session::new("b", Variant::B, None);
        let mut f = Session::new("f", Variant::F, None);
        let tb = engine.respond(&mut b, "an exciting film").unwrap();
        let tf = engine.respond(&mut f, "an exciting film").unwrap();
        assert_eq!(tb.items, tf.items);
    }

    #[test]
    fn filtered_order_matches_brute_force() {
        let (engine, model, encoder, embedder) = latent_engine();
        let mut s = Session::new("s", Variant::F, None);
        let turn = engine.respond(&mut s, "genre=Action").unwrap();
        assert!(turn.items.iter().all(|i| i.attributes["genre"] == "Action"));
        let x = embedder.embed("genre=Action").unwrap().vector;
        let s_vec = [0.1, -0.2, 0.3];
        let mut brute: Vec<(f64, String)> = [0usize, 2, 5]
            .iter()
            .map(|&i| {
                let h = model.mixture_h(encoder.item_table().row(i), &s_vec, &x).unwrap();
                (h, format!("m{i}"))
            })
            .collect();
        brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let got: Vec<&str> = turn.items.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(got, brute.iter().map(|b| b.1.as_str()).collect::<Vec<_>>());
        assert_eq!(turn.constraints.len(), 1);
    }

    #[test]
    fn contradiction_relaxes_newest_constraint() {
        let (engine, ..) = latent_engine();
        let mut s = Session::new("s", Variant::F, None);
        engine.respond(&mut s, "genre=Action").unwrap();
        let t = engine.respond(&mut s, "genre=Drama").unwrap();
        assert!(t.note.contains("relaxed genre=Drama"), "{}", t.note);
        assert!(t.items.iter().all(|i| i.attributes["genre"] == "Action"));
        let t = engine.respond(&mut s, "drop genre").unwrap();
        assert!(t.constraints.is_empty());
        assert_eq!(t.items.len(), 5);
    }

    #[test]
    fn turn_limit_and_errors() {
        let (engine, ..) = latent_engine();
        let mut s = Session::new("s", Variant::F, None);
        assert!(matches!(engine.respond(&mut s, "  "), Err(ConversationError::EmptyMessage)));
        for i in 0..5 {
            assert_eq!(engine.respond(&mut s, "more").unwrap().turn, i + 1);
        }
        assert!(matches!(engine.respond(&mut s, "more"), Err(ConversationError::Exhausted(5))));
        let mut c = Session::new("c", Variant::B, None);
        c.close();
        assert!(matches!(engine.respond(&mut c, "x"), Err(ConversationError::Closed)));
    }

    struct Reverse;
    impl Reranker for Reverse {
        fn rerank(&self, _: &str, items: &[&Item]) -> Result<Vec<String>, RemoteError> {
            Ok(items.iter().rev().map(|i| i.id.clone()).collect())
        }
    }

    struct Broken;
    impl Reranker for Broken {
        fn rerank(&self, _: &str, _: &[&Item]) -> Result<Vec<String>, RemoteError> {
            Err(RemoteError::Transport {
                endpoint: "x".into(),
                message: "down".into(),
            })
        }
    }

    #[test]
    fn v_variant_reranks_or_falls_back() {
        let (engine, ..) = latent_engine();
        let engine = engine.with_limits(2, 5);
        let run = |e: &Engine, v| {
            let mut s = Session::new("s", v, None);
            e.respond(&mut s, "year>=2000").unwrap().items
        };
        let f = run(&engine, Variant::F);
        // reranker absent: V == F
        assert_eq!(run(&engine, Variant::V), f);
        assert_eq!(run(&engine.clone().with_reranker(Arc::new(Broken)), Variant::V), f);
        let v = run(&engine.clone().with_reranker(Arc::new(Reverse)), Variant::V);
        // shortlist of 4 reversed: the two lowest-ranked of the top four
        let mut s = Session::new("s", Variant::F, None);
        let four = engine.clone().with_limits(4, 5).respond(&mut s, "year>=2000").unwrap().items;
        assert_eq!(v, vec![four[3].clone(), four[2].clone()]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn filter_soundness_and_determinism(msgs in prop::collection::vec(
            prop::sample::select(vec![
                "genre=Action", "genre=Drama", "genre!=Comedy", "year>=2000", "year<=1995",
                "genre in[Drama,Comedy]", "drop genre", "drop year", "something fun", "GENRE=comedy",
            ]), 1..5)) {
            let (engine, ..) = latent_engine();
            let mut a = Session::new("a", Variant::F, None);
            let mut b = Session::new("b", Variant::F, None);
            for m in &msgs {
                let t = engine.respond(&mut a, m).unwrap();
                let item_ok = |id: &str| {
                    let item = engine.catalog.item(engine.catalog.lookup(id).unwrap());
                    t.constraints.iter().all(|c| c.matches(item))
                };
                prop_assert!(t.items.iter().all(|i| item_ok(&i.id)));
                prop_assert_eq!(t, engine.respond(&mut b, m).unwrap());
            }
        }
    }
}
