//! One-turn and multi-turn evaluation, the simulated user, and reports.

pub mod metrics;
pub mod simulator;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{average_turns, ndcg_at_k, rank_of, recall_at_k, success_at};
pub use simulator::{first_utterance, simulate_user, AttributeStats, SimulatedUser, SimulatorConfig};

use crate::conversation::{ConversationError, Engine, RankRequest, Ranker, Session, TurnRecord, Variant};
use crate::corpus::{Catalog, ItemIdx, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserResult {
    pub user: String,
    pub target: String,
    /// One-turn: 1-based rank within the evaluated cutoff.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    /// Multi-turn: turn at which the target was first shown.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_turn: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `one_turn` or `multi_turn`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    pub metrics: BTreeMap<String, f64>,
    pub evaluated: usize,
    pub skipped: usize,
    pub config_fingerprint: String,
    pub users: Vec<UserResult>,
    /// Wall-clock seconds; left unset when byte-stable output is wanted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_secs: Option<f64>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> f64 {
        self.metrics.get(name).copied().unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in &self.metrics {
            writeln!(out, "{k},{v}").expect("string write");
        }
        out
    }
}

/// One held-out user for one-turn evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct OneTurnCase {
    pub user: String,
    pub target: ItemIdx,
    pub behavior: Vec<ItemIdx>,
    pub description: Option<String>,
}

/// Test cases from a split: context is the training prefix plus the
/// validation item; the description is the simulator's opening utterance.
pub fn one_turn_cases(catalog: &Catalog, split: &Split, sim: &SimulatorConfig) -> Vec<OneTurnCase> {
    let stats = AttributeStats::new(catalog);
    split
        .users
        .iter()
        .map(|su| OneTurnCase {
            user: su.user.clone(),
            target: su.test,
            behavior: su.test_context(),
            description: simulate_user(catalog, &stats, &su.user, su.test, 1, sim).map(|u| u.utterances[0].clone()),
        })
        .collect()
}

/// Ranks the full catalog once per case and averages Recall@k / NDCG@k.
/// Cases without a description are skipped and counted.
pub fn one_turn_eval(
    ranker: &dyn Ranker,
    catalog: &Catalog,
    cases: &[OneTurnCase],
    ks: &[usize],
    config_fingerprint: &str,
) -> Result<EvalReport, ConversationError> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(ConversationError::Config("cutoffs must be non-empty and ≥ 1".into()));
    }
    let cutoff = *ks.iter().max().expect("non-empty");
    let all: Vec<ItemIdx> = catalog.indices().collect();
    let results: Vec<Option<(UserResult, Vec<ItemIdx>)>> = cases
        .par_iter()
        .map(|case| {
            let Some(text) = &case.description else {
                return Ok(None);
            };
            let req = RankRequest {
                intent_text: text,
                behavior: Some(&case.behavior),
            };
            let ranked: Vec<ItemIdx> = ranker.rank(&req, &all, cutoff)?.into_iter().map(|s| s.item).collect();
            Ok(Some((
                UserResult {
                    user: case.user.clone(),
                    target: catalog.item(case.target).id.clone(),
                    rank: rank_of(&ranked, &case.target),
                    success_turn: None,
                },
                ranked,
            )))
        })
        .collect::<Result<_, ConversationError>>()?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let mut metrics = BTreeMap::new();
    let evaluated: Vec<(&OneTurnCase, &(UserResult, Vec<ItemIdx>))> = cases
        .iter()
        .zip(&results)
        .filter_map(|(c, r)| r.as_ref().map(|r| (c, r)))
        .collect();
    let n = evaluated.len().max(1) as f64;
    for &k in ks {
        let (mut rec, mut nd) = (0.0, 0.0);
        for (case, (_, ranked)) in &evaluated {
            rec += recall_at_k(ranked, &case.target, k);
            nd += ndcg_at_k(ranked, &case.target, k);
        }
        metrics.insert(format!("recall@{k}"), rec / n);
        metrics.insert(format!("ndcg@{k}"), nd / n);
    }
    if skipped > 0 {
        log::warn!("one-turn evaluation skipped {skipped} user(s) without a description");
    }
    Ok(EvalReport {
        kind: "one_turn".into(),
        variant: None,
        metrics,
        evaluated: evaluated.len(),
        skipped,
        config_fingerprint: config_fingerprint.to_string(),
        users: evaluated.into_iter().map(|(_, (u, _))| u.clone()).collect(),
        runtime_secs: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueOutcome {
    pub success: bool,
    pub turns_used: usize,
    pub transcript: Vec<TurnRecord>,
}

/// Plays `user` against `engine` until the target is shown or the turn cap.
pub fn simulate_dialogue(
    engine: &Engine,
    user: &SimulatedUser,
    variant: Variant,
    behavior: Option<Vec<ItemIdx>>,
) -> Result<DialogueOutcome, ConversationError> {
    let target_id = &engine.catalog.item(user.target).id;
    let mut session = Session::new(user.user.clone(), variant, behavior);
    for turn in 0..engine.max_turns {
        let reply = engine.respond(&mut session, user.utterance(turn))?;
        if reply.items.iter().any(|i| &i.id == target_id) {
            return Ok(DialogueOutcome {
                success: true,
                turns_used: turn + 1,
                transcript: session.history,
            });
        }
    }
    Ok(DialogueOutcome {
        success: false,
        turns_used: engine.max_turns,
        transcript: session.history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogueCase {
    pub user: SimulatedUser,
    pub behavior: Option<Vec<ItemIdx>>,
}

/// Simulated users for every test user in `split`; returns cases and the
/// number of users skipped for lack of target attributes.
pub fn dialogue_cases(
    catalog: &Catalog,
    split: &Split,
    max_turns: usize,
    sim: &SimulatorConfig,
) -> (Vec<DialogueCase>, usize) {
    let stats = AttributeStats::new(catalog);
    let mut skipped = 0;
    let mut cases = Vec::with_capacity(split.users.len());
    for su in &split.users {
        match simulate_user(catalog, &stats, &su.user, su.test, max_turns, sim) {
            Some(user) => cases.push(DialogueCase {
                user,
                behavior: Some(su.test_context()),
            }),
            None => skipped += 1,
        }
    }
    (cases, skipped)
}

/// S@3, S@5 and average turns (failures count as the turn cap).
pub fn multi_turn_eval(
    engine: &Engine,
    cases: &[DialogueCase],
    variant: Variant,
    config_fingerprint: &str,
) -> Result<EvalReport, ConversationError> {
    let outcomes: Vec<DialogueOutcome> = cases
        .par_iter()
        .map(|c| simulate_dialogue(engine, &c.user, variant, c.behavior.clone()))
        .collect::<Result<_, _>>()?;
    let turns: Vec<Option<usize>> = outcomes.iter().map(|o| o.success.then_some(o.turns_used)).collect();
    let mut metrics = BTreeMap::new();
    for t in [3, 5] {
        metrics.insert(format!("s@{t}"), success_at(&turns, t));
    }
    metrics.insert("at".into(), average_turns(&turns, engine.max_turns));
    Ok(EvalReport {
        kind: "multi_turn".into(),
        variant: Some(variant),
        metrics,
        evaluated: cases.len(),
        skipped: 0,
        config_fingerprint: config_fingerprint.to_string(),
        users: cases
            .iter()
            .zip(&turns)
            .map(|(c, t)| UserResult {
                user: c.user.user.clone(),
                target: engine.catalog.item(c.user.target).id.clone(),
                rank: None,
                success_turn: *t,
            })
            .collect(),
        runtime_secs: None,
    })
}

/// One grid point of a hyperparameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    pub k: usize,
    pub lambda: f64,
    pub alpha_m: f64,
    pub alpha_e: f64,
}

/// Cartesian product of per-parameter value lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub k: Vec<usize>,
    pub lambda: Vec<f64>,
    pub alpha_m: Vec<f64>,
    pub alpha_e: Vec<f64>,
}

impl Grid {
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &k in &self.k {
            for &lambda in &self.lambda {
                for &alpha_m in &self.alpha_m {
                    for &alpha_e in &self.alpha_e {
                        out.push(GridPoint { k, lambda, alpha_m, alpha_e });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: GridPoint,
    pub result: Result<EvalReport, String>,
}

/// Runs `evaluate` on every point; failures are logged and recorded, and the
/// sweep continues.
pub fn sweep<F>(points: &[GridPoint], evaluate: F) -> Vec<SweepRow>
where
    F: Fn(&GridPoint) -> Result<EvalReport, String>,
{
    points
        .iter()
        .map(|p| {
            let result = evaluate(p);
            if let Err(e) = &result {
                log::error!("sweep point {p:?} failed: {e}");
            }
            SweepRow {
                point: p.clone(),
                result,
            }
        })
        .collect()
}

/// CSV with one row per grid point; metric columns are the union over rows.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut names: Vec<&String> = rows
        .iter()
        .filter_map(|r| r.result.as_ref().ok())
        .flat_map(|r| r.metrics.keys())
        .collect();
    names.sort();
    names.dedup();
    let mut out = String::from("k,lambda,alpha_m,alpha_e,status");
    for n in &names {
        write!(out, ",{n}").expect("string write");
    }
    out.push('\n');
    for r in rows {
        let p = &r.point;
        write!(out, "{},{},{},{}", p.k, p.lambda, p.alpha_m, p.alpha_e).expect("string write");
        match &r.result {
            Ok(rep) => {
                out.push_str(",ok");
                for n in &names {
                    match rep.metrics.get(*n) {
                        Some(v) => write!(out, ",{v}").expect("string write"),
                        None => out.push(','),
                    }
                }
            }
            Err(_) => {
                out.push_str(",failed");
                out.push_str(&",".repeat(names.len()));
            }
        }
        out.push('\n');
    }
    out
}
