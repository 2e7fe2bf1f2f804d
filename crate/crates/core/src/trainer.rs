//! Training objectives and the three-stage variational EM schedule.
//!
//! Every loss is minimised and averaged over the batch:
//! - infoNCE: `Σ_j q_j (LSE_v g_j(v) − g_j(v⁺))` over `{v⁺} ∪ negatives`,
//! - KL: `Σ_j q_j (log q_j − log f_j)`,
//! - M-step recommendation loss: contrastive softmax over
//!   `s(v) = log Σ_j f_j exp(τ g_j(v))`,
//! - ELBO term: `KL(q ‖ posterior(v⁺))`,
//! - E-step recommendation loss: contrastive softmax over `r · W_e v`
//!   with `r = Σ_j q_j m_j`.

use std::iter::once;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ItemIdx, Split, TrainSequence};
use crate::encoder::{EncoderError, SequenceEncoder};
use crate::model::{LatentCrs, ModelConfig, ModelError, RankMode, W_E};
use crate::nn::{
    dot, log_softmax, log_sum_exp, softmax, softmax_backward, Adam, AdamConfig, Grads, Matrix,
    NnError,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("need {needed} negatives for user {user} but only {eligible} items are eligible")]
    InsufficientNegatives {
        user: usize,
        needed: usize,
        eligible: usize,
    },
    #[error("training diverged in stage {stage}, epoch {epoch}: {detail}")]
    Diverged {
        stage: u8,
        epoch: usize,
        detail: String,
        last_good: Box<LatentCrs>,
    },
    #[error("stage {stage} epoch {epoch}: {step} step modified frozen {group} parameters")]
    Discipline {
        stage: u8,
        epoch: usize,
        step: &'static str,
        group: &'static str,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("text embedding: {0}")]
    Embed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Generative model trained with its recommendation loss only.
    NoInferenceModel,
    /// Both models trained jointly with a `KL(q ‖ f)` alignment term.
    DirectKl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of intents (K-means clusters).
    pub k: usize,
    pub lambda: f64,
    pub alpha_m: f64,
    pub alpha_e: f64,
    pub negatives: usize,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Maximum number of alternating E/M rounds.
    pub stage3_rounds: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub lr_stage3: f64,
    pub stage1_patience: usize,
    pub patience: usize,
    pub seed: u64,
    pub augment_factor: usize,
    pub augment_min_len: usize,
    pub trainable_intents: bool,
    pub ablation: Ablation,
    pub no_recloss: bool,
    pub no_augment: bool,
    pub rank_mode: RankMode,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 32,
            lambda: 0.5,
            alpha_m: 0.5,
            alpha_e: 0.5,
            negatives: 64,
            batch_size: 64,
            stage1_epochs: 20,
            stage2_epochs: 20,
            stage3_rounds: 50,
            lr_stage1: 1e-3,
            lr_stage2: 1e-3,
            lr_stage3: 1e-3,
            stage1_patience: 3,
            patience: 5,
            seed: 0,
            augment_factor: 2,
            augment_min_len: 2,
            trainable_intents: false,
            ablation: Ablation::Full,
            no_recloss: false,
            no_augment: false,
            rank_mode: RankMode::Full,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let weights = [self.lambda, self.alpha_m, self.alpha_e];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(TrainError::Config("λ, α^M and α^E must be finite and ≥ 0".into()));
        }
        if self.negatives == 0 || self.batch_size == 0 || self.k == 0 {
            return Err(TrainError::Config("k, negatives and batch_size must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn alpha_m(&self) -> f64 {
        if self.no_recloss {
            0.0
        } else {
            self.alpha_m
        }
    }

    pub fn alpha_e(&self) -> f64 {
        if self.no_recloss {
            0.0
        } else {
            self.alpha_e
        }
    }

    pub fn augment_factor(&self) -> usize {
        if self.no_augment {
            0
        } else {
            self.augment_factor
        }
    }

    pub fn m_weights(&self) -> LossWeights {
        LossWeights {
            infonce: 1.0,
            kl: self.lambda,
            m_rec: self.alpha_m(),
            ..LossWeights::default()
        }
    }

    pub fn e_weights(&self) -> LossWeights {
        LossWeights {
            elbo: 1.0,
            e_rec: self.alpha_e(),
            ..LossWeights::default()
        }
    }

    /// Direct-KL ablation: both groups trained together.
    pub fn joint_weights(&self) -> LossWeights {
        LossWeights {
            infonce: 1.0,
            kl: self.lambda,
            m_rec: self.alpha_m(),
            e_rec: self.alpha_e(),
            ..LossWeights::default()
        }
    }
}

/// One `(context, target)` example with cached embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainInstance {
    /// Index into [`Split::users`].
    pub user: usize,
    pub target: ItemIdx,
    pub s: Vec<f64>,
    pub x: Vec<f64>,
    pub negatives: Vec<ItemIdx>,
    /// Fixed intent estimate `q̂` used by M-step losses.
    #[serde(default)]
    pub q_hat: Vec<f64>,
}

/// Refreshes `q̂` on every instance from the current inference model.
pub fn estimate_q_hat(model: &LatentCrs, instances: &mut [TrainInstance]) -> Result<(), TrainError> {
    instances.par_iter_mut().try_for_each(|inst| {
        inst.q_hat = model.infer_q(&inst.s)?;
        Ok(())
    })
}

/// A held-out `(context, target)` pair ranked against the full catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub user: usize,
    pub target: ItemIdx,
    pub s: Vec<f64>,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub items: Matrix,
    pub item_ids: Vec<String>,
    pub train: Vec<TrainInstance>,
    /// Sorted distinct training items per user.
    pub history: Vec<Vec<ItemIdx>>,
    pub valid: Vec<EvalCase>,
    /// Instances skipped because their target had no description.
    pub skipped: usize,
}

/// Builds training instances from `(prefix, target)` sequences and validation
/// cases from the split. `describe` yields the opening description for a
/// target; `embed` turns text into `x`.
pub fn prepare_data(
    encoder: &dyn SequenceEncoder,
    items: Matrix,
    item_ids: Vec<String>,
    split: &Split,
    sequences: &[TrainSequence],
    describe: &(dyn Fn(ItemIdx) -> Option<String> + Sync),
    embed: &(dyn Fn(&str) -> Result<Vec<f64>, String> + Sync),
) -> Result<TrainData, TrainError> {
    let embed_target = |target: ItemIdx| -> Result<Option<Vec<f64>>, TrainError> {
        match describe(target) {
            Some(text) => embed(&text).map(Some).map_err(TrainError::Embed),
            None => Ok(None),
        }
    };
    let mut skipped = 0;
    let mut train = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let (Some(target), ctx) = (seq.target(), seq.context()) else {
            continue;
        };
        if ctx.is_empty() {
            continue;
        }
        match embed_target(target)? {
            Some(x) => train.push(TrainInstance {
                user: seq.user,
                target,
                s: encoder.encode_sequence(ctx)?,
                x,
                negatives: Vec::new(),
                q_hat: Vec::new(),
            }),
            None => skipped += 1,
        }
    }
    let mut valid = Vec::with_capacity(split.users.len());
    for (u, su) in split.users.iter().enumerate() {
        match embed_target(su.valid)? {
            Some(x) => valid.push(EvalCase {
                user: u,
                target: su.valid,
                s: encoder.encode_sequence(su.valid_context())?,
                x,
            }),
            None => skipped += 1,
        }
    }
    let history = split
        .users
        .iter()
        .map(|su| {
            let mut h = su.train.clone();
            h.sort_unstable();
            h.dedup();
            h
        })
        .collect();
    Ok(TrainData {
        items,
        item_ids,
        train,
        history,
        valid,
        skipped,
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x1ce4_e5b9_u64, |h, &p| splitmix(h ^ splitmix(p)))
}

/// `n` items drawn uniformly without replacement from the catalog minus the
/// target and the user's training items; deterministic per
/// `(seed, user, target, epoch)`.
pub fn sample_negatives(
    num_items: usize,
    target: ItemIdx,
    history: &[ItemIdx],
    n: usize,
    seed: u64,
    user: usize,
    epoch: usize,
) -> Result<Vec<ItemIdx>, TrainError> {
    let eligible: Vec<ItemIdx> = (0..num_items as u32)
        .map(ItemIdx)
        .filter(|&i| i != target && history.binary_search(&i).is_err())
        .collect();
    if eligible.len() < n {
        return Err(TrainError::InsufficientNegatives {
            user,
            needed: n,
            eligible: eligible.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
        seed,
        user as u64,
        target.0 as u64,
        epoch as u64,
    ]));
    Ok(index::sample(&mut rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i])
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub infonce: f64,
    pub kl: f64,
    pub m_rec: f64,
    pub elbo: f64,
    pub e_rec: f64,
}

/// Unweighted batch means of each term plus the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub infonce: f64,
    pub kl: f64,
    pub m_rec: f64,
    pub elbo: f64,
    pub e_rec: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add(&mut self, other: &LossBreakdown, alpha: f64) {
        self.infonce += alpha * other.infonce;
        self.kl += alpha * other.kl;
        self.m_rec += alpha * other.m_rec;
        self.elbo += alpha * other.elbo;
        self.e_rec += alpha * other.e_rec;
        self.total += alpha * other.total;
    }

    fn is_finite(&self) -> bool {
        [self.infonce, self.kl, self.m_rec, self.elbo, self.e_rec, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Which parameter group receives gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Update {
    Generative,
    Inference,
    Joint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrads {
    pub generative: Option<Grads>,
    pub inference: Option<Grads>,
}

fn instance_loss(
    model: &LatentCrs,
    items: &Matrix,
    inst: &TrainInstance,
    w: &LossWeights,
    update: Update,
    mut gen_grads: Option<&mut Grads>,
    inf_grads: Option<&mut Grads>,
) -> Result<LossBreakdown, TrainError> {
    let cent = model.centroids();
    let k = cent.rows();
    // The M-step treats q as a fixed estimate; otherwise q is live.
    let inf = if update == Update::Generative {
        if inst.q_hat.len() != k {
            return Err(TrainError::Config(
                "M-step instances need q̂ (see estimate_q_hat)".into(),
            ));
        }
        None
    } else {
        Some(model.inference.forward(&inst.s, cent)?)
    };
    let q: &[f64] = inf.as_ref().map_or(&inst.q_hat, |f| &f.q);
    let log_q: Vec<f64> = match &inf {
        Some(f) => log_softmax(&f.logits),
        None => q.iter().map(|p| p.ln()).collect(),
    };
    let cands: Vec<ItemIdx> = once(inst.target).chain(inst.negatives.iter().copied()).collect();
    let n_c = cands.len();
    let mut out = LossBreakdown::default();
    let mut dq = vec![0.0; k];

    if w.infonce != 0.0 || w.kl != 0.0 || w.m_rec != 0.0 || w.elbo != 0.0 {
        let gen = &model.generative;
        let fwd = gen.forward(&inst.s, &inst.x)?;
        let projs: Vec<Vec<f64>> = cands
            .iter()
            .map(|c| gen.project_item(items.row(c.index())))
            .collect::<Result<_, _>>()?;
        let a: Vec<Vec<f64>> = projs.iter().map(|p| fwd.affinities(p)).collect();
        let g: Vec<Vec<f64>> = a
            .iter()
            .map(|av| av.iter().zip(&fwd.b).map(|(a, b)| a * b).collect())
            .collect();
        let mut dg = vec![vec![0.0; k]; n_c];
        let mut d_logf = vec![0.0; k];
        let mut d_b = vec![0.0; k];

        if w.infonce != 0.0 {
            for j in 0..k {
                let col: Vec<f64> = g.iter().map(|gv| gv[j]).collect();
                let term = log_sum_exp(&col) - col[0];
                out.infonce += q[j] * term;
                dq[j] += w.infonce * term;
                let p = softmax(&col);
                for v in 0..n_c {
                    let ind = if v == 0 { 1.0 } else { 0.0 };
                    dg[v][j] += w.infonce * q[j] * (p[v] - ind);
                }
            }
        }
        if w.kl != 0.0 {
            for j in 0..k {
                let diff = log_q[j] - fwd.log_f[j];
                out.kl += q[j] * diff;
                dq[j] += w.kl * (diff + 1.0);
                d_b[j] += w.kl * (fwd.f[j] - q[j]);
            }
        }
        if w.m_rec != 0.0 {
            let tau = gen.tau;
            let mut s = Vec::with_capacity(n_c);
            let mut post = Vec::with_capacity(n_c);
            for gv in &g {
                let logits: Vec<f64> = fwd.log_f.iter().zip(gv).map(|(lf, g)| lf + tau * g).collect();
                s.push(log_sum_exp(&logits));
                post.push(softmax(&logits));
            }
            out.m_rec = log_sum_exp(&s) - s[0];
            let p = softmax(&s);
            for v in 0..n_c {
                let ind = if v == 0 { 1.0 } else { 0.0 };
                let ds = w.m_rec * (p[v] - ind);
                for j in 0..k {
                    d_logf[j] += ds * post[v][j];
                    dg[v][j] += ds * post[v][j] * tau;
                }
            }
        }
        if w.elbo != 0.0 {
            let logits: Vec<f64> = fwd
                .log_f
                .iter()
                .zip(&g[0])
                .map(|(lf, g)| lf + gen.tau * g)
                .collect();
            let log_post = log_softmax(&logits);
            for j in 0..k {
                let diff = log_q[j] - log_post[j];
                out.elbo += q[j] * diff;
                dq[j] += w.elbo * (diff + 1.0);
            }
        }
        if let Some(grads) = gen_grads.as_deref_mut() {
            let sum_logf: f64 = d_logf.iter().sum();
            for j in 0..k {
                d_b[j] += d_logf[j] - fwd.f[j] * sum_logf;
            }
            let mut d_a = vec![vec![0.0; k]; n_c];
            for v in 0..n_c {
                for j in 0..k {
                    d_a[v][j] = dg[v][j] * fwd.b[j];
                    d_b[j] += dg[v][j] * a[v][j];
                }
            }
            let pairs: Vec<(&[f64], &[f64])> = cands
                .iter()
                .zip(&projs)
                .map(|(c, p)| (items.row(c.index()), p.as_slice()))
                .collect();
            gen.backward(&inst.s, &inst.x, &fwd, &d_b, &pairs, &d_a, grads);
        }
    }

    let mut inf_grads = inf_grads;
    let mut d_cent = Matrix::zeros(k, cent.cols());
    if w.e_rec != 0.0 {
        let mut r = vec![0.0; cent.cols()];
        for j in 0..k {
            crate::nn::axpy(q[j], cent.row(j), &mut r);
        }
        let w_e = model.inference.params.get(W_E);
        let wev: Vec<Vec<f64>> = cands.iter().map(|c| w_e.matvec(items.row(c.index()))).collect();
        let scores: Vec<f64> = wev.iter().map(|x| dot(&r, x)).collect();
        out.e_rec = log_sum_exp(&scores) - scores[0];
        let p = softmax(&scores);
        let mut dr = vec![0.0; r.len()];
        for v in 0..n_c {
            let ind = if v == 0 { 1.0 } else { 0.0 };
            let ds = w.e_rec * (p[v] - ind);
            crate::nn::axpy(ds, &wev[v], &mut dr);
            if let Some(grads) = inf_grads.as_deref_mut() {
                grads.get_mut(W_E).add_outer(ds, &r, items.row(cands[v].index()));
            }
        }
        for j in 0..k {
            dq[j] += dot(&dr, cent.row(j));
            crate::nn::axpy(q[j], &dr, d_cent.row_mut(j));
        }
    }
    if let Some(inf) = &inf {
        let d_logits = softmax_backward(q, &dq);
        if let Some(grads) = inf_grads {
            model.inference.backward(&inst.s, cent, inf, &d_logits, grads);
        }
        // with a live q, centroids also move through the attention logits
        if gen_grads.is_some() {
            model.inference.centroid_backward(inf, &d_logits, &mut d_cent);
        }
    }
    if let Some(grads) = gen_grads {
        grads.get_mut(model.generative.intents).add_scaled(1.0, &d_cent);
    }
    out.total = w.infonce * out.infonce
        + w.kl * out.kl
        + w.m_rec * out.m_rec
        + w.elbo * out.elbo
        + w.e_rec * out.e_rec;
    Ok(out)
}

const CHUNKS: usize = 8;

/// Mean loss over `batch` and gradients for the selected parameter group(s).
/// Work is split into a fixed number of contiguous chunks and merged in
/// order, so results do not depend on the thread count.
pub fn batch_loss(
    model: &LatentCrs,
    items: &Matrix,
    batch: &[TrainInstance],
    weights: &LossWeights,
    update: Update,
) -> Result<(LossBreakdown, BatchGrads), TrainError> {
    let want_gen = update != Update::Inference;
    let want_inf = update != Update::Generative;
    let chunk_len = batch.len().div_ceil(CHUNKS).max(1);
    let partials: Vec<_> = batch
        .par_chunks(chunk_len)
        .map(|chunk| -> Result<_, TrainError> {
            let mut gen = want_gen.then(|| Grads::zeros_like(&model.generative.params));
            let mut inf = want_inf.then(|| Grads::zeros_like(&model.inference.params));
            let mut total = LossBreakdown::default();
            for inst in chunk {
                let l = instance_loss(model, items, inst, weights, update, gen.as_mut(), inf.as_mut())?;
                total.add(&l, 1.0);
            }
            Ok((total, gen, inf))
        })
        .collect::<Result<_, _>>()?;
    let mut loss = LossBreakdown::default();
    let mut generative = want_gen.then(|| Grads::zeros_like(&model.generative.params));
    let mut inference = want_inf.then(|| Grads::zeros_like(&model.inference.params));
    let scale = 1.0 / batch.len().max(1) as f64;
    for (l, g, i) in partials {
        loss.add(&l, scale);
        if let (Some(acc), Some(g)) = (generative.as_mut(), g) {
            acc.add_scaled(scale, &g);
        }
        if let (Some(acc), Some(i)) = (inference.as_mut(), i) {
            acc.add_scaled(scale, &i);
        }
    }
    Ok((
        loss,
        BatchGrads {
            generative,
            inference,
        },
    ))
}

fn single(
    model: &LatentCrs,
    items: &Matrix,
    batch: &[TrainInstance],
    weights: LossWeights,
    update: Update,
) -> Result<(f64, Grads), TrainError> {
    let (loss, grads) = batch_loss(model, items, batch, &weights, update)?;
    let g = match update {
        Update::Inference => grads.inference,
        _ => grads.generative,
    };
    Ok((loss.total, g.expect("requested group")))
}

pub fn loss_infonce(
    model: &LatentCrs,
    items: &Matrix,
    batch: &[TrainInstance],
) -> Result<(f64, Grads), TrainError> {
    let w = LossWeights {
        infonce: 1.0,
        ..Default::default()
    };
    single(model, items, batch, w, Update::Generative)
}

/// `KL(q̂ ‖ p)` and its gradient with respect to the logits of `p`.
pub fn loss_kl(q_hat: &[f64], p: &[f64]) -> (f64, Vec<f64>) {
    let kl = q_hat
        .iter()
        .zip(p)
        .filter(|(q, _)| **q > 0.0)
        .map(|(q, p)| q * (q.ln() - p.ln()))
        .sum();
    let grad = p.iter().zip(q_hat).map(|(p, q)| p - q).collect();
    (kl, grad)
}

pub fn loss_m_rec(
    model: &LatentCrs,
    items: &Matrix,
    batch: &[TrainInstance],
) -> Result<(f64, Grads), TrainError> {
    let w = LossWeights {
        m_rec: 1.0,
        ..Default::default()
    };
    single(model, items, batch, w, Update::Generative)
}

pub fn loss_m_total(
    model: &LatentCrs,
    items: &Matrix,
    batch: &[TrainInstance],
    config: &TrainConfig,
) -> Result<(LossBreakdown, Grads), TrainError> {
    let (l, g) = batch_loss(model, items, batch, &config.m_weights(), Update::Generative)?;
    Ok((l, g.generative.expect("generative grads")))
}

pub fn loss_e_elbo(
    model: &LatentCrs,
    items: &Matrix,
    batch: &[TrainInstance],
) -> Result<(f64, Grads), TrainError> {
    let w = LossWeights {
        elbo: 1.0,
        ..Default::default()
    };
    single(model, items, batch, w, Update::Inference)
}

pub fn loss_e_rec(
    model: &LatentCrs,
    items: &Matrix,
    batch: &[TrainInstance],
) -> Result<(f64, Grads), TrainError> {
    let w = LossWeights {
        e_rec: 1.0,
        ..Default::default()
    };
    single(model, items, batch, w, Update::Inference)
}

pub fn loss_e_total(
    model: &LatentCrs,
    items: &Matrix,
    batch: &[TrainInstance],
    config: &TrainConfig,
) -> Result<(LossBreakdown, Grads), TrainError> {
    let (l, g) = batch_loss(model, items, batch, &config.e_weights(), Update::Inference)?;
    Ok((l, g.inference.expect("inference grads")))
}

/// 1-based rank of `target` among all scored items (ties: ascending id).
pub fn target_rank(scores: &[f64], target: ItemIdx, item_ids: &[String]) -> usize {
    let t = target.index();
    let ts = scores[t];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > ts || (s == ts && i != t && item_ids[i] < item_ids[t]))
        .count()
}

pub fn ndcg_from_rank(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Mean NDCG@20 and Recall@5 of the generative ranker over `cases`.
pub fn validate(
    model: &LatentCrs,
    data: &TrainData,
    cases: &[EvalCase],
    mode: RankMode,
) -> Result<ValidationMetrics, TrainError> {
    let ranks: Vec<usize> = cases
        .par_iter()
        .map(|c| {
            let scores = model.score_all(&c.s, &c.x, &data.items, mode)?;
            Ok(target_rank(&scores, c.target, &data.item_ids))
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(ValidationMetrics::from_ranks(&ranks))
}

/// Same metrics for the inference model's auxiliary scorer `r · W_e v`.
pub fn validate_inference(
    model: &LatentCrs,
    data: &TrainData,
    cases: &[EvalCase],
) -> Result<ValidationMetrics, TrainError> {
    let cent = model.centroids();
    let w_e = model.inference.params.get(W_E);
    let ranks: Vec<usize> = cases
        .par_iter()
        .map(|c| {
            let q = model.inference.forward(&c.s, cent)?.q;
            let mut r = vec![0.0; cent.cols()];
            for (j, qj) in q.iter().enumerate() {
                crate::nn::axpy(*qj, cent.row(j), &mut r);
            }
            let rw = w_e.matvec_t(&r);
            let scores: Vec<f64> = (0..data.items.rows())
                .map(|i| dot(&rw, data.items.row(i)))
                .collect();
            Ok(target_rank(&scores, c.target, &data.item_ids))
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(ValidationMetrics::from_ranks(&ranks))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub ndcg20: f64,
    pub recall5: f64,
}

impl ValidationMetrics {
    fn from_ranks(ranks: &[usize]) -> Self {
        if ranks.is_empty() {
            return Self::default();
        }
        let n = ranks.len() as f64;
        Self {
            ndcg20: ranks.iter().map(|&r| ndcg_from_rank(r, 20)).sum::<f64>() / n,
            recall5: ranks.iter().filter(|&&r| r <= 5).count() as f64 / n,
        }
    }
}

/// One line of the JSON-lines training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub stage: u8,
    pub epoch: usize,
    /// `e_rec`, `m`, `e`, `m_rec` or `joint`.
    pub step: String,
    pub loss: LossBreakdown,
    pub validation: Option<ValidationMetrics>,
    pub inference_fingerprint: String,
    pub generative_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: LatentCrs,
    pub history: Vec<HistoryRecord>,
    pub best_validation: Option<ValidationMetrics>,
}

impl TrainOutcome {
    pub fn history_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.history {
            out.push_str(&serde_json::to_string(rec).expect("history is serialisable"));
            out.push('\n');
        }
        out
    }
}

struct Trainer<'a> {
    data: &'a TrainData,
    config: &'a TrainConfig,
    model: LatentCrs,
    history: Vec<HistoryRecord>,
    /// Global epoch counter feeding negative-sampling seeds.
    epoch_seq: usize,
}

impl<'a> Trainer<'a> {
    fn with_negatives(&self) -> Result<Vec<TrainInstance>, TrainError> {
        let epoch = self.epoch_seq;
        self.data
            .train
            .par_iter()
            .map(|inst| {
                let negatives = sample_negatives(
                    self.data.items.rows(),
                    inst.target,
                    &self.data.history[inst.user],
                    self.config.negatives,
                    self.config.seed,
                    inst.user,
                    epoch,
                )?;
                Ok(TrainInstance {
                    negatives,
                    ..inst.clone()
                })
            })
            .collect()
    }

    /// One pass over the training set; returns epoch-mean losses.
    fn epoch(
        &mut self,
        stage: u8,
        step: &'static str,
        weights: LossWeights,
        update: Update,
        gen_opt: Option<&mut Adam>,
        inf_opt: Option<&mut Adam>,
    ) -> Result<LossBreakdown, TrainError> {
        let mut instances = self.with_negatives()?;
        if update == Update::Generative {
            estimate_q_hat(&self.model, &mut instances)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            self.config.seed,
            0x5bd1_e995,
            self.epoch_seq as u64,
        ]));
        instances.shuffle(&mut rng);
        let local_epoch = self.history.iter().filter(|h| h.stage == stage).count();
        self.epoch_seq += 1;

        let inf_before = self.model.inference.params.fingerprint();
        let gen_before = self.model.generative.params.fingerprint();
        let mut gen_opt = gen_opt;
        let mut inf_opt = inf_opt;
        let mut total = LossBreakdown::default();
        for batch in instances.chunks(self.config.batch_size) {
            let (loss, grads) = batch_loss(&self.model, &self.data.items, batch, &weights, update)?;
            let diverged = |detail: String, model: &LatentCrs| TrainError::Diverged {
                stage,
                epoch: local_epoch,
                detail,
                last_good: Box::new(model.clone()),
            };
            if !loss.is_finite() {
                return Err(diverged(format!("non-finite loss {loss:?}"), &self.model));
            }
            total.add(&loss, batch.len() as f64 / instances.len() as f64);
            if let (Some(opt), Some(mut g)) = (gen_opt.as_deref_mut(), grads.generative) {
                if !self.config.trainable_intents {
                    g.get_mut(self.model.generative.intents).fill(0.0);
                }
                let snapshot = self.model.clone();
                opt.step(&mut self.model.generative.params, &g)
                    .map_err(|e| diverged(e.to_string(), &snapshot))?;
            }
            if let (Some(opt), Some(g)) = (inf_opt.as_deref_mut(), grads.inference) {
                let snapshot = self.model.clone();
                opt.step(&mut self.model.inference.params, &g)
                    .map_err(|e| diverged(e.to_string(), &snapshot))?;
            }
        }
        let inf_after = self.model.inference.params.fingerprint();
        let gen_after = self.model.generative.params.fingerprint();
        if update == Update::Generative && inf_after != inf_before {
            return Err(TrainError::Discipline {
                stage,
                epoch: local_epoch,
                step,
                group: "inference",
            });
        }
        if update == Update::Inference && gen_after != gen_before {
            return Err(TrainError::Discipline {
                stage,
                epoch: local_epoch,
                step,
                group: "generative",
            });
        }
        self.history.push(HistoryRecord {
            stage,
            epoch: local_epoch,
            step: step.to_string(),
            loss: total,
            validation: None,
            inference_fingerprint: inf_after,
            generative_fingerprint: gen_after,
        });
        Ok(total)
    }

    fn annotate(&mut self, metrics: ValidationMetrics) {
        if let Some(last) = self.history.last_mut() {
            last.validation = Some(metrics);
        }
        log::info!(
            "stage {} epoch {} ({}): loss {:.5}, val NDCG@20 {:.4}, Recall@5 {:.4}",
            self.history.last().map_or(0, |h| h.stage),
            self.history.last().map_or(0, |h| h.epoch),
            self.history.last().map_or("", |h| h.step.as_str()),
            self.history.last().map_or(f64::NAN, |h| h.loss.total),
            metrics.ndcg20,
            metrics.recall5
        );
    }

    fn validate(&self) -> Result<ValidationMetrics, TrainError> {
        validate(&self.model, self.data, &self.data.valid, self.config.rank_mode)
    }

    /// Stage 1: inference model on its recommendation loss until the
    /// validation metric stops improving.
    fn stage1(&mut self) -> Result<(), TrainError> {
        let mut opt = Adam::new(AdamConfig::with_lr(self.config.lr_stage1), &self.model.inference.params);
        let weights = LossWeights {
            e_rec: 1.0,
            ..Default::default()
        };
        let mut best: Option<(f64, crate::nn::ParamStore)> = None;
        let mut stale = 0;
        for _ in 0..self.config.stage1_epochs {
            self.epoch(1, "e_rec", weights, Update::Inference, None, Some(&mut opt))?;
            let m = validate_inference(&self.model, self.data, &self.data.valid)?;
            self.annotate(m);
            if best.as_ref().is_none_or(|(b, _)| m.ndcg20 > *b) {
                best = Some((m.ndcg20, self.model.inference.params.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.config.stage1_patience {
                    break;
                }
            }
        }
        if let Some((_, params)) = best {
            self.model.inference.params = params;
        }
        Ok(())
    }

    fn stage2(&mut self) -> Result<(), TrainError> {
        let mut opt = Adam::new(AdamConfig::with_lr(self.config.lr_stage2), &self.model.generative.params);
        for _ in 0..self.config.stage2_epochs {
            self.epoch(2, "m", self.config.m_weights(), Update::Generative, Some(&mut opt), None)?;
            let m = self.validate()?;
            self.annotate(m);
        }
        Ok(())
    }

    /// Runs `round` until validation NDCG@20 fails to improve for
    /// `patience` rounds, then restores the best model.
    fn early_stopped(
        &mut self,
        rounds: usize,
        mut round: impl FnMut(&mut Self) -> Result<(), TrainError>,
    ) -> Result<Option<ValidationMetrics>, TrainError> {
        let mut best: Option<(ValidationMetrics, LatentCrs)> = None;
        let mut stale = 0;
        for _ in 0..rounds {
            round(self)?;
            let m = self.validate()?;
            self.annotate(m);
            if best.as_ref().is_none_or(|(b, _)| m.ndcg20 > b.ndcg20) {
                best = Some((m, self.model.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.config.patience {
                    break;
                }
            }
        }
        Ok(best.map(|(m, model)| {
            self.model = model;
            m
        }))
    }
}

/// Runs the full schedule (or an ablation of it) starting from `model`.
pub fn run_training(
    model: LatentCrs,
    data: &TrainData,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut t = Trainer {
        data,
        config,
        model,
        history: Vec::new(),
        epoch_seq: 0,
    };
    let best = match config.ablation {
        Ablation::Full => {
            t.stage1()?;
            t.stage2()?;
            let lr = AdamConfig::with_lr(config.lr_stage3);
            let mut e_opt = Adam::new(lr, &t.model.inference.params);
            let mut m_opt = Adam::new(lr, &t.model.generative.params);
            t.early_stopped(config.stage3_rounds, |t| {
                t.epoch(3, "e", config.e_weights(), Update::Inference, None, Some(&mut e_opt))?;
                t.epoch(3, "m", config.m_weights(), Update::Generative, Some(&mut m_opt), None)?;
                Ok(())
            })?
        }
        Ablation::DirectKl => {
            t.stage1()?;
            let lr = AdamConfig::with_lr(config.lr_stage3);
            let mut g_opt = Adam::new(lr, &t.model.generative.params);
            let mut i_opt = Adam::new(lr, &t.model.inference.params);
            let w = config.joint_weights();
            t.early_stopped(config.stage2_epochs + config.stage3_rounds, |t| {
                t.epoch(2, "joint", w, Update::Joint, Some(&mut g_opt), Some(&mut i_opt))?;
                Ok(())
            })?
        }
        Ablation::NoInferenceModel => {
            let mut opt = Adam::new(AdamConfig::with_lr(config.lr_stage2), &t.model.generative.params);
            let w = LossWeights {
                m_rec: 1.0,
                ..Default::default()
            };
            t.early_stopped(config.stage2_epochs + config.stage3_rounds, |t| {
                t.epoch(2, "m_rec", w, Update::Generative, Some(&mut opt), None)?;
                Ok(())
            })?
        }
    };
    Ok(TrainOutcome {
        model: t.model,
        history: t.history,
        best_validation: best,
    })
}
