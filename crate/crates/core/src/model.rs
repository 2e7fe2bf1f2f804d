//! Inference model `q(m | S)` and generative model (`f`, `g`, `h`, posterior)
//! over a discrete set of intent centroids, plus end-task ranking.
//!
//! Notation used throughout:
//! - `c = FFN([P_s S; P_x x + b_x])` is the context vector,
//! - `b_j = c · (W_m m_j)` are the prior logits, `f = softmax(b)`,
//! - `a(v, j) = (W_j m_j) · (W_v v)` is the intent–item affinity,
//! - `g_j(v) = a(v, j) · b_j`, `h(v) = Σ_j f_j g_j(v)`.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ItemIdx;
use crate::nn::{
    dot, log_softmax, softmax, Activation, FfnCache, FfnSpec, Grads, Matrix, NnError, ParamStore,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("{context}: expected dimension {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("no candidate items to rank")]
    EmptyCandidates,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_a: usize,
    pub d_p: usize,
    pub d_c: usize,
    pub d_b: usize,
    /// Hidden widths of the context FFN.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Temperature of the positive surrogate `f_j · exp(τ g_j)`.
    pub tau: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_a: 64,
            d_p: 64,
            d_c: 64,
            d_b: 64,
            hidden: vec![64],
            activation: Activation::Tanh,
            tau: 1.0,
            init_scale: 0.1,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    /// Score by `h(v)`.
    Full,
    /// Score by `Σ_j f_j a(v, j)`.
    CondIndep,
}

impl std::str::FromStr for RankMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(RankMode::Full),
            "cond_indep" | "cond-indep" => Ok(RankMode::CondIndep),
            other => Err(format!("unknown rank mode {other:?}")),
        }
    }
}

fn check(context: &'static str, expected: usize, actual: usize) -> Result<(), ModelError> {
    if expected != actual {
        return Err(ModelError::Dimension {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

pub const W_Q: usize = 0;
pub const W_K: usize = 1;
pub const W_E: usize = 2;

/// `q(m_j | S) = softmax_j((W_q S) · (W_k m_j) / √d_m)`; also houses the
/// auxiliary bilinear item scorer `W_e` used by the E-step recommendation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceModel {
    pub params: ParamStore,
}

#[derive(Debug, Clone)]
pub struct InferenceForward {
    query: Vec<f64>,
    keys: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub q: Vec<f64>,
}

impl InferenceModel {
    pub fn new(d_u: usize, d_m: usize, d_v: usize, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let s = config.init_scale;
        let mut params = ParamStore::new();
        params.push("inference.w_q", Matrix::uniform(config.d_a, d_u, s, rng));
        params.push("inference.w_k", Matrix::uniform(config.d_a, d_m, s, rng));
        params.push("inference.w_e", Matrix::uniform(d_u, d_v, s, rng));
        Self { params }
    }

    pub fn d_u(&self) -> usize {
        self.params.get(W_Q).cols()
    }

    fn scale(&self) -> f64 {
        1.0 / (self.params.get(W_K).cols() as f64).sqrt()
    }

    pub fn forward(&self, s: &[f64], centroids: &Matrix) -> Result<InferenceForward, ModelError> {
        check("inference sequence embedding", self.d_u(), s.len())?;
        check("intent dimension", self.params.get(W_K).cols(), centroids.cols())?;
        let query = self.params.get(W_Q).matvec(s);
        let scale = self.scale();
        let keys: Vec<Vec<f64>> = (0..centroids.rows())
            .map(|j| self.params.get(W_K).matvec(centroids.row(j)))
            .collect();
        let logits: Vec<f64> = keys.iter().map(|k| dot(&query, k) * scale).collect();
        let q = softmax(&logits);
        Ok(InferenceForward {
            query,
            keys,
            logits,
            q,
        })
    }

    /// Accumulates `W_q`, `W_k` gradients given `dL/dlogits`.
    pub fn backward(
        &self,
        s: &[f64],
        centroids: &Matrix,
        fwd: &InferenceForward,
        d_logits: &[f64],
        grads: &mut Grads,
    ) {
        let scale = self.scale();
        let mut d_query = vec![0.0; fwd.query.len()];
        for (j, &dl) in d_logits.iter().enumerate() {
            if dl == 0.0 {
                continue;
            }
            crate::nn::axpy(dl * scale, &fwd.keys[j], &mut d_query);
            grads
                .get_mut(W_K)
                .add_outer(dl * scale, &fwd.query, centroids.row(j));
        }
        grads.get_mut(W_Q).add_outer(1.0, &d_query, s);
    }

    /// `dL/dm_j` through the attention logits, accumulated into `d_m`.
    pub fn centroid_backward(&self, fwd: &InferenceForward, d_logits: &[f64], d_m: &mut Matrix) {
        let scale = self.scale();
        let wkq = self.params.get(W_K).matvec_t(&fwd.query);
        for (j, &dl) in d_logits.iter().enumerate() {
            crate::nn::axpy(dl * scale, &wkq, d_m.row_mut(j));
        }
    }
}

/// Generative model parameters. Centroids are held here too: frozen unless
/// the trainer is told to update them with the generative group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeModel {
    pub params: ParamStore,
    pub ffn: FfnSpec,
    pub tau: f64,
    pub proj_s: usize,
    pub proj_x: usize,
    pub proj_x_bias: usize,
    pub w_m: usize,
    pub w_j: usize,
    pub w_v: usize,
    pub intents: usize,
}

/// Per-(S, x) quantities shared by every item scored in that context.
#[derive(Debug, Clone)]
pub struct PriorForward {
    ffn: FfnCache,
    /// `W_m m_j` per intent.
    wm: Vec<Vec<f64>>,
    /// `W_j m_j` per intent.
    pub intent_aff: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub log_f: Vec<f64>,
    pub f: Vec<f64>,
}

impl PriorForward {
    pub fn context(&self) -> &[f64] {
        &self.ffn.output
    }

    pub fn k(&self) -> usize {
        self.b.len()
    }

    /// `a(v, j)` for all `j` given the projected item `W_v v`.
    pub fn affinities(&self, item_proj: &[f64]) -> Vec<f64> {
        self.intent_aff.iter().map(|a| dot(a, item_proj)).collect()
    }

    /// `g_j(v)` for all `j`.
    pub fn ratios(&self, item_proj: &[f64]) -> Vec<f64> {
        self.affinities(item_proj)
            .iter()
            .zip(&self.b)
            .map(|(a, b)| a * b)
            .collect()
    }

    pub fn mixture(&self, item_proj: &[f64]) -> f64 {
        dot(&self.f, &self.ratios(item_proj))
    }
}

impl GenerativeModel {
    pub fn new(
        d_u: usize,
        d_x: usize,
        d_v: usize,
        centroids: Matrix,
        config: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let s = config.init_scale;
        let d_m = centroids.cols();
        let mut params = ParamStore::new();
        let proj_s = params.push("generative.proj_s", Matrix::uniform(config.d_p, d_u, s, rng));
        let proj_x = params.push("generative.proj_x", Matrix::uniform(config.d_p, d_x, s, rng));
        let proj_x_bias = params.push("generative.proj_x_bias", Matrix::zeros(config.d_p, 1));
        let ffn = FfnSpec::register(
            2 * config.d_p,
            config.hidden.clone(),
            config.d_c,
            config.activation,
            "generative.ffn",
            s,
            &mut params,
            rng,
        );
        let w_m = params.push("generative.w_m", Matrix::uniform(config.d_c, d_m, s, rng));
        let w_j = params.push("generative.w_j", Matrix::uniform(config.d_b, d_m, s, rng));
        let w_v = params.push("generative.w_v", Matrix::uniform(config.d_b, d_v, s, rng));
        let intents = params.push("generative.intents", centroids);
        Self {
            params,
            ffn,
            tau: config.tau,
            proj_s,
            proj_x,
            proj_x_bias,
            w_m,
            w_j,
            w_v,
            intents,
        }
    }

    pub fn centroids(&self) -> &Matrix {
        self.params.get(self.intents)
    }

    pub fn k(&self) -> usize {
        self.centroids().rows()
    }

    pub fn d_u(&self) -> usize {
        self.params.get(self.proj_s).cols()
    }

    pub fn d_x(&self) -> usize {
        self.params.get(self.proj_x).cols()
    }

    pub fn d_v(&self) -> usize {
        self.params.get(self.w_v).cols()
    }

    /// `W_v v`.
    pub fn project_item(&self, v: &[f64]) -> Result<Vec<f64>, ModelError> {
        check("item embedding", self.d_v(), v.len())?;
        Ok(self.params.get(self.w_v).matvec(v))
    }

    pub fn forward(&self, s: &[f64], x: &[f64]) -> Result<PriorForward, ModelError> {
        check("generative sequence embedding", self.d_u(), s.len())?;
        check("text embedding", self.d_x(), x.len())?;
        let mut z = self.params.get(self.proj_s).matvec(s);
        let mut px = self.params.get(self.proj_x).matvec(x);
        for (p, b) in px.iter_mut().zip(self.params.get(self.proj_x_bias).as_slice()) {
            *p += b;
        }
        z.extend(px);
        let ffn = self.ffn.forward(&self.params, &z)?;
        let m = self.centroids();
        let wm: Vec<Vec<f64>> = (0..m.rows())
            .map(|j| self.params.get(self.w_m).matvec(m.row(j)))
            .collect();
        let intent_aff = (0..m.rows())
            .map(|j| self.params.get(self.w_j).matvec(m.row(j)))
            .collect();
        let b: Vec<f64> = wm.iter().map(|w| dot(&ffn.output, w)).collect();
        let log_f = log_softmax(&b);
        let f = softmax(&b);
        Ok(PriorForward {
            ffn,
            wm,
            intent_aff,
            b,
            log_f,
            f,
        })
    }

    /// Posterior over intents given an item: `w_j ∝ f_j · exp(τ g_j(v))`.
    pub fn posterior_from(&self, fwd: &PriorForward, ratios: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = fwd
            .log_f
            .iter()
            .zip(ratios)
            .map(|(lf, g)| lf + self.tau * g)
            .collect();
        softmax(&logits)
    }

    /// Accumulates generative gradients (including the centroid slot) given
    /// `dL/db` and, for each scored item `(v, W_v v)`, `dL/da(v, ·)`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        s: &[f64],
        x: &[f64],
        fwd: &PriorForward,
        d_b: &[f64],
        items: &[(&[f64], &[f64])],
        d_a: &[Vec<f64>],
        grads: &mut Grads,
    ) {
        let m = self.centroids();
        let k = m.rows();
        let mut d_m = Matrix::zeros(k, m.cols());

        // affinity path
        for j in 0..k {
            let mut d_aff = vec![0.0; fwd.intent_aff[j].len()];
            for ((v, proj), da) in items.iter().zip(d_a) {
                if da[j] == 0.0 {
                    continue;
                }
                crate::nn::axpy(da[j], proj, &mut d_aff);
                grads.get_mut(self.w_v).add_outer(da[j], &fwd.intent_aff[j], v);
            }
            grads.get_mut(self.w_j).add_outer(1.0, &d_aff, m.row(j));
            let dm = self.params.get(self.w_j).matvec_t(&d_aff);
            crate::nn::axpy(1.0, &dm, d_m.row_mut(j));
        }

        // context-intent logit path
        let c = fwd.context();
        let mut d_c = vec![0.0; c.len()];
        for j in 0..k {
            if d_b[j] == 0.0 {
                continue;
            }
            crate::nn::axpy(d_b[j], &fwd.wm[j], &mut d_c);
            grads.get_mut(self.w_m).add_outer(d_b[j], c, m.row(j));
            let dm = self.params.get(self.w_m).matvec_t(c);
            crate::nn::axpy(d_b[j], &dm, d_m.row_mut(j));
        }
        grads.get_mut(self.intents).add_scaled(1.0, &d_m);

        let d_z = self.ffn.backward(&self.params, &fwd.ffn, &d_c, grads);
        let d_p = self.params.get(self.proj_s).rows();
        grads.get_mut(self.proj_s).add_outer(1.0, &d_z[..d_p], s);
        grads.get_mut(self.proj_x).add_outer(1.0, &d_z[d_p..], x);
        crate::nn::axpy(1.0, &d_z[d_p..], grads.get_mut(self.proj_x_bias).as_mut_slice());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item: ItemIdx,
    pub score: f64,
}

/// Both halves of the latent-intent recommender.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCrs {
    pub inference: InferenceModel,
    pub generative: GenerativeModel,
}

impl LatentCrs {
    pub fn new(
        d_u: usize,
        d_v: usize,
        d_x: usize,
        centroids: Matrix,
        config: &ModelConfig,
    ) -> Result<Self, ModelError> {
        if centroids.cols() != d_u {
            return Err(ModelError::Dimension {
                context: "intent centroid",
                expected: d_u,
                actual: centroids.cols(),
            });
        }
        if centroids.rows() == 0 {
            return Err(ModelError::Config("at least one intent is required".into()));
        }
        if !(config.tau > 0.0 && config.tau.is_finite()) {
            return Err(ModelError::Config(format!("tau must be positive, got {}", config.tau)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d_m = centroids.cols();
        let inference = InferenceModel::new(d_u, d_m, d_v, config, &mut rng);
        let generative = GenerativeModel::new(d_u, d_x, d_v, centroids, config, &mut rng);
        Ok(Self {
            inference,
            generative,
        })
    }

    pub fn centroids(&self) -> &Matrix {
        self.generative.centroids()
    }

    pub fn infer_q(&self, s: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.inference.forward(s, self.centroids())?.q)
    }

    pub fn prior_f(&self, s: &[f64], x: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.generative.forward(s, x)?.f)
    }

    pub fn ratio_g(&self, v: &[f64], j: usize, s: &[f64], x: &[f64]) -> Result<f64, ModelError> {
        let fwd = self.generative.forward(s, x)?;
        if j >= fwd.k() {
            return Err(ModelError::Dimension {
                context: "intent index",
                expected: fwd.k(),
                actual: j,
            });
        }
        Ok(fwd.ratios(&self.generative.project_item(v)?)[j])
    }

    pub fn mixture_h(&self, v: &[f64], s: &[f64], x: &[f64]) -> Result<f64, ModelError> {
        let fwd = self.generative.forward(s, x)?;
        Ok(fwd.mixture(&self.generative.project_item(v)?))
    }

    pub fn posterior(&self, v: &[f64], s: &[f64], x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let fwd = self.generative.forward(s, x)?;
        let g = fwd.ratios(&self.generative.project_item(v)?);
        Ok(self.generative.posterior_from(&fwd, &g))
    }

    /// Scores every row of `item_table`.
    pub fn score_all(
        &self,
        s: &[f64],
        x: &[f64],
        item_table: &Matrix,
        mode: RankMode,
    ) -> Result<Vec<f64>, ModelError> {
        let fwd = self.generative.forward(s, x)?;
        (0..item_table.rows())
            .map(|i| {
                let proj = self.generative.project_item(item_table.row(i))?;
                Ok(match mode {
                    RankMode::Full => fwd.mixture(&proj),
                    RankMode::CondIndep => dot(&fwd.f, &fwd.affinities(&proj)),
                })
            })
            .collect()
    }

    /// Scores `candidates` (rows of `item_table`) and returns the best
    /// `top_k`, descending by score with ties broken by ascending item id.
    #[allow(clippy::too_many_arguments)]
    pub fn rank_items(
        &self,
        s: &[f64],
        x: &[f64],
        item_table: &Matrix,
        item_ids: &[String],
        candidates: &[ItemIdx],
        mode: RankMode,
        top_k: usize,
    ) -> Result<Vec<ScoredItem>, ModelError> {
        if candidates.is_empty() {
            return Err(ModelError::EmptyCandidates);
        }
        let fwd = self.generative.forward(s, x)?;
        let mut scored = Vec::with_capacity(candidates.len());
        for &item in candidates {
            let proj = self.generative.project_item(item_table.row(item.index()))?;
            let score = match mode {
                RankMode::Full => fwd.mixture(&proj),
                RankMode::CondIndep => dot(&fwd.f, &fwd.affinities(&proj)),
            };
            scored.push(ScoredItem { item, score });
        }
        sort_ranked(&mut scored, item_ids);
        scored.dedup_by_key(|s| s.item);
        scored.truncate(top_k);
        Ok(scored)
    }
}

/// Descending score, ties by ascending item id (then index, for duplicates).
pub fn sort_ranked(scored: &mut [ScoredItem], item_ids: &[String]) {
    scored.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| item_ids[a.item.index()].cmp(&item_ids[b.item.index()]))
            .then_with(|| a.item.cmp(&b.item))
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{log_sum_exp, Activation};
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_a: 3,
            d_p: 3,
            d_c: 4,
            d_b: 3,
            hidden: vec![5],
            activation: Activation::Tanh,
            tau: 1.0,
            init_scale: 0.8,
            seed: 3,
        }
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn model(k: usize, seed: u64) -> (LatentCrs, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cent = Matrix::uniform(k, 4, 1.0, &mut rng);
        let mut c = cfg();
        c.seed = seed;
        (LatentCrs::new(4, 5, 6, cent, &c).unwrap(), rng)
    }

    // Straight-line recomputation of the context vector.
    fn oracle_context(m: &GenerativeModel, s: &[f64], x: &[f64]) -> Vec<f64> {
        let p = &m.params;
        let ps = p.get(m.proj_s);
        let px = p.get(m.proj_x);
        let mut z = vec![];
        for r in 0..ps.rows() {
            z.push((0..s.len()).map(|c| ps[(r, c)] * s[c]).sum::<f64>());
        }
        for r in 0..px.rows() {
            z.push((0..x.len()).map(|c| px[(r, c)] * x[c]).sum::<f64>() + p.get(m.proj_x_bias)[(r, 0)]);
        }
        let mut h = z;
        let layers = m.ffn.num_layers();
        for l in 0..layers {
            let w = p.get(m.ffn.first_slot + 2 * l);
            let b = p.get(m.ffn.first_slot + 2 * l + 1);
            let mut o: Vec<f64> = (0..w.rows())
                .map(|r| (0..w.cols()).map(|c| w[(r, c)] * h[c]).sum::<f64>() + b[(r, 0)])
                .collect();
            if l + 1 < layers {
                o.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = o;
        }
        h
    }

    fn mv(w: &Matrix, x: &[f64]) -> Vec<f64> {
        (0..w.rows())
            .map(|r| (0..w.cols()).map(|c| w[(r, c)] * x[c]).sum())
            .collect()
    }

    fn oracle_b(m: &GenerativeModel, s: &[f64], x: &[f64]) -> Vec<f64> {
        let c = oracle_context(m, s, x);
        let cent = m.centroids();
        (0..cent.rows())
            .map(|j| dot(&c, &mv(m.params.get(m.w_m), cent.row(j))))
            .collect()
    }

    fn oracle_g(m: &GenerativeModel, v: &[f64], s: &[f64], x: &[f64]) -> Vec<f64> {
        let b = oracle_b(m, s, x);
        let cent = m.centroids();
        let wv = mv(m.params.get(m.w_v), v);
        (0..cent.rows())
            .map(|j| dot(&mv(m.params.get(m.w_j), cent.row(j)), &wv) * b[j])
            .collect()
    }

    fn oracle_softmax(x: &[f64]) -> Vec<f64> {
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        x.iter().map(|v| v.exp() / z).collect()
    }

    #[test]
    fn q_matches_formula() {
        let (m, mut rng) = model(3, 1);
        let s = rand_vec(4, &mut rng);
        let q = m.infer_q(&s).unwrap();
        let inf = &m.inference.params;
        let qs = mv(inf.get(W_Q), &s);
        let logits: Vec<f64> = (0..3)
            .map(|j| dot(&qs, &mv(inf.get(W_K), m.centroids().row(j))) / 2.0)
            .collect();
        for (a, b) in q.iter().zip(oracle_softmax(&logits)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_query_gives_uniform_q() {
        let (mut m, mut rng) = model(4, 2);
        m.inference.params.get_mut(W_Q).fill(0.0);
        let q = m.infer_q(&rand_vec(4, &mut rng)).unwrap();
        assert!(q.iter().all(|p| (p - 0.25).abs() < 1e-15));
        let (m1, _) = model(1, 2);
        assert_eq!(m1.infer_q(&[0.1, 0.2, 0.3, 0.4]).unwrap(), vec![1.0]);
    }

    #[test]
    fn f_g_h_posterior_match_oracle() {
        let (m, mut rng) = model(3, 4);
        let (s, x, v) = (rand_vec(4, &mut rng), rand_vec(6, &mut rng), rand_vec(5, &mut rng));
        let b = oracle_b(&m.generative, &s, &x);
        let f = oracle_softmax(&b);
        for (a, o) in m.prior_f(&s, &x).unwrap().iter().zip(&f) {
            assert!((a - o).abs() < 1e-10);
        }
        let g = oracle_g(&m.generative, &v, &s, &x);
        for (j, gj) in g.iter().enumerate() {
            assert!((m.ratio_g(&v, j, &s, &x).unwrap() - gj).abs() < 1e-10);
        }
        let h: f64 = f.iter().zip(&g).map(|(a, b)| a * b).sum();
        assert!((m.mixture_h(&v, &s, &x).unwrap() - h).abs() < 1e-10);
        let w: Vec<f64> = f.iter().zip(&g).map(|(f, g)| f * g.exp()).collect();
        let z: f64 = w.iter().sum();
        for (a, o) in m.posterior(&v, &s, &x).unwrap().iter().zip(&w) {
            assert!((a - o / z).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_context_gives_uniform_prior() {
        let (mut m, mut rng) = model(4, 5);
        let g = &mut m.generative;
        let last = g.ffn.first_slot + 2 * (g.ffn.num_layers() - 1);
        g.params.get_mut(last).fill(0.0);
        g.params.get_mut(last + 1).fill(0.0);
        let f = m.prior_f(&rand_vec(4, &mut rng), &rand_vec(6, &mut rng)).unwrap();
        assert!(f.iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn duplicate_centroids_share_prior_mass() {
        let (mut m, mut rng) = model(3, 6);
        let row = m.centroids().row(1).to_vec();
        let slot = m.generative.intents;
        m.generative.params.get_mut(slot).row_mut(2).copy_from_slice(&row);
        let f = m.prior_f(&rand_vec(4, &mut rng), &rand_vec(6, &mut rng)).unwrap();
        assert_eq!(f[1], f[2]);
    }

    #[test]
    fn g_is_linear_in_v_and_zero_without_w_v() {
        let (mut m, mut rng) = model(2, 7);
        let (s, x, v) = (rand_vec(4, &mut rng), rand_vec(6, &mut rng), rand_vec(5, &mut rng));
        let v2: Vec<f64> = v.iter().map(|a| 2.0 * a).collect();
        for j in 0..2 {
            let g1 = m.ratio_g(&v, j, &s, &x).unwrap();
            let g2 = m.ratio_g(&v2, j, &s, &x).unwrap();
            assert!((g2 - 2.0 * g1).abs() < 1e-12);
        }
        let wv = m.generative.w_v;
        m.generative.params.get_mut(wv).fill(0.0);
        assert_eq!(m.ratio_g(&v, 0, &s, &x).unwrap(), 0.0);
        assert_eq!(m.mixture_h(&v, &s, &x).unwrap(), 0.0);
    }

    #[test]
    fn single_intent_degenerate_cases() {
        let (m, mut rng) = model(1, 8);
        let (s, x, v) = (rand_vec(4, &mut rng), rand_vec(6, &mut rng), rand_vec(5, &mut rng));
        assert_eq!(m.prior_f(&s, &x).unwrap(), vec![1.0]);
        assert_eq!(m.posterior(&v, &s, &x).unwrap(), vec![1.0]);
        let h = m.mixture_h(&v, &s, &x).unwrap();
        assert!((h - m.ratio_g(&v, 0, &s, &x).unwrap()).abs() < 1e-15);
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("item{i:02}")).collect()
    }

    #[test]
    fn ranking_matches_brute_force() {
        let (m, mut rng) = model(3, 9);
        let table = Matrix::uniform(5, 5, 1.0, &mut rng);
        let (s, x) = (rand_vec(4, &mut rng), rand_vec(6, &mut rng));
        let all: Vec<ItemIdx> = (0..5).map(ItemIdx).collect();
        for mode in [RankMode::Full, RankMode::CondIndep] {
            let got = m.rank_items(&s, &x, &table, &ids(5), &all, mode, 5).unwrap();
            let f = m.prior_f(&s, &x).unwrap();
            let mut brute: Vec<(f64, u32)> = (0..5u32)
                .map(|i| {
                    let v = table.row(i as usize);
                    let sc = match mode {
                        RankMode::Full => m.mixture_h(v, &s, &x).unwrap(),
                        RankMode::CondIndep => {
                            let g = oracle_g(&m.generative, v, &s, &x);
                            let b = oracle_b(&m.generative, &s, &x);
                            (0..3).map(|j| f[j] * g[j] / b[j]).sum()
                        }
                    };
                    (sc, i)
                })
                .collect();
            brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let order: Vec<u32> = got.iter().map(|s| s.item.0).collect();
            assert_eq!(order, brute.iter().map(|b| b.1).collect::<Vec<_>>());
            for (g, b) in got.iter().zip(&brute) {
                assert!((g.score - b.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn ranking_ties_use_item_id_and_ignore_input_order() {
        let (m, _) = model(2, 10);
        let table = Matrix::zeros(4, 5); // every score is zero
        let ids = vec!["d".to_string(), "b".into(), "a".into(), "c".into()];
        let fwd: Vec<ItemIdx> = (0..4).map(ItemIdx).collect();
        let rev: Vec<ItemIdx> = fwd.iter().rev().copied().collect();
        let s = [0.1; 4];
        let x = [0.2; 6];
        let a = m.rank_items(&s, &x, &table, &ids, &fwd, RankMode::Full, 3).unwrap();
        let b = m.rank_items(&s, &x, &table, &ids, &rev, RankMode::Full, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|s| s.item.0).collect::<Vec<_>>(), vec![2, 1, 3]);
        assert!(matches!(
            m.rank_items(&s, &x, &table, &ids, &[], RankMode::Full, 3),
            Err(ModelError::EmptyCandidates)
        ));
    }

    #[test]
    fn single_intent_modes_agree_when_logit_positive() {
        for seed in 0..20 {
            let (m, mut rng) = model(1, 100 + seed);
            let table = Matrix::uniform(6, 5, 1.0, &mut rng);
            let (s, x) = (rand_vec(4, &mut rng), rand_vec(6, &mut rng));
            let b = m.generative.forward(&s, &x).unwrap().b[0];
            if b <= 0.0 {
                continue;
            }
            let all: Vec<ItemIdx> = (0..6).map(ItemIdx).collect();
            let order = |mode| {
                m.rank_items(&s, &x, &table, &ids(6), &all, mode, 6)
                    .unwrap()
                    .iter()
                    .map(|s| s.item)
                    .collect::<Vec<_>>()
            };
            assert_eq!(order(RankMode::Full), order(RankMode::CondIndep));
        }
    }

    #[test]
    fn dimension_errors() {
        let (m, _) = model(2, 11);
        assert!(m.infer_q(&[1.0]).is_err());
        assert!(m.prior_f(&[0.0; 4], &[0.0; 2]).is_err());
        assert!(m.ratio_g(&[0.0; 5], 7, &[0.0; 4], &[0.0; 6]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn distributions_are_valid(seed in 0u64..1000, k in 1usize..5, scale in 0.1f64..20.0) {
            let (m, mut rng) = model(k, seed);
            let s: Vec<f64> = rand_vec(4, &mut rng).iter().map(|v| v * scale).collect();
            let x = rand_vec(6, &mut rng);
            let v = rand_vec(5, &mut rng);
            for d in [m.infer_q(&s).unwrap(), m.prior_f(&s, &x).unwrap(), m.posterior(&v, &s, &x).unwrap()] {
                prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(d.iter().all(|&p| p > 0.0));
            }
        }

        #[test]
        fn constant_g_posterior_is_prior(seed in 0u64..1000, k in 1usize..6, g in -5.0f64..5.0) {
            let (m, mut rng) = model(k, seed);
            let fwd = m.generative.forward(&rand_vec(4, &mut rng), &rand_vec(6, &mut rng)).unwrap();
            let post = m.generative.posterior_from(&fwd, &vec![g; k]);
            for (p, f) in post.iter().zip(&fwd.f) {
                prop_assert!((p - f).abs() <= 1e-12);
            }
            prop_assert!((log_sum_exp(&fwd.log_f)).abs() < 1e-12);
        }
    }
}
