//! Pretrained behaviour-sequence encoder.
//!
//! Items get a learned embedding row. A sequence is pooled with exponentially
//! decaying recency weights (`gamma^(L-t)`, newest item weight 1) and passed
//! through a small feed-forward head. Pretraining is a sampled-softmax
//! next-item objective scored as `encode(prefix) · W_p · v_target`.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ItemIdx, TrainSequence};
use crate::nn::{
    log_sum_exp, softmax, Activation, Adam, AdamConfig, FfnSpec, Grads, Matrix, NnError,
    ParamStore,
};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("unknown item index {0}")]
    UnknownItem(u32),
    #[error("cannot encode an empty sequence")]
    EmptySequence,
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("pretraining diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Anything that can embed items and behaviour sequences.
pub trait SequenceEncoder: Send + Sync {
    fn item_dim(&self) -> usize;
    fn sequence_dim(&self) -> usize;
    fn num_items(&self) -> usize;
    fn item_embedding(&self, item: ItemIdx) -> Result<&[f64], EncoderError>;
    fn encode_sequence(&self, items: &[ItemIdx]) -> Result<Vec<f64>, EncoderError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_v: usize,
    pub d_u: usize,
    /// Hidden widths of the output head; empty means a single affine layer.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub gamma: f64,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_v: 64,
            d_u: 64,
            hidden: vec![64],
            activation: Activation::Tanh,
            gamma: 0.8,
            negatives: 64,
            epochs: 20,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
            init_scale: 0.05,
        }
    }
}

const ITEMS: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorEncoder {
    pub item_ids: Vec<String>,
    pub gamma: f64,
    pub head: FfnSpec,
    pub w_p_slot: usize,
    pub params: ParamStore,
}

/// One pretraining example with its sampled negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInstance {
    pub context: Vec<ItemIdx>,
    pub target: ItemIdx,
    pub negatives: Vec<ItemIdx>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainHistory {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
}

impl BehaviorEncoder {
    pub fn new(item_ids: Vec<String>, config: &EncoderConfig) -> Result<Self, EncoderError> {
        if !(config.gamma > 0.0 && config.gamma <= 1.0) {
            return Err(EncoderError::Config(format!(
                "gamma must be in (0, 1], got {}",
                config.gamma
            )));
        }
        if config.d_v == 0 || config.d_u == 0 || item_ids.is_empty() {
            return Err(EncoderError::Config("dimensions and catalog must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let s = config.init_scale;
        params.push("items", Matrix::uniform(item_ids.len(), config.d_v, s, &mut rng));
        let head = FfnSpec::register(
            config.d_v,
            config.hidden.clone(),
            config.d_u,
            config.activation,
            "head",
            s,
            &mut params,
            &mut rng,
        );
        let w_p_slot = params.push("w_p", Matrix::uniform(config.d_u, config.d_v, s, &mut rng));
        Ok(Self {
            item_ids,
            gamma: config.gamma,
            head,
            w_p_slot,
            params,
        })
    }

    /// The `|V| x d_v` item embedding table.
    pub fn item_table(&self) -> &Matrix {
        self.params.get(ITEMS)
    }

    fn check_item(&self, item: ItemIdx) -> Result<(), EncoderError> {
        if item.index() >= self.item_ids.len() {
            Err(EncoderError::UnknownItem(item.0))
        } else {
            Ok(())
        }
    }

    /// Recency-weighted mean of item rows; weights normalised to sum 1.
    fn pool(&self, items: &[ItemIdx]) -> Result<(Vec<f64>, Vec<f64>), EncoderError> {
        if items.is_empty() {
            return Err(EncoderError::EmptySequence);
        }
        let table = self.params.get(ITEMS);
        let len = items.len();
        let mut weights: Vec<f64> = (0..len)
            .map(|t| self.gamma.powi((len - 1 - t) as i32))
            .collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let mut pooled = vec![0.0; table.cols()];
        for (&item, &w) in items.iter().zip(&weights) {
            self.check_item(item)?;
            crate::nn::axpy(w, table.row(item.index()), &mut pooled);
        }
        Ok((pooled, weights))
    }

    /// Sampled-softmax loss and gradients averaged over `batch`.
    pub fn batch_loss(&self, batch: &[EncoderInstance]) -> Result<(f64, Grads), EncoderError> {
        let mut grads = Grads::zeros_like(&self.params);
        let mut total = 0.0;
        let table = self.params.get(ITEMS);
        let w_p = self.params.get(self.w_p_slot);
        let scale = 1.0 / batch.len().max(1) as f64;
        for inst in batch {
            let (pooled, weights) = self.pool(&inst.context)?;
            let cache = self.head.forward(&self.params, &pooled)?;
            let u = &cache.output;
            let proj = w_p.matvec_t(u); // W_p^T u, length d_v
            let mut cands = Vec::with_capacity(inst.negatives.len() + 1);
            cands.push(inst.target);
            cands.extend(&inst.negatives);
            let mut logits = Vec::with_capacity(cands.len());
            for &c in &cands {
                self.check_item(c)?;
                logits.push(crate::nn::dot(&proj, table.row(c.index())));
            }
            total += log_sum_exp(&logits) - logits[0];

            let mut dlogit = softmax(&logits);
            dlogit[0] -= 1.0;
            let mut du = vec![0.0; u.len()];
            for (&c, &d) in cands.iter().zip(&dlogit) {
                let d = d * scale;
                let row = table.row(c.index());
                crate::nn::axpy(d, &proj, grads.get_mut(ITEMS).row_mut(c.index()));
                grads.get_mut(self.w_p_slot).add_outer(d, u, row);
                let wv = w_p.matvec(row);
                crate::nn::axpy(d, &wv, &mut du);
            }
            let dpooled = self.head.backward(&self.params, &cache, &du, &mut grads);
            for (&item, &w) in inst.context.iter().zip(&weights) {
                crate::nn::axpy(w, &dpooled, grads.get_mut(ITEMS).row_mut(item.index()));
            }
        }
        Ok((total * scale, grads))
    }
}

impl SequenceEncoder for BehaviorEncoder {
    fn item_dim(&self) -> usize {
        self.params.get(ITEMS).cols()
    }

    fn sequence_dim(&self) -> usize {
        self.head.output
    }

    fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    fn item_embedding(&self, item: ItemIdx) -> Result<&[f64], EncoderError> {
        self.check_item(item)?;
        Ok(self.params.get(ITEMS).row(item.index()))
    }

    fn encode_sequence(&self, items: &[ItemIdx]) -> Result<Vec<f64>, EncoderError> {
        let (pooled, _) = self.pool(items)?;
        Ok(self.head.forward(&self.params, &pooled)?.output)
    }
}

/// Draws `n` items uniformly without replacement from the catalog minus `target`.
pub(crate) fn uniform_negatives(
    num_items: usize,
    target: ItemIdx,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<ItemIdx> {
    let pool = num_items - 1;
    let n = n.min(pool);
    index::sample(rng, pool, n)
        .into_iter()
        .map(|i| {
            let i = if i >= target.index() { i + 1 } else { i };
            ItemIdx(i as u32)
        })
        .collect()
}

/// Training pairs `(prefix, next item)` from sequences of length ≥ 2.
pub fn encoder_instances(sequences: &[TrainSequence]) -> Vec<(Vec<ItemIdx>, ItemIdx)> {
    sequences
        .iter()
        .filter(|s| s.items.len() >= 2)
        .map(|s| (s.context().to_vec(), s.target().unwrap()))
        .collect()
}

pub fn pretrain_encoder(
    item_ids: Vec<String>,
    sequences: &[TrainSequence],
    config: &EncoderConfig,
) -> Result<(BehaviorEncoder, PretrainHistory), EncoderError> {
    let mut encoder = BehaviorEncoder::new(item_ids, config)?;
    let pairs = encoder_instances(sequences);
    if pairs.is_empty() {
        return Err(EncoderError::Config("no training pairs".into()));
    }
    if encoder.num_items() < 2 {
        return Err(EncoderError::Config("need at least two items".into()));
    }
    let mut history = PretrainHistory::default();
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), &encoder.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_e0c0);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size.max(1)).enumerate() {
            let batch: Vec<EncoderInstance> = chunk
                .iter()
                .map(|&i| EncoderInstance {
                    context: pairs[i].0.clone(),
                    target: pairs[i].1,
                    negatives: uniform_negatives(
                        encoder.num_items(),
                        pairs[i].1,
                        config.negatives,
                        &mut rng,
                    ),
                })
                .collect();
            let (loss, grads) = encoder.batch_loss(&batch)?;
            if !loss.is_finite() {
                return Err(EncoderError::Diverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            epoch_loss += loss * batch.len() as f64;
            adam.step(&mut encoder.params, &grads)?;
        }
        let mean = epoch_loss / pairs.len() as f64;
        log::debug!("encoder epoch {epoch}: loss {mean:.5}");
        history.epoch_loss.push(mean);
    }
    Ok((encoder, history))
}
