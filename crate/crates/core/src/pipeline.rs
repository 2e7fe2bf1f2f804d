//! End-to-end training flow and the deployable bundle.
//!
//! ingest → leave-last-out split → prefix augmentation → encoder pretraining
//! → K-means over user embeddings → three-stage EM → bundle.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointError, Kind};
use crate::conversation::{ConversationError, Engine, LatentRanker, Variant};
use crate::corpus::{
    apply_k_core, augment_sequences, leave_last_out_split, load_dataset, Catalog, CatalogSchema, CorpusError,
    Dataset, InteractionFormat, Item, Split, TrainSequence,
};
use crate::encoder::{pretrain_encoder, BehaviorEncoder, EncoderConfig, EncoderError, SequenceEncoder};
use crate::eval::{
    dialogue_cases, first_utterance, multi_turn_eval, one_turn_cases, one_turn_eval, AttributeStats, EvalReport,
    SimulatorConfig,
};
use crate::intents::{fit_kmeans, IntentError, IntentSpace, KMeansConfig, KMeansFit};
use crate::model::{LatentCrs, ModelError};
use crate::text_embed::{EmbedConfig, EmbedError, TextEmbedder};
use crate::trainer::{prepare_data, run_training, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Intents(#[from] IntentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Conversation(#[from] ConversationError),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub items: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    /// JSON attribute schema; without one every attribute is categorical.
    pub schema: Option<PathBuf>,
    /// `tsv` or `jsonl`; guessed from the extension when unset.
    pub format: Option<String>,
    /// 0 disables k-core filtering.
    pub k_core: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            items: None,
            interactions: None,
            schema: None,
            format: None,
            k_core: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub top_k: usize,
    pub max_turns: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![5, 10, 20],
            top_k: 5,
            max_turns: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub kmeans_max_iters: usize,
    pub embed: EmbedConfig,
    pub train: TrainConfig,
    pub simulator: SimulatorConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            kmeans_max_iters: 200,
            embed: EmbedConfig::default(),
            train: TrainConfig::default(),
            simulator: SimulatorConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Small model sized for the planted-intent corpus.
    pub fn planted() -> Self {
        let mut c = Self::default();
        c.data.k_core = 0;
        c.encoder = EncoderConfig {
            d_v: 16,
            d_u: 16,
            hidden: vec![16],
            negatives: 16,
            epochs: 30,
            lr: 1e-2,
            batch_size: 64,
            init_scale: 0.1,
            ..EncoderConfig::default()
        };
        c.embed.dim = 64;
        c.train.k = 4;
        c.train.negatives = 16;
        c.train.batch_size = 64;
        c.train.stage1_epochs = 15;
        c.train.stage2_epochs = 15;
        c.train.stage3_rounds = 15;
        c.train.lr_stage1 = 5e-3;
        c.train.lr_stage2 = 5e-3;
        c.train.lr_stage3 = 5e-3;
        c.train.model.d_a = 16;
        c.train.model.d_p = 16;
        c.train.model.d_c = 16;
        c.train.model.d_b = 16;
        c.train.model.hidden = vec![16];
        c
    }

    /// Re-seeds every stochastic component from one master seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.encoder.seed = seed;
        self.train.seed = seed;
        self.train.model.seed = seed.wrapping_add(11);
        self.simulator.seed = seed;
        self
    }

    pub fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.train.k,
            seed: self.seed.wrapping_add(7),
            max_iters: self.kmeans_max_iters,
            ..KMeansConfig::default()
        }
    }
}

/// Loads the dataset named by `config` and applies k-core filtering.
pub fn ingest(config: &DataConfig) -> Result<Dataset, PipelineError> {
    let (Some(items), Some(inter)) = (&config.items, &config.interactions) else {
        return Err(PipelineError::Config("data.items and data.interactions are required".into()));
    };
    let schema = match &config.schema {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
            Some(
                serde_json::from_str::<CatalogSchema>(&text)
                    .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?,
            )
        }
        None => None,
    };
    let format = match &config.format {
        Some(f) => f.parse()?,
        None => InteractionFormat::from_path(inter),
    };
    let (dataset, report) = load_dataset(inter, format, items, schema)?;
    if report.dropped_interactions > 0 {
        log::warn!(
            "dropped {} interaction(s) on {} item(s) without metadata",
            report.dropped_interactions,
            report.dropped_item_ids.len()
        );
    }
    if config.k_core > 0 {
        Ok(apply_k_core(&dataset, config.k_core)?)
    } else {
        Ok(dataset)
    }
}

/// Split plus augmented training sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub split: Split,
    pub sequences: Vec<TrainSequence>,
}

pub fn prepare(dataset: &Dataset, config: &PipelineConfig) -> Result<Prepared, PipelineError> {
    let split = leave_last_out_split(dataset);
    if split.users.is_empty() {
        return Err(PipelineError::Config("no user has three or more interactions".into()));
    }
    let t = &config.train;
    let sequences = augment_sequences(&split, t.augment_factor(), t.augment_min_len, config.seed)?;
    Ok(Prepared { split, sequences })
}

pub fn pretrain(dataset: &Dataset, prepared: &Prepared, config: &PipelineConfig) -> Result<BehaviorEncoder, PipelineError> {
    let ids = item_ids(&dataset.catalog);
    let (encoder, history) = pretrain_encoder(ids, &prepared.sequences, &config.encoder)?;
    if let (Some(first), Some(last)) = (history.epoch_loss.first(), history.epoch_loss.last()) {
        log::info!("encoder pretraining: loss {first:.4} → {last:.4}");
    }
    Ok(encoder)
}

/// Behaviour embedding of each split user's training prefix, in split order.
pub fn user_embeddings(encoder: &dyn SequenceEncoder, split: &Split) -> Result<Vec<Vec<f64>>, PipelineError> {
    split
        .users
        .iter()
        .map(|u| Ok(encoder.encode_sequence(u.valid_context())?))
        .collect()
}

pub fn fit_intents(embeddings: &[Vec<f64>], config: &PipelineConfig) -> Result<KMeansFit, PipelineError> {
    Ok(fit_kmeans(embeddings, &config.kmeans())?)
}

fn item_ids(catalog: &Catalog) -> Vec<String> {
    catalog.items().iter().map(|i| i.id.clone()).collect()
}

/// Stage 1–3 training on top of a pretrained encoder and fitted intents.
pub fn train_em(
    dataset: &Dataset,
    prepared: &Prepared,
    encoder: &BehaviorEncoder,
    intents: &IntentSpace,
    embedder: &TextEmbedder,
    train: &TrainConfig,
) -> Result<TrainOutcome, PipelineError> {
    let catalog = &dataset.catalog;
    let stats = AttributeStats::new(catalog);
    let describe = |i| first_utterance(catalog, &stats, i);
    let embed = |t: &str| embedder.embed(t).map(|e| e.vector).map_err(|e| e.to_string());
    let data = prepare_data(
        encoder,
        encoder.item_table().clone(),
        item_ids(catalog),
        &prepared.split,
        &prepared.sequences,
        &describe,
        &embed,
    )?;
    if data.skipped > 0 {
        log::warn!("{} training target(s) had no description and were skipped", data.skipped);
    }
    let model = LatentCrs::new(
        encoder.sequence_dim(),
        encoder.item_dim(),
        embedder.dim(),
        intents.centroids.clone(),
        &train.model,
    )?;
    Ok(run_training(model, &data, train)?)
}

/// Everything the service and evaluators need, saved as one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub schema: CatalogSchema,
    pub items: Vec<Item>,
    pub encoder: BehaviorEncoder,
    pub intents: IntentSpace,
    pub model: LatentCrs,
    pub train: TrainConfig,
    /// Mean training-user behaviour embedding, used for sessions without history.
    pub default_s: Vec<f64>,
    pub embed_provider: String,
    pub embed_dim: usize,
}

impl Bundle {
    pub fn assemble(
        catalog: &Catalog,
        encoder: BehaviorEncoder,
        intents: IntentSpace,
        model: LatentCrs,
        train: TrainConfig,
        user_embeddings: &[Vec<f64>],
        embedder: &TextEmbedder,
    ) -> Self {
        let dim = encoder.sequence_dim();
        let mut default_s = vec![0.0; dim];
        for e in user_embeddings {
            crate::nn::axpy(1.0 / user_embeddings.len() as f64, e, &mut default_s);
        }
        Self {
            schema: catalog.schema().clone(),
            items: catalog.items().to_vec(),
            encoder,
            intents,
            model,
            train,
            default_s,
            embed_provider: embedder.provider_id().to_string(),
            embed_dim: embedder.dim(),
        }
    }

    pub fn catalog(&self) -> Result<Catalog, PipelineError> {
        Ok(Catalog::new(self.schema.clone(), self.items.clone())?)
    }

    pub fn save(&self, path: &Path) -> Result<String, PipelineError> {
        Ok(checkpoint::save(path, Kind::Bundle, self)?)
    }

    /// Loads a bundle and returns it with its fingerprint.
    pub fn load(path: &Path) -> Result<(Self, String), PipelineError> {
        Ok(checkpoint::load(path, Kind::Bundle)?)
    }

    pub fn fingerprint(&self) -> Result<String, PipelineError> {
        Ok(checkpoint::fingerprint(&checkpoint::to_bytes(Kind::Bundle, self)?))
    }

    /// Refuses an embedder that differs from the one used in training.
    pub fn check_embedder(&self, embedder: &TextEmbedder) -> Result<(), PipelineError> {
        if embedder.provider_id() != self.embed_provider || embedder.dim() != self.embed_dim {
            return Err(PipelineError::Config(format!(
                "bundle was trained with embedder `{}` (dim {}), got `{}` (dim {})",
                self.embed_provider,
                self.embed_dim,
                embedder.provider_id(),
                embedder.dim()
            )));
        }
        Ok(())
    }

    pub fn ranker(&self, embedder: &TextEmbedder) -> Result<LatentRanker, PipelineError> {
        self.check_embedder(embedder)?;
        Ok(LatentRanker {
            encoder: Arc::new(self.encoder.clone()),
            model: Arc::new(self.model.clone()),
            embedder: embedder.clone(),
            mode: self.train.rank_mode,
            default_s: self.default_s.clone(),
        })
    }

    pub fn engine(&self, embedder: &TextEmbedder, eval: &EvalConfig) -> Result<Engine, PipelineError> {
        Ok(Engine::new(Arc::new(self.catalog()?), Arc::new(self.ranker(embedder)?)).with_limits(eval.top_k, eval.max_turns))
    }
}

/// Result of the full training flow.
#[derive(Debug, Clone)]
pub struct TrainedSystem {
    pub bundle: Bundle,
    pub prepared: Prepared,
    pub kmeans: KMeansFit,
    pub outcome: TrainOutcome,
}

pub fn train_all(dataset: &Dataset, config: &PipelineConfig, embedder: &TextEmbedder) -> Result<TrainedSystem, PipelineError> {
    let prepared = prepare(dataset, config)?;
    let encoder = pretrain(dataset, &prepared, config)?;
    let embeddings = user_embeddings(&encoder, &prepared.split)?;
    let kmeans = fit_intents(&embeddings, config)?;
    let outcome = train_em(dataset, &prepared, &encoder, &kmeans.space, embedder, &config.train)?;
    let bundle = Bundle::assemble(
        &dataset.catalog,
        encoder,
        kmeans.space.clone(),
        outcome.model.clone(),
        config.train.clone(),
        &embeddings,
        embedder,
    );
    Ok(TrainedSystem {
        bundle,
        prepared,
        kmeans,
        outcome,
    })
}

pub fn evaluate_one_turn(
    bundle: &Bundle,
    split: &Split,
    embedder: &TextEmbedder,
    config: &PipelineConfig,
) -> Result<EvalReport, PipelineError> {
    let catalog = bundle.catalog()?;
    let cases = one_turn_cases(&catalog, split, &config.simulator);
    let ranker = bundle.ranker(embedder)?;
    Ok(one_turn_eval(&ranker, &catalog, &cases, &config.eval.ks, &bundle.fingerprint()?)?)
}

pub fn evaluate_multi_turn(
    bundle: &Bundle,
    split: &Split,
    embedder: &TextEmbedder,
    variant: Variant,
    config: &PipelineConfig,
) -> Result<EvalReport, PipelineError> {
    let engine = bundle.engine(embedder, &config.eval)?;
    let (cases, skipped) = dialogue_cases(&engine.catalog, split, config.eval.max_turns, &config.simulator);
    let mut report = multi_turn_eval(&engine, &cases, variant, &bundle.fingerprint()?)?;
    report.skipped = skipped;
    Ok(report)
}
