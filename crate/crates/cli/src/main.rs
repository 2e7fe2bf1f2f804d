use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use latentcrs::checkpoint::{self, Kind};
use latentcrs::conversation::Variant;
use latentcrs::corpus::{leave_last_out_split, load_snapshot, save_snapshot, Dataset};
use latentcrs::encoder::BehaviorEncoder;
use latentcrs::eval::synth::{generate, write_corpus, SynthConfig};
use latentcrs::eval::{
    first_utterance, simulate_dialogue, simulate_user, sweep, sweep_csv, AttributeStats, EvalReport, Grid,
};
use latentcrs::intents::IntentSpace;
use latentcrs::pipeline::{
    evaluate_multi_turn, evaluate_one_turn, fit_intents, ingest, prepare, pretrain, train_all, train_em,
    user_embeddings, Bundle, PipelineConfig,
};
use latentcrs::text_embed::TextEmbedder;
use latentcrs_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "crs", version, about = "Latent-intent conversational recommender")]
struct Cli {
    /// Master seed; overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load items + interactions, apply k-core, save a dataset snapshot.
    Ingest {
        #[arg(long)]
        items: Option<PathBuf>,
        #[arg(long)]
        interactions: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        k_core: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the behaviour encoder.
    PretrainEncoder {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// K-means over user behaviour embeddings.
    FitIntents {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Three-stage EM training; writes the deployable bundle.
    TrainEm {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        intents: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training history.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Run every training step from a dataset snapshot.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Recall/NDCG@k of first-turn recommendations on held-out targets
    EvalOneturn {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Simulated dialogues on held-out targets: S@3, S@5, AT
    EvalMultiturn {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value = "F")]
        variant: Variant,
    },
    /// Train and evaluate one-turn Recall/NDCG per grid point; writes CSV.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed every item's simulated description into the persistent cache.
    WarmCache {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Run the HTTP service until interrupted.
    Serve {
        /// Service configuration (TOML).
        #[arg(long)]
        service_config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Play one simulated dialogue and print the transcript.
    Simulate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long, default_value = "F")]
        variant: Variant,
    },
    /// Write the planted-intent synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        blocks: Option<usize>,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write `metric,value` CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Record wall-clock runtime in the report.
    #[arg(long)]
    timing: bool,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.embed = cfg.embed.with_env();
    Ok(cfg)
}

fn embedder(cfg: &PipelineConfig) -> Result<TextEmbedder> {
    cfg.embed.build().context("building text embedder")
}

fn dataset(path: &Path) -> Result<Dataset> {
    load_snapshot(path).with_context(|| format!("loading dataset snapshot {}", path.display()))
}

fn bundle(path: &Path) -> Result<Bundle> {
    Ok(Bundle::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?.0)
}

fn write_report(report: &mut EvalReport, args: &EvalArgs, started: std::time::Instant) -> Result<()> {
    if args.timing {
        report.runtime_secs = Some(started.elapsed().as_secs_f64());
    }
    match &args.out {
        Some(p) => std::fs::write(p, report.to_json()).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{}", report.to_json()),
    }
    if let Some(p) = &args.csv {
        std::fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Ingest {
            items,
            interactions,
            schema,
            k_core,
            out,
        } => {
            let mut data = cfg.data.clone();
            data.items = items.clone().or(data.items);
            data.interactions = interactions.clone().or(data.interactions);
            data.schema = schema.clone().or(data.schema);
            data.k_core = k_core.unwrap_or(data.k_core);
            let ds = ingest(&data)?;
            save_snapshot(&ds, out)?;
            log::info!(
                "{} users, {} items, {} interactions → {}",
                ds.sequences.len(),
                ds.catalog.len(),
                ds.num_actions(),
                out.display()
            );
        }
        Command::PretrainEncoder { dataset: d, out } => {
            let ds = dataset(d)?;
            let prepared = prepare(&ds, &cfg)?;
            let encoder = pretrain(&ds, &prepared, &cfg)?;
            let fp = checkpoint::save(out, Kind::Encoder, &encoder)?;
            log::info!("encoder {} ({fp})", out.display());
        }
        Command::FitIntents { dataset: d, encoder, out } => {
            let ds = dataset(d)?;
            let (enc, _): (BehaviorEncoder, _) = checkpoint::load(encoder, Kind::Encoder)?;
            let split = leave_last_out_split(&ds);
            let fit = fit_intents(&user_embeddings(&enc, &split)?, &cfg)?;
            let fp = checkpoint::save(out, Kind::Intents, &fit.space)?;
            log::info!(
                "K={} after {} iterations, inertia {:.4} → {} ({fp})",
                fit.space.k(),
                fit.iterations,
                fit.inertia.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::TrainEm {
            dataset: d,
            encoder,
            intents,
            out,
            history,
        } => {
            let ds = dataset(d)?;
            let (enc, _): (BehaviorEncoder, _) = checkpoint::load(encoder, Kind::Encoder)?;
            let (space, _): (IntentSpace, _) = checkpoint::load(intents, Kind::Intents)?;
            if space.k() != cfg.train.k {
                bail!("intents checkpoint has K={} but config says k={}", space.k(), cfg.train.k);
            }
            let emb = embedder(&cfg)?;
            let prepared = prepare(&ds, &cfg)?;
            let outcome = train_em(&ds, &prepared, &enc, &space, &emb, &cfg.train)?;
            let users = user_embeddings(&enc, &prepared.split)?;
            let b = Bundle::assemble(&ds.catalog, enc, space, outcome.model.clone(), cfg.train.clone(), &users, &emb);
            finish_training(&b, out, history.as_deref(), &outcome.history_jsonl())?;
        }
        Command::Train { dataset: d, out, history } => {
            let ds = dataset(d)?;
            let emb = embedder(&cfg)?;
            let sys = train_all(&ds, &cfg, &emb)?;
            finish_training(&sys.bundle, out, history.as_deref(), &sys.outcome.history_jsonl())?;
        }
        Command::EvalOneturn { eval } => {
            let started = std::time::Instant::now();
            let ds = dataset(&eval.dataset)?;
            let b = bundle(&eval.checkpoint)?;
            let split = leave_last_out_split(&ds);
            let mut report = evaluate_one_turn(&b, &split, &embedder(&cfg)?, &cfg)?;
            write_report(&mut report, eval, started)?;
        }
        Command::EvalMultiturn { eval, variant } => {
            let started = std::time::Instant::now();
            let ds = dataset(&eval.dataset)?;
            let b = bundle(&eval.checkpoint)?;
            let split = leave_last_out_split(&ds);
            let mut report = evaluate_multi_turn(&b, &split, &embedder(&cfg)?, *variant, &cfg)?;
            write_report(&mut report, eval, started)?;
        }
        Command::Sweep { grid, dataset: d, out } => {
            let text = std::fs::read_to_string(grid).with_context(|| format!("reading {}", grid.display()))?;
            let grid: Grid = toml::from_str(&text).with_context(|| "parsing sweep grid")?;
            let points = grid.points();
            if points.is_empty() {
                bail!("sweep grid is empty");
            }
            let ds = dataset(d)?;
            let emb = embedder(&cfg)?;
            let rows = sweep(&points, |p| {
                let mut c = cfg.clone();
                c.train.k = p.k;
                c.train.lambda = p.lambda;
                c.train.alpha_m = p.alpha_m;
                c.train.alpha_e = p.alpha_e;
                let sys = train_all(&ds, &c, &emb).map_err(|e| e.to_string())?;
                evaluate_one_turn(&sys.bundle, &sys.prepared.split, &emb, &c).map_err(|e| e.to_string())
            });
            std::fs::write(out, sweep_csv(&rows)).with_context(|| format!("writing {}", out.display()))?;
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            log::info!("{} grid point(s), {failed} failed → {}", rows.len(), out.display());
        }
        Command::WarmCache { dataset: d } => {
            if cfg.embed.cache_path.is_none() {
                bail!("embed.cache_path must be set to warm a persistent cache");
            }
            let ds = dataset(d)?;
            let stats = AttributeStats::new(&ds.catalog);
            let texts: Vec<String> = ds
                .catalog
                .indices()
                .filter_map(|i| first_utterance(&ds.catalog, &stats, i))
                .collect();
            let report = embedder(&cfg)?.warm_cache(&texts);
            for (text, e) in &report.failures {
                log::warn!("could not embed {text:?}: {e}");
            }
            log::info!("{} new cache entries, {} failure(s)", report.written, report.failures.len());
            if !report.failures.is_empty() {
                bail!("{} description(s) failed to embed", report.failures.len());
            }
        }
        Command::Serve {
            service_config,
            checkpoint,
            port,
        } => {
            let mut sc = ServiceConfig::load(service_config.as_deref())?;
            if let Some(c) = checkpoint {
                sc.checkpoint = c.clone();
            }
            if let Some(p) = port {
                sc.port = *p;
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(latentcrs_service::run(sc, async {
                let _ = tokio::signal::ctrl_c().await;
                log::info!("shutting down");
            }))?;
        }
        Command::Simulate {
            dataset: d,
            checkpoint,
            user,
            variant,
        } => {
            let ds = dataset(d)?;
            let b = bundle(checkpoint)?;
            let engine = b.engine(&embedder(&cfg)?, &cfg.eval)?;
            let split = leave_last_out_split(&ds);
            let su = split
                .users
                .iter()
                .find(|u| &u.user == user)
                .with_context(|| format!("user `{user}` is not in the test split"))?;
            let stats = AttributeStats::new(&ds.catalog);
            let sim = simulate_user(&ds.catalog, &stats, user, su.test, cfg.eval.max_turns, &cfg.simulator)
                .context("target item has no attributes to describe")?;
            let outcome = simulate_dialogue(&engine, &sim, *variant, Some(su.test_context()))?;
            println!("{}", serde_json::to_string_pretty(&outcome)?);
        }
        Command::Synth { out, users, blocks } => {
            let mut sc = SynthConfig {
                seed: cli.seed.unwrap_or(SynthConfig::default().seed),
                ..SynthConfig::default()
            };
            sc.users = users.unwrap_or(sc.users);
            sc.blocks = blocks.unwrap_or(sc.blocks);
            let corpus = generate(&sc)?;
            write_corpus(&corpus, out)?;
            log::info!("planted corpus written to {}", out.display());
        }
    }
    Ok(())
}

fn finish_training(b: &Bundle, out: &Path, history: Option<&Path>, jsonl: &str) -> Result<()> {
    let fp = b.save(out)?;
    if let Some(h) = history {
        std::fs::write(h, jsonl).with_context(|| format!("writing {}", h.display()))?;
    }
    log::info!("bundle {} ({fp})", out.display());
    Ok(())
}
