use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dimrank_core::recommender::{fetch_feed, unix_now, Recommender};
use dimrank_core::search::{keyword_search, SharedIndex};
use dimrank_core::sim::{run_simulation, Algorithm, SimConfig};
use dimrank_core::store::latest_checkpoint;
use dimrank_core::trainer::{RunLimit, TrainingServer};
use dimrank_core::{featurize_context, ModelCheckpoint, SessionKind, Store, UserId};
use serde_json::json;
use tracing::info;

use crate::config::ServiceConfig;
use crate::service;
use crate::state::initial_state;

#[derive(Debug, Parser)]
#[command(name = "dimrank", version, about = "Personalized feeds and search from per-user and per-document embeddings")]
pub struct Cli {
    /// TOML configuration file. `DIMRANK_*` environment variables override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `data_dir`.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// HTTP API with in-process training and recommendation workers.
    Serve {
        /// Overrides `listen_address`.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Training server: consumes labeled examples and writes checkpoints.
    Train(TrainArgs),
    /// Recommendation server: fans new posts out into user feeds.
    Recommend {
        /// Keep waiting for new posts instead of stopping when the queue is empty.
        #[arg(long)]
        follow: bool,
    },
    /// Prints and marks read the top of a user's feed.
    Feed {
        #[arg(long)]
        user: u64,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Personalized keyword search.
    Search {
        #[arg(long)]
        user: u64,
        #[arg(long)]
        q: String,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Brigading simulation.
    Simulate(SimulateArgs),
    /// Checkpoint inspection.
    #[command(subcommand)]
    Checkpoint(CheckpointCommand),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Process at most this many examples.
    #[arg(long, conflicts_with = "follow")]
    pub steps: Option<u64>,
    /// Keep waiting for new examples until interrupted.
    #[arg(long)]
    pub follow: bool,
    /// Overrides the trainer seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value = "reddit")]
    pub algorithm: Algorithm,
    #[arg(long, default_value_t = 50)]
    pub community: usize,
    #[arg(long, default_value_t = 50)]
    pub attackers: usize,
    #[arg(long, default_value_t = 200)]
    pub rounds: u32,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub warmup: u32,
    /// Metrics as JSON. Printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-round series as CSV.
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum CheckpointCommand {
    /// Summary of a checkpoint, by default the newest one in the data directory.
    Show { path: Option<PathBuf> },
    /// Checks that a checkpoint decodes and re-encodes to the same bytes.
    Verify { path: Option<PathBuf> },
    /// Lists checkpoints in the data directory.
    List,
}

impl Cli {
    pub fn service_config(&self) -> Result<ServiceConfig> {
        let mut config = ServiceConfig::from_env(self.config.as_deref())?;
        if let Some(dir) = &self.data_dir {
            config.data_dir = dir.clone();
        }
        Ok(config)
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn open_store(config: &ServiceConfig) -> Result<Store> {
    config.prepare_data_dir()?;
    Store::open(&config.data_dir, config.store_options()).with_context(|| format!("opening {}", config.data_dir.display()))
}

/// A flag set by Ctrl-C.
fn interrupt_flag(runtime: &tokio::runtime::Runtime) -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    runtime.spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            flag.store(true, Ordering::SeqCst);
        }
    });
    stop
}

pub fn run(cli: Cli) -> Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    match &cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Checkpoint(cmd) => checkpoint(&cli.service_config()?, cmd),
        Command::Serve { listen } => {
            let mut config = cli.service_config()?;
            if let Some(addr) = listen {
                config.listen_address = addr.clone();
            }
            runtime.block_on(service::serve(config))
        }
        Command::Train(args) => {
            let mut config = cli.service_config()?;
            if let Some(seed) = args.seed {
                config.trainer.seed = seed;
            }
            let stop = interrupt_flag(&runtime);
            train(&config, args, &stop)
        }
        Command::Recommend { follow } => {
            let config = cli.service_config()?;
            let stop = interrupt_flag(&runtime);
            recommend(&config, *follow, &stop)
        }
        Command::Feed { user, limit } => {
            let config = cli.service_config()?;
            let store = open_store(&config)?;
            let state = initial_state(&store, &config)?;
            let items = fetch_feed(&store, UserId(*user), limit.unwrap_or(config.feed_limit), &state, unix_now())?;
            print_json(&items)
        }
        Command::Search { user, q, top_k, alpha } => {
            let config = cli.service_config()?;
            let store = open_store(&config)?;
            let state = initial_state(&store, &config)?;
            let index = SharedIndex::new();
            let posts = store.posts.posts();
            index.index_batch(posts.iter().map(|p| (p.post_id, p.text.as_str())));
            let results = keyword_search(
                &index.snapshot(),
                q,
                UserId(*user),
                &featurize_context(unix_now(), SessionKind::Search),
                top_k.unwrap_or(config.top_k),
                alpha.unwrap_or(config.alpha),
                &state,
                &store.posts,
            )?;
            print_json(&results)
        }
    }
}

pub fn train(config: &ServiceConfig, args: &TrainArgs, stop: &AtomicBool) -> Result<()> {
    let store = open_store(config)?;
    let mut server = TrainingServer::open(&store, config.dims, config.trainer)?;
    let limit = if args.follow {
        RunLimit::Follow
    } else {
        RunLimit::Drain { max_steps: args.steps }
    };
    let stats = server.run(stop, limit, |p| {
        info!(steps = p.steps, loss = p.mean_loss, rate = p.examples_per_sec, "training")
    })?;
    print_json(&json!({
        "processed": stats.processed,
        "skipped": stats.skipped,
        "recovered": stats.recovered,
        "mean_loss": stats.mean_loss,
        "steps": server.trainer().steps(),
        "cursor": server.trainer().cursor(),
        "checkpoint": stats.checkpoint,
    }))
}

pub fn recommend(config: &ServiceConfig, follow: bool, stop: &AtomicBool) -> Result<()> {
    let store = open_store(config)?;
    store.publish_snapshot(&initial_state(&store, config)?);
    let mut recommender = Recommender::new(&store, config.recommender)?;
    let stats = recommender.run(stop, follow)?;
    print_json(&json!({ "posts": stats.posts, "deliveries": stats.deliveries }))
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let config = SimConfig {
        algorithm: args.algorithm,
        community: args.community,
        attackers: args.attackers,
        rounds: args.rounds,
        seed: args.seed,
        warmup_rounds: args.warmup,
        ..SimConfig::default()
    };
    let metrics = run_simulation(&config)?;
    if let Some(path) = &args.out_csv {
        metrics.write_csv(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))?;
    }
    match &args.out {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            serde_json::to_writer_pretty(BufWriter::new(file), &metrics)?;
            eprintln!(
                "{}: suppression {:.3}, visibility {:.3} over {} good posts",
                metrics.algorithm, metrics.suppression_rate, metrics.visibility_rate, metrics.good_posts
            );
            Ok(())
        }
        None => print_json(&metrics),
    }
}

fn resolve_checkpoint(config: &ServiceConfig, path: &Option<PathBuf>) -> Result<PathBuf> {
    match path {
        Some(p) => Ok(p.clone()),
        None => match latest_checkpoint(&config.data_dir.join("checkpoints"))? {
            Some(p) => Ok(p),
            None => bail!("no checkpoints under {}", config.data_dir.display()),
        },
    }
}

fn summary(path: &Path, ckpt: &ModelCheckpoint) -> serde_json::Value {
    json!({
        "path": path,
        "format_version": ckpt.format_version,
        "dims": ckpt.state.dims,
        "hyperparameters": ckpt.hyper,
        "seed": ckpt.state.seed,
        "training_cursor": ckpt.training_cursor,
        "steps": ckpt.steps,
        "skipped": ckpt.skipped,
        "users": ckpt.state.users.len(),
        "documents": ckpt.state.docs.len(),
    })
}

pub fn checkpoint(config: &ServiceConfig, cmd: &CheckpointCommand) -> Result<()> {
    match cmd {
        CheckpointCommand::Show { path } => {
            let path = resolve_checkpoint(config, path)?;
            let ckpt = ModelCheckpoint::load(&path, None)?;
            print_json(&summary(&path, &ckpt))
        }
        CheckpointCommand::Verify { path } => {
            let path = resolve_checkpoint(config, path)?;
            let bytes = std::fs::read(&path)?;
            let ckpt = ModelCheckpoint::decode(&bytes, None)?;
            if ckpt.encode() != bytes {
                bail!("{} does not re-encode to the same bytes", path.display());
            }
            print_json(&json!({ "path": path, "ok": true, "bytes": bytes.len() }))
        }
        CheckpointCommand::List => {
            let dir = config.data_dir.join("checkpoints");
            let mut paths: Vec<PathBuf> = match std::fs::read_dir(&dir) {
                Ok(entries) => entries
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
                    .collect(),
                Err(_) => Vec::new(),
            };
            paths.sort();
            print_json(&paths)
        }
    }
}
