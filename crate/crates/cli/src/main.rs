mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use kgfuse_core::text::TextVariant;

use config::{AlphaPolicy, PretrainSource, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "kgfuse", version, about = "Knowledge-graph link prediction with structural and textual relation graphs")]
struct Cli {
    /// JSON run configuration; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (1 = single-threaded, deterministic scheduling).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Offline mode: replay chat replies from <dir>/chat and embeddings from <dir>/embeddings.json.
    #[arg(long, global = true)]
    fixtures: Option<PathBuf>,
    /// Directory for caches, checkpoints, logs and reports.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// Evaluation dataset directory (repeatable; replaces the config list).
    #[arg(long = "dataset", global = true)]
    datasets: Vec<PathBuf>,
    /// Pretraining dataset directory (repeatable; replaces the config list).
    #[arg(long = "pretrain-dataset", global = true)]
    pretrain: Vec<PathBuf>,
    #[arg(long, global = true, value_enum)]
    alpha: Option<AlphaPolicy>,
    /// Text variant: rel_name, llm_rel_name, llm_rel_desc, combined_sum, combined_avg.
    #[arg(long, global = true)]
    variant: Option<TextVariant>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    runs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ask the chat model for relation names and descriptions, then embed them.
    Enrich {
        /// Re-query even when cached records match the dataset.
        #[arg(long)]
        force: bool,
    },
    /// Re-embed existing enrichment records and rewrite every variant table.
    Embed,
    /// Write the structural and textual relation graphs of each test graph.
    BuildRelgraph,
    /// Train one model per run on the pretraining mixture.
    Pretrain,
    /// Rank test queries and write metrics, a text table and per-query ranks.
    Evaluate,
    /// Choose α per dataset from validation MRR.
    HybridSelect,
    /// Derive a split whose query relations are absent from the test graph.
    GenHarder {
        #[arg(long)]
        mask_ratio: Option<f64>,
        /// Output directory (default: <work_dir>/harder/<name>-harder).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count test facts and queries that occur in the pretraining corpora.
    AuditLeakage,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.fixtures {
        cfg.use_fixtures(d);
    }
    if let Some(w) = &cli.work_dir {
        cfg.work_dir = w.clone();
    }
    if !cli.datasets.is_empty() {
        cfg.datasets = cli.datasets.clone();
    }
    if !cli.pretrain.is_empty() {
        cfg.pretrain = cli.pretrain.iter().cloned().map(PretrainSource::Path).collect();
    }
    if let Some(a) = cli.alpha {
        cfg.alpha = a;
    }
    if let Some(v) = cli.variant {
        cfg.text.variant = v;
    }
    if let Some(s) = cli.steps {
        cfg.train.steps = s;
    }
    if let Some(r) = cli.runs {
        cfg.runs = r;
    }
    if let Command::GenHarder { mask_ratio: Some(m), .. } = &cli.command {
        cfg.mask_ratio = *m;
    }
    if cli.threads == Some(1) {
        cfg.train.parallel = false;
    }
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let out = match &cli.command {
        Command::Enrich { force } => commands::enrich(&cfg, *force)?,
        Command::Embed => commands::embed(&cfg)?,
        Command::BuildRelgraph => commands::build_relgraph(&cfg)?,
        Command::Pretrain => commands::pretrain(&cfg)?,
        Command::Evaluate => commands::evaluate(&cfg)?,
        Command::HybridSelect => commands::hybrid_select(&cfg)?,
        Command::GenHarder { out, .. } => commands::gen_harder(&cfg, cli.datasets.first().map(|p| p.as_path()), out.as_deref())?,
        Command::AuditLeakage => commands::audit(&cfg)?,
    };
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
