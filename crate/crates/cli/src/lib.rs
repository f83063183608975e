//! Command-line front end and HTTP service for the memory engine.

pub mod service;

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use kgmem_core::eval::{self, Category, Dataset, EvalOptions, Evaluator, Mode};
use kgmem_core::{provider, Config, MemoryEngine, ProviderKind};

#[derive(Debug, Parser)]
#[command(name = "kgmem", version, about = "Long-term conversational memory service")]
pub struct Cli {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override `provider.kind`.
    #[arg(long, global = true)]
    pub provider: Option<ProviderKind>,

    /// Override `retrieval.k`.
    #[arg(long, global = true)]
    pub k: Option<usize>,

    /// Override `retrieval.decay_rate`; 0 weighs all triplets equally.
    #[arg(long, global = true)]
    pub decay_rate: Option<f64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve {
        /// Override `service.bind`.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Replay a LongMemEval-format dataset and report accuracy.
    Replay {
        dataset: PathBuf,
        #[arg(long, default_value = "memoria")]
        mode: Mode,
        /// Only score these categories (repeatable).
        #[arg(long)]
        category: Vec<Category>,
        /// Write the JSON report here.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Leave wall-clock timings out of the report.
        #[arg(long)]
        no_timing: bool,
        /// Also run with decay disabled and report the difference.
        #[arg(long)]
        compare_ablation: bool,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Print a user's persona graph as JSON.
    InspectUser { name: String },
    /// Print a session's summary as JSON.
    ShowSummary { session: String },
    /// Create the store and index files.
    InitStore,
    /// Write the built-in synthetic dataset in LongMemEval format.
    SampleDataset {
        path: PathBuf,
        #[arg(long, default_value_t = 10)]
        single_session_user: usize,
        #[arg(long, default_value_t = 10)]
        knowledge_update: usize,
    },
}

impl Cli {
    pub fn load_config(&self) -> anyhow::Result<Config> {
        let mut config = match &self.config {
            Some(path) => Config::from_file(path)?,
            None => Config::default(),
        };
        if let Some(kind) = self.provider {
            config.provider.kind = kind;
        }
        if let Some(k) = self.k {
            config.retrieval.k = k;
        }
        if let Some(rate) = self.decay_rate {
            config.retrieval.decay_rate = rate;
        }
        config.validate()?;
        Ok(config)
    }
}

fn print_json<T: serde::Serialize>(out: &mut dyn Write, value: &T) -> anyhow::Result<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Execute a parsed command, writing results to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let config = cli.load_config()?;
    match cli.command {
        Command::Serve { bind } => {
            let bind = bind.unwrap_or_else(|| config.service.bind.clone());
            // The HTTP provider is blocking, so it must be built before the runtime.
            let engine = Arc::new(MemoryEngine::open(config)?);
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .context("starting runtime")?;
            runtime.block_on(service::serve(engine, &bind))
        }
        Command::Replay {
            dataset,
            mode,
            category,
            output,
            no_timing,
            compare_ablation,
            json,
        } => {
            let data = Dataset::from_file(&dataset)?;
            let provider = provider::from_config(&config.provider)?;
            let options = EvalOptions {
                mode,
                categories: category,
                compare_ablation,
                timing: !no_timing,
            };
            let report = Evaluator::new(config, provider).run(&data, &options)?;
            if let Some(path) = output {
                std::fs::write(&path, report.to_json() + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            if json {
                writeln!(out, "{}", report.to_json())?;
            } else {
                write!(out, "{}", report.table())?;
            }
            Ok(())
        }
        Command::InspectUser { name } => {
            let engine = MemoryEngine::open(config)?;
            if !engine.has_user_history(&name)? {
                bail!("unknown user {name}");
            }
            print_json(out, &engine.get_persona(&name)?)
        }
        Command::ShowSummary { session } => {
            let engine = MemoryEngine::open(config)?;
            match engine.get_summary(&session)? {
                Some(record) => print_json(out, &record),
                None => bail!("no summary for session {session}"),
            }
        }
        Command::InitStore => {
            let engine = MemoryEngine::open(config.clone())?;
            engine.index().sync()?;
            writeln!(out, "store: {}", config.store.path.display())?;
            writeln!(out, "index: {}", config.index.path.display())?;
            Ok(())
        }
        Command::SampleDataset {
            path,
            single_session_user,
            knowledge_update,
        } => {
            let instances = eval::synthetic_dataset(single_session_user, knowledge_update);
            std::fs::write(&path, eval::instances_to_json(&instances) + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
            writeln!(out, "wrote {} instances to {}", instances.len(), path.display())?;
            Ok(())
        }
    }
}
