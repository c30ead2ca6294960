use std::io::{BufRead, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use omnisearch::config::RunConfig;
use omnisearch::run::{self, Layout, Matrix};
use omnisearch::serving::{self, Service, TickClock};

/// Multi-entity search embeddings: synthetic data, training, evaluation,
/// indexing and serving from one config.
#[derive(Debug, Parser)]
#[command(name = "omnisearch", version)]
struct Cli {
    /// Run config (TOML or JSON). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Artifact directory shared by all stages.
    #[arg(long, short, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the resolved config and its hash.
    Config,
    /// Run every stage end to end and write metrics.json.
    Run,
    /// Synthetic dataset generation.
    Dataset {
        #[command(subcommand)]
        action: DatasetCmd,
    },
    /// Add captions, board titles and engaged queries to entity documents.
    Enrich,
    /// Build the token vocabulary from enriched documents and queries.
    BuildVocab,
    /// Train the two-tower model and write the checkpoint.
    Train,
    /// Recall@k of the trained model and of a random-init baseline.
    Eval,
    /// Encode all entities into the embedding file.
    #[command(alias = "embed")]
    Publish,
    /// Build or query the HNSW index.
    Index {
        #[command(subcommand)]
        action: IndexCmd,
    },
    /// Serve embed/retrieve/stats requests.
    Serve {
        /// Listen address for length-prefixed JSON requests.
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        /// Answer these JSON requests in order and exit. Use `-` to read
        /// one request per line from stdin.
        #[arg(long = "request", value_name = "JSON")]
        requests: Vec<String>,
    },
    /// Replay Zipf traffic through the query cache.
    SimulateLoad {
        #[arg(long)]
        requests: Option<usize>,
        #[arg(long)]
        zipf_s: Option<f64>,
    },
    /// Train and evaluate the ablation matrices.
    Ablate {
        /// enrichment, multitask, compat or all.
        #[arg(long, default_value = "all")]
        matrix: String,
    },
}

#[derive(Debug, Subcommand)]
enum DatasetCmd {
    /// Generate the synthetic world.
    Synth,
}

#[derive(Debug, Subcommand)]
enum IndexCmd {
    /// Build the index from the published embeddings.
    Build,
    /// Top-k entities for a query text.
    Search {
        #[arg(long, short)]
        query: String,
        #[arg(short, default_value_t = 10)]
        k: usize,
        /// Defaults to the configured ef_search.
        #[arg(long)]
        ef: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    Ok(base.with_overrides(&cli.overrides)?)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = load_config(&cli)?;
    let layout = Layout::new(&cli.out);
    match &cli.command {
        Command::Config => {
            print!("{}", config.to_toml()?);
            println!("# hash {}", config.hash());
        }
        Command::Run => {
            let report = run::run_pipeline(&config, &layout)?;
            println!(
                "{} recall@{}: {:.4} (random init {:.4}); metrics in {}",
                report.eval.headline_task,
                report.eval.k,
                report.eval.headline_recall,
                report.eval.random_init_headline_recall,
                layout.metrics().display()
            );
        }
        Command::Dataset { action: DatasetCmd::Synth } => {
            layout.create()?;
            let world = run::synth_stage(&config, &layout)?;
            println!(
                "{} entities, {} queries, {} pairs",
                world.entities.len(),
                world.queries.len(),
                world.pairs.len()
            );
        }
        Command::Enrich => {
            let world = run::load_world(&config, &layout)?;
            let (_, report) = run::enrich_stage(&config, &layout, &world)?;
            print_json(&report)?;
        }
        Command::BuildVocab => {
            let world = run::load_world(&config, &layout)?;
            run::check_artifact(&layout.docs(), &config, None)?;
            let docs = omnisearch::io::read_jsonl(layout.docs())?;
            let vocab = run::vocab_stage(&config, &layout, &world, &docs)?;
            println!("{} tokens, fingerprint {}", vocab.len(), vocab.fingerprint());
        }
        Command::Train => {
            let ws = run::load_workspace(&config, &layout)?;
            let (_, summary) = run::train_stage(&ws, &layout)?;
            print_json(&summary)?;
        }
        Command::Eval => {
            let ws = run::load_workspace(&config, &layout)?;
            let model = run::load_model(&ws, &layout)?;
            let summary = run::eval_stage(&ws, &model, Some(&layout))?;
            for (task, r) in &summary.trained {
                let base = summary.random_init.get(task).map_or(f64::NAN, |b| b.recall);
                println!(
                    "{task:<22} recall@{} {:.4}  (random init {:.4}, {} pairs)",
                    summary.k, r.recall, base, r.pairs
                );
            }
        }
        Command::Publish => {
            let ws = run::load_workspace(&config, &layout)?;
            let model = run::load_model(&ws, &layout)?;
            print_json(&run::publish_stage(&ws, &model, &layout)?)?;
        }
        Command::Index { action: IndexCmd::Build } => {
            let ws = run::load_workspace(&config, &layout)?;
            let model = run::load_model(&ws, &layout)?;
            let (_, report) = run::index_stage(&ws, &model, &layout)?;
            print_json(&report)?;
        }
        Command::Index {
            action: IndexCmd::Search { query, k, ef },
        } => {
            let ws = run::load_workspace(&config, &layout)?;
            let model = run::load_model(&ws, &layout)?;
            let index = run::load_index(&ws, &layout)?;
            let q = model.encode_query(query)?.to_f32();
            let k = (*k).min(index.len());
            let ef = ef.unwrap_or(config.index.ef_search).max(k);
            for (rank, (i, score)) in index.search(&q, k, ef)?.into_iter().enumerate() {
                println!("{:>3} {:<16} {:.6}", rank + 1, index.vectors.ids[i as usize], score);
            }
        }
        Command::Serve { addr, requests } => {
            let ws = run::load_workspace(&config, &layout)?;
            let model = Arc::new(run::load_model(&ws, &layout)?);
            let index = run::load_index(&ws, &layout)?;
            let service = Service::new(model, index, &config.cache, Box::<TickClock>::default())?;
            if requests.is_empty() {
                let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
                log::info!("listening on {}", listener.local_addr()?);
                serving::serve(Arc::new(service), listener)?;
            } else {
                let mut out = std::io::stdout().lock();
                let mut answer = |line: &str| -> Result<()> {
                    let response = service.handle_json(line.as_bytes());
                    writeln!(out, "{}", serde_json::to_string(&response)?)?;
                    Ok(())
                };
                for r in requests {
                    if r == "-" {
                        for line in std::io::stdin().lock().lines() {
                            let line = line?;
                            if !line.trim().is_empty() {
                                answer(&line)?;
                            }
                        }
                    } else {
                        answer(r)?;
                    }
                }
            }
        }
        Command::SimulateLoad { requests, zipf_s } => {
            let mut ws = run::load_workspace(&config, &layout)?;
            let model = run::load_model(&ws, &layout)?;
            if let Some(n) = requests {
                ws.config.simulate.requests = *n;
            }
            if let Some(s) = zipf_s {
                ws.config.simulate.zipf_s = *s;
            }
            print_json(&run::simulate_stage(&ws, &model, Some(&layout))?)?;
        }
        Command::Ablate { matrix } => {
            let matrices: Vec<Matrix> = if matrix == "all" {
                Matrix::ALL.to_vec()
            } else {
                matrix.split(',').map(|m| m.trim().parse()).collect::<omnisearch::Result<_>>()?
            };
            if matrices.is_empty() {
                bail!("no ablation matrix selected");
            }
            let ws = run::load_workspace(&config, &layout)?;
            for (name, table) in run::ablate_stage(&ws, &matrices, Some(&layout))? {
                println!("[{name}] recall@{}\n{}", table.k, table.render());
            }
        }
    }
    Ok(())
}
