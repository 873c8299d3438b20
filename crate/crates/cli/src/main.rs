use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use evret::annotation::llm::{HttpClient, LlmClient, ENV_ENDPOINT};
use evret::annotation::Stage;
use evret::config::RunConfig;
use evret::io::{self, Checkpoint};
use evret::pipeline::{self, EventSources, QueryInput, SynthMeta, TrainInputs};
use evret::synth::SynthSizes;

/// Event-aware dense retrieval: build event indexes, annotate, train,
/// index, search and evaluate.
#[derive(Debug, Parser)]
#[command(name = "evret", version)]
struct Cli {
    /// TOML run configuration; every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Coarse,
    Fine,
    All,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Coarse => Stage::Coarse,
            StageArg::Fine => Stage::Fine,
            StageArg::All => Stage::All,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter, cluster and index a JSONL stream of news titles.
    EventsBuild {
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label raw triplets by scorer voting and, for hard pairs, an LLM.
    Annotate {
        #[arg(long)]
        triplets: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Canned LLM replies keyed by prompt hash, instead of a live endpoint.
        #[arg(long)]
        llm_stub: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run training stage 1 (coarse labels) or 2 (graded labels).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Labelled quadruplet files.
        #[arg(long = "data", required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Documents to draw negatives from.
        #[arg(long)]
        corpus: PathBuf,
        /// Starting checkpoint; required for stage 2.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed a document file into a searchable index.
    IndexBuild {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand, fuse and retrieve for every query in a JSONL file.
    Search {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Event index directory written by `events-build`.
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// Known query-to-event associations, tried before the event index.
        #[arg(long)]
        expansions: Option<PathBuf>,
        /// Reference time for event recency (RFC 3339); defaults to the
        /// newest event in the index.
        #[arg(long)]
        now: Option<DateTime<Utc>>,
        #[arg(short, long, default_value_t = 50)]
        k: usize,
        /// Directory for results.jsonl and run.tsv; stdout only if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a run against graded judgments.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        judgments: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic time-sensitive corpus and its fixtures.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        events: Option<usize>,
        #[arg(long)]
        docs: Option<usize>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn llm_client(stub: Option<&Path>, cfg: &RunConfig) -> Result<Option<Box<dyn LlmClient>>> {
    if let Some(p) = stub {
        return Ok(Some(Box::new(pipeline::stub_client(p)?)));
    }
    let timeout = Duration::from_secs(cfg.annotation.llm.timeout_secs);
    Ok(HttpClient::from_env(timeout).map(|c| Box::new(c) as Box<dyn LlmClient>))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::EventsBuild { stream, out } => {
            let n = pipeline::events_build(&stream, &out, &cfg)?;
            println!("{n} events written to {}", out.display());
        }
        Command::Annotate {
            triplets,
            stage,
            llm_stub,
            out,
        } => {
            let stage = Stage::from(stage);
            let client = llm_client(llm_stub.as_deref(), &cfg)?;
            if stage != Stage::Coarse && client.is_none() {
                bail!("fine annotation needs --llm-stub or {ENV_ENDPOINT} in the environment");
            }
            let summary = pipeline::annotate(&triplets, stage, &cfg, client.as_deref(), &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Train {
            stage,
            data,
            corpus,
            init,
            out,
        } => {
            if stage == 2 && init.is_none() {
                bail!("stage 2 needs --init with a stage-1 checkpoint");
            }
            let inputs = TrainInputs {
                datasets: data,
                corpus,
                init,
            };
            let paths = pipeline::train(&inputs, stage, &cfg, &out)?;
            println!("{}", paths.checkpoint.display());
        }
        Command::IndexBuild { checkpoint, docs, out } => {
            let n = pipeline::index_build(&checkpoint, &docs, &out)?;
            println!("{n} documents indexed into {}", out.display());
        }
        Command::Search {
            checkpoint,
            index,
            events,
            queries,
            expansions,
            now,
            k,
            out,
        } => {
            if k == 0 {
                bail!("-k must be at least 1");
            }
            let ckpt = Checkpoint::load(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let (model, _) = io::model_from_checkpoint(&ckpt)?;
            let doc_index = io::load_doc_index(&index).with_context(|| format!("loading index {}", index.display()))?;
            let sources = EventSources::load(Some(&events), expansions.as_deref())
                .with_context(|| format!("loading event index {}", events.display()))?;
            let now = now.unwrap_or_else(|| {
                let ix = sources.index.as_ref().expect("event index loaded above");
                ix.records.iter().map(|r| r.found_time).max().unwrap_or(DateTime::UNIX_EPOCH)
            });
            let queries: Vec<QueryInput> = io::read_jsonl(&queries)?;
            let results = pipeline::search(&model, &doc_index, &queries, &sources, &cfg, now, k)?;
            for r in &results {
                for (rank, h) in r.hits.iter().enumerate() {
                    println!("{}\t{}\t{}\t{}\t{}", r.query_id, h.doc_id, rank + 1, h.score, r.provenance);
                }
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                pipeline::write_search(&results, &dir.join("results.jsonl"), &dir.join("run.tsv"))?;
                info!("wrote {}", dir.display());
            }
        }
        Command::Eval { run, judgments, out } => {
            let report = pipeline::eval(&run, &judgments, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(p) = out {
                pipeline::write_report(&report, &p)?;
            }
        }
        Command::Synth {
            out,
            queries,
            events,
            docs,
        } => {
            let sizes = SynthSizes {
                queries: queries.unwrap_or(cfg.synth.queries),
                events: events.unwrap_or(cfg.synth.events),
                docs: docs.unwrap_or(cfg.synth.docs),
            };
            let paths = pipeline::synth(cfg.seed, sizes, &cfg, &out)?;
            let meta: SynthMeta = serde_json::from_slice(&std::fs::read(&paths.meta)?)?;
            println!(
                "{} queries, {} events, {} documents (seed {}) in {}",
                meta.sizes.queries,
                meta.sizes.events,
                meta.sizes.docs,
                meta.seed,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
