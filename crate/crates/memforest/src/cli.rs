//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use memforest_core::ingest::ChunkErrorPolicy;
use memforest_core::retrieval::Mode;
use memforest_core::substrate::{Family, SessionId};
use memforest_core::Store;
use serde::Serialize;
use serde_json::{json, Value};

use crate::bench::{self, BenchParams, Scenario};
use crate::config::{Backends, Config};
use crate::input;
use crate::snapshot::{self, StoreLock};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_BACKEND: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "memforest", version, about = "Scoped temporal memory trees over conversation histories")]
pub struct Cli {
    /// Store directory.
    #[arg(long, global = true, default_value = "memforest-store")]
    pub store: PathBuf,
    /// TOML config file; defaults to all mock backends.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    pub json: bool,
    /// Add wall-clock fields to the output.
    #[arg(long, global = true)]
    pub timestamps: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest session files into the store, creating it if needed.
    Ingest {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Abort the session on the first chunk that exhausts its retries.
        #[arg(long)]
        strict: bool,
    },
    /// Retrieve evidence for a question.
    Query {
        query: String,
        #[arg(long, default_value = "emb", value_parser = parse_mode)]
        mode: Mode,
        /// Evidence rows to return.
        #[arg(long)]
        top_k: Option<usize>,
        /// Forward the evidence to the chat backend for an answer.
        #[arg(long)]
        answer: bool,
    },
    /// Merge other stores into this one without replaying their sessions.
    Merge {
        #[arg(required = true)]
        others: Vec<PathBuf>,
    },
    /// Remove one session and everything derived only from it.
    Delete { session_id: String },
    /// Migrate the store to new tree settings or backends.
    Rematerialize(RematerializeArgs),
    /// Print store statistics.
    Stats,
    /// Run a write-path benchmark on the mock backends.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct RematerializeArgs {
    /// Branching factor for every tree family.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub k_session: Option<usize>,
    #[arg(long)]
    pub k_entity: Option<usize>,
    #[arg(long)]
    pub k_scene: Option<usize>,
    #[arg(long)]
    pub chunk_size: Option<usize>,
    #[arg(long)]
    pub extract_retries: Option<u32>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    pub scenario: Scenario,
    /// Directory for `<scenario>.csv` and `<scenario>.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Facts per tree, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Branching factors for k-sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Facts per tree for k-sweep.
    #[arg(long)]
    pub facts: Option<usize>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse::<Mode>().map_err(|_| {
        let names: Vec<&str> = Mode::ALL.iter().map(|m| m.as_str()).collect();
        format!("unknown mode {s:?}; expected one of {}", names.join(", "))
    })
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Input(_) => EXIT_INPUT,
            CliError::Backend(_) => EXIT_BACKEND,
        }
    }
}

impl From<memforest_core::Error> for CliError {
    fn from(e: memforest_core::Error) -> Self {
        use memforest_core::Error as E;
        match e {
            E::Backend(_) | E::ChunkFailures(_) => CliError::Backend(e.to_string()),
            E::UnknownMode(_) => CliError::Usage(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

macro_rules! input_err {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Input(e.to_string())
            }
        }
    )*};
}
input_err!(snapshot::SnapshotError, input::InputError, crate::config::ConfigError, std::io::Error, bench::BenchError);

/// What a command produced: a JSON value plus a human rendering.
pub struct Output {
    pub json: Value,
    pub text: String,
    pub warnings: Vec<String>,
}

impl Output {
    fn new<T: Serialize>(report: &T, text: String) -> Self {
        Self { json: serde_json::to_value(report).expect("serializable report"), text, warnings: Vec::new() }
    }
}

struct Ctx {
    cfg: Config,
    backends: Backends,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self, CliError> {
        let cfg = match &cli.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        let backends = Backends::build(&cfg, cli.timestamps)?;
        Ok(Self { cfg, backends })
    }

    fn open(&self, dir: &Path, create: bool, check: bool) -> Result<Store, CliError> {
        if snapshot::exists(dir) {
            let store = snapshot::load(dir)?;
            if check {
                self.backends.check_fingerprint(store.config()).map_err(CliError::Input)?;
            }
            Ok(store)
        } else if create {
            Ok(Store::new(self.cfg.store_config()?)?)
        } else {
            Err(CliError::Input(format!("no store at {}", dir.display())))
        }
    }
}

fn stats_json(store: &Store) -> Value {
    let mut families = serde_json::Map::new();
    for f in Family::ALL {
        let trees: Vec<_> = store.trees().filter(|t| t.family() == f).collect();
        families.insert(
            f.as_str().into(),
            json!({
                "trees": trees.len(),
                "leaves": trees.iter().map(|t| t.leaf_count()).sum::<usize>(),
                "nodes": trees.iter().map(|t| t.node_count()).sum::<usize>(),
                "max_height": trees.iter().map(|t| t.height()).max().unwrap_or(0),
            }),
        );
    }
    json!({
        "sessions": store.sessions().count(),
        "facts": store.fact_count(),
        "cells": store.cells().count(),
        "trees": store.tree_count(),
        "families": families,
        "scenes": store.scenes().len(),
        "dirty_nodes": store.dirty_nodes(),
        "config": store.config(),
    })
}

pub fn run(cli: &Cli) -> Result<Output, CliError> {
    if let Command::Bench(args) = &cli.command {
        return run_bench(args);
    }
    let ctx = Ctx::new(cli)?;
    let ports = ctx.backends.ports();
    let started = std::time::Instant::now();
    let mut out = match &cli.command {
        Command::Ingest { files, strict } => {
            let _lock = StoreLock::acquire(&cli.store)?;
            let mut store = ctx.open(&cli.store, true, true)?;
            let mut sessions = Vec::new();
            for f in files {
                sessions.extend(input::read_sessions(f)?);
            }
            let mut retry = store.flush_all(&ports);
            let policy = if *strict { ChunkErrorPolicy::Abort } else { ChunkErrorPolicy::SkipChunk };
            let mut reports = Vec::new();
            let mut text = String::new();
            for s in sessions {
                let r = store.ingest_session(s, &ports, policy)?;
                text.push_str(&format!(
                    "{}: {} facts ({} merged), {} cells, {} summaries, {} chunk errors\n",
                    r.session_id,
                    r.facts,
                    r.duplicates_merged,
                    r.cells,
                    r.flush.summarizer_calls,
                    r.chunk_errors.len()
                ));
                reports.push(r);
            }
            retry.absorb(store.flush_all(&ports));
            snapshot::save(&store, &cli.store)?;
            let mut o = Output::new(&json!({ "sessions": reports, "retried_flush": retry }), text);
            if store.dirty_nodes() > 0 {
                o.warnings.push(format!("{} nodes still dirty after failed port calls", store.dirty_nodes()));
            }
            o
        }
        Command::Query { query, mode, top_k, answer } => {
            let store = ctx.open(&cli.store, false, true)?;
            let mut rcfg = ctx.cfg.retrieval.clone();
            if let Some(k) = top_k {
                rcfg.final_top_k = *k;
            }
            if mode.uses_planner() && ports.planner.is_none() {
                return Err(CliError::Usage(format!("mode {mode} needs a [planner] backend")));
            }
            if mode.uses_chooser() && ports.chooser.is_none() {
                return Err(CliError::Usage(format!("mode {mode} needs a [chooser] backend")));
            }
            let actx = store.retrieve(query, *mode, &rcfg, &ports)?;
            let mut text = String::new();
            for (i, e) in actx.evidence.iter().enumerate() {
                text.push_str(&format!(
                    "{:>2}. [{}] {:.3} {}\n",
                    i + 1,
                    memforest_core::backends::mock::render_interval(&e.anchor),
                    e.score,
                    e.text
                ));
            }
            let mut json = serde_json::to_value(&actx).expect("serializable");
            if *answer {
                let client = ctx
                    .backends
                    .http
                    .as_ref()
                    .ok_or_else(|| CliError::Usage("--answer needs an http backend in the config".into()))?;
                let a = crate::http::answer(client, &actx).map_err(|e| CliError::Backend(e.to_string()))?;
                text.push_str(&format!("\n{a}\n"));
                json["answer"] = Value::String(a);
            }
            Output { json, text, warnings: Vec::new() }
        }
        Command::Merge { others } => {
            let _lock = StoreLock::acquire(&cli.store)?;
            let mut store = ctx.open(&cli.store, false, true)?;
            store.flush_all(&ports);
            let mut reports = Vec::new();
            for o in others {
                let _other_lock = StoreLock::acquire(o)?;
                let mut other = snapshot::load(o)?;
                other.flush_all(&ports);
                let (merged, r) = store.merge(other, &ports)?;
                store = merged;
                reports.push(r);
            }
            snapshot::save(&store, &cli.store)?;
            let text = reports
                .iter()
                .map(|r| {
                    format!(
                        "facts {} + {} -> {} ({} shared); trees {} + {} -> {}; {} summaries\n",
                        r.facts_left,
                        r.facts_right,
                        r.facts_merged,
                        r.fact_collisions,
                        r.trees_left,
                        r.trees_right,
                        r.trees_total,
                        r.flush.summarizer_calls
                    )
                })
                .collect();
            Output::new(&reports, text)
        }
        Command::Delete { session_id } => {
            let _lock = StoreLock::acquire(&cli.store)?;
            let mut store = ctx.open(&cli.store, false, true)?;
            store.flush_all(&ports);
            let r = store.delete_session(&SessionId::new(session_id), &ports)?;
            let mut o = Output::new(
                &r,
                format!(
                    "removed {} facts, {} cells, {} leaves, {} trees; {} summaries\n",
                    r.facts_removed, r.cells_removed, r.leaves_removed, r.trees_dropped.len(), r.flush.summarizer_calls
                ),
            );
            if r.unknown {
                o.warnings.push(format!("session {session_id} is not in the store; nothing deleted"));
            } else {
                snapshot::save(&store, &cli.store)?;
            }
            o
        }
        Command::Rematerialize(a) => {
            let _lock = StoreLock::acquire(&cli.store)?;
            let mut store = ctx.open(&cli.store, false, false)?;
            let mut next = store.config().clone();
            if let Some(k) = a.k {
                next = next.with_k(k);
            }
            next.k_session = a.k_session.unwrap_or(next.k_session);
            next.k_entity = a.k_entity.unwrap_or(next.k_entity);
            next.k_scene = a.k_scene.unwrap_or(next.k_scene);
            next.chunk_size = a.chunk_size.unwrap_or(next.chunk_size);
            next.extract_retries = a.extract_retries.unwrap_or(next.extract_retries);
            next.embedder_id = ctx.backends.embedder_id.clone();
            next.summarizer_id = ctx.backends.summarizer_id.clone();
            let r = store.rematerialize(next, &ports)?;
            snapshot::save(&store, &cli.store)?;
            let text = format!(
                "rebuilt {} trees, re-embedded: {}, resummarized: {}, {} summaries\n",
                r.trees_rebuilt,
                if r.reembedded { "yes" } else { "no" },
                if r.resummarized { "yes" } else { "no" },
                r.flush.summarizer_calls
            );
            Output::new(&r, text)
        }
        Command::Stats => {
            let store = ctx.open(&cli.store, false, false)?;
            let json = stats_json(&store);
            let text = format!(
                "{} sessions, {} facts, {} cells, {} trees, {} dirty nodes\n",
                json["sessions"], json["facts"], json["cells"], json["trees"], json["dirty_nodes"]
            );
            Output { json, text, warnings: Vec::new() }
        }
        Command::Bench(_) => unreachable!("handled above"),
    };
    if cli.timestamps {
        let wrapped = json!({
            "finished_at": chrono::Utc::now().to_rfc3339(),
            "elapsed_micros": started.elapsed().as_micros() as u64,
            "ledger": ctx.backends.ledger.snapshot(),
            "result": out.json,
        });
        out.json = wrapped;
    }
    Ok(out)
}

fn run_bench(a: &BenchArgs) -> Result<Output, CliError> {
    let d = BenchParams::default();
    let p = BenchParams {
        k: a.k.unwrap_or(d.k),
        sizes: a.sizes.clone().unwrap_or(d.sizes),
        ks: a.ks.clone().unwrap_or(d.ks),
        sweep_facts: a.facts.unwrap_or(d.sweep_facts),
        instances: a.instances.unwrap_or(d.instances),
        seed: a.seed.unwrap_or(d.seed),
        ..d
    };
    if p.k < 2 || p.ks.iter().any(|k| *k < 2) {
        return Err(CliError::Usage("branching factors must be at least 2".into()));
    }
    if p.instances == 0 {
        return Err(CliError::Usage("--instances must be at least 1".into()));
    }
    let report = bench::run(a.scenario, &p)?;
    let csv = report.csv()?;
    let json = json!({ "params": p, "report": report });
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{}.csv", a.scenario.name())), &csv)?;
        let pretty = serde_json::to_string_pretty(&json).expect("serializable");
        std::fs::write(dir.join(format!("{}.json", a.scenario.name())), pretty + "\n")?;
    }
    Ok(Output { json, text: csv, warnings: Vec::new() })
}
