//! `mmbee` subcommands.
//!
//! Every subcommand reads one TOML config (`--config`), applies generic
//! `--set section.key=value` overrides and then its own flags, runs inside a
//! working directory and writes `<command>.meta.json` next to its outputs.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_a2a, build_u2a, swing_similarity, AuthorGraph, BipartiteGraph, SwingConfig};
use crate::graphcl::{pretrain, EmbeddingTable, GraphClConfig};
use crate::ingest::{
    generate_synthetic, load_features, parse_donations, parse_impressions, split_impressions, write_impressions,
    FeatureTable, SyntheticSpec,
};
use crate::metapath::ExpansionConfig;
use crate::model::{evaluate, resolve_all, train, write_trace_csv, Arm, EpochReport, Checkpoint, GtrConfig, GtrParams, TrainConfig};
use crate::runtime::{bench, serve, BenchConfig, ExpansionStore, RunMetadata, ScoringState};

/// Input locations, relative to the working directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub donations: PathBuf,
    pub impressions: PathBuf,
    pub features: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            donations: "donations.tsv".into(),
            impressions: "impressions.tsv".into(),
            features: "features.mmbf".into(),
        }
    }
}

/// Train/held-out split used by `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Fraction of users whose impressions are all held out.
    pub cold_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            cold_fraction: 0.1,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub addr: String,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
        }
    }
}

/// The whole pipeline configuration; each subcommand reads its sections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub synth: SyntheticSpec,
    pub swing: SwingConfig,
    pub graphcl: GraphClConfig,
    pub expansion: ExpansionConfig,
    pub model: GtrConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub serve: ServeConfig,
}

impl PipelineConfig {
    /// Parses TOML text and applies `key.path=value` overrides in order.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not KEY=VALUE")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in `{item}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "mmbee", version, about = "Gift-through-rate prediction pipeline", arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file; flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory holding inputs and artifacts.
    #[arg(long, global = true, default_value = ".", value_name = "DIR")]
    pub workdir: PathBuf,
    /// Override any config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write planted-community donations, impressions and features.
    Synth {
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        authors: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the user-to-author donation graph.
    BuildGraph,
    /// Build the author-to-author Swing graph, or score one author pair.
    Swing {
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
        /// Print the similarity of two authors instead of building the graph.
        #[arg(long, num_args = 2, value_names = ["AUTHOR", "AUTHOR"])]
        pair: Option<Vec<String>>,
    },
    /// Contrastive pretraining of the node embedding table.
    Pretrain {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Precompute metapath neighbors into the expansion store.
    Expand {
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Print the stored records of one node as JSON.
        #[arg(long, value_name = "ID")]
        node: Option<String>,
    },
    /// Train the predictor and write a checkpoint plus a metrics trace.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, value_parser = parse_arm)]
        arm: Option<Arm>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score labelled impressions with a checkpoint.
    Eval {
        /// Defaults to the held-out file written by `train`.
        #[arg(long, value_name = "FILE")]
        impressions: Option<PathBuf>,
    },
    /// Serve `POST /score` from the store and the checkpoint.
    Serve {
        #[arg(long)]
        addr: Option<String>,
    },
    /// Compare store lookups with on-the-fly expansion.
    Bench {
        #[arg(long)]
        requests: Option<usize>,
        #[arg(long)]
        clients: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_arm(s: &str) -> std::result::Result<Arm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub const U2A_FILE: &str = "u2a.mmbg";
pub const A2A_FILE: &str = "a2a.mmbg";
pub const THETA_FILE: &str = "theta.mmbe";
pub const STORE_FILE: &str = "store.mmbs";
pub const CHECKPOINT_FILE: &str = "model.mmbc";
pub const HELD_OUT_FILE: &str = "held_out.tsv";

fn push<T: Into<toml::Value>>(out: &mut Vec<String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        let v: toml::Value = v.into();
        out.push(format!("{key}={v}"));
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::BuildGraph => "build-graph",
            Command::Swing { .. } => "swing",
            Command::Pretrain { .. } => "pretrain",
            Command::Expand { .. } => "expand",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Serve { .. } => "serve",
            Command::Bench { .. } => "bench",
        }
    }

    /// Flag values as overrides, applied after the file and `--set`.
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        let seed = |v: &Option<u64>| v.map(|s| s as i64);
        match self {
            Command::Synth { users, authors, seed: s } => {
                push(&mut o, "synth.num_users", users.map(|v| v as i64));
                push(&mut o, "synth.num_authors", authors.map(|v| v as i64));
                push(&mut o, "synth.seed", seed(s));
            }
            Command::Swing { alpha, top_k, .. } => {
                push(&mut o, "swing.alpha", *alpha);
                push(&mut o, "swing.top_k", top_k.map(|v| v as i64));
            }
            Command::Pretrain { epochs, seed: s } => {
                push(&mut o, "graphcl.epochs", epochs.map(|v| v as i64));
                push(&mut o, "graphcl.seed", seed(s));
            }
            Command::Expand { cap, seed: s, .. } => {
                push(&mut o, "expansion.cap", cap.map(|v| v as i64));
                push(&mut o, "expansion.seed", seed(s));
            }
            Command::Train {
                epochs,
                learning_rate,
                batch_size,
                arm,
                seed: s,
            } => {
                push(&mut o, "train.epochs", epochs.map(|v| v as i64));
                push(&mut o, "train.learning_rate", *learning_rate);
                push(&mut o, "train.batch_size", batch_size.map(|v| v as i64));
                push(&mut o, "model.arm", arm.map(|a| a.name()));
                push(&mut o, "train.seed", seed(s));
            }
            Command::Serve { addr } => push(&mut o, "serve.addr", addr.clone()),
            Command::Bench { requests, clients, seed: s } => {
                push(&mut o, "bench.requests", requests.map(|v| v as i64));
                push(&mut o, "bench.clients", clients.map(|v| v as i64));
                push(&mut o, "bench.seed", seed(s));
            }
            Command::BuildGraph | Command::Eval { .. } => {}
        }
        o
    }
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    let mut overrides = cli.common.overrides.clone();
    overrides.extend(cli.command.overrides());
    let cfg = PipelineConfig::load(cli.common.config.as_deref(), &overrides)?;
    let dir = &cli.common.workdir;
    std::fs::create_dir_all(dir)?;
    let name = cli.command.name();
    let mut meta = RunMetadata::new(name, &cfg, None)?;
    if let Some(p) = &cli.common.config {
        meta.input(p)?;
    }
    let ctx = Ctx { dir, cfg: &cfg };
    match &cli.command {
        Command::Synth { .. } => ctx.synth(&mut meta)?,
        Command::BuildGraph => ctx.build_graph(&mut meta)?,
        Command::Swing { pair, .. } => ctx.swing(pair.as_deref(), &mut meta)?,
        Command::Pretrain { .. } => ctx.pretrain(&mut meta)?,
        Command::Expand { node, .. } => ctx.expand(node.as_deref(), &mut meta)?,
        Command::Train { .. } => ctx.train(&mut meta)?,
        Command::Eval { impressions } => ctx.eval(impressions.as_deref(), &mut meta)?,
        Command::Serve { .. } => ctx.serve(&mut meta)?,
        Command::Bench { .. } => ctx.bench(&mut meta)?,
    }
    if !matches!(cli.command, Command::Serve { .. }) {
        let path = meta.write_beside(dir)?;
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

struct Ctx<'a> {
    dir: &'a Path,
    cfg: &'a PipelineConfig,
}

impl Ctx<'_> {
    fn path(&self, p: impl AsRef<Path>) -> PathBuf {
        self.dir.join(p)
    }

    fn input(&self, meta: &mut RunMetadata, p: impl AsRef<Path>) -> Result<PathBuf> {
        let path = self.path(p);
        if !path.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("missing input {}", path.display()),
            )));
        }
        meta.input(&path)?;
        Ok(path)
    }

    fn features(&self, meta: &mut RunMetadata) -> Result<FeatureTable> {
        load_features(self.input(meta, &self.cfg.data.features)?, self.cfg.model.d_m)
    }

    fn graphs(&self, meta: &mut RunMetadata) -> Result<(BipartiteGraph, AuthorGraph)> {
        let g1 = BipartiteGraph::load(self.input(meta, U2A_FILE)?)?;
        let g2 = AuthorGraph::load(self.input(meta, A2A_FILE)?)?;
        g2.check_compatible(&g1)?;
        Ok((g1, g2))
    }

    fn synth(&self, meta: &mut RunMetadata) -> Result<()> {
        let spec = &self.cfg.synth;
        if spec.d_m != self.cfg.model.d_m {
            log::warn!("synth.d_m = {} but model.d_m = {}; later steps read features at model.d_m", spec.d_m, self.cfg.model.d_m);
        }
        meta.seed = Some(spec.seed);
        let data = generate_synthetic(spec)?;
        data.write_to_dir(self.dir)?;
        for p in [&self.cfg.data.donations, &self.cfg.data.impressions, &self.cfg.data.features] {
            meta.output(self.path(p));
        }
        println!(
            "{} donations, {} impressions, {} segments",
            data.donations.len(),
            data.impressions.len(),
            data.features.len()
        );
        Ok(())
    }

    fn build_graph(&self, meta: &mut RunMetadata) -> Result<()> {
        let events = parse_donations(self.input(meta, &self.cfg.data.donations)?)?;
        let features = self.features(meta)?;
        let g1 = build_u2a(&events, &features)?;
        let out = self.path(U2A_FILE);
        g1.save(&out)?;
        meta.output(&out);
        println!("{} users, {} authors, {} edges", g1.num_users(), g1.num_authors(), g1.num_edges());
        Ok(())
    }

    fn swing(&self, pair: Option<&[String]>, meta: &mut RunMetadata) -> Result<()> {
        let g1 = BipartiteGraph::load(self.input(meta, U2A_FILE)?)?;
        if let Some([i, j]) = pair {
            meta.command = "swing-pair".into();
            println!("{}", swing_similarity(&g1, i, j, &self.cfg.swing)?);
            return Ok(());
        }
        let g2 = build_a2a(&g1, &self.cfg.swing)?;
        let out = self.path(A2A_FILE);
        g2.save(&out)?;
        meta.output(&out);
        println!("{} authors, {} edges", g2.num_authors(), g2.num_edges());
        Ok(())
    }

    fn pretrain(&self, meta: &mut RunMetadata) -> Result<()> {
        meta.seed = Some(self.cfg.graphcl.seed);
        let (g1, g2) = self.graphs(meta)?;
        let pre = pretrain(&g1, &g2, &self.cfg.graphcl)?;
        let out = self.path(THETA_FILE);
        pre.table.save(&out)?;
        meta.output(&out);
        let trace = self.path("pretrain_loss.csv");
        let mut w = BufWriter::new(File::create(&trace)?);
        writeln!(w, "epoch,loss")?;
        for (i, l) in pre.epoch_losses.iter().enumerate() {
            writeln!(w, "{},{l}", i + 1)?;
        }
        w.flush()?;
        meta.output(&trace);
        if let (Some(first), Some(last)) = (pre.epoch_losses.first(), pre.epoch_losses.last()) {
            println!("loss {first:.4} -> {last:.4}");
        }
        Ok(())
    }

    fn expand(&self, node: Option<&str>, meta: &mut RunMetadata) -> Result<()> {
        meta.seed = Some(self.cfg.expansion.seed);
        let (g1, g2) = self.graphs(meta)?;
        let theta = EmbeddingTable::load(self.input(meta, THETA_FILE)?)?;
        let store = ExpansionStore::precompute(&g1, &g2, &theta, &self.cfg.expansion)?;
        let out = self.path(STORE_FILE);
        store.save(&out)?;
        meta.output(&out);
        log::info!("store {} for {} users and {} authors", store.build_id(), store.users().len(), store.authors().len());
        if let Some(id) = node {
            let recs = store.user(id).or_else(|| store.author(id)).ok_or_else(|| Error::UnknownNode(id.into()))?;
            let json: Vec<serde_json::Value> = recs
                .iter()
                .map(|r| {
                    let ids: Vec<&str> = r.neighbors.iter().map(|&n| store.node_id(n)).collect();
                    serde_json::json!({ "metapath": r.metapath.name(), "neighbors": ids, "aggregate": r.aggregate })
                })
                .collect();
            println!("{}", serde_json::to_string_pretty(&json)?);
        }
        Ok(())
    }

    fn train(&self, meta: &mut RunMetadata) -> Result<()> {
        let cfg = self.cfg;
        meta.seed = Some(cfg.train.seed);
        if cfg.graphcl.d != cfg.model.d {
            log::warn!("graphcl.d = {} differs from model.d = {}", cfg.graphcl.d, cfg.model.d);
        }
        let samples = parse_impressions(self.input(meta, &cfg.data.impressions)?)?;
        let features = self.features(meta)?;
        let g1 = BipartiteGraph::load(self.input(meta, U2A_FILE)?)?;
        let theta = EmbeddingTable::load(self.input(meta, THETA_FILE)?)?;
        let store = ExpansionStore::load(self.input(meta, STORE_FILE)?)?;
        store.check_universe(g1.users(), g1.authors())?;
        let nb = store.neighborhoods();

        let split = split_impressions(&samples, cfg.split.cold_fraction, cfg.split.test_fraction, cfg.split.seed);
        let held_out = self.path(HELD_OUT_FILE);
        let mut w = BufWriter::new(File::create(&held_out)?);
        write_impressions(&mut w, &split.test)?;
        w.flush()?;
        meta.output(&held_out);

        let train_ex = resolve_all(&split.train, &features, &nb)?;
        let test_ex = resolve_all(&split.test, &features, &nb)?;
        let mut params: GtrParams<f32> = GtrParams::init(cfg.model.clone(), &split.train, &theta, &g1)?;
        let trace = train(&mut params, &train_ex, &test_ex, &cfg.train)?;

        let ckpt = self.path(CHECKPOINT_FILE);
        params.save_checkpoint(&ckpt, Some(store.build_id()))?;
        meta.output(&ckpt);
        let csv = self.path("train_trace.csv");
        let mut w = BufWriter::new(File::create(&csv)?);
        write_trace_csv(&mut w, &trace)?;
        w.flush()?;
        meta.output(&csv);
        let json = self.path("train_trace.json");
        serde_json::to_writer_pretty(File::create(&json)?, &trace)?;
        meta.output(&json);
        if let Some(last) = trace.last() {
            match &last.metrics {
                Some(m) => println!(
                    "epoch {} loss {:.5} held-out auc {:.4} uauc {:.4} gauc {:.4}",
                    last.epoch, last.loss, m.auc, m.uauc, m.gauc
                ),
                None => println!("epoch {} loss {:.5}", last.epoch, last.loss),
            }
        }
        Ok(())
    }

    fn eval(&self, impressions: Option<&Path>, meta: &mut RunMetadata) -> Result<()> {
        let path = impressions.map_or_else(|| PathBuf::from(HELD_OUT_FILE), Path::to_path_buf);
        let samples = parse_impressions(self.input(meta, path)?)?;
        let features = self.features(meta)?;
        let store = ExpansionStore::load(self.input(meta, STORE_FILE)?)?;
        let ckpt = Checkpoint::load(self.input(meta, CHECKPOINT_FILE)?)?;
        let nb = store.neighborhoods();
        let examples = resolve_all(&samples, &features, &nb)?;
        let (report, loss) = evaluate(&ckpt.params, &examples)?;
        let out = self.path("eval.json");
        let json = serde_json::json!({ "loss": loss, "metrics": report });
        serde_json::to_writer_pretty(File::create(&out)?, &json)?;
        meta.output(&out);
        let csv = self.path("eval.csv");
        let mut w = BufWriter::new(File::create(&csv)?);
        let row = EpochReport {
            epoch: 0,
            loss,
            metrics: Some(report.clone()),
        };
        write_trace_csv(&mut w, std::slice::from_ref(&row))?;
        w.flush()?;
        meta.output(&csv);
        println!(
            "samples {} loss {:.5} auc {:.4} uauc {:.4} gauc {:.4} ({} users eligible, {} excluded)",
            report.samples, loss, report.auc, report.uauc, report.gauc, report.eligible_users, report.excluded_users
        );
        Ok(())
    }

    fn serve(&self, meta: &mut RunMetadata) -> Result<()> {
        let addr: SocketAddr = self
            .cfg
            .serve
            .addr
            .parse()
            .map_err(|e| Error::Config(format!("bad serve.addr `{}`: {e}", self.cfg.serve.addr)))?;
        let features = self.features(meta)?;
        let store = ExpansionStore::load(self.input(meta, STORE_FILE)?)?;
        let ckpt = Checkpoint::load(self.input(meta, CHECKPOINT_FILE)?)?;
        let state = Arc::new(ScoringState::new(&store, ckpt, features)?);
        drop(store);
        meta.write_beside(self.dir)?;
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        rt.block_on(serve(state, addr))
    }

    fn bench(&self, meta: &mut RunMetadata) -> Result<()> {
        meta.seed = Some(self.cfg.bench.seed);
        let (g1, g2) = self.graphs(meta)?;
        let theta = EmbeddingTable::load(self.input(meta, THETA_FILE)?)?;
        let store = ExpansionStore::load(self.input(meta, STORE_FILE)?)?;
        let report = bench(&store, &g1, &g2, &theta, &self.cfg.expansion, &self.cfg.bench)?;
        let out = self.path("bench.csv");
        let mut w = BufWriter::new(File::create(&out)?);
        report.write_csv(&mut w)?;
        w.flush()?;
        meta.output(&out);
        report.write_csv(&mut std::io::stdout().lock())?;
        Ok(())
    }
}
