use std::collections::BTreeSet;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ntrd_core::corpus::{ingest_redial, synth_corpus, SynthSpec};
use ntrd_core::metrics::{generate_records, report, rer_at_k, write_records};
use ntrd_core::model::Variant;
use ntrd_core::training::{model_from_checkpoint, Checkpoint, Corpus, TrainConfig, Trainer};

use crate::context::parse_contexts;
use crate::service::{router, AppState};

#[derive(Debug, Parser)]
#[command(
    name = "ntrd",
    version,
    about = "Train, evaluate and serve template-based recommender dialogue models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the recommender, then train the dialogue model jointly.
    Train(TrainArgs),
    /// Generate responses for a split and report automatic metrics.
    Evaluate(EvaluateArgs),
    /// Print filled responses for dialogue contexts.
    Generate(GenerateArgs),
    /// Serve the chat API (and optionally a static UI bundle).
    ChatServe(ServeArgs),
    /// Write a synthetic corpus in ReDial format with its knowledge graph.
    Synth(SynthArgs),
    /// Parse a ReDial file and print corpus statistics.
    Ingest(IngestArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CorpusKind {
    Redial,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Ntrd,
    Switching,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    pub corpus: CorpusKind,
    /// Dialogue file in ReDial line format, or a directory holding
    /// `dialogues.jsonl` and optionally `kg.tsv`. Without it the synthetic
    /// corpus is generated in memory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Tab-separated `head relation tail` triples.
    #[arg(long)]
    pub kg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// Also report ReR@k for this k; fails if a slot has fewer candidates.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Context file; `-` or omitted reads standard input.
    #[arg(long)]
    pub context: Option<PathBuf>,
    /// Print the raw template before filling.
    #[arg(long)]
    pub show_template: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Directory served under `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    /// Sessions are loaded from and saved to this JSON file.
    #[arg(long)]
    pub sessions_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub conversations: usize,
    #[arg(long, default_value_t = 8)]
    pub items: usize,
    #[arg(long, default_value_t = 4)]
    pub genres: usize,
    #[arg(long, default_value_t = 200)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub data: PathBuf,
}

pub const DEFAULT_SYNTH: SynthSpec = SynthSpec {
    n_conversations: 64,
    n_items: 8,
    n_genres: 4,
    vocab_size: 200,
    seed: 13,
};

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Generate(a) => generate(a),
        Command::ChatServe(a) => serve(a),
        Command::Synth(a) => synth(a),
        Command::Ingest(a) => ingest(a),
    }
}

pub fn load_corpus(args: &CorpusArgs, split_seed: u64) -> Result<Corpus> {
    match (&args.data, args.corpus) {
        (None, CorpusKind::Synthetic) => {
            let synth = synth_corpus(DEFAULT_SYNTH)?;
            Ok(Corpus::from_synth(&synth, split_seed)?)
        }
        (None, CorpusKind::Redial) => bail!("--corpus redial needs --data"),
        (Some(path), _) => {
            let (dialogues, kg) = if path.is_dir() {
                let kg = path.join("kg.tsv");
                (path.join("dialogues.jsonl"), kg.exists().then_some(kg))
            } else {
                (path.clone(), None)
            };
            let kg = args.kg.clone().or(kg);
            Corpus::load(&dialogues, kg.as_deref(), split_seed)
                .with_context(|| format!("loading corpus from {}", path.display()))
        }
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::load(&a.config).with_context(|| format!("reading config {}", a.config.display()))?;
    if let Some(m) = a.model {
        cfg.model.variant = match m {
            ModelKind::Ntrd => Variant::Ntrd,
            ModelKind::Switching => Variant::Switching,
        };
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let corpus = load_corpus(&a.corpus, cfg.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("split.json"), serde_json::to_vec_pretty(&corpus.split)?)?;
    fs::write(a.out.join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;
    let mut trainer = Trainer::new(cfg, &corpus)?;
    let log = trainer.run(Some(&a.out))?;
    let last = log.steps().last();
    println!(
        "trained {} steps over {} epochs; final loss {}",
        trainer.state.step,
        trainer.state.epoch,
        last.map_or_else(|| "n/a".into(), |s| format!("{:.5}", s.loss))
    );
    println!("checkpoint: {}", a.out.join("last.ckpt").display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let corpus = load_corpus(&a.corpus, ckpt.config.seed)?;
    if corpus.catalog != ckpt.catalog {
        bail!(
            "checkpoint catalog ({} items) does not match the corpus catalog ({} items)",
            ckpt.catalog.len(),
            corpus.catalog.len()
        );
    }
    let model = model_from_checkpoint(&ckpt)?;
    let convs = match a.split {
        SplitName::Train => corpus.train(),
        SplitName::Validation => corpus.validation(),
        SplitName::Test => corpus.test(),
    };
    let examples = model.prepare_conversations(&convs);
    if examples.is_empty() {
        bail!("the {:?} split has no recommender turns", a.split);
    }
    let records = generate_records(&model, &examples)?;
    let novel: BTreeSet<_> = corpus.split.novel_item_ids.clone();
    let rep = report(&records, &model.catalog, &novel)?;
    let extra = a.k.map(|k| rer_at_k(&records, k).map(|v| (k, v))).transpose()?;
    fs::create_dir_all(&a.out)?;
    write_records(a.out.join("records.jsonl"), &records)?;
    fs::write(a.out.join("report.json"), rep.to_json())?;
    print!("{}", rep.table());
    if let Some((k, v)) = extra {
        println!(
            "{:<18}{v:>10.2}   {} item turns",
            format!("ReR@{k}"),
            rep.counts.item_turns
        );
    }
    Ok(())
}

fn read_input(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) if p != Path::new("-") => fs::read_to_string(p).with_context(|| format!("reading {}", p.display())),
        _ => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            Ok(s)
        }
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let model = model_from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let contexts = parse_contexts(&read_input(a.context.as_deref())?);
    if contexts.is_empty() {
        bail!("empty context: supply at least one turn");
    }
    for (n, ctx) in contexts.iter().enumerate() {
        let turns: Vec<_> = ctx
            .iter()
            .map(|(role, text)| model.parse_turn(*role, text, true))
            .collect();
        let reply = model.reply(&turns)?;
        if n > 0 {
            println!();
        }
        if a.show_template {
            println!("template: {}", reply.template.join(" "));
        }
        for (i, s) in reply.slots.iter().enumerate() {
            let mut order: Vec<usize> = (0..s.candidates.len()).collect();
            order.sort_by(|&x, &y| s.probabilities[y].total_cmp(&s.probabilities[x]).then(x.cmp(&y)));
            let top: Vec<String> = order
                .iter()
                .take(5)
                .map(|&j| format!("@{} {:.3}", s.candidates[j], s.probabilities[j]))
                .collect();
            println!("slot {}: @{} ({})", i + 1, s.item, top.join(", "));
        }
        println!("response: {}", reply.text);
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let model = model_from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let state = Arc::new(AppState::new(model, a.checkpoint.display().to_string()));
    if let Some(p) = a.sessions_file.as_deref().filter(|p| p.exists()) {
        let n = state.load_sessions(p)?;
        log::info!("restored {n} sessions from {}", p.display());
    }
    let app = router(Arc::clone(&state), a.static_dir.clone());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        log::info!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    })?;
    if let Some(p) = &a.sessions_file {
        state.save_sessions(p)?;
        log::info!("saved sessions to {}", p.display());
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_conversations: a.conversations,
        n_items: a.items,
        n_genres: a.genres,
        vocab_size: a.vocab_size,
        seed: a.seed,
    };
    let corpus = synth_corpus(spec)?;
    corpus.write(&a.out)?;
    println!(
        "wrote {} conversations over {} items to {}",
        corpus.conversations.len(),
        corpus.catalog.len(),
        a.out.display()
    );
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let (convs, stats) = ingest_redial(&a.data)?;
    let items: BTreeSet<_> = convs.iter().flat_map(|c| c.mentioned_items.keys().copied()).collect();
    let out = serde_json::json!({
        "conversations": convs.len(),
        "items": items.len(),
        "utterances": stats.utterances,
        "malformed_lines": stats.malformed_lines,
        "unknown_mentions": stats.unknown_mentions,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
