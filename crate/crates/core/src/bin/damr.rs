use std::collections::HashSet;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use damr::embed::{Embedder, EmbeddingCache, EmbeddingProvider, RemoteEmbedder, StubMode};
use damr::evaluator::{
    load_checkpoint, pretrain, ranking_accuracy, save_checkpoint, MiningConfig, ScorerDims, ScorerParams, TrainConfig,
};
use damr::harness::{self, EvalConfig, PlannerSetup, SweepParam, SynthSpec};
use damr::kg::KnowledgeGraph;
use damr::mcts::{search, BackpropMode, SearchConfig};
use damr::planner::{LlmPlanner, OraclePlanner, Planner, SimilarityPlanner};
use damr::remote::RemoteClient;

#[derive(Parser)]
#[command(
    name = "damr",
    version,
    about = "Knowledge-graph question answering with guided tree search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the path evaluator on supervision mined from a QA dataset.
    Pretrain(PretrainArgs),
    /// Answer one question.
    Answer(AnswerArgs),
    /// Evaluate a dataset and write a JSON report.
    Eval(EvalArgs),
    /// Generate a synthetic graph and QA set.
    Synth(SynthArgs),
    /// Evaluate a dataset over a range of one search parameter.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedKind {
    /// Offline bag-of-words stub.
    Stub,
    /// Offline stub hashing the whole text.
    StubHash,
    /// Remote embeddings endpoint.
    Remote,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long, value_enum, default_value = "stub")]
    embed: EmbedKind,
    #[arg(long, default_value_t = 0)]
    embed_seed: u64,
    #[arg(long, default_value = "text-embedding")]
    embed_model: String,
    /// JSON-lines cache file, created if missing.
    #[arg(long)]
    embed_cache: Option<PathBuf>,
}

impl EmbedArgs {
    fn build(&self, dim: usize) -> Result<Embedder> {
        let provider = match self.embed {
            EmbedKind::Stub => EmbeddingProvider::Stub(damr::embed::StubEmbedder::new(
                self.embed_seed,
                dim,
                StubMode::BagOfWords,
            )),
            EmbedKind::StubHash => {
                EmbeddingProvider::Stub(damr::embed::StubEmbedder::new(self.embed_seed, dim, StubMode::Hashed))
            }
            EmbedKind::Remote => {
                EmbeddingProvider::Remote(RemoteEmbedder::new(RemoteClient::from_env()?, &self.embed_model, dim))
            }
        };
        let cache = match &self.embed_cache {
            Some(p) => EmbeddingCache::open(p)?,
            None => EmbeddingCache::new(),
        };
        Ok(Embedder::new(provider, cache))
    }
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long)]
    kg: PathBuf,
    /// Add an inverse edge (label suffix `^inv`) for every triple.
    #[arg(long)]
    inverse: bool,
}

impl GraphArgs {
    fn load(&self) -> Result<KnowledgeGraph> {
        KnowledgeGraph::load(&self.kg, self.inverse).with_context(|| format!("loading {}", self.kg.display()))
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Held-out questions (on the same graph) for ranking accuracy.
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Embedding (input) dimension.
    #[arg(long, default_value_t = 1024)]
    dim: usize,
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Feed-forward width; defaults to four times the model width.
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long, default_value_t = 8)]
    max_positions: usize,
    /// Hop limit for mined paths.
    #[arg(long, default_value_t = 4)]
    mine_len: usize,
    #[arg(long, default_value_t = 1)]
    hard_negatives: usize,
    #[arg(long, default_value_t = 1)]
    random_negatives: usize,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlannerKind {
    Llm,
    Sim,
    Mock,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    LiteralAvg,
    ClassicSum,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long, default_value_t = 30)]
    iters: usize,
    #[arg(long, default_value_t = 3)]
    top_k: usize,
    #[arg(long, default_value_t = 4)]
    max_len: usize,
    #[arg(long, default_value_t = std::f64::consts::SQRT_2)]
    c: f64,
    #[arg(long, value_enum, default_value = "literal-avg")]
    mode: ModeArg,
    #[arg(long, default_value_t = 1)]
    finetune_period: usize,
    #[arg(long, default_value_t = 8)]
    pairs: usize,
    #[arg(long, default_value_t = SearchConfig::default().finetune_epochs)]
    finetune_epochs: usize,
    #[arg(long, default_value_t = 1e-5)]
    finetune_lr: f64,
    /// Disable online fine-tuning.
    #[arg(long)]
    no_finetune: bool,
    #[arg(long, default_value_t = 16)]
    branch_cap: usize,
    #[arg(long, default_value_t = 10)]
    top_m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SearchArgs {
    fn config(&self) -> SearchConfig {
        SearchConfig {
            iterations: self.iters,
            top_k: self.top_k,
            max_len: self.max_len,
            c: self.c,
            mode: match self.mode {
                ModeArg::LiteralAvg => BackpropMode::LiteralAvg,
                ModeArg::ClassicSum => BackpropMode::ClassicSum,
            },
            finetune: !self.no_finetune,
            finetune_period: self.finetune_period,
            pairs_per_finetune: self.pairs,
            finetune_epochs: self.finetune_epochs,
            finetune_lr: self.finetune_lr,
            branch_cap: self.branch_cap,
            top_m: self.top_m,
        }
    }
}

#[derive(Args)]
struct PlannerArgs {
    #[arg(long, value_enum, default_value = "sim")]
    planner: PlannerKind,
    #[arg(long, default_value = "gpt-4.1")]
    llm_model: String,
    /// Probability that the mock planner demotes gold relations.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

fn shared_planner(args: &PlannerArgs, embedder: &Arc<Embedder>) -> Result<Planner> {
    Ok(match args.planner {
        PlannerKind::Sim => Planner::Similarity(SimilarityPlanner::new(embedder.clone())),
        PlannerKind::Llm => Planner::Llm(LlmPlanner::new(
            RemoteClient::from_env()?,
            &args.llm_model,
            Some(SimilarityPlanner::new(embedder.clone())),
        )),
        PlannerKind::Mock => bail!("the mock planner is built per question"),
    })
}

#[derive(Args)]
struct AnswerArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    question: String,
    /// Comma-separated topic entity labels.
    #[arg(long, value_delimiter = ',', required = true)]
    topics: Vec<String>,
    /// Comma-separated gold relation labels for the mock planner.
    #[arg(long, value_delimiter = ',')]
    gold: Vec<String>,
    #[command(flatten)]
    planner: PlannerArgs,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Keep fine-tuned weights across questions instead of resetting per question.
    #[arg(long)]
    carry_scorer: bool,
    /// Include per-question wall time in the report.
    #[arg(long)]
    timings: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    planner: PlannerArgs,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// One of top-k, max-len, iters, c, finetune-period.
    #[arg(long)]
    param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    entities: usize,
    #[arg(long, default_value_t = 20)]
    relations: usize,
    #[arg(long, default_value_t = 50)]
    questions: usize,
    #[arg(long, default_value_t = 3)]
    path_len: usize,
    #[arg(long, default_value_t = 4)]
    branch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// End every gold path with a dedicated `marker` relation.
    #[arg(long)]
    marker: bool,
    /// Give answer entities distractor branches too.
    #[arg(long)]
    answer_branches: bool,
    #[arg(long, default_value_t = 4)]
    max_len: usize,
    #[arg(long)]
    out_kg: PathBuf,
    #[arg(long)]
    out_data: PathBuf,
}

fn run_pretrain(a: PretrainArgs) -> Result<()> {
    let kg = a.graph.load()?;
    let items = harness::load_dataset(&a.train)?;
    let embedder = a.embed.build(a.dim)?;
    let mining = MiningConfig {
        max_len: a.mine_len,
        hard_per_positive: a.hard_negatives,
        random_per_positive: a.random_negatives,
        seed: a.seed,
        ..MiningConfig::default()
    };
    let triplets = harness::mine_dataset(&kg, &items, &embedder, &mining)?;
    if triplets.is_empty() {
        bail!("no training triplets could be mined from {}", a.train.display());
    }
    log::info!("mined {} triplets from {} questions", triplets.len(), items.len());
    let dims = ScorerDims {
        d_in: a.dim,
        d_model: a.d_model,
        layers: a.layers,
        heads: a.heads,
        d_ff: a.d_ff.unwrap_or(4 * a.d_model),
        max_len: a.max_positions,
    };
    let mut params = ScorerParams::init(dims, a.seed)?;
    let config = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let curve = pretrain(&mut params, &triplets, &config)?;
    save_checkpoint(&params, &a.out)?;
    let mut report = json!({
        "triplets": triplets.len(),
        "train_accuracy": ranking_accuracy(&params, &triplets)?,
        "loss_curve": curve,
        "checkpoint": a.out,
    });
    if let Some(valid) = &a.valid {
        let held = harness::mine_dataset(&kg, &harness::load_dataset(valid)?, &embedder, &mining)?;
        report["valid_triplets"] = json!(held.len());
        report["valid_accuracy"] = json!(ranking_accuracy(&params, &held)?);
    }
    embedder.cache().persist()?;
    emit(&serde_json::to_string_pretty(&report)?)
}

fn run_answer(a: AnswerArgs) -> Result<()> {
    let kg = a.graph.load()?;
    let mut params = load_checkpoint(&a.ckpt)?;
    let embedder = Arc::new(a.embed.build(params.dims.d_in)?);
    let planner = match a.planner.planner {
        PlannerKind::Mock => Planner::Mock(OraclePlanner::new(
            if a.gold.is_empty() {
                vec![]
            } else {
                vec![a.gold.clone()]
            },
            a.planner.noise,
            a.search.seed,
        )),
        _ => shared_planner(&a.planner, &embedder)?,
    };
    let topics = kg.resolve_entities(&a.topics)?;
    let result = search(
        &kg,
        &a.question,
        &topics,
        &planner,
        &mut params,
        &embedder,
        &a.search.config(),
        a.search.seed,
    )?;
    embedder.cache().persist()?;
    let answers: Vec<_> = result
        .answers
        .iter()
        .map(|ans| {
            json!({
                "entity": kg.entity_label(ans.entity),
                "score": ans.score,
                "path": ans.path.iter().map(|&r| kg.relation_label(r)).collect::<Vec<_>>(),
            })
        })
        .collect();
    emit(&serde_json::to_string_pretty(&json!({
        "answers": answers,
        "usage": { "llm_calls": result.usage.llm_calls, "tokens": result.usage.tokens() },
    }))?)
}

struct EvalInputs {
    kg: KnowledgeGraph,
    items: Vec<harness::QAItem>,
    params: ScorerParams,
    embedder: Arc<Embedder>,
    shared: Option<Planner>,
    config: EvalConfig,
}

fn eval_inputs(a: &EvalArgs) -> Result<EvalInputs> {
    let kg = a.graph.load()?;
    let items = harness::load_dataset(&a.data)?;
    let params = load_checkpoint(&a.ckpt)?;
    let embedder = Arc::new(a.embed.build(params.dims.d_in)?);
    let shared = match a.planner.planner {
        PlannerKind::Mock => None,
        _ => Some(shared_planner(&a.planner, &embedder)?),
    };
    let config = EvalConfig {
        search: a.search.config(),
        seed: a.search.seed,
        workers: a.workers,
        carry_scorer: a.carry_scorer,
        timings: a.timings,
    };
    Ok(EvalInputs {
        kg,
        items,
        params,
        embedder,
        shared,
        config,
    })
}

fn setup<'a>(inputs: &'a EvalInputs, a: &PlannerArgs, seed: u64) -> PlannerSetup<'a> {
    match &inputs.shared {
        Some(p) => PlannerSetup::Shared(p),
        None => PlannerSetup::Oracle { noise: a.noise, seed },
    }
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let inputs = eval_inputs(&a)?;
    let planner = setup(&inputs, &a.planner, a.search.seed);
    let report = harness::evaluate(
        &inputs.kg,
        &inputs.items,
        &planner,
        &inputs.params,
        &inputs.embedder,
        &inputs.config,
    )?;
    inputs.embedder.cache().persist()?;
    match &a.out {
        Some(path) => {
            report.write(path)?;
            eprintln!(
                "hits@1 {:.4}  f1 {:.4}  calls {:.2}  tokens {:.1}",
                report.aggregate.hits_at_1, report.aggregate.f1, report.aggregate.llm_calls, report.aggregate.tokens
            );
        }
        None => emit(&report.to_json())?,
    }
    Ok(())
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let param: SweepParam = a.param.parse()?;
    let inputs = eval_inputs(&a.eval)?;
    let planner = setup(&inputs, &a.eval.planner, a.eval.search.seed);
    let points = harness::sweep(
        &inputs.kg,
        &inputs.items,
        &planner,
        &inputs.params,
        &inputs.embedder,
        &inputs.config,
        param,
        &a.values,
    )?;
    inputs.embedder.cache().persist()?;
    let doc = serde_json::to_string_pretty(&json!({ "param": a.param, "points": points }))? + "\n";
    match &a.eval.out {
        Some(path) => std::fs::write(path, doc).with_context(|| format!("writing {}", path.display()))?,
        None => emit(doc.trim_end())?,
    }
    Ok(())
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        entities: a.entities,
        relations: a.relations,
        questions: a.questions,
        path_len: a.path_len,
        branch: a.branch,
        seed: a.seed,
        marker: a.marker,
        answer_branches: a.answer_branches,
        max_len: a.max_len,
    };
    let synth = harness::generate_synthetic(&spec)?;
    synth.kg.write_tsv(&a.out_kg)?;
    harness::write_dataset(&synth.items, &a.out_data)?;
    let answers: HashSet<&String> = synth.items.iter().flat_map(|i| &i.answers).collect();
    eprintln!(
        "wrote {} triples over {} entities and {} questions ({} distinct answers)",
        synth.kg.num_triples(),
        synth.kg.num_entities(),
        synth.items.len(),
        answers.len()
    );
    Ok(())
}

/// Writes one document to stdout; a closed pipe ends output quietly.
fn emit(doc: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{doc}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Pretrain(a) => run_pretrain(a),
        Command::Answer(a) => run_answer(a),
        Command::Eval(a) => run_eval(a),
        Command::Synth(a) => run_synth(a),
        Command::Sweep(a) => run_sweep(a),
    }
}
