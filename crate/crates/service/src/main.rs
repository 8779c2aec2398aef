use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use relevance_core::domain::{Case, Directive, Query, RelevanceLabel};
use relevance_core::model::checkpoint::ModelCheckpoint;
use relevance_core::model::train::train_multitask;
use relevance_core::model::Model;
use relevance_core::par::ExecMode;
use relevance_core::pipeline::{labeled_pairs, CaseSubmission, Engine, HumanVerdict, PipelineConfig};
use relevance_core::records;
use relevance_core::world::{generate_world, WorldConfig};
use relevance_service::{ndjson_lines, router, transcript_events, AppState};

#[derive(Parser)]
#[command(name = "relevance", version, about = "Closed-loop search relevance engine")]
struct Cli {
    /// State directory holding every record file of a run.
    #[arg(long, global = true, default_value = "state")]
    state: PathBuf,
    /// Disable data parallelism.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct WorldArgs {
    /// JSON pipeline config; flags below override its world section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    products: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

impl WorldArgs {
    fn pipeline_config(&self) -> Result<PipelineConfig> {
        let mut c: PipelineConfig = match &self.config {
            Some(p) => records::read_json(p).with_context(|| format!("reading {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        let w: &mut WorldConfig = &mut c.world;
        if let Some(s) = self.seed {
            w.seed = s;
        }
        if let Some(n) = self.products {
            w.n_products = n;
        }
        if let Some(n) = self.queries {
            w.n_queries = n;
        }
        if let Some(r) = self.noise {
            w.noise_rate = r;
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a fresh run in the state directory.
    Init {
        #[command(flatten)]
        world: WorldArgs,
        /// Replace an existing state directory.
        #[arg(long)]
        force: bool,
    },
    /// Generate a world and export it as record files.
    World {
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Submit, inspect and adjudicate cases.
    #[command(subcommand)]
    Case(CaseCmd),
    /// Runtime directives.
    #[command(subcommand)]
    Directive(DirectiveCmd),
    /// Standards amendment proposals.
    #[command(subcommand)]
    Proposal(ProposalCmd),
    /// Current standards document.
    Standards,
    /// Online prediction for one pair, directives included.
    Score {
        #[arg(long)]
        query: String,
        #[arg(long)]
        product: String,
        #[arg(long)]
        language: Option<String>,
    },
    /// Counters and trends for the dashboard.
    Metrics,
    /// Iteration cycles and the circuit breaker.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Train a checkpoint on the run's corpus.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        version: u64,
    },
    /// Golden accuracy and held-out bad-case rate of a checkpoint.
    Eval {
        /// Defaults to the deployed checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Embedding of a query text or a catalog product.
    Embed {
        #[arg(long, conflicts_with = "product")]
        query: Option<String>,
        #[arg(long)]
        product: Option<String>,
    },
    /// Write the product embedding index of the deployed checkpoint.
    IndexBuild {
        #[arg(long)]
        out: PathBuf,
    },
    /// Diagnose and refine a batch of cases (JSON lines) without applying.
    Optimize {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Precompute associations for a slice of queries (one text per line).
    DeepSearch {
        #[arg(long)]
        slice: PathBuf,
        #[arg(long, default_value_t = 6)]
        budget: usize,
    },
    /// Rewrite the memory store files, dropping torn or repeated lines.
    Compact,
    /// Run the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Subcommand)]
enum CaseCmd {
    Submit {
        #[arg(long)]
        query: String,
        #[arg(long)]
        product: String,
        #[arg(long, default_value = "")]
        complaint: String,
        #[arg(long)]
        language: Option<String>,
        #[arg(long)]
        request_human: bool,
    },
    List,
    Show { id: String },
    /// Transcript as JSON lines, the same events the API streams.
    Transcript {
        id: String,
        #[arg(long, default_value_t = 0)]
        from: usize,
    },
    Adjudicate {
        id: String,
        #[arg(long)]
        label: u8,
        #[arg(long)]
        justification: String,
    },
}

#[derive(Subcommand)]
enum DirectiveCmd {
    /// Activate a directive from a JSON record file.
    Add { file: PathBuf },
    List,
    Remove { id: String },
}

#[derive(Subcommand)]
enum ProposalCmd {
    List,
    Approve { id: String },
    Reject {
        id: String,
        #[arg(long)]
        reason: String,
    },
}

#[derive(Subcommand)]
enum PipelineCmd {
    RunCycle {
        #[arg(long, default_value_t = 1)]
        cycles: usize,
    },
    ReleaseBreaker,
}

fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn print<T: Serialize>(v: &T) -> Result<()> {
    emit(&(serde_json::to_string_pretty(v)? + "\n"))
}

fn open(dir: &Path, exec: ExecMode) -> Result<Engine> {
    if !dir.join(relevance_core::pipeline::store::STATE).exists() {
        bail!("no run at {}; create one with `relevance init`", dir.display());
    }
    Engine::open(dir, exec).with_context(|| format!("opening {}", dir.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let exec = if cli.sequential { ExecMode::Sequential } else { ExecMode::Parallel };
    let dir = cli.state.as_path();
    match cli.cmd {
        Cmd::Init { world, force } => {
            if dir.exists() {
                if !force {
                    bail!("{} already exists (use --force to replace)", dir.display());
                }
                std::fs::remove_dir_all(dir)?;
            }
            let e = Engine::init(world.pipeline_config()?, Some(dir), exec)?;
            print(&e.metrics())?;
        }
        Cmd::World { world, out } => {
            let w = generate_world(&world.pipeline_config()?.world)?;
            w.export(&out)?;
            print(&serde_json::json!({ "digest": w.digest()?, "products": w.products.len(), "queries": w.queries.len() }))?;
        }
        Cmd::Case(c) => match c {
            CaseCmd::Submit { query, product, complaint, language, request_human } => {
                let mut e = open(dir, exec)?;
                print(&e.submit_case(CaseSubmission { query, product_id: product, complaint, language, request_human })?)?;
            }
            CaseCmd::List => print(&open(dir, exec)?.cases)?,
            CaseCmd::Show { id } => print(open(dir, exec)?.case(&id)?)?,
            CaseCmd::Transcript { id, from } => {
                let e = open(dir, exec)?;
                for line in ndjson_lines(&transcript_events(e.case(&id)?, from)?)? {
                    emit(&line)?;
                }
            }
            CaseCmd::Adjudicate { id, label, justification } => {
                let mut e = open(dir, exec)?;
                print(&e.adjudicate(&id, HumanVerdict { label: RelevanceLabel::try_from(label)?, justification })?)?;
            }
        },
        Cmd::Directive(d) => match d {
            DirectiveCmd::Add { file } => {
                let d: Directive = records::read_json(&file)?;
                let mut e = open(dir, exec)?;
                e.add_directive(d.clone())?;
                print(&d)?;
            }
            DirectiveCmd::List => print(&open(dir, exec)?.directives)?,
            DirectiveCmd::Remove { id } => print(&open(dir, exec)?.remove_directive(&id)?)?,
        },
        Cmd::Proposal(p) => match p {
            ProposalCmd::List => print(&open(dir, exec)?.proposals)?,
            ProposalCmd::Approve { id } => print(&open(dir, exec)?.approve_proposal(&id)?)?,
            ProposalCmd::Reject { id, reason } => print(&open(dir, exec)?.reject_proposal(&id, &reason)?)?,
        },
        Cmd::Standards => print(&open(dir, exec)?.standards)?,
        Cmd::Score { query, product, language } => {
            let e = open(dir, exec)?;
            let q = e.resolve_query(&query, language.as_deref())?;
            print(&e.score(&q, &product)?)?;
        }
        Cmd::Metrics => print(&open(dir, exec)?.metrics())?,
        Cmd::Pipeline(p) => match p {
            PipelineCmd::RunCycle { cycles } => {
                let mut e = open(dir, exec)?;
                for _ in 0..cycles {
                    print(&e.run_cycle()?)?;
                }
            }
            PipelineCmd::ReleaseBreaker => print(&open(dir, exec)?.release_breaker()?)?,
        },
        Cmd::Train { out, version } => {
            let e = open(dir, exec)?;
            let pairs = labeled_pairs(&e.world, &e.corpus.samples)?;
            let ckpt = train_multitask(&pairs, e.world.lexicons(), &e.config.train, version)?;
            ckpt.save(&out)?;
            print(&serde_json::json!({ "checkpoint": out, "version": version, "pairs": pairs.len() }))?;
        }
        Cmd::Eval { checkpoint } => {
            let e = open(dir, exec)?;
            let model = match checkpoint {
                Some(p) => Model::new(ModelCheckpoint::load(&p)?, e.world.lexicons().clone()),
                None => e.model().clone(),
            };
            let records = e.evaluate_heldout(&model)?;
            print(&serde_json::json!({
                "version": model.version(),
                "golden_accuracy": e.golden_accuracy(&model)?,
                "heldout_pairs": records.len(),
                "heldout_bad_case_rate": Engine::held_out_bad_rate(&records)?,
            }))?;
        }
        Cmd::Embed { query, product } => {
            let e = open(dir, exec)?;
            let v = match (query, product) {
                (Some(t), None) => e.model().encode_query(&Query::new("cli", t, "en")?),
                (None, Some(p)) => e.model().encode_product(e.world.serving_product(&p)?),
                _ => bail!("pass exactly one of --query or --product"),
            };
            print(&v)?;
        }
        Cmd::IndexBuild { out } => {
            let e = open(dir, exec)?;
            let idx = e.model().build_index(&e.world.serving_products, exec);
            records::write_json(&out, &idx)?;
            print(&serde_json::json!({ "index": out, "products": idx.len(), "dim": idx.dim, "checkpoint_version": idx.checkpoint_version }))?;
        }
        Cmd::Optimize { cases, out } => {
            let cases: Vec<Case> = records::read_jsonl(&cases)?;
            let e = open(dir, exec)?;
            let o = e.optimize_cases(&cases)?;
            match out {
                Some(p) => {
                    records::write_json(&p, &o)?;
                    print(&serde_json::json!({ "out": p, "corrections": o.delta.corrections.len(), "additions": o.delta.additions.len() }))?;
                }
                None => print(&o)?,
            }
        }
        Cmd::DeepSearch { slice, budget } => {
            let text = std::fs::read_to_string(&slice).with_context(|| format!("reading {}", slice.display()))?;
            let mut e = open(dir, exec)?;
            let queries = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| e.resolve_query(l, None))
                .collect::<relevance_core::Result<Vec<_>>>()?;
            for r in e.build_associations(&queries, budget)? {
                emit(&(records::to_line(&r)? + "\n"))?;
            }
        }
        Cmd::Compact => {
            let m = relevance_core::memory::MemoryStore::open(&dir.join(relevance_core::pipeline::store::MEMORY_DIR))?;
            print(&serde_json::json!({ "entries": m.compact()? }))?;
        }
        Cmd::Serve { addr } => {
            let e = open(dir, exec)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
                eprintln!("listening on {}", listener.local_addr()?);
                axum::serve(listener, router(AppState::new(e))).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}
