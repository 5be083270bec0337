use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use navtoken_client::{Client, ClientError};
use navtoken_core::bats::SamplePlan;
use navtoken_core::metrics::{self, EpisodeResult, EvalConfig};
use navtoken_core::organizer::grid_pool;
use navtoken_core::sim::{SimConfig, SimRun, Strategy};
use navtoken_core::trajectory::Trajectory;
use navtoken_core::tvi::{DEFAULT_EMBED_DIM, DEFAULT_PE_DIM};
use navtoken_core::wire::*;
use navtoken_core::{episode, COARSE_TOKENS_PER_FRAME};
use navtoken_server::{open_cache, AppState};

mod config;

use config::Config;

const DEFAULT_BUDGET: u64 = 1600;
const DEFAULT_CAMERAS: u32 = 4;
const DEFAULT_MAX_LATEST: u32 = 1000;

#[derive(Parser)]
#[command(name = "navtoken", version, about = "Budgeted token planning for multi-camera navigation")]
struct Cli {
    /// Service URL. Without one an in-process service is started.
    #[arg(long, global = true)]
    server: Option<String>,
    /// Feature cache for the in-process service.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Channel count of the in-process cache.
    #[arg(long, global = true, default_value_t = DEFAULT_EMBED_DIM)]
    cache_dim: usize,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decay-rate table and sampling curves for a budget.
    Plan(PlanArgs),
    /// Lay out the token sequence for the last step of an episode.
    Organize(OrganizeArgs),
    /// Run synthetic episodes end to end.
    Simulate(SimulateArgs),
    /// Score EpisodeResult JSONL.
    Eval(EvalArgs),
    /// Inspect or fill the feature cache.
    #[command(subcommand)]
    Cache(CacheCommand),
    /// Fit per-embodiment scaling factors from trajectory JSONL.
    FitAlpha(FitAlphaArgs),
}

#[derive(Args, Default)]
struct BudgetArgs {
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    cameras: Option<u32>,
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long)]
    max_latest: Option<u32>,
    /// Emit `P(t)` for this latest timestep; repeatable.
    #[arg(long = "curve")]
    curves: Vec<u32>,
    /// Curve CSV; defaults to `<out>` with a `.curves.csv` extension.
    #[arg(long)]
    curves_out: Option<PathBuf>,
}

#[derive(Args)]
struct OrganizeArgs {
    episode: PathBuf,
    /// SamplePlan JSON to lay out instead of drawing one.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    pe_dim: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    /// bats, uniform or linear; repeatable, runs concurrently.
    #[arg(long = "strategy", value_delimiter = ',')]
    strategies: Vec<Strategy>,
    #[arg(long)]
    t_max: Option<u32>,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long)]
    text_tokens: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    pe_dim: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    results: PathBuf,
    #[arg(long)]
    success_distance: Option<f64>,
    /// Per-episode CSV; defaults to `<out>` with a `.episodes.csv` extension.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CacheCommand {
    Stats,
    Keys,
    /// Print one entry as `{"tokens": [[..], ..]}`.
    Get { episode: String, t: u32, camera: u16 },
    /// Store tokens from a JSON entry file, or pool a raw `576 x C` f32 grid with `--grid`.
    Put {
        episode: String,
        t: u32,
        camera: u16,
        file: PathBuf,
        #[arg(long)]
        grid: bool,
    },
}

#[derive(Args)]
struct FitAlphaArgs {
    trajectories: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Infeasible(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Infeasible(_) => 3,
            Self::Other(_) => 1,
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match e.kind() {
            Some(ErrorKind::InfeasibleBudget) => Self::Infeasible(e.to_string()),
            Some(ErrorKind::InvalidRequest) => Self::Config(e.to_string()),
            _ => Self::Other(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Other(format!("{}: {e}", path.display()))
}

type Outcome<T = ()> = Result<T, Failure>;

struct Ctx {
    cfg: Config,
    seed: Option<u64>,
    out: Option<PathBuf>,
    client: Client,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.seed.or(self.cfg.seed).unwrap_or(0)
    }

    fn budget(&self, a: &BudgetArgs) -> BudgetSpec {
        let b = &self.cfg.budget;
        BudgetSpec {
            budget: a.budget.or(b.budget).unwrap_or(DEFAULT_BUDGET),
            cameras: a.cameras.or(b.cameras).unwrap_or(DEFAULT_CAMERAS),
            epsilon: a.epsilon.or(b.epsilon).unwrap_or(navtoken_core::bats::DEFAULT_EPSILON),
        }
    }

    fn output(&self) -> Outcome<Box<dyn Write>> {
        match &self.out {
            Some(p) => Ok(Box::new(io::BufWriter::new(File::create(p).map_err(|e| io_err(p, e))?))),
            None => Ok(Box::new(io::stdout().lock())),
        }
    }

    fn write_json(&self, value: &impl Serialize) -> Outcome {
        let mut w = self.output()?;
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| Failure::Other(e.to_string()))?;
        writeln!(w).and_then(|_| w.flush()).map_err(|e| Failure::Other(e.to_string()))
    }

    /// `<out>` with its extension replaced, for secondary outputs.
    fn sibling(&self, explicit: &Option<PathBuf>, ext: &str) -> Option<PathBuf> {
        explicit.clone().or_else(|| self.out.as_ref().map(|p| p.with_extension(ext)))
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Outcome<Vec<T>> {
    let file = File::open(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Failure::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

async fn plan(ctx: &Ctx, a: PlanArgs) -> Outcome {
    let budget = ctx.budget(&a.budget);
    let max_latest = a.max_latest.or(ctx.cfg.plan.max_latest).unwrap_or(DEFAULT_MAX_LATEST);
    let table = ctx.client.table(&TableRequest { budget, max_latest }).await?;
    let mut w = ctx.output()?;
    table.table.write_csv(&mut w).map_err(|e| Failure::Other(e.to_string()))?;
    match table.feasibility_boundary {
        Some(t) => eprintln!("feasible up to T={t} of {max_latest}, cap {:.3} history frames", table.table.cap),
        None => eprintln!("no feasible T up to {max_latest}"),
    }

    let curves = if a.curves.is_empty() { ctx.cfg.plan.curves.clone() } else { a.curves };
    if curves.is_empty() {
        return Ok(());
    }
    let curves_path = ctx.sibling(&a.curves_out, "curves.csv");
    let mut cw: Box<dyn Write> = match &curves_path {
        Some(p) => Box::new(File::create(p).map_err(|e| io_err(p, e))?),
        None => {
            writeln!(w).map_err(|e| Failure::Other(e.to_string()))?;
            w
        }
    };
    let mut csv = csv::Writer::from_writer(&mut cw);
    csv.write_record(["T", "t", "p"]).map_err(|e| Failure::Other(e.to_string()))?;
    for latest in curves {
        let solved = ctx.client.solve(&SolveRequest { budget, latest, points: true }).await?;
        for (t, p) in solved.points.unwrap_or_default() {
            csv.write_record([latest.to_string(), t.to_string(), p.to_string()]).map_err(|e| Failure::Other(e.to_string()))?;
        }
    }
    csv.flush().map_err(|e| Failure::Other(e.to_string()))
}

async fn organize(ctx: &Ctx, a: OrganizeArgs) -> Outcome {
    let text = std::fs::read_to_string(&a.episode).map_err(|e| Failure::Config(format!("{}: {e}", a.episode.display())))?;
    let ep = episode::ingest_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", a.episode.display())))?;
    let plan: Option<SamplePlan> = match &a.plan {
        Some(p) => {
            let f = File::open(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            Some(serde_json::from_reader(f).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let budget_given = a.budget.budget.is_some() || ctx.cfg.budget.budget.is_some();
    let budget = (plan.is_none() && budget_given).then(|| {
        let mut b = ctx.budget(&a.budget);
        if a.budget.cameras.is_none() && ctx.cfg.budget.cameras.is_none() {
            b.cameras = ep.rig.len() as u32;
        }
        b
    });
    let oc = &ctx.cfg.organize;
    let features = match a.features.as_deref() {
        Some("refs") => FeatureSourceKind::Refs,
        Some("synthetic") => FeatureSourceKind::Synthetic,
        Some(other) => return Err(Failure::Config(format!("unknown feature source {other:?} (refs, synthetic)"))),
        None => oc.features.unwrap_or_default(),
    };
    let req = OrganizeRequest {
        episode: text,
        plan,
        budget,
        seed: ctx.seed(),
        tvi: TviSpec {
            embed_dim: a.embed_dim.or(oc.embed_dim).unwrap_or(DEFAULT_EMBED_DIM),
            pe_dim: a.pe_dim.or(oc.pe_dim).unwrap_or(DEFAULT_PE_DIM),
            seed: oc.tvi_seed.unwrap_or(0),
        },
        features,
    };
    let out = ctx.client.organize(&req).await?;
    eprintln!(
        "t={} kept {} history frames, {} tokens ({} visual)",
        out.plan.latest,
        out.plan.history.len(),
        out.layout.total_count,
        out.layout.counts.visual()
    );
    ctx.write_json(&out.layout)
}

async fn simulate(ctx: &Ctx, a: SimulateArgs) -> Outcome {
    let sc = &ctx.cfg.simulate;
    let budget = ctx.budget(&a.budget);
    let strategies = match (a.strategies.is_empty(), sc.strategies.is_empty()) {
        (false, _) => a.strategies,
        (true, false) => sc.strategies.clone(),
        (true, true) => vec![Strategy::Bats],
    };
    let base = SimConfig::default();
    let configs: Vec<SimConfig> = strategies
        .iter()
        .map(|&strategy| SimConfig {
            t_max: a.t_max.or(sc.t_max).unwrap_or(base.t_max),
            cameras: budget.cameras,
            budget: budget.budget,
            epsilon: budget.epsilon,
            embed_dim: a.embed_dim.or(sc.embed_dim).unwrap_or(base.embed_dim),
            pe_dim: a.pe_dim.or(sc.pe_dim).unwrap_or(base.pe_dim),
            seed: ctx.seed(),
            strategy,
            text_tokens: a.text_tokens.or(sc.text_tokens).unwrap_or(base.text_tokens),
        })
        .collect();
    let handles: Vec<_> = configs
        .into_iter()
        .map(|cfg| {
            let client = ctx.client.clone();
            tokio::spawn(async move { client.simulate(&cfg).await })
        })
        .collect();
    let mut runs: Vec<SimRun> = Vec::with_capacity(handles.len());
    for h in handles {
        runs.push(h.await.map_err(|e| Failure::Other(e.to_string()))??);
    }
    for run in &runs {
        let s = &run.summary;
        eprintln!(
            "{:<8} steps {:>5}  max visual {:>5}  mean {:>8.1}  first over budget {:>5}  band {}/{}  assemble p95 {:.0} us",
            format!("{:?}", run.config.strategy).to_lowercase(),
            s.steps,
            s.max_visual_tokens,
            s.mean_visual_tokens,
            s.first_over_budget.map_or("-".into(), |t| t.to_string()),
            s.band_violations,
            s.band_checked,
            s.p95_assemble_us
        );
    }
    ctx.write_json(&runs)
}

async fn eval(ctx: &Ctx, a: EvalArgs) -> Outcome {
    let episodes: Vec<EpisodeResult> = read_jsonl(&a.results)?;
    let ec = &ctx.cfg.eval;
    let defaults = EvalConfig::default();
    let config = EvalConfig {
        success_distance: a.success_distance.or(ec.success_distance).unwrap_or(defaults.success_distance),
        l2_horizons: ec.l2_horizons.clone().unwrap_or(defaults.l2_horizons),
    };
    let out = ctx.client.eval(&EvalRequest { episodes, config }).await?;
    ctx.write_json(&out.report)?;
    if let Some(path) = ctx.sibling(&a.csv, "episodes.csv") {
        let f = File::create(&path).map_err(|e| io_err(&path, e))?;
        metrics::write_episode_csv(&out.episodes, f).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

async fn cache(ctx: &Ctx, cmd: CacheCommand) -> Outcome {
    match cmd {
        CacheCommand::Stats => ctx.write_json(&ctx.client.cache_stats().await?),
        CacheCommand::Keys => {
            let mut w = ctx.output()?;
            for k in ctx.client.cache_keys().await? {
                writeln!(w, "{k}").map_err(|e| Failure::Other(e.to_string()))?;
            }
            w.flush().map_err(|e| Failure::Other(e.to_string()))
        }
        CacheCommand::Get { episode, t, camera } => ctx.write_json(&ctx.client.cache_get(&episode, t, camera).await?),
        CacheCommand::Put { episode, t, camera, file, grid } => {
            let tokens = if grid {
                let len = std::fs::metadata(&file).map_err(|e| Failure::Config(format!("{}: {e}", file.display())))?.len();
                let channels = len as usize / (navtoken_core::types::PATCHES_PER_FRAME * 4);
                let g = navtoken_server::features::read_grid(&file, t, camera as usize, channels)
                    .map_err(|e| Failure::Config(e.message))?;
                let coarse = grid_pool(g.grid(), COARSE_TOKENS_PER_FRAME).map_err(|e| Failure::Config(e.to_string()))?;
                CacheTokens { tokens: coarse.iter_rows().map(<[f32]>::to_vec).collect() }
            } else {
                let f = File::open(&file).map_err(|e| Failure::Config(format!("{}: {e}", file.display())))?;
                serde_json::from_reader(f).map_err(|e| Failure::Config(format!("{}: {e}", file.display())))?
            };
            ctx.client.cache_put(&episode, t, camera, &tokens).await?;
            Ok(())
        }
    }
}

async fn fit_alpha(ctx: &Ctx, a: FitAlphaArgs) -> Outcome {
    let trajectories: Vec<Trajectory> = read_jsonl(&a.trajectories)?;
    let out = ctx.client.fit_alpha(&FitAlphaRequest { trajectories }).await?;
    let mut w = ctx.output()?;
    let e = |e: io::Error| Failure::Other(e.to_string());
    writeln!(w, "{:<14}{:>9}{:>9}{:>9}{:>9}{:>12}", "embodiment", "x", "y", "z", "theta", "source").map_err(e)?;
    for row in &out.rows {
        writeln!(w, "{}{:>12}", row.fitted, format!("fit n={}", row.trajectories)).map_err(e)?;
        writeln!(w, "{}{:>12}", row.reference, "reference").map_err(e)?;
    }
    w.flush().map_err(e)
}

async fn run(cli: Cli) -> Outcome {
    let cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(Failure::Config)?,
        None => Config::default(),
    };
    let mut embedded = None;
    let client = match cli.server.clone().or_else(|| cfg.server.clone()) {
        Some(url) => Client::new(url),
        None => {
            let store = match &cli.cache {
                Some(p) => Some(open_cache(p, cli.cache_dim).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?),
                None => None,
            };
            let spawned = navtoken_server::spawn(AppState::new(store)).await.map_err(|e| Failure::Other(e.to_string()))?;
            let client = Client::new(spawned.url());
            embedded = Some(spawned);
            client
        }
    };
    let ctx = Ctx { cfg, seed: cli.seed, out: cli.out, client };
    let result = match cli.command {
        Command::Plan(a) => plan(&ctx, a).await,
        Command::Organize(a) => organize(&ctx, a).await,
        Command::Simulate(a) => simulate(&ctx, a).await,
        Command::Eval(a) => eval(&ctx, a).await,
        Command::Cache(c) => cache(&ctx, c).await,
        Command::FitAlpha(a) => fit_alpha(&ctx, a).await,
    };
    if let Some(s) = embedded {
        s.shutdown().await.map_err(|e| Failure::Other(e.to_string()))?;
    }
    result
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match rt.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Config(m) | Failure::Infeasible(m) | Failure::Other(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
