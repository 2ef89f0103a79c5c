use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alpool::config::Config;
use alpool::domain::{ClassId, IterationId, NodeId, Window};
use alpool::engine::{run_iteration, EngineError, IterationRequest};
use alpool::ingestion::{
    audio_from_filename, generate_synthetic, load_manifest, load_sidecar, write_manifest, write_sidecar,
    AudioDefaults, IngestError, SyntheticSpec,
};
use alpool::iteration::Strategy;
use alpool::service::{ConsensusReport, IterationSummary};
use alpool::sim::{compare_strategies, run_simulation, SimConfig, SimError};
use alpool::store::{HistogramFilter, NodeInfo, StoreError};
use chrono::{DateTime, Utc};
use clap::{Args, ColorChoice, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "alpool", version, about = "Active learning pool for audio event labeling")]
struct Cli {
    /// TOML config; defaults plus ALPOOL_* environment overrides otherwise.
    #[arg(long, global = true, env = "ALPOOL_CONFIG")]
    config: Option<PathBuf>,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create or upgrade the store schema.
    Migrate,
    /// Write a synthetic embedding pool.
    Synth(SynthArgs),
    /// Load a sidecar or manifest into the catalog.
    Ingest(IngestArgs),
    /// Run one active learning iteration over a window.
    Iterate(IterateArgs),
    /// Compute consensus for an iteration and promote agreed medoids.
    Consensus {
        #[arg(long)]
        iteration: i64,
    },
    /// Inspect the store.
    Report {
        #[command(subcommand)]
        what: Report,
    },
    /// Run the labeling simulator.
    Simulate(SimulateArgs),
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 250)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = alpool::sim::STANDARD_SPREAD)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; `.csv` or `.txt` writes a text manifest.
    #[arg(long)]
    out: PathBuf,
    /// Also write a class list usable with `ingest --classes`.
    #[arg(long)]
    classes_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("input").required(true))]
struct IngestArgs {
    #[arg(long, group = "input")]
    sidecar: Option<PathBuf>,
    #[arg(long, group = "input")]
    manifest: Option<PathBuf>,
    /// Tab-separated `class_id<TAB>name` lines seeding the ontology.
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Directory the audio files live in.
    #[arg(long, default_value = ".")]
    path: String,
    #[arg(long, default_value = "default")]
    project: String,
    #[arg(long, default_value = "default")]
    source: String,
    #[arg(long, default_value = "recorder")]
    node_type: String,
}

#[derive(Debug, Args)]
struct IterateArgs {
    #[arg(long)]
    node: String,
    /// Window start, RFC 3339.
    #[arg(long)]
    from: DateTime<Utc>,
    /// Window end (exclusive), RFC 3339.
    #[arg(long)]
    to: DateTime<Utc>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, value_parser = parse_strategy, default_value = "mal_mf")]
    strategy: Strategy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replays a stored iteration instead of creating a new one.
    #[arg(long)]
    iteration_id: Option<i64>,
}

#[derive(Debug, Subcommand)]
enum Report {
    /// Most frequent consensus tags.
    Histogram {
        #[arg(long, default_value_t = 50)]
        top: usize,
        #[arg(long)]
        node: Option<String>,
        #[arg(long)]
        include_doubt: bool,
    },
    /// One iteration's summary.
    Iteration { id: i64 },
    /// Every stored iteration id.
    Iterations,
    /// Dump a table as tab-separated values.
    Export {
        table: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    /// Labeler group sizes, e.g. `3,2`.
    #[arg(long, value_delimiter = ',')]
    groups: Option<Vec<usize>>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    n_smax: Option<usize>,
    #[arg(long)]
    n_mmax: Option<usize>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Compare mal_mf against random over seeds `0..N`.
    #[arg(long, value_name = "N")]
    strategy_compare: Option<u64>,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    Strategy::parse(s).ok_or_else(|| format!("expected mal_mf or random, got {s:?}"))
}

#[derive(Debug)]
struct CliError {
    code: &'static str,
    message: String,
}

impl CliError {
    fn new(code: &'static str, message: impl fmt::Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        use StoreError::*;
        let code = match &e {
            UnknownAudio(_) | UnknownIteration(_) | UnknownChunk(_) | UnknownSuggestion(_) | UnknownTable(_)
            | UnknownLabeler(_) => "not_found",
            WindowBusy => "window_busy",
            IncompatibleVersion { .. } => "incompatible_store",
            Sqlite(_) | Io(_) | Corrupt(_) | InjectedFault(_) => "store",
            _ => "invalid",
        };
        Self::new(code, e)
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Store(s) => s.into(),
            EngineError::Committee(_) | EngineError::Classifier(_) => Self::new("engine", e),
            _ => Self::new("invalid_window", e),
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        Self::new("ingest", e)
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::ConfigInvalid(_) => Self::new("invalid", e),
            SimError::Engine(e) => e.into(),
            SimError::Store(e) => e.into(),
        }
    }
}

impl From<alpool::config::ConfigError> for CliError {
    fn from(e: alpool::config::ConfigError) -> Self {
        Self::new("config", e)
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::new("io", format!("{}: {e}", path.display()))
}

type Result<T> = std::result::Result<T, CliError>;

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => {
            let mut cfg = Config::default();
            cfg.apply_env(|k| std::env::var(k).ok())?;
            Ok(cfg)
        }
    }
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("output serializes"));
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Migrate => {
            let store = config.open_store()?;
            let version = store.schema_version()?;
            if cli.json {
                print_json(&serde_json::json!({ "schema_version": version }));
            } else {
                println!("schema version {version}");
            }
        }
        Command::Synth(a) => synth(a)?,
        Command::Ingest(a) => ingest(&config, a, cli.json)?,
        Command::Iterate(a) => {
            let store = config.open_store()?;
            let window = Window::new(NodeId::new(a.node), a.from, a.to).map_err(|e| CliError::new("invalid", e))?;
            let mut req = IterationRequest::new(window);
            req.iteration_id = a.iteration_id.map(IterationId);
            req.budget = a.budget;
            req.strategy = a.strategy;
            req.seed = a.seed;
            let record = run_iteration(&store, &req, &config.engine())?;
            if cli.json {
                print_json(&IterationSummary::from(&record));
            } else {
                print!("{}", record.summary());
            }
        }
        Command::Consensus { iteration } => {
            let store = config.open_store()?;
            let id = IterationId(iteration);
            if !store.iteration_exists(id)? {
                return Err(StoreError::UnknownIteration(id).into());
            }
            let outcomes = store.run_consensus(id)?;
            let promoted = outcomes.iter().filter(|o| o.medoid_class.is_some()).count();
            let report = ConsensusReport {
                iteration_id: id,
                promoted,
                undecided: outcomes.len() - promoted,
                outcomes,
            };
            if cli.json {
                print_json(&report);
            } else {
                println!("iteration {}: {} promoted, {} undecided", id, report.promoted, report.undecided);
                for o in &report.outcomes {
                    let class = o.medoid_class.map_or_else(|| "-".to_string(), |c| c.to_string());
                    println!(
                        "{}\t{}\t{}\t{:.3}\t{}",
                        o.audio_id,
                        class,
                        o.decided_by.as_str(),
                        o.agreement,
                        o.labeler_count
                    );
                }
            }
        }
        Command::Report { what } => report(&config, what, cli.json)?,
        Command::Simulate(a) => simulate(a, cli.json)?,
        Command::Serve { port } => {
            let mut config = config;
            if let Some(p) = port {
                config.port = p;
            }
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::new("io", e))?;
            rt.block_on(alpool::service::serve(config))
                .map_err(|e| CliError::new("serve", e))?;
        }
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.classes == 0 || a.per_class == 0 || a.dim < 2 || !(a.spread.is_finite() && a.spread >= 0.0) {
        return Err(CliError::new("invalid", "classes and per-class must be positive, dim at least 2"));
    }
    let pool = generate_synthetic(&SyntheticSpec::new(a.classes, a.per_class, a.dim, a.spread, a.seed));
    let file = File::create(&a.out).map_err(io_err(&a.out))?;
    let text = matches!(a.out.extension().and_then(|e| e.to_str()), Some("csv" | "txt"));
    if text {
        write_manifest(BufWriter::new(file), &pool.records).map_err(io_err(&a.out))?;
    } else {
        write_sidecar(BufWriter::new(file), &pool.records, a.dim as u32, a.classes as u32)?;
    }
    if let Some(path) = &a.classes_out {
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        for c in 0..a.classes {
            writeln!(w, "{c}\tclass_{c:02}").map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))?;
    }
    Ok(())
}

fn read_classes(path: &Path) -> Result<Vec<(ClassId, String)>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || CliError::new("invalid", format!("{}:{}: expected class_id<TAB>name", path.display(), i + 1));
        let (id, name) = line.split_once('\t').ok_or_else(bad)?;
        let id: u32 = id.trim().parse().map_err(|_| bad())?;
        let name = name.trim();
        if name.is_empty() || ClassId(id).is_doubt() {
            return Err(bad());
        }
        out.push((ClassId(id), name.to_string()));
    }
    Ok(out)
}

fn ingest(config: &Config, a: IngestArgs, json: bool) -> Result<()> {
    let records = match (&a.sidecar, &a.manifest) {
        (Some(p), _) => load_sidecar(BufReader::new(File::open(p).map_err(io_err(p))?))?.1,
        (None, Some(p)) => load_manifest(BufReader::new(File::open(p).map_err(io_err(p))?))?,
        (None, None) => unreachable!("clap requires a source"),
    };
    let classes = a.classes.as_deref().map(read_classes).transpose()?;
    let store = config.open_store()?;
    let defaults = AudioDefaults {
        path_id: store.ensure_path(&a.path)?,
        ..AudioDefaults::default()
    };
    let audios = records
        .iter()
        .map(|r| audio_from_filename(r.audio_id.as_str(), &defaults))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let info = NodeInfo {
        project: a.project,
        source: a.source,
        node_type: a.node_type,
    };
    if let Some(c) = &classes {
        store.seed_ontology(c)?;
    }
    let inserted = store.ingest(&audios, &records, &info)?;
    if json {
        print_json(&serde_json::json!({
            "records": records.len(),
            "inserted": inserted,
            "classes": classes.map_or(0, |c| c.len()),
        }));
    } else {
        println!("ingested {inserted} of {} records", records.len());
    }
    Ok(())
}

fn report(config: &Config, what: Report, json: bool) -> Result<()> {
    let store = config.open_store()?;
    match what {
        Report::Histogram { top, node, include_doubt } => {
            let filter = HistogramFilter {
                node_id: node.map(NodeId::new),
                include_doubt,
                include_superseded: false,
            };
            let counts = store.tag_frequency_histogram(top, &filter)?;
            if json {
                print_json(&counts);
            } else {
                for c in counts {
                    println!("{}\t{}\t{}", c.class_id, c.name, c.count);
                }
            }
        }
        Report::Iteration { id } => {
            let record = store
                .iteration(IterationId(id))?
                .ok_or(StoreError::UnknownIteration(IterationId(id)))?;
            if json {
                print_json(&IterationSummary::from(&record));
            } else {
                print!("{}", record.summary());
            }
        }
        Report::Iterations => {
            let ids = store.iteration_ids()?;
            if json {
                print_json(&ids);
            } else {
                for id in ids {
                    println!("{id}");
                }
            }
        }
        Report::Export { table, out } => match out {
            Some(p) => {
                let file = File::create(&p).map_err(io_err(&p))?;
                store.export_table(&table, BufWriter::new(file))?;
            }
            None => {
                store.export_table(&table, io::stdout().lock())?;
            }
        },
    }
    Ok(())
}

fn simulate(a: SimulateArgs, json: bool) -> Result<()> {
    let mut cfg = SimConfig::standard();
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(classes, per_class, dim, spread, noise, budget, iterations, n_smax, n_mmax, strategy);
    if let Some(g) = a.groups {
        cfg.group_sizes = g;
    }
    cfg.seed = a.seed;
    cfg.validate()?;
    match a.strategy_compare {
        Some(0) => return Err(CliError::new("invalid", "strategy-compare needs at least one seed")),
        Some(n) => {
            let seeds: Vec<u64> = (0..n).collect();
            let cmp = compare_strategies(&cfg, &seeds)?;
            if json {
                print_json(&cmp);
            } else {
                print!("{}", cmp.to_text());
            }
        }
        None => {
            let report = run_simulation(&cfg)?;
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_text());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let no_color = std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty());
    let mut cmd = Cli::command();
    if no_color {
        cmd = cmd.color(ColorChoice::Never);
    }
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let default_level = if matches!(cli.command, Command::Serve { .. }) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .with_writer(io::stderr)
        .with_ansi(!no_color)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.message.replace('\n', " ");
            eprintln!("alpool: error[{}]: {message}", e.code);
            ExitCode::from(1)
        }
    }
}
