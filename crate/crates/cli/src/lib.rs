//! Command-line front end: `run`, `compare`, `cost` and `serve`.
//!
//! Exit codes: 0 success, 2 bad input, 3 curves that cannot be compared,
//! 4 service failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use dropal::artifacts::{self, CurveRow};
use dropal::cost::{self, CostParams};
use dropal::data::{self, LoadOptions};
use dropal::engine::{OracleMode, SimulatedOracle};
use dropal::metrics::{self, MetricsError};
use dropal::{AlConfig, Dataset, Engine};

#[derive(Parser, Debug)]
#[command(name = "dropal", version, about = "Pool-based active learning with Monte-Carlo dropout")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a simulated-oracle experiment once per seed.
    Run(RunArgs),
    /// Deficiency of each run against a reference run.
    Compare(CompareArgs),
    /// Sweep the forward-pass cost model over query sizes.
    Cost(CostArgs),
    /// Serve the annotation API for a human-oracle run.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// JSON config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSONL dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Comma-separated seeds. Overrides --repeat.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Number of seeds, counting up from the config's global_seed.
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Reference run: a run directory, a multi-seed output directory or a CSV file.
    pub reference: PathBuf,
    /// Runs to compare against the reference.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CostArgs {
    #[arg(long)]
    pub data_size: u64,
    /// Samples to label; defaults to the data size.
    #[arg(long)]
    pub samples: Option<u64>,
    /// Stochastic passes per scoring (T).
    #[arg(long, default_value_t = 10)]
    pub passes: u64,
    /// Redundancy pool factor.
    #[arg(long, default_value_t = 1.5)]
    pub factor: f64,
    /// Comma-separated query sizes.
    #[arg(long, value_delimiter = ',')]
    pub q: Vec<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Run directory; also holds the resumable service state.
    #[arg(long, default_value = "serve")]
    pub out: PathBuf,
    #[arg(long, default_value = dropal_service::DEFAULT_BIND)]
    pub bind: String,
}

/// An error with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl Failure {
    fn input(error: anyhow::Error) -> Self {
        Failure { code: 2, error }
    }
    fn mismatch(error: anyhow::Error) -> Self {
        Failure { code: 3, error }
    }
    fn service(error: anyhow::Error) -> Self {
        Failure { code: 4, error }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure::input(error)
    }
}

pub type Result<T> = std::result::Result<T, Failure>;

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Cost(a) => cmd_cost(&a),
        Command::Serve(a) => cmd_serve(&a),
    }
}

/// Reads the config file (if any) and applies the dataset override. The
/// dataset path is made absolute so the echoed config stands alone.
pub fn resolve_config(config: Option<&Path>, dataset: Option<&Path>) -> anyhow::Result<AlConfig> {
    let mut cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", p.display()))?
        }
        None => AlConfig::default(),
    };
    if let Some(d) = dataset {
        cfg.dataset = Some(d.to_path_buf());
    }
    let path = cfg.dataset.clone().ok_or_else(|| anyhow!("no dataset given (use --dataset or the config's \"dataset\" field)"))?;
    if !path.exists() {
        bail!("dataset {} does not exist", path.display());
    }
    cfg.dataset = Some(fs::canonicalize(&path).with_context(|| format!("cannot resolve {}", path.display()))?);
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(cfg: &AlConfig) -> anyhow::Result<Dataset> {
    let path = cfg.dataset.as_ref().expect("resolved config has a dataset");
    let opts = LoadOptions {
        num_classes: cfg.num_classes,
        hash_embed_dim: cfg.hash_embed_dim,
        require_all_classes: cfg.oracle == OracleMode::Simulated,
    };
    data::load_dataset(path, &opts).with_context(|| format!("cannot load dataset {}", path.display()))
}

fn seed_list(args: &RunArgs, base: u64) -> anyhow::Result<Vec<u64>> {
    let seeds = if args.seeds.is_empty() {
        if args.repeat == 0 {
            bail!("--repeat must be at least 1");
        }
        (0..args.repeat as u64).map(|i| base + i).collect()
    } else {
        args.seeds.clone()
    };
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        bail!("seeds must be distinct");
    }
    Ok(seeds)
}

pub fn cmd_run(args: &RunArgs) -> Result<()> {
    let base = resolve_config(args.config.as_deref(), args.dataset.as_deref())?;
    if base.oracle != OracleMode::Simulated {
        return Err(Failure::input(anyhow!("`run` uses the simulated oracle; use `serve` for oracle = \"human\"")));
    }
    let seeds = seed_list(args, base.global_seed)?;
    let dataset = load(&base)?;
    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    let mut curves = Vec::new();
    for &seed in &seeds {
        let cfg = AlConfig { global_seed: seed, ..base.clone() };
        let mut engine = Engine::new(dataset.clone(), cfg).context("cannot set up the experiment")?;
        engine.run(&mut SimulatedOracle).with_context(|| format!("seed {seed} failed"))?;
        let dir = args.out.join(format!("seed-{seed}"));
        artifacts::write_run_dir(&dir, &engine).context("cannot write run artifacts")?;
        let rows: Vec<CurveRow> = engine.records().iter().map(CurveRow::from).collect();
        let last = rows.last().expect("at least the seed point");
        eprintln!(
            "seed {seed}: {} points, final accuracy {:.4} at {} labeled -> {}",
            rows.len(),
            last.test_accuracy,
            last.labeled_count,
            dir.display()
        );
        curves.push(rows);
    }
    let mean = artifacts::mean_curve(&curves).map_err(|e| Failure::mismatch(e.into()))?;
    artifacts::write_mean_curve(&args.out.join("mean_curve.csv"), &mean).context("cannot write mean curve")?;
    Ok(())
}

/// Reads a curve from a CSV file, a run directory (`curve.csv`) or a
/// multi-seed directory (`mean_curve.csv`, mean column).
pub fn read_any_curve(path: &Path) -> anyhow::Result<Vec<(usize, f64)>> {
    let from_mean = |p: &Path| -> anyhow::Result<Vec<(usize, f64)>> {
        Ok(artifacts::read_mean_curve(p)?.iter().map(|r| (r.labeled_count, r.mean_test_accuracy)).collect())
    };
    let from_curve = |p: &Path| -> anyhow::Result<Vec<(usize, f64)>> {
        Ok(artifacts::read_curve(p)?.iter().map(|r| (r.labeled_count, r.test_accuracy)).collect())
    };
    if path.is_dir() {
        if path.join("curve.csv").exists() {
            from_curve(&path.join("curve.csv"))
        } else if path.join("mean_curve.csv").exists() {
            from_mean(&path.join("mean_curve.csv"))
        } else {
            bail!("{} holds neither curve.csv nor mean_curve.csv", path.display())
        }
    } else if !path.exists() {
        bail!("{} does not exist", path.display())
    } else if fs::read_to_string(path)?.starts_with(&artifacts::MEAN_CURVE_HEADER.join(",")) {
        from_mean(path)
    } else {
        from_curve(path)
    }
}

pub fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let curve = |p: &Path| -> Result<metrics::LearningCurve> {
        let pairs = read_any_curve(p)?;
        metrics::LearningCurve::from_pairs(&pairs).map_err(|e| Failure::input(anyhow!("{}: {e}", p.display())))
    };
    let reference = curve(&args.reference)?;
    let mut table = String::from("reference,comparison,deficiency,status\n");
    for run in &args.runs {
        let cmp = curve(run)?;
        let (value, status) = match metrics::deficiency(&reference, &cmp) {
            Ok(d) => (d.to_string(), "ok"),
            Err(MetricsError::DegenerateReference) => (String::new(), "degenerate_reference"),
            Err(e) => return Err(Failure::mismatch(anyhow!("{} vs {}: {e}", args.reference.display(), run.display()))),
        };
        table.push_str(&format!("{},{},{value},{status}\n", args.reference.display(), run.display()));
    }
    emit(args.out.as_deref(), &table)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes()).context("cannot write to stdout")?,
    }
    Ok(())
}

pub fn cmd_cost(args: &CostArgs) -> Result<()> {
    if args.q.is_empty() {
        return Err(Failure::input(anyhow!("--q needs at least one query size")));
    }
    let base = CostParams {
        passes: args.passes,
        data_size: args.data_size,
        samples_to_label: args.samples.unwrap_or(args.data_size),
        q: args.q[0],
        factor: args.factor,
    };
    let rows = cost::sweep(&base, &args.q).map_err(|e| Failure::input(e.into()))?;
    let mut table = String::from("q,formula_passes,approx_passes,exact_passes,rp_passes_per_round_formula,rp_passes_per_round_exact,break_even\n");
    for r in rows {
        table.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.q,
            r.formula,
            r.approx,
            r.exact,
            r.rp_per_round_formula,
            r.rp_per_round_exact,
            r.break_even.label()
        ));
    }
    emit(args.out.as_deref(), &table)
}

pub fn cmd_serve(args: &ServeArgs) -> Result<()> {
    let cfg = resolve_config(args.config.as_deref(), args.dataset.as_deref())?;
    if cfg.oracle != OracleMode::Human {
        return Err(Failure::input(anyhow!(
            "`serve` needs oracle = \"human\" in the config; simulated runs need no annotator, use `run`"
        )));
    }
    let dataset = load(&cfg)?;
    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    let opts = dropal_service::ServiceOptions { state_path: args.out.join("serve_state.json"), out_dir: Some(args.out.clone()) };
    let worker = dropal_service::start_worker(dataset, cfg, opts).map_err(|e| match e {
        dropal_service::ServiceError::Engine(_) | dropal_service::ServiceError::NotHumanMode | dropal_service::ServiceError::ConfigChanged => {
            Failure::input(e.into())
        }
        _ => Failure::service(e.into()),
    })?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::service(e.into()))?;
    let handle = worker.handle.clone();
    let served = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.bind)
            .await
            .with_context(|| format!("cannot bind {}", args.bind))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        dropal_service::serve(listener, handle, shutdown_signal()).await?;
        anyhow::Ok(())
    });
    worker.stop();
    served.map_err(Failure::service)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explicit_seeds_must_be_distinct() {
        let args = RunArgs { config: None, dataset: None, out: "x".into(), seeds: vec![1, 2, 1], repeat: 1 };
        assert!(seed_list(&args, 0).is_err());
        let args = RunArgs { seeds: vec![], repeat: 3, ..args };
        assert_eq!(seed_list(&args, 10).unwrap(), vec![10, 11, 12]);
        let args = RunArgs { repeat: 0, ..args };
        assert!(seed_list(&args, 0).is_err());
    }

    #[test]
    fn parses_subcommands() {
        let cli = Cli::try_parse_from(["dropal", "cost", "--data-size", "100", "--q", "5,10"]).unwrap();
        match cli.command {
            Command::Cost(a) => assert_eq!(a.q, vec![5, 10]),
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["dropal", "compare", "only-ref"]).is_err());
    }
}
