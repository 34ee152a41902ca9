//! `ampsim` command-line front end.
//!
//! Exit codes: 0 success, 1 domain failure (the library error name is printed
//! on stderr), 2 usage error.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use ampsim_core::estimators::{
    amplification_factor, closed_form_bias, partial_regression_points, write_points_csv,
    EstimatorSpec,
};
use ampsim_core::experiment::{
    intervention_experiment, run_replications, write_estimates_csv, write_intervention_csv,
    ReplicationConfig,
};
use ampsim_core::realdata::{
    bootstrap_pipeline, generate_surrogate_rct, write_pipeline_csv, PipelineIntervention,
    ProbitPipelineConfig, RctDataset, SurrogateRct,
};
use ampsim_core::sem::{
    feasible_interval, parse_spec, CoefficientValues, InterventionMode, LinearSem,
};
use ampsim_core::simulate::{draw_dataset, Dataset, SeedPolicy};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

pub const THREADS_ENV: &str = "AMPSIM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "ampsim", version, about = "Bias amplification simulator")]
struct Cli {
    /// Worker threads (falls back to AMPSIM_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte Carlo replications of estimators on one SEM.
    Simulate(SimulateArgs),
    /// Baseline vs. edge-intervention arms.
    Intervene(InterveneArgs),
    /// Feasible range of one edge coefficient.
    Bounds(BoundsArgs),
    /// Amplification factor of a control set on a CSV dataset.
    Amplify(AmplifyArgs),
    /// Partial-regression point pairs for one simulated dataset.
    Partialplot(PartialplotArgs),
    /// Latent-probit bootstrap on RCT data.
    Realdata(RealdataArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    reps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// e.g. `naive,adjusted=B1+B2,oracle`
    #[arg(long)]
    estimators: Option<String>,
    /// Treatment and outcome nodes; the coefficient on this edge is the truth.
    #[arg(long, value_parser = parse_edge)]
    truth_edge: (String, String),
    #[arg(long, alias = "out")]
    out_json: Option<PathBuf>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct InterveneArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_parser = parse_edge)]
    edge: (String, String),
    /// `START:STOP:STEP` or a single value.
    #[arg(long, value_parser = parse_values)]
    values: CoefficientValues,
    #[arg(long, value_parser = parse_modes, default_value = "fixed,floating")]
    modes: Modes,
}

#[derive(Debug, Args)]
struct BoundsArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, value_parser = parse_edge)]
    edge: (String, String),
}

#[derive(Debug, Args)]
struct AmplifyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    treatment: String,
    /// Comma-separated; empty or `none` for no controls.
    #[arg(long, default_value = "")]
    controls: String,
}

#[derive(Debug, Args)]
struct PartialplotArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "")]
    controls: String,
    #[arg(long, value_parser = parse_edge, default_value = "A,Y")]
    truth_edge: (String, String),
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RealdataArgs {
    #[arg(long)]
    config: PathBuf,
    /// RCT CSV with columns y, a, covariates; a surrogate is generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 294)]
    surrogate_seed: u64,
    /// Writes the surrogate RCT used for the run.
    #[arg(long)]
    export_data: Option<PathBuf>,
    /// `IDX:VALUE`, IDX counting covariates from 1.
    #[arg(long, value_parser = parse_intervention)]
    intervention: Option<(usize, f64)>,
    #[arg(long, value_parser = parse_modes, default_value = "fixed,floating")]
    modes: Modes,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    reps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, alias = "out")]
    out_json: Option<PathBuf>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Debug, Clone)]
struct Modes(Vec<InterventionMode>);

fn parse_edge(s: &str) -> Result<(String, String), String> {
    match s.split_once(',') {
        Some((a, b)) if !a.trim().is_empty() && !b.trim().is_empty() && !b.contains(',') => {
            Ok((a.trim().to_string(), b.trim().to_string()))
        }
        _ => Err(format!("expected FROM,TO, got `{s}`")),
    }
}

fn parse_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| format!("`{s}` is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

fn parse_values(s: &str) -> Result<CoefficientValues, String> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [v] => Ok(CoefficientValues::Single(parse_f64(v)?)),
        [a, b, c] => Ok(CoefficientValues::Sweep {
            start: parse_f64(a)?,
            stop: parse_f64(b)?,
            step: parse_f64(c)?,
        }),
        _ => Err(format!(
            "expected START:STOP:STEP or a single value, got `{s}`"
        )),
    }
}

fn parse_modes(s: &str) -> Result<Modes, String> {
    let mut out = Vec::new();
    for m in s.split(',') {
        let mode =
            InterventionMode::parse(m.trim()).ok_or_else(|| format!("unknown mode `{m}`"))?;
        if !out.contains(&mode) {
            out.push(mode);
        }
    }
    Ok(Modes(out))
}

fn parse_intervention(s: &str) -> Result<(usize, f64), String> {
    let (i, v) = s
        .split_once(':')
        .ok_or_else(|| format!("expected IDX:VALUE, got `{s}`"))?;
    let i: usize = i
        .trim()
        .parse()
        .map_err(|_| format!("`{i}` is not an index"))?;
    if i == 0 {
        return Err("covariate indices start at 1".into());
    }
    Ok((i - 1, parse_f64(v)?))
}

fn parse_list(s: &str) -> Vec<String> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Vec::new();
    }
    s.split(',').map(|c| c.trim().to_string()).collect()
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Domain { name: String, message: String },
}

impl CliError {
    fn domain(name: &str, message: impl ToString) -> Self {
        CliError::Domain {
            name: name.to_string(),
            message: message.to_string(),
        }
    }
}

macro_rules! domain_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::domain(e.name(), &e)
            }
        }
    )*};
}

domain_from!(
    ampsim_core::sem::SemError,
    ampsim_core::simulate::SimulateError,
    ampsim_core::estimators::EstimatorError,
    ampsim_core::experiment::ExperimentError,
    ampsim_core::realdata::RealDataError
);

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::domain("IoError", format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

/// Writes through a temporary file in the target's directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn emit(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| io_error(path, e))
}

fn to_json(v: &impl serde::Serialize) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable report");
    s.push('\n');
    s.into_bytes()
}

/// JSON to the file when given, otherwise to stdout.
fn emit_json(
    path: Option<&Path>,
    v: &impl serde::Serialize,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let bytes = to_json(v);
    match path {
        Some(p) => emit(p, &bytes),
        None => out
            .write_all(&bytes)
            .map_err(|e| CliError::domain("IoError", e)),
    }
}

fn load_sem(path: &Path) -> Result<LinearSem, CliError> {
    Ok(parse_spec(&read_text(path)?)?)
}

/// Observed non-descendants of the treatment other than the outcome, and all
/// non-descendants for the oracle.
fn default_regressors(
    sem: &LinearSem,
    treatment: &str,
    outcome: &str,
) -> Result<(Vec<String>, Vec<String>), CliError> {
    let t = sem.node_index(treatment)?;
    sem.node_index(outcome)?;
    let desc = sem.descendants(t);
    let mut adjusted = Vec::new();
    let mut oracle = Vec::new();
    for (i, node) in sem.nodes().iter().enumerate() {
        if i == t || node.name == outcome || desc.contains(&i) {
            continue;
        }
        oracle.push(node.name.clone());
        if node.observed {
            adjusted.push(node.name.clone());
        }
    }
    Ok((adjusted, oracle))
}

fn parse_estimators(
    list: Option<&str>,
    sem: &LinearSem,
    treatment: &str,
    outcome: &str,
) -> Result<Vec<EstimatorSpec>, CliError> {
    let (adjusted, oracle) = default_regressors(sem, treatment, outcome)?;
    let list = list.unwrap_or("naive,adjusted,oracle");
    let mut specs: Vec<EstimatorSpec> = Vec::new();
    for item in list.split(',') {
        let item = item.trim();
        let (name, regs) = match item.split_once('=') {
            Some((n, r)) => (
                n.trim(),
                Some(
                    r.split('+')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .collect::<Vec<_>>(),
                ),
            ),
            None => (item, None),
        };
        let spec = match (name, regs) {
            ("", _) => return Err(CliError::Usage(format!("empty estimator in `{list}`"))),
            ("naive", None) => EstimatorSpec::naive(),
            ("naive", Some(_)) => return Err(CliError::Usage("naive takes no regressors".into())),
            ("adjusted", None) => EstimatorSpec::adjusted(adjusted.clone()),
            ("adjusted", Some(r)) => EstimatorSpec::adjusted(r),
            ("oracle", None) => EstimatorSpec::oracle(oracle.clone()),
            ("oracle", Some(r)) => EstimatorSpec::oracle(r),
            (other, Some(r)) => EstimatorSpec::custom(other, r, false),
            (other, None) => {
                return Err(CliError::Usage(format!(
                    "estimator `{other}` needs `={{regressors}}`"
                )));
            }
        };
        if specs.iter().any(|s| s.label == spec.label) {
            return Err(CliError::Usage(format!("estimator `{name}` listed twice")));
        }
        specs.push(spec);
    }
    Ok(specs)
}

fn replication_config(sem: &LinearSem, run: &RunArgs) -> Result<ReplicationConfig, CliError> {
    let (treatment, outcome) = run.truth_edge.clone();
    let estimators = parse_estimators(run.estimators.as_deref(), sem, &treatment, &outcome)?;
    Ok(ReplicationConfig {
        treatment,
        outcome,
        n: run.n,
        reps: run.reps as usize,
        base_seed: run.seed,
        estimators,
    })
}

fn simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let run = &args.run;
    let sem = load_sem(&run.spec)?;
    let cfg = replication_config(&sem, run)?;
    let truth = sem.coefficient(&cfg.treatment, &cfg.outcome)?;
    sem.edge_index(&cfg.treatment, &cfg.outcome)?;
    let reports = run_replications(&sem, &cfg, truth)?;
    let closed_form: BTreeMap<String, f64> = cfg
        .estimators
        .iter()
        .filter_map(|s| {
            closed_form_bias(&sem, &cfg.treatment, &cfg.outcome, s)
                .ok()
                .map(|b| (s.label.to_string(), b))
        })
        .collect();
    let doc = json!({
        "command": "simulate",
        "sem_fingerprint": sem.fingerprint(),
        "treatment": cfg.treatment,
        "outcome": cfg.outcome,
        "n": cfg.n,
        "reps": cfg.reps,
        "base_seed": cfg.base_seed,
        "estimator_specs": cfg.estimators,
        "closed_form_bias": closed_form,
        "estimators": reports,
    });
    if let Some(p) = &run.out_csv {
        let mut buf = Vec::new();
        write_estimates_csv(&reports, &mut buf)?;
        emit(p, &buf)?;
    }
    emit_json(run.out_json.as_deref(), &doc, out)
}

fn intervene(args: &InterveneArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let run = &args.run;
    let sem = load_sem(&run.spec)?;
    let cfg = replication_config(&sem, run)?;
    let edge = (args.edge.0.as_str(), args.edge.1.as_str());
    let truth_edge = (cfg.treatment.as_str(), cfg.outcome.as_str());
    let arms = intervention_experiment(&sem, edge, &args.values, &args.modes.0, &cfg, truth_edge)?;
    let doc = json!({
        "command": "intervene",
        "sem_fingerprint": sem.fingerprint(),
        "edge": [edge.0, edge.1],
        "treatment": cfg.treatment,
        "outcome": cfg.outcome,
        "n": cfg.n,
        "reps": cfg.reps,
        "base_seed": cfg.base_seed,
        "arms": arms,
    });
    if let Some(p) = &run.out_csv {
        let mut buf = Vec::new();
        write_intervention_csv(&arms, &mut buf)?;
        emit(p, &buf)?;
    }
    emit_json(run.out_json.as_deref(), &doc, out)
}

fn bounds(args: &BoundsArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let sem = load_sem(&args.spec)?;
    let interval = feasible_interval(&sem, (&args.edge.0, &args.edge.1))?;
    emit_json(None, &interval, out)
}

fn amplify(args: &AmplifyArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let file = fs::File::open(&args.data).map_err(|e| io_error(&args.data, e))?;
    let ds = Dataset::read_csv(io::BufReader::new(file))?;
    let est = amplification_factor(&ds, &args.treatment, &parse_list(&args.controls))?;
    emit_json(None, &est, out)
}

fn partialplot(args: &PartialplotArgs) -> Result<(), CliError> {
    let sem = load_sem(&args.spec)?;
    let ds = draw_dataset(&sem, args.n, SeedPolicy::new(args.seed, 0))?;
    let (t, y) = &args.truth_edge;
    let points = partial_regression_points(&ds, t, y, &parse_list(&args.controls))?;
    let mut buf = Vec::new();
    write_points_csv(&points, &mut buf)?;
    emit(&args.out, &buf)
}

fn realdata(args: &RealdataArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut config = ProbitPipelineConfig::from_json(&read_text(&args.config)?)?;
    if let Some(r) = args.reps {
        config.reps = r as usize;
    }
    if let Some(s) = args.seed {
        config.base_seed = s;
    }
    let (rct, source) = match &args.data {
        Some(p) => {
            let file = fs::File::open(p).map_err(|e| io_error(p, e))?;
            (
                RctDataset::read_csv(io::BufReader::new(file))?,
                json!({ "csv": p.display().to_string() }),
            )
        }
        None => {
            let spec = SurrogateRct::default();
            let rct = generate_surrogate_rct(&spec, args.surrogate_seed)?;
            (
                rct,
                json!({ "surrogate": spec, "seed": args.surrogate_seed }),
            )
        }
    };
    if let Some(p) = &args.export_data {
        let mut buf = Vec::new();
        rct.write_csv(&mut buf)?;
        emit(p, &buf)?;
    }
    let intervention = args
        .intervention
        .map(|(index, value)| PipelineIntervention {
            index,
            value,
            modes: args.modes.0.clone(),
        });
    let report = bootstrap_pipeline(&rct, &config, intervention.as_ref())?;
    let doc = json!({
        "command": "realdata",
        "data": source,
        "config": config,
        "intervention": intervention,
        "report": report,
    });
    if let Some(p) = &args.out_csv {
        let mut buf = Vec::new();
        write_pipeline_csv(&report, &mut buf)?;
        emit(p, &buf)?;
    }
    emit_json(args.out_json.as_deref(), &doc, out)
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if let Some(n) = flag {
        return if n == 0 {
            Err(CliError::Usage("--threads must be at least 1".into()))
        } else {
            Ok(Some(n))
        };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
        _ => Ok(None),
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count(cli.threads)? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::domain("ThreadPoolError", e))?;
    let mut buf: Vec<u8> = Vec::new();
    let result = pool.install(|| match &cli.command {
        Command::Simulate(a) => simulate(a, &mut buf),
        Command::Intervene(a) => intervene(a, &mut buf),
        Command::Bounds(a) => bounds(a, &mut buf),
        Command::Amplify(a) => amplify(a, &mut buf),
        Command::Partialplot(a) => partialplot(a),
        Command::Realdata(a) => realdata(a, &mut buf),
    });
    out.write_all(&buf)
        .map_err(|e| CliError::domain("IoError", e))?;
    result
}

/// Runs one invocation; `argv[0]` is the program name.
pub fn run_with_io<S: AsRef<str>>(argv: &[S], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv.iter().map(|s| s.as_ref())) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return if code == 0 { 0 } else { 2 };
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            2
        }
        Err(CliError::Domain { name, message }) => {
            let _ = writeln!(err, "error: {name}: {message}");
            1
        }
    }
}

pub fn run_command<S: AsRef<str>>(argv: &[S]) -> i32 {
    let stdout = io::stdout();
    let stderr = io::stderr();
    run_with_io(argv, &mut stdout.lock(), &mut stderr.lock())
}
