//! Command-line front end.
//!
//! Results go to stdout (or `--out`), diagnostics and logs to stderr. Every
//! command also emits a [`RunManifest`].

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::builder::PossibleValuesParser;
use clap::{Args, CommandFactory, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::aggregate::{AggregationStrategy, DEFAULT_BETA};
use crate::calibrate::{default_l2_grid, fit_table, CalibratorTable, FitSettings, DEFAULT_FOLDS};
use crate::combine::{combine_runs, AnswerPolicy, CalibrationMode, CombineConfig, EnsembleSpec};
use crate::error::{Error, Result};
use crate::evaluate::evaluate;
use crate::ingest::{
    load_gold, load_model_run, load_predictions, model_id_from_path, split_by_files, write_predictions,
};
use crate::model::{AnswerType, ModelRun, DEFAULT_MIN_AGREEMENT, DEFAULT_TOP_M};
use crate::search::{
    attach_test_report, calibrators_for, combined_final_search, run_search, SearchConfig, SearchStrategy,
    DEFAULT_EXHAUSTIVE_CAP,
};
use crate::simulate::{generate, write_dataset, SimConfig};

const AGG_NAMES: [&str; 4] = ["max", "rrs", "expsum", "noisyor"];
const CALIBRATION_NAMES: [&str; 2] = ["identity", "logistic"];

#[derive(Debug, Parser)]
#[command(name = "spanfuse", version, about = "Ensemble span-prediction QA systems")]
pub struct Cli {
    /// JSON file whose keys mirror the command's flags; flags on the command line win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Worker threads (default: number of processors).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Where to write the run manifest.
    #[arg(long, global = true, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic gold set and model runs.
    Simulate(SimulateArgs),
    /// Partition gold files into dev-train and dev-test.
    Split(SplitArgs),
    /// Fit per-model logistic calibrators.
    Calibrate(CalibrateArgs),
    /// Combine model runs into final predictions.
    Combine(CombineArgs),
    /// Score final predictions against gold.
    Eval(EvalArgs),
    /// Select an ensemble from a pool of runs.
    Search(SearchArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Split(_) => "split",
            Command::Calibrate(_) => "calibrate",
            Command::Combine(_) => "combine",
            Command::Eval(_) => "eval",
            Command::Search(_) => "search",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1000)]
    pub n_examples: usize,
    #[arg(long, default_value_t = 4)]
    pub n_models: usize,
    #[arg(long, default_value_t = 5)]
    pub n_annotators: usize,
    #[arg(long, default_value_t = 0.65)]
    pub answerable_rate: f64,
    /// One value per model, or a single value shared by all.
    #[arg(long, num_args = 1.., value_delimiter = ',', default_value = "0.6")]
    pub skill: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub correlation: f64,
    #[arg(long, default_value_t = DEFAULT_TOP_M)]
    pub top_m: usize,
    #[arg(long, default_value_t = 0.1)]
    pub duplicate_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of gold files to shard the examples into.
    #[arg(long, default_value_t = 5)]
    pub gold_shards: usize,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub gold: Vec<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub n_train: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_AGREEMENT)]
    pub min_agreement: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Cross-validation folds for choosing the L2 strength.
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    pub folds: usize,
    #[arg(long, num_args = 1.., value_delimiter = ',', default_values_t = default_l2_grid())]
    pub l2_grid: Vec<f64>,
    /// Seed for the cross-validation folds.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl FitArgs {
    fn settings(&self) -> FitSettings {
        FitSettings {
            l2_grid: self.l2_grid.clone(),
            folds: self.folds,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    pub gold: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MIN_AGREEMENT)]
    pub min_agreement: usize,
    #[arg(long, default_value_t = DEFAULT_TOP_M)]
    pub top_m: usize,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Aggregation and calibration per answer type. Without any of these flags
/// short answers use raw max and long answers calibrated noisy-or.
#[derive(Debug, Args, Serialize)]
pub struct PolicyArgs {
    /// Aggregation for both answer types; implies identity calibration unless
    /// --calibration is also given.
    #[arg(long, value_parser = PossibleValuesParser::new(AGG_NAMES))]
    pub agg: Option<String>,
    #[arg(long, value_parser = PossibleValuesParser::new(AGG_NAMES))]
    pub short_agg: Option<String>,
    #[arg(long, value_parser = PossibleValuesParser::new(AGG_NAMES))]
    pub long_agg: Option<String>,
    /// Decay for expsum.
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long, value_parser = PossibleValuesParser::new(CALIBRATION_NAMES))]
    pub calibration: Option<String>,
    #[arg(long, value_parser = PossibleValuesParser::new(CALIBRATION_NAMES))]
    pub short_calibration: Option<String>,
    #[arg(long, value_parser = PossibleValuesParser::new(CALIBRATION_NAMES))]
    pub long_calibration: Option<String>,
    /// Candidates kept per list before combination.
    #[arg(long, default_value_t = DEFAULT_TOP_M)]
    pub top_m: usize,
    /// Only consider short answers inside the chosen long answer.
    #[arg(long)]
    pub require_containment: bool,
}

impl PolicyArgs {
    pub fn resolve(&self) -> Result<CombineConfig> {
        let strategy = |name: &str| {
            AggregationStrategy::parse_with_beta(name, self.beta)
                .map_err(|e| Error::Config(format!("aggregation {name:?}: {e}")))
        };
        let calibration = |name: &str| name.parse::<CalibrationMode>().map_err(Error::Config);

        let mut cfg = CombineConfig::headline();
        if let Some(name) = &self.agg {
            let policy = AnswerPolicy {
                strategy: strategy(name)?,
                calibration: CalibrationMode::Identity,
            };
            cfg.long = policy;
            cfg.short = policy;
        }
        if let Some(name) = &self.calibration {
            let mode = calibration(name)?;
            cfg.long.calibration = mode;
            cfg.short.calibration = mode;
        }
        if let Some(name) = &self.long_agg {
            cfg.long.strategy = strategy(name)?;
        }
        if let Some(name) = &self.short_agg {
            cfg.short.strategy = strategy(name)?;
        }
        if let Some(name) = &self.long_calibration {
            cfg.long.calibration = calibration(name)?;
        }
        if let Some(name) = &self.short_calibration {
            cfg.short.calibration = calibration(name)?;
        }
        if self.top_m == 0 {
            return Err(Error::Config("top-m must be positive".into()));
        }
        cfg.top_m = self.top_m;
        cfg.require_containment = self.require_containment;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct CombineArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    /// Model ids to combine (default: every run).
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub members: Vec<String>,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Calibrator table written by `calibrate`.
    #[arg(long, value_name = "PATH")]
    pub calibrators: Option<PathBuf>,
    /// Gold files to fit calibrators on when no table is given.
    #[arg(long, num_args = 1..)]
    pub calib_gold: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MIN_AGREEMENT)]
    pub min_agreement: usize,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub gold: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MIN_AGREEMENT)]
    pub min_agreement: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SearchArgs {
    #[arg(long, default_value = "greedy", value_parser = PossibleValuesParser::new(["seed", "exhaustive", "greedy"]))]
    pub strategy: String,
    #[arg(long, default_value = "short", value_parser = PossibleValuesParser::new(["short", "long"]))]
    pub objective: String,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, num_args = 1.., required = true)]
    pub pool: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    pub gold_train: Vec<PathBuf>,
    /// Held-out gold, read only after selection has finished.
    #[arg(long, num_args = 1..)]
    pub gold_test: Vec<PathBuf>,
    /// Exhaustive search over subsets of exactly k models.
    #[arg(long)]
    pub exact_size: bool,
    /// Largest pool exhaustive search accepts.
    #[arg(long, default_value_t = DEFAULT_EXHAUSTIVE_CAP)]
    pub cap: usize,
    /// Run exhaustive search above the cap.
    #[arg(long)]
    pub force: bool,
    /// Short answers from a long-objective greedy search with raw max,
    /// long answers from one with calibrated noisy-or.
    #[arg(long)]
    pub dual_policy: bool,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long, default_value_t = DEFAULT_MIN_AGREEMENT)]
    pub min_agreement: usize,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the selected ensemble's dev-test predictions here.
    #[arg(long, value_name = "PATH")]
    pub preds_out: Option<PathBuf>,
}

/// Provenance record emitted by every command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: Value,
    /// SHA-256 of each input file's bytes.
    pub inputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub duration_secs: f64,
}

struct Outcome {
    config: Value,
    inputs: Vec<PathBuf>,
    seed: Option<u64>,
    default_manifest: Option<PathBuf>,
}

impl Outcome {
    fn new<T: Serialize>(args: &T, inputs: Vec<PathBuf>, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        Ok(Outcome {
            config: serde_json::to_value(args).map_err(|e| Error::Config(e.to_string()))?,
            inputs,
            seed,
            default_manifest: out.map(|p| {
                let mut name = p.as_os_str().to_owned();
                name.push(".manifest.json");
                PathBuf::from(name)
            }),
        })
    }
}

/// Runs the tool on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv = match merge_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code().into();
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();

    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code().into()
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("thread pool already initialised: {e}");
        }
    }
    let start = Instant::now();
    let outcome = match &cli.command {
        Command::Simulate(a) => simulate_cmd(a)?,
        Command::Split(a) => split_cmd(a)?,
        Command::Calibrate(a) => calibrate_cmd(a)?,
        Command::Combine(a) => combine_cmd(a)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::Search(a) => search_cmd(a)?,
    };
    let mut inputs = BTreeMap::new();
    for path in &outcome.inputs {
        inputs.insert(path.display().to_string(), digest(path)?);
    }
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: outcome.config,
        inputs,
        seed: outcome.seed,
        threads: rayon::current_num_threads(),
        duration_secs: start.elapsed().as_secs_f64(),
    };
    let text = to_json(&manifest)?;
    match cli.manifest.as_ref().or(outcome.default_manifest.as_ref()) {
        Some(path) => fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            eprint!("{text}");
            Ok(())
        }
    }
}

/// Appends flags from the `--config` file that the command line does not set.
fn merge_config(mut argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let tokens: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut config_path = None;
    for (i, t) in tokens.iter().enumerate() {
        if t == "--config" {
            config_path = tokens.get(i + 1).cloned();
        } else if let Some(p) = t.strip_prefix("--config=") {
            config_path = Some(p.to_string());
        }
    }
    let Some(config_path) = config_path else {
        return Ok(argv);
    };
    let cmd = Cli::command();
    let Some(sub) = tokens
        .iter()
        .skip(1)
        .find_map(|t| cmd.find_subcommand(t.as_str()))
    else {
        return Ok(argv);
    };

    let text = fs::read_to_string(&config_path)
        .map_err(|e| Error::Config(format!("reading {config_path}: {e}")))?;
    let map: serde_json::Map<String, Value> = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{config_path}: expected a JSON object: {e}")))?;

    for (key, value) in map {
        let long = key.replace('_', "-");
        let known = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .any(|a| a.get_long() == Some(long.as_str()));
        if !known || long == "config" {
            return Err(Error::Config(format!(
                "{config_path}: unknown key {key:?} for {}",
                sub.get_name()
            )));
        }
        let flag = format!("--{long}");
        let prefix = format!("{flag}=");
        if tokens.iter().any(|t| *t == flag || t.starts_with(&prefix)) {
            continue;
        }
        let scalar = |v: &Value| match v {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            Value::Bool(b) => Ok(b.to_string()),
            _ => Err(Error::Config(format!("{config_path}: unsupported value for {key:?}"))),
        };
        match &value {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => argv.push(flag.into()),
            Value::Array(items) => {
                if items.is_empty() {
                    continue;
                }
                argv.push(flag.into());
                for item in items {
                    argv.push(scalar(item)?.into());
                }
            }
            other => {
                argv.push(flag.into());
                argv.push(scalar(other)?.into());
            }
        }
    }
    Ok(argv)
}

fn digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Validation(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = to_json(value)?;
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            let mut stdout = io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn load_runs(paths: &[PathBuf], top_m: usize) -> Result<Vec<ModelRun>> {
    let mut runs: Vec<ModelRun> = Vec::with_capacity(paths.len());
    for path in paths {
        let id = model_id_from_path(path);
        if runs.iter().any(|r| r.model_id == id) {
            return Err(Error::Validation(format!(
                "two run files map to model id {id:?} ({})",
                path.display()
            )));
        }
        runs.push(load_model_run(path, &id, top_m)?);
    }
    info!("loaded {} runs", runs.len());
    Ok(runs)
}

fn simulate_cmd(a: &SimulateArgs) -> Result<Outcome> {
    let skill = match a.skill.as_slice() {
        [s] => vec![*s; a.n_models],
        many => many.to_vec(),
    };
    let cfg = SimConfig {
        n_examples: a.n_examples,
        n_models: a.n_models,
        n_annotators: a.n_annotators,
        answerable_rate: a.answerable_rate,
        skill,
        correlation: a.correlation,
        top_m: a.top_m,
        duplicate_rate: a.duplicate_rate,
        seed: a.seed,
    };
    let (gold, runs) = generate(&cfg)?;
    let files = write_dataset(&gold, &runs, &a.out_dir, a.gold_shards)?;
    emit(&files, None)?;
    let mut outcome = Outcome::new(a, Vec::new(), Some(a.seed), None)?;
    outcome.default_manifest = Some(a.out_dir.join("manifest.json"));
    Ok(outcome)
}

fn split_cmd(a: &SplitArgs) -> Result<Outcome> {
    let spec = split_by_files(&a.gold, a.n_train)?;
    let train = load_gold(&spec.train_files, a.min_agreement)?;
    let test = load_gold(&spec.test_files, a.min_agreement)?;
    if train.example_ids().any(|id| test.get(id).is_some()) {
        return Err(Error::Validation("train and test gold share example ids".into()));
    }
    info!("{} train examples, {} test examples", train.len(), test.len());
    emit(&spec, a.out.as_deref())?;
    Outcome::new(a, a.gold.clone(), None, a.out.as_deref())
}

fn calibrate_cmd(a: &CalibrateArgs) -> Result<Outcome> {
    let runs = load_runs(&a.runs, a.top_m)?;
    let gold = load_gold(&a.gold, a.min_agreement)?;
    let refs: Vec<&ModelRun> = runs.iter().collect();
    let table = fit_table(&refs, &gold, &a.fit.settings())?;
    emit(&table, a.out.as_deref())?;
    let inputs = a.runs.iter().chain(&a.gold).cloned().collect();
    Outcome::new(a, inputs, Some(a.fit.seed), a.out.as_deref())
}

fn combine_cmd(a: &CombineArgs) -> Result<Outcome> {
    let config = a.policy.resolve()?;
    let runs = load_runs(&a.runs, config.top_m)?;
    let members = if a.members.is_empty() {
        runs.iter().map(|r| r.model_id.clone()).collect()
    } else {
        a.members.clone()
    };
    let spec = EnsembleSpec::new(members, config)?;
    let mut inputs: Vec<PathBuf> = a.runs.clone();
    let mut seed = None;
    let calibrators = if !config.needs_calibrators() {
        None
    } else if let Some(path) = &a.calibrators {
        inputs.push(path.clone());
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: CalibratorTable = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Some(table)
    } else if !a.calib_gold.is_empty() {
        inputs.extend(a.calib_gold.iter().cloned());
        seed = Some(a.fit.seed);
        let gold = load_gold(&a.calib_gold, a.min_agreement)?;
        let chosen: Vec<ModelRun> = runs
            .iter()
            .filter(|r| spec.members.contains(&r.model_id))
            .cloned()
            .collect();
        let refs: Vec<&ModelRun> = chosen.iter().collect();
        Some(fit_table(&refs, &gold, &a.fit.settings())?)
    } else {
        return Err(Error::Config(
            "logistic calibration needs --calibrators or --calib-gold \
             (long answers default to calibrated noisy-or; see --long-agg / --agg)"
                .into(),
        ));
    };
    let preds = combine_runs(&runs, &spec, calibrators.as_ref())?;
    match &a.out {
        Some(path) => {
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            write_predictions(&preds, BufWriter::new(file)).map_err(|e| Error::io(path, e))?;
        }
        None => write_predictions(&preds, io::stdout().lock()).map_err(|e| Error::io("<stdout>", e))?,
    }
    Outcome::new(a, inputs, seed, a.out.as_deref())
}

fn eval_cmd(a: &EvalArgs) -> Result<Outcome> {
    let preds = load_predictions(&a.preds)?;
    let gold = load_gold(&a.gold, a.min_agreement)?;
    let report = evaluate(&preds, &gold)?;
    emit(&report, a.out.as_deref())?;
    let inputs = std::iter::once(&a.preds).chain(&a.gold).cloned().collect();
    Outcome::new(a, inputs, None, a.out.as_deref())
}

fn search_cmd(a: &SearchArgs) -> Result<Outcome> {
    let combine = a.policy.resolve()?;
    let strategy: SearchStrategy = a.strategy.parse().map_err(Error::Config)?;
    let objective = match a.objective.as_str() {
        "long" => AnswerType::Long,
        _ => AnswerType::Short,
    };
    let runs = load_runs(&a.pool, combine.top_m)?;
    let gold_train = load_gold(&a.gold_train, a.min_agreement)?;
    let fit = a.fit.settings();
    let inputs: Vec<PathBuf> = a.pool.iter().chain(&a.gold_train).chain(&a.gold_test).cloned().collect();
    let seed = Some(a.fit.seed);

    if a.dual_policy {
        if a.preds_out.is_some() {
            warn!("--preds-out is ignored with --dual-policy");
        }
        let gold_test = match a.gold_test.is_empty() {
            true => None,
            false => Some(load_gold(&a.gold_test, a.min_agreement)?),
        };
        let result = combined_final_search(&runs, &gold_train, gold_test.as_ref(), a.k, &combine, &fit)?;
        emit(&result, a.out.as_deref())?;
        return Outcome::new(a, inputs, seed, a.out.as_deref());
    }

    let cfg = SearchConfig {
        k: a.k,
        objective,
        strategy,
        exact_size: a.exact_size,
        cap: a.cap,
        force: a.force,
        combine,
    };
    let calibrators = calibrators_for(&runs, &gold_train, &combine, &fit)?;
    let mut result = run_search(&runs, &gold_train, &cfg, calibrators.as_ref())?;
    info!(
        "selected short {:?}, long {:?} after {} evaluations",
        result.short_members, result.long_members, result.evaluations
    );
    if !a.gold_test.is_empty() {
        let gold_test = load_gold(&a.gold_test, a.min_agreement)?;
        let preds = attach_test_report(&mut result, &runs, &gold_test, &combine, calibrators.as_ref())?;
        if let Some(path) = &a.preds_out {
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            write_predictions(&preds, BufWriter::new(file)).map_err(|e| Error::io(path, e))?;
        }
    } else if a.preds_out.is_some() {
        warn!("--preds-out needs --gold-test; nothing written");
    }
    emit(&result, a.out.as_deref())?;
    Outcome::new(a, inputs, seed, a.out.as_deref())
}
