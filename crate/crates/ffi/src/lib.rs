//! C ABI over the spanfuse library.
//!
//! Objects are opaque handles created by `sf_*_load` / `sf_combine` and
//! released with the matching `sf_*_free`. Every fallible call returns an
//! [`SfStatus`]; on failure [`sf_last_error_message`] describes the problem.
//! Strings returned by the library must be released with [`sf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufWriter;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use spanfuse::aggregate::{aggregate_score, AggregationStrategy, ScoreVector};
use spanfuse::calibrate::{CalibratorTable, FitSettings};
use spanfuse::combine::{combine_runs, AnswerPolicy, CalibrationMode, CombineConfig, EnsembleSpec};
use spanfuse::evaluate::{evaluate, EvalReport};
use spanfuse::ingest::{load_gold, load_model_run, load_predictions, model_id_from_path, write_predictions};
use spanfuse::model::{GoldSet, ModelRun, Predictions, DEFAULT_TOP_M};
use spanfuse::search::{calibrators_for, run_search, SearchConfig};
use spanfuse::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8 or an out-of-range option.
    InvalidArgument = 1,
    Io = 2,
    Parse = 3,
    /// Input data broke an invariant (bad span, unsorted scores, coverage mismatch...).
    Validation = 4,
    /// Calibration failed numerically.
    Numeric = 5,
    Config = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfAggregation {
    Max = 0,
    ReciprocalRankSum = 1,
    ExponentialSum = 2,
    NoisyOr = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfCalibration {
    Identity = 0,
    Logistic = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SfCombineOptions {
    pub long_aggregation: SfAggregation,
    pub long_calibration: SfCalibration,
    pub short_aggregation: SfAggregation,
    pub short_calibration: SfCalibration,
    /// Decay for exponential sum.
    pub beta: f64,
    /// 0 means the default of 20.
    pub top_m: usize,
    pub require_containment: bool,
}

/// Metrics at the optimal threshold. A threshold of -INFINITY means every
/// non-null answer is attempted.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SfEvalReport {
    pub long_f1: f64,
    pub long_precision: f64,
    pub long_recall: f64,
    pub long_threshold: f64,
    pub short_f1: f64,
    pub short_precision: f64,
    pub short_recall: f64,
    pub short_threshold: f64,
    pub n_examples: usize,
}

impl From<EvalReport> for SfEvalReport {
    fn from(r: EvalReport) -> Self {
        SfEvalReport {
            long_f1: r.long_f1,
            long_precision: r.long_precision,
            long_recall: r.long_recall,
            long_threshold: r.long_threshold,
            short_f1: r.short_f1,
            short_precision: r.short_precision,
            short_recall: r.short_recall,
            short_threshold: r.short_threshold,
            n_examples: r.n_examples,
        }
    }
}

pub struct SfModelRun(ModelRun);
pub struct SfGoldSet(GoldSet);
pub struct SfPredictions(Predictions);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => SfStatus::Io,
            Error::Parse { .. } => SfStatus::Parse,
            Error::Config(_) => SfStatus::Config,
            Error::Calibrate(c) if c.is_numeric() => SfStatus::Numeric,
            _ => SfStatus::Validation,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SfStatus::InvalidArgument, msg.into())
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SfStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid(format!("{name} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| invalid(format!("{name} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn runs_arg(runs: *const *const SfModelRun, n: usize) -> Result<Vec<ModelRun>, Failure> {
    slice_arg(runs, n, "runs")?
        .iter()
        .map(|&r| ref_arg(r, "runs[i]").map(|r| r.0.clone()))
        .collect()
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| invalid("output contains a NUL byte"))
}

fn strategy(agg: SfAggregation, beta: f64) -> Result<AggregationStrategy, Failure> {
    Ok(match agg {
        SfAggregation::Max => AggregationStrategy::Max,
        SfAggregation::ReciprocalRankSum => AggregationStrategy::ReciprocalRankSum,
        SfAggregation::NoisyOr => AggregationStrategy::NoisyOr,
        SfAggregation::ExponentialSum => {
            AggregationStrategy::exponential(beta).map_err(|e| invalid(format!("beta: {e}")))?
        }
    })
}

fn calibration(c: SfCalibration) -> CalibrationMode {
    match c {
        SfCalibration::Identity => CalibrationMode::Identity,
        SfCalibration::Logistic => CalibrationMode::Logistic,
    }
}

impl SfCombineOptions {
    fn to_config(self) -> Result<CombineConfig, Failure> {
        Ok(CombineConfig {
            long: AnswerPolicy {
                strategy: strategy(self.long_aggregation, self.beta)?,
                calibration: calibration(self.long_calibration),
            },
            short: AnswerPolicy {
                strategy: strategy(self.short_aggregation, self.beta)?,
                calibration: calibration(self.short_calibration),
            },
            top_m: if self.top_m == 0 { DEFAULT_TOP_M } else { self.top_m },
            require_containment: self.require_containment,
        })
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next `sf_*` call on the same thread.
#[no_mangle]
pub extern "C" fn sf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Options equal to the library default: raw max for both answer types.
#[no_mangle]
pub extern "C" fn sf_combine_options_default() -> SfCombineOptions {
    SfCombineOptions {
        long_aggregation: SfAggregation::Max,
        long_calibration: SfCalibration::Identity,
        short_aggregation: SfAggregation::Max,
        short_calibration: SfCalibration::Identity,
        beta: spanfuse::aggregate::DEFAULT_BETA,
        top_m: DEFAULT_TOP_M,
        require_containment: false,
    }
}

/// Loads a prediction JSONL file. `model_id` may be NULL to use the file stem.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_model_run_load(
    path: *const c_char,
    model_id: *const c_char,
    top_m: usize,
    out: *mut *mut SfModelRun,
) -> SfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = PathBuf::from(str_arg(path, "path")?);
        let id = match model_id.is_null() {
            true => model_id_from_path(&path),
            false => str_arg(model_id, "model_id")?.to_string(),
        };
        let top_m = if top_m == 0 { DEFAULT_TOP_M } else { top_m };
        let run = load_model_run(&path, &id, top_m)?;
        *out = Box::into_raw(Box::new(SfModelRun(run)));
        Ok(())
    })
}

/// # Safety
/// `run` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sf_model_run_free(run: *mut SfModelRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of examples in a run (0 for NULL).
///
/// # Safety
/// `run` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sf_model_run_len(run: *const SfModelRun) -> usize {
    run.as_ref().map_or(0, |r| r.0.len())
}

/// Loads and merges gold JSONL files.
///
/// # Safety
/// `paths` must point to `n_paths` NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_gold_load(
    paths: *const *const c_char,
    n_paths: usize,
    min_agreement: usize,
    out: *mut *mut SfGoldSet,
) -> SfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        if n_paths == 0 {
            return Err(invalid("no gold files given"));
        }
        if min_agreement == 0 {
            return Err(invalid("min_agreement must be positive"));
        }
        let paths = slice_arg(paths, n_paths, "paths")?
            .iter()
            .map(|&p| str_arg(p, "paths[i]").map(PathBuf::from))
            .collect::<Result<Vec<_>, _>>()?;
        let gold = load_gold(&paths, min_agreement)?;
        *out = Box::into_raw(Box::new(SfGoldSet(gold)));
        Ok(())
    })
}

/// # Safety
/// `gold` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sf_gold_free(gold: *mut SfGoldSet) {
    if !gold.is_null() {
        drop(Box::from_raw(gold));
    }
}

/// # Safety
/// `gold` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sf_gold_len(gold: *const SfGoldSet) -> usize {
    gold.as_ref().map_or(0, |g| g.0.len())
}

/// Combines `n_runs` runs into final predictions. `options` may be NULL for
/// the defaults. `calibrators_json` (a table written by `spanfuse calibrate`)
/// is required only when an answer type uses logistic calibration.
///
/// # Safety
/// `runs` must point to `n_runs` live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_combine(
    runs: *const *const SfModelRun,
    n_runs: usize,
    options: *const SfCombineOptions,
    calibrators_json: *const c_char,
    out: *mut *mut SfPredictions,
) -> SfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let runs = runs_arg(runs, n_runs)?;
        let options = options.as_ref().copied().unwrap_or_else(|| sf_combine_options_default());
        let config = options.to_config()?;
        let calibrators: Option<CalibratorTable> = match calibrators_json.is_null() {
            true => None,
            false => Some(
                serde_json::from_str(str_arg(calibrators_json, "calibrators_json")?)
                    .map_err(|e| invalid(format!("calibrators_json: {e}")))?,
            ),
        };
        let members = runs.iter().map(|r| r.model_id.clone()).collect();
        let spec = EnsembleSpec::new(members, config)?;
        let preds = combine_runs(&runs, &spec, calibrators.as_ref())?;
        *out = Box::into_raw(Box::new(SfPredictions(preds)));
        Ok(())
    })
}

/// Loads final predictions written by `sf_predictions_save` or `spanfuse combine`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_predictions_load(path: *const c_char, out: *mut *mut SfPredictions) -> SfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let preds = load_predictions(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(SfPredictions(preds)));
        Ok(())
    })
}

/// # Safety
/// `preds` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sf_predictions_save(preds: *const SfPredictions, path: *const c_char) -> SfStatus {
    guard(|| {
        let preds = ref_arg(preds, "preds")?;
        let path = str_arg(path, "path")?;
        let file = File::create(path).map_err(|e| Failure(SfStatus::Io, format!("{path}: {e}")))?;
        write_predictions(&preds.0, BufWriter::new(file)).map_err(|e| Failure(SfStatus::Io, format!("{path}: {e}")))
    })
}

/// # Safety
/// `preds` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sf_predictions_free(preds: *mut SfPredictions) {
    if !preds.is_null() {
        drop(Box::from_raw(preds));
    }
}

/// # Safety
/// `preds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sf_predictions_len(preds: *const SfPredictions) -> usize {
    preds.as_ref().map_or(0, |p| p.0.len())
}

/// Optimal-threshold F1 of `preds` against `gold`.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_evaluate(
    preds: *const SfPredictions,
    gold: *const SfGoldSet,
    out: *mut SfEvalReport,
) -> SfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let report = evaluate(&ref_arg(preds, "preds")?.0, &ref_arg(gold, "gold")?.0)?;
        *out = report.into();
        Ok(())
    })
}

/// Aggregates the scores of one span's duplicate predictions. The scores
/// need not be sorted.
///
/// # Safety
/// `scores` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_aggregate_score(
    scores: *const f64,
    n: usize,
    aggregation: SfAggregation,
    beta: f64,
    out: *mut f64,
) -> SfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let scores = slice_arg(scores, n, "scores")?;
        if scores.iter().any(|x| !x.is_finite()) {
            return Err(invalid("scores must be finite"));
        }
        let vector = ScoreVector::from_unsorted(scores.to_vec()).map_err(|e| invalid(e.to_string()))?;
        *out = aggregate_score(&vector, strategy(aggregation, beta)?)
            .map_err(|e| Failure(SfStatus::Validation, e.to_string()))?;
        Ok(())
    })
}

/// Runs an ensemble search over `n_runs` runs against `gold_train` and writes
/// the result as JSON to `out_json` (free with `sf_string_free`).
/// `config_json` holds a search configuration object; NULL selects greedy
/// search on short F1 with k = 4. Logistic calibrators, when the
/// configuration needs them, are fitted on `gold_train`.
///
/// # Safety
/// `runs` must point to `n_runs` live handles; `gold_train` must be live;
/// `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sf_search(
    runs: *const *const SfModelRun,
    n_runs: usize,
    gold_train: *const SfGoldSet,
    config_json: *const c_char,
    out_json: *mut *mut c_char,
) -> SfStatus {
    guard(|| {
        let out = out_arg(out_json, "out_json")?;
        *out = ptr::null_mut();
        let runs = runs_arg(runs, n_runs)?;
        let gold = &ref_arg(gold_train, "gold_train")?.0;
        let config: SearchConfig = match config_json.is_null() {
            true => SearchConfig::default(),
            false => serde_json::from_str(str_arg(config_json, "config_json")?)
                .map_err(|e| Failure(SfStatus::Config, format!("config_json: {e}")))?,
        };
        let calibrators = calibrators_for(&runs, gold, &config.combine, &FitSettings::default())?;
        let result = run_search(&runs, gold, &config, calibrators.as_ref())?;
        let text = serde_json::to_string(&result).map_err(|e| Failure(SfStatus::Validation, e.to_string()))?;
        *out = into_c_string(text)?;
        Ok(())
    })
}
