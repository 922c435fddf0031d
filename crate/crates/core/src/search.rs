//! Choosing which models to ensemble.
//!
//! Every candidate ensemble is scored by combining its members on the
//! dev-train split and evaluating against dev-train gold only; the test split
//! is touched solely by [`attach_test_report`] once selection is over.
//!
//! * seed: combine the first `k` runs (variants of one configuration).
//! * exhaustive: score every subset of size `k` (or `1..=k`) and return the
//!   best ensemble for each answer type.
//! * greedy: grow an ensemble one model at a time on the objective F1, keep
//!   the best prefix, then pick the best subset of that prefix for the other
//!   answer type and join the two prediction sets.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::AggregationStrategy;
use crate::calibrate::{fit_table, CalibratorTable, FitSettings};
use crate::combine::{combine_prepared, prepare_run, CalibrationMode, CombineConfig, PreparedRun};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, EvalReport};
use crate::model::{AnswerType, FinalPrediction, GoldSet, ModelRun, Predictions};

/// Largest pool exhaustive search accepts without `force`.
pub const DEFAULT_EXHAUSTIVE_CAP: usize = 20;
/// Largest set whose powerset is searched during refinement.
pub const MAX_REFINEMENT_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchStrategy {
    Seed,
    Exhaustive,
    Greedy,
}

impl FromStr for SearchStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "seed" => Ok(SearchStrategy::Seed),
            "exhaustive" => Ok(SearchStrategy::Exhaustive),
            "greedy" => Ok(SearchStrategy::Greedy),
            other => Err(format!("unknown search strategy {other:?}")),
        }
    }
}

impl fmt::Display for SearchStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SearchStrategy::Seed => "seed",
            SearchStrategy::Exhaustive => "exhaustive",
            SearchStrategy::Greedy => "greedy",
        })
    }
}

/// Missing fields take their defaults when deserialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub k: usize,
    pub objective: AnswerType,
    pub strategy: SearchStrategy,
    /// Exhaustive only: consider subsets of exactly `k` models instead of `1..=k`.
    pub exact_size: bool,
    pub cap: usize,
    pub force: bool,
    pub combine: CombineConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            k: 4,
            objective: AnswerType::Short,
            strategy: SearchStrategy::Greedy,
            exact_size: false,
            cap: DEFAULT_EXHAUSTIVE_CAP,
            force: false,
            combine: CombineConfig::default(),
        }
    }
}

/// One greedy step: the model added and the objective F1 after adding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyStep {
    pub model_id: String,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub strategy: SearchStrategy,
    pub objective: Option<AnswerType>,
    pub short_members: Vec<String>,
    pub long_members: Vec<String>,
    pub train_report: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_report: Option<EvalReport>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub trace: Vec<GreedyStep>,
    /// Candidate ensembles scored while selecting (greedy: growth steps only).
    pub evaluations: usize,
}

/// Fits logistic calibrators on `gold` when `config` asks for them.
pub fn calibrators_for(
    runs: &[ModelRun],
    gold: &GoldSet,
    config: &CombineConfig,
    settings: &FitSettings,
) -> Result<Option<CalibratorTable>> {
    if !config.needs_calibrators() {
        return Ok(None);
    }
    let refs: Vec<&ModelRun> = runs.iter().collect();
    fit_table(&refs, gold, settings).map(Some)
}

/// Prepared pool restricted to one gold split, with a cache of scored subsets.
struct Pool<'a> {
    ids: Vec<String>,
    prepared: Vec<PreparedRun>,
    gold: &'a GoldSet,
    require_containment: bool,
    cache: Mutex<HashMap<Vec<usize>, EvalReport>>,
    misses: AtomicUsize,
}

impl<'a> Pool<'a> {
    fn new(
        runs: &[ModelRun],
        gold: &'a GoldSet,
        config: &CombineConfig,
        calibrators: Option<&CalibratorTable>,
    ) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Config("the model pool is empty".into()));
        }
        let mut order: Vec<&ModelRun> = runs.iter().collect();
        order.sort_by(|a, b| a.model_id.cmp(&b.model_id));
        if order.windows(2).any(|w| w[0].model_id == w[1].model_id) {
            return Err(Error::Config("model ids in the pool must be unique".into()));
        }
        let prepared = order
            .par_iter()
            .map(|r| prepare_run(&r.restrict(gold.example_ids()), config, calibrators))
            .collect::<Result<Vec<_>>>()?;
        Ok(Pool {
            ids: order.iter().map(|r| r.model_id.clone()).collect(),
            prepared,
            gold,
            require_containment: config.require_containment,
            cache: Mutex::new(HashMap::new()),
            misses: AtomicUsize::new(0),
        })
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    fn index_of(&self, model_id: &str) -> Result<usize> {
        self.ids
            .iter()
            .position(|m| m == model_id)
            .ok_or_else(|| Error::Config(format!("model {model_id:?} is not in the pool")))
    }

    fn names(&self, members: &[usize]) -> Vec<String> {
        members.iter().map(|&i| self.ids[i].clone()).collect()
    }

    fn predictions(&self, members: &[usize]) -> Result<Predictions> {
        let runs: Vec<&PreparedRun> = members.iter().map(|&i| &self.prepared[i]).collect();
        combine_prepared(&runs, self.require_containment)
    }

    fn report(&self, members: &[usize]) -> Result<EvalReport> {
        let mut key = members.to_vec();
        key.sort_unstable();
        if let Some(r) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(*r);
        }
        let report = evaluate(&self.predictions(&key)?, self.gold)?;
        self.misses.fetch_add(1, Ordering::Relaxed);
        self.cache.lock().expect("cache lock").insert(key, report);
        Ok(report)
    }

    /// Sorted member names, the tie-break key between equal scores.
    fn sort_key(&self, members: &[usize]) -> Vec<&str> {
        let mut names: Vec<&str> = members.iter().map(|&i| self.ids[i].as_str()).collect();
        names.sort_unstable();
        names
    }

    /// Index of the best entry by `f1`; ties go to the lexicographically
    /// smaller sorted member list.
    fn best_of(&self, sets: &[Vec<usize>], scores: &[f64]) -> usize {
        let mut best = 0;
        for i in 1..sets.len() {
            let better = scores[i] > scores[best]
                || (scores[i] == scores[best] && self.sort_key(&sets[i]) < self.sort_key(&sets[best]));
            if better {
                best = i;
            }
        }
        best
    }
}

/// Replaces each short answer with the one from `short_preds` and each long
/// answer with the one from `long_preds`, then applies the null-join rule.
pub fn join_predictions(short_preds: &Predictions, long_preds: &Predictions) -> Result<Predictions> {
    if short_preds.len() != long_preds.len() || short_preds.keys().any(|k| !long_preds.contains_key(k)) {
        return Err(Error::Validation(
            "short and long prediction sets cover different examples".into(),
        ));
    }
    Ok(short_preds
        .iter()
        .map(|(id, s)| {
            let l = &long_preds[id];
            let joined = FinalPrediction::joined(
                (l.long, l.long_score),
                (s.short, s.short_score),
                0.0,
            );
            (id.clone(), joined)
        })
        .collect())
}

fn joined_report(pool: &Pool<'_>, short: &[usize], long: &[usize]) -> Result<EvalReport> {
    let short_preds = pool.predictions(short)?;
    let long_preds = if short == long {
        short_preds.clone()
    } else {
        pool.predictions(long)?
    };
    evaluate(&join_predictions(&short_preds, &long_preds)?, pool.gold)
}

/// Combines the first `k` runs (seed variants of one configuration).
pub fn seed_ensemble(
    runs: &[ModelRun],
    gold_train: &GoldSet,
    k: usize,
    config: &CombineConfig,
    calibrators: Option<&CalibratorTable>,
) -> Result<SearchResult> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if runs.len() < k {
        return Err(Error::Config(format!(
            "seed ensemble needs {k} runs, got {}",
            runs.len()
        )));
    }
    let chosen = &runs[..k];
    let pool = Pool::new(chosen, gold_train, config, calibrators)?;
    let members: Vec<usize> = chosen
        .iter()
        .map(|r| pool.index_of(&r.model_id))
        .collect::<Result<_>>()?;
    let report = pool.report(&members)?;
    let names = pool.names(&members);
    Ok(SearchResult {
        strategy: SearchStrategy::Seed,
        objective: None,
        short_members: names.clone(),
        long_members: names,
        train_report: report,
        test_report: None,
        trace: Vec::new(),
        evaluations: 1,
    })
}

/// The single model with the highest short F1 + long F1 on dev-train.
pub fn best_single_model(
    runs: &[ModelRun],
    gold_train: &GoldSet,
    config: &CombineConfig,
    calibrators: Option<&CalibratorTable>,
) -> Result<SearchResult> {
    let pool = Pool::new(runs, gold_train, config, calibrators)?;
    let sets: Vec<Vec<usize>> = (0..pool.len()).map(|i| vec![i]).collect();
    let reports = sets
        .par_iter()
        .map(|s| pool.report(s))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = reports.iter().map(|r| r.short_f1 + r.long_f1).collect();
    let best = pool.best_of(&sets, &scores);
    let names = pool.names(&sets[best]);
    Ok(SearchResult {
        strategy: SearchStrategy::Seed,
        objective: None,
        short_members: names.clone(),
        long_members: names,
        train_report: reports[best],
        test_report: None,
        trace: Vec::new(),
        evaluations: sets.len(),
    })
}

/// All `r`-element index combinations of `0..n` in lexicographic order.
fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if r == 0 || r > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..r).collect();
    loop {
        out.push(idx.clone());
        let mut i = r;
        while i > 0 && idx[i - 1] == n - r + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        idx[i - 1] += 1;
        for j in i..r {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if k > n {
        return Err(Error::Config(format!("k = {k} exceeds the pool size {n}")));
    }
    Ok(())
}

/// Scores every candidate subset and returns `(best by short F1, best by long F1)`.
pub fn exhaustive_search(
    runs: &[ModelRun],
    gold_train: &GoldSet,
    cfg: &SearchConfig,
    calibrators: Option<&CalibratorTable>,
) -> Result<(SearchResult, SearchResult)> {
    check_k(cfg.k, runs.len())?;
    if runs.len() > cfg.cap && !cfg.force {
        return Err(Error::Config(format!(
            "pool of {} models exceeds the exhaustive cap of {} (use force to override)",
            runs.len(),
            cfg.cap
        )));
    }
    let pool = Pool::new(runs, gold_train, &cfg.combine, calibrators)?;
    let sizes = if cfg.exact_size { cfg.k..=cfg.k } else { 1..=cfg.k };
    let sets: Vec<Vec<usize>> = sizes.flat_map(|r| combinations(pool.len(), r)).collect();
    let reports = sets
        .par_iter()
        .map(|s| pool.report(s))
        .collect::<Result<Vec<_>>>()?;

    let result_for = |answer_type: AnswerType| {
        let scores: Vec<f64> = reports.iter().map(|r| r.f1(answer_type)).collect();
        let best = pool.best_of(&sets, &scores);
        let names = pool.names(&sets[best]);
        SearchResult {
            strategy: SearchStrategy::Exhaustive,
            objective: Some(answer_type),
            short_members: names.clone(),
            long_members: names,
            train_report: reports[best],
            test_report: None,
            trace: Vec::new(),
            evaluations: sets.len(),
        }
    };
    Ok((result_for(AnswerType::Short), result_for(AnswerType::Long)))
}

/// Greedy forward selection on `cfg.objective`, best-prefix truncation,
/// powerset refinement for the other answer type, then joining.
pub fn greedy_search(
    runs: &[ModelRun],
    gold_train: &GoldSet,
    cfg: &SearchConfig,
    calibrators: Option<&CalibratorTable>,
) -> Result<SearchResult> {
    let pool = Pool::new(runs, gold_train, &cfg.combine, calibrators)?;
    check_k(cfg.k, pool.len())?;
    let objective = cfg.objective;

    let mut chosen: Vec<usize> = Vec::with_capacity(cfg.k);
    let mut trace: Vec<GreedyStep> = Vec::with_capacity(cfg.k);
    let mut evaluations = 0;
    for _ in 0..cfg.k {
        let candidates: Vec<usize> = (0..pool.len()).filter(|i| !chosen.contains(i)).collect();
        let scores = candidates
            .par_iter()
            .map(|&c| {
                let mut set = chosen.clone();
                set.push(c);
                pool.report(&set).map(|r| r.f1(objective))
            })
            .collect::<Result<Vec<f64>>>()?;
        evaluations += candidates.len();
        // pool ids are sorted, so the first maximum is the smallest model id
        let mut best = 0;
        for i in 1..candidates.len() {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        chosen.push(candidates[best]);
        trace.push(GreedyStep {
            model_id: pool.ids[candidates[best]].clone(),
            f1: scores[best],
        });
    }

    // first prefix reaching the best objective F1
    let mut prefix = 1;
    for (i, step) in trace.iter().enumerate() {
        if step.f1 > trace[prefix - 1].f1 {
            prefix = i + 1;
        }
    }
    let primary: Vec<usize> = chosen[..prefix].to_vec();
    let refined = refine(&pool, &primary, objective.opposite())?;

    let (short, long) = match objective {
        AnswerType::Short => (primary, refined),
        AnswerType::Long => (refined, primary),
    };
    let train_report = joined_report(&pool, &short, &long)?;
    Ok(SearchResult {
        strategy: SearchStrategy::Greedy,
        objective: Some(objective),
        short_members: pool.names(&short),
        long_members: pool.names(&long),
        train_report,
        test_report: None,
        trace,
        evaluations,
    })
}

/// Best non-empty subset of `set` for `answer_type`, in `set` order.
fn refine(pool: &Pool<'_>, set: &[usize], answer_type: AnswerType) -> Result<Vec<usize>> {
    if set.len() > MAX_REFINEMENT_SIZE {
        return Err(Error::Config(format!(
            "powerset refinement over {} models is too large (max {MAX_REFINEMENT_SIZE})",
            set.len()
        )));
    }
    let subsets: Vec<Vec<usize>> = (1u32..(1 << set.len()))
        .map(|mask| {
            set.iter()
                .enumerate()
                .filter(|(bit, _)| mask & (1 << bit) != 0)
                .map(|(_, &m)| m)
                .collect()
        })
        .collect();
    let scores = subsets
        .par_iter()
        .map(|s| pool.report(s).map(|r| r.f1(answer_type)))
        .collect::<Result<Vec<f64>>>()?;
    let best = pool.best_of(&subsets, &scores);
    Ok(subsets[best].clone())
}

/// Runs the configured strategy. Exhaustive search returns the ensemble
/// best on `cfg.objective`.
pub fn run_search(
    runs: &[ModelRun],
    gold_train: &GoldSet,
    cfg: &SearchConfig,
    calibrators: Option<&CalibratorTable>,
) -> Result<SearchResult> {
    match cfg.strategy {
        SearchStrategy::Seed => seed_ensemble(runs, gold_train, cfg.k, &cfg.combine, calibrators),
        SearchStrategy::Greedy => greedy_search(runs, gold_train, cfg, calibrators),
        SearchStrategy::Exhaustive => {
            let (short, long) = exhaustive_search(runs, gold_train, cfg, calibrators)?;
            Ok(match cfg.objective {
                AnswerType::Short => short,
                AnswerType::Long => long,
            })
        }
    }
}

/// Predictions of a selected ensemble on the examples of `gold`.
pub fn predict(
    runs: &[ModelRun],
    gold: &GoldSet,
    short_members: &[String],
    long_members: &[String],
    config: &CombineConfig,
    calibrators: Option<&CalibratorTable>,
) -> Result<Predictions> {
    let members: Vec<&String> = short_members.iter().chain(long_members).collect();
    let used: Vec<ModelRun> = runs
        .iter()
        .filter(|r| members.contains(&&r.model_id))
        .cloned()
        .collect();
    let pool = Pool::new(&used, gold, config, calibrators)?;
    let idx = |names: &[String]| names.iter().map(|n| pool.index_of(n)).collect::<Result<Vec<_>>>();
    let short_preds = pool.predictions(&idx(short_members)?)?;
    let long_preds = pool.predictions(&idx(long_members)?)?;
    join_predictions(&short_preds, &long_preds)
}

/// Evaluates the selected ensemble on a held-out split.
pub fn attach_test_report(
    result: &mut SearchResult,
    runs: &[ModelRun],
    gold_test: &GoldSet,
    config: &CombineConfig,
    calibrators: Option<&CalibratorTable>,
) -> Result<Predictions> {
    let preds = predict(
        runs,
        gold_test,
        &result.short_members,
        &result.long_members,
        config,
        calibrators,
    )?;
    result.test_report = Some(evaluate(&preds, gold_test)?);
    Ok(preds)
}

/// The two-pass final configuration: short answers from a long-objective
/// greedy search with raw max aggregation, long answers from a
/// long-objective greedy search with calibrated noisy-or.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedFinal {
    pub short_search: SearchResult,
    pub long_search: SearchResult,
    pub short_members: Vec<String>,
    pub long_members: Vec<String>,
    pub train_report: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_report: Option<EvalReport>,
}

pub fn final_configs(base: &CombineConfig) -> (CombineConfig, CombineConfig) {
    let mut short_cfg = CombineConfig::uniform(AggregationStrategy::Max, CalibrationMode::Identity);
    short_cfg.top_m = base.top_m;
    short_cfg.require_containment = base.require_containment;
    let mut long_cfg = CombineConfig::uniform(AggregationStrategy::NoisyOr, CalibrationMode::Logistic);
    long_cfg.top_m = base.top_m;
    long_cfg.require_containment = base.require_containment;
    (short_cfg, long_cfg)
}

pub fn combined_final_search(
    runs: &[ModelRun],
    gold_train: &GoldSet,
    gold_test: Option<&GoldSet>,
    k: usize,
    base: &CombineConfig,
    fit: &FitSettings,
) -> Result<CombinedFinal> {
    let (short_cfg, long_cfg) = final_configs(base);
    let calibrators = calibrators_for(runs, gold_train, &long_cfg, fit)?;
    let search = |combine: CombineConfig, cal: Option<&CalibratorTable>| {
        let cfg = SearchConfig {
            k,
            objective: AnswerType::Long,
            strategy: SearchStrategy::Greedy,
            combine,
            ..SearchConfig::default()
        };
        greedy_search(runs, gold_train, &cfg, cal)
    };
    let mut short_search = search(short_cfg, None)?;
    let mut long_search = search(long_cfg, calibrators.as_ref())?;

    let joined = |gold: &GoldSet, s: &SearchResult, l: &SearchResult| -> Result<EvalReport> {
        let sp = predict(runs, gold, &s.short_members, &s.short_members, &short_cfg, None)?;
        let lp = predict(runs, gold, &l.long_members, &l.long_members, &long_cfg, calibrators.as_ref())?;
        evaluate(&join_predictions(&sp, &lp)?, gold)
    };
    let train_report = joined(gold_train, &short_search, &long_search)?;
    let test_report = match gold_test {
        Some(g) => {
            attach_test_report(&mut short_search, runs, g, &short_cfg, None)?;
            attach_test_report(&mut long_search, runs, g, &long_cfg, calibrators.as_ref())?;
            Some(joined(g, &short_search, &long_search)?)
        }
        None => None,
    };
    Ok(CombinedFinal {
        short_members: short_search.short_members.clone(),
        long_members: long_search.long_members.clone(),
        short_search,
        long_search,
        train_report,
        test_report,
    })
}
