//! Fusing k systems into one prediction per example.
//!
//! Each system's list is truncated to its top-m entries, calibrated and
//! deduplicated. For every span predicted by at least one system the
//! ensemble score is the sum of the systems' scores divided by k, so a
//! system that did not predict the span contributes zero. The highest
//! mean wins; a null long answer forces a null short answer.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{dedupe, AggregationStrategy};
use crate::calibrate::{apply, Calibrator, CalibratorTable};
use crate::error::{Error, Result};
use crate::model::{
    AnswerType, Candidate, ExamplePredictions, FinalPrediction, ModelRun, Predictions, Span,
    DEFAULT_TOP_M,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    Identity,
    Logistic,
}

impl std::str::FromStr for CalibrationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "none" => Ok(CalibrationMode::Identity),
            "logistic" => Ok(CalibrationMode::Logistic),
            other => Err(format!("unknown calibration {other:?} (expected identity or logistic)")),
        }
    }
}

/// How one answer type's scores are normalized and deduplicated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerPolicy {
    pub strategy: AggregationStrategy,
    pub calibration: CalibrationMode,
}

impl AnswerPolicy {
    pub const RAW_MAX: AnswerPolicy = AnswerPolicy {
        strategy: AggregationStrategy::Max,
        calibration: CalibrationMode::Identity,
    };
}

/// Everything about combination except which models take part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombineConfig {
    pub long: AnswerPolicy,
    pub short: AnswerPolicy,
    pub top_m: usize,
    /// Restrict the short answer to spans inside the chosen long answer.
    pub require_containment: bool,
}

impl CombineConfig {
    pub fn uniform(strategy: AggregationStrategy, calibration: CalibrationMode) -> Self {
        let policy = AnswerPolicy {
            strategy,
            calibration,
        };
        CombineConfig {
            long: policy,
            short: policy,
            top_m: DEFAULT_TOP_M,
            require_containment: false,
        }
    }

    /// Max for short answers, calibrated noisy-or for long answers.
    pub fn headline() -> Self {
        CombineConfig {
            long: AnswerPolicy {
                strategy: AggregationStrategy::NoisyOr,
                calibration: CalibrationMode::Logistic,
            },
            short: AnswerPolicy::RAW_MAX,
            top_m: DEFAULT_TOP_M,
            require_containment: false,
        }
    }

    pub fn policy(&self, answer_type: AnswerType) -> &AnswerPolicy {
        match answer_type {
            AnswerType::Long => &self.long,
            AnswerType::Short => &self.short,
        }
    }

    pub fn needs_calibrators(&self) -> bool {
        self.long.calibration == CalibrationMode::Logistic
            || self.short.calibration == CalibrationMode::Logistic
    }
}

impl Default for CombineConfig {
    fn default() -> Self {
        CombineConfig::uniform(AggregationStrategy::Max, CalibrationMode::Identity)
    }
}

/// A concrete ensemble: member model ids plus how to combine them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<String>,
    pub config: CombineConfig,
}

impl EnsembleSpec {
    pub fn new(members: Vec<String>, config: CombineConfig) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("an ensemble needs at least one member".into()));
        }
        let distinct: BTreeSet<&String> = members.iter().collect();
        if distinct.len() != members.len() {
            return Err(Error::Config("ensemble members must be distinct".into()));
        }
        if config.top_m == 0 {
            return Err(Error::Config("top_m must be positive".into()));
        }
        Ok(EnsembleSpec { members, config })
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }
}

/// A system's candidate lists after truncation, calibration and dedupe.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRun {
    pub model_id: String,
    pub examples: BTreeMap<String, ExamplePredictions>,
}

fn prepare_list(
    candidates: &[Candidate],
    top_m: usize,
    calibrator: &Calibrator,
    strategy: AggregationStrategy,
) -> std::result::Result<Vec<Candidate>, crate::aggregate::AggregateError> {
    let kept = &candidates[..candidates.len().min(top_m)];
    dedupe(&apply(calibrator, kept), strategy)
}

/// Applies truncation, calibration and dedupe to every example of `run`.
pub fn prepare_run(
    run: &ModelRun,
    config: &CombineConfig,
    calibrators: Option<&CalibratorTable>,
) -> Result<PreparedRun> {
    let calibrator = |answer_type: AnswerType| -> Result<Calibrator> {
        match config.policy(answer_type).calibration {
            CalibrationMode::Identity => Ok(Calibrator::IDENTITY),
            CalibrationMode::Logistic => {
                let table = calibrators.ok_or_else(|| {
                    Error::Config("logistic calibration requested but no calibrators supplied".into())
                })?;
                Ok(*table.require(&run.model_id, answer_type)?)
            }
        }
    };
    let long_cal = calibrator(AnswerType::Long)?;
    let short_cal = calibrator(AnswerType::Short)?;
    let mut examples = BTreeMap::new();
    for (id, preds) in &run.predictions {
        let wrap = |source| Error::Aggregate {
            example_id: id.clone(),
            model_id: run.model_id.clone(),
            source,
        };
        let long = prepare_list(&preds.long, config.top_m, &long_cal, config.long.strategy)
            .map_err(wrap)?;
        let short = prepare_list(&preds.short, config.top_m, &short_cal, config.short.strategy)
            .map_err(wrap)?;
        examples.insert(
            id.clone(),
            ExamplePredictions {
                example_id: id.clone(),
                long,
                short,
            },
        );
    }
    Ok(PreparedRun {
        model_id: run.model_id.clone(),
        examples,
    })
}

/// Mean score per span over `k` systems, absent systems counting as zero.
pub fn mean_scores(lists: &[&[Candidate]], k: usize) -> BTreeMap<Span, f64> {
    let mut contributions: BTreeMap<Span, Vec<f64>> = BTreeMap::new();
    for list in lists {
        for c in *list {
            contributions.entry(c.span).or_default().push(c.score);
        }
    }
    contributions
        .into_iter()
        .map(|(span, mut scores)| {
            // fixed summation order keeps the result independent of member order
            scores.sort_by(f64::total_cmp);
            (span, scores.iter().sum::<f64>() / k as f64)
        })
        .collect()
}

/// Highest score, ties to the smaller span.
fn argmax<'a, I>(scores: I) -> Option<(Span, f64)>
where
    I: IntoIterator<Item = (&'a Span, &'a f64)>,
{
    let mut best: Option<(Span, f64)> = None;
    for (&span, &score) in scores {
        match best {
            Some((_, s)) if score <= s => {}
            _ => best = Some((span, score)),
        }
    }
    best
}

/// Combines one example's deduplicated lists from exactly `k` systems.
pub fn combine_example(
    per_system: &[&ExamplePredictions],
    k: usize,
    require_containment: bool,
) -> Result<FinalPrediction> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if per_system.len() != k {
        return Err(Error::Validation(format!(
            "expected {k} systems, got {}",
            per_system.len()
        )));
    }
    let id = &per_system[0].example_id;
    if let Some(other) = per_system.iter().find(|p| &p.example_id != id) {
        return Err(Error::Validation(format!(
            "mismatched example ids {id:?} and {:?}",
            other.example_id
        )));
    }

    let long_lists: Vec<&[Candidate]> = per_system.iter().map(|p| p.long.as_slice()).collect();
    let short_lists: Vec<&[Candidate]> = per_system.iter().map(|p| p.short.as_slice()).collect();
    let long_scores = mean_scores(&long_lists, k);
    let short_scores = mean_scores(&short_lists, k);

    let long = argmax(&long_scores).unwrap_or((Span::NULL, 0.0));
    let short = if require_containment && !long.0.is_null() {
        argmax(
            short_scores
                .iter()
                .filter(|(s, _)| s.is_null() || long.0.contains(s)),
        )
    } else {
        argmax(&short_scores)
    };
    let null_short = short_scores.get(&Span::NULL).copied().unwrap_or(0.0);
    let short = short.unwrap_or((Span::NULL, null_short));
    Ok(FinalPrediction::joined(long, short, null_short))
}

/// Combines already-prepared runs over their common example set.
pub fn combine_prepared(runs: &[&PreparedRun], require_containment: bool) -> Result<Predictions> {
    let Some(first) = runs.first() else {
        return Err(Error::Config("k must be positive".into()));
    };
    check_coverage(runs.iter().map(|r| (r.model_id.as_str(), &r.examples)))?;
    let k = runs.len();
    let ids: Vec<&String> = first.examples.keys().collect();
    let combined: Vec<(String, FinalPrediction)> = ids
        .par_iter()
        .map(|id| {
            let per_system: Vec<&ExamplePredictions> =
                runs.iter().map(|r| &r.examples[*id]).collect();
            combine_example(&per_system, k, require_containment).map(|p| ((*id).clone(), p))
        })
        .collect::<Result<_>>()?;
    Ok(combined.into_iter().collect())
}

fn check_coverage<'a, I>(runs: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a BTreeMap<String, ExamplePredictions>)>,
{
    let runs: Vec<_> = runs.into_iter().collect();
    let all: BTreeSet<&String> = runs.iter().flat_map(|(_, m)| m.keys()).collect();
    let mut problems = Vec::new();
    for (model_id, examples) in &runs {
        let missing: Vec<&str> = all
            .iter()
            .filter(|id| !examples.contains_key(**id))
            .map(|id| id.as_str())
            .collect();
        if !missing.is_empty() {
            let shown: Vec<&str> = missing.iter().take(10).copied().collect();
            let more = if missing.len() > shown.len() {
                format!(" (+{} more)", missing.len() - shown.len())
            } else {
                String::new()
            };
            problems.push(format!("{model_id} is missing {}{more}", shown.join(", ")));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "example coverage differs across members: {}",
            problems.join("; ")
        )))
    }
}

/// Looks up `members` in `runs` by model id.
pub fn select_members<'a>(runs: &'a [ModelRun], members: &[String]) -> Result<Vec<&'a ModelRun>> {
    members
        .iter()
        .map(|m| {
            runs.iter()
                .find(|r| &r.model_id == m)
                .ok_or_else(|| Error::Config(format!("no run loaded for model {m:?}")))
        })
        .collect()
}

/// Full pipeline for one ensemble: calibrate, dedupe and combine every example.
pub fn combine_runs(
    runs: &[ModelRun],
    spec: &EnsembleSpec,
    calibrators: Option<&CalibratorTable>,
) -> Result<Predictions> {
    let members = select_members(runs, &spec.members)?;
    let prepared = members
        .iter()
        .map(|r| prepare_run(r, &spec.config, calibrators))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PreparedRun> = prepared.iter().collect();
    combine_prepared(&refs, spec.config.require_containment)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(a: i64, b: i64) -> Span {
        Span::new(a, b).unwrap()
    }

    fn example(id: &str, long: &[(Span, f64)], short: &[(Span, f64)]) -> ExamplePredictions {
        let to = |xs: &[(Span, f64)]| xs.iter().map(|&(s, x)| Candidate::new(s, x)).collect();
        ExamplePredictions::new(id, to(long), to(short), 20)
    }

    #[test]
    fn zero_imputation_mean() {
        let a = sp(0, 10);
        let b = sp(20, 30);
        let systems = [
            example("q", &[(a, 0.8)], &[]),
            example("q", &[(a, 0.6)], &[]),
            example("q", &[(b, 0.3)], &[]),
            example("q", &[(b, 0.3)], &[]),
        ];
        let refs: Vec<&ExamplePredictions> = systems.iter().collect();
        let p = combine_example(&refs, 4, false).unwrap();
        assert_eq!(p.long, a);
        assert!((p.long_score - 0.35).abs() < 1e-15);
    }

    #[test]
    fn identical_systems_keep_score() {
        let a = sp(0, 10);
        let systems: Vec<_> = (0..3).map(|_| example("q", &[(a, 0.7)], &[])).collect();
        let refs: Vec<&ExamplePredictions> = systems.iter().collect();
        let p = combine_example(&refs, 3, false).unwrap();
        assert!((p.long_score - 0.7).abs() < 1e-15);
    }

    #[test]
    fn null_long_forces_null_short() {
        let s = sp(3, 5);
        let systems = [example("q", &[(Span::NULL, 0.9), (sp(0, 40), 0.2)], &[(s, 0.8), (Span::NULL, 0.1)])];
        let refs: Vec<&ExamplePredictions> = systems.iter().collect();
        let p = combine_example(&refs, 1, false).unwrap();
        assert!(p.long.is_null());
        assert!(p.short.is_null());
        assert_eq!(p.short_score, 0.1);

        let systems = [example("q", &[(Span::NULL, 0.9)], &[(s, 0.8)])];
        let refs: Vec<&ExamplePredictions> = systems.iter().collect();
        let p = combine_example(&refs, 1, false).unwrap();
        assert_eq!((p.short, p.short_score), (Span::NULL, 0.0));
    }

    #[test]
    fn containment_filter() {
        let long = sp(0, 10);
        let systems = [example(
            "q",
            &[(long, 0.9)],
            &[(sp(50, 52), 0.9), (sp(2, 4), 0.5)],
        )];
        let refs: Vec<&ExamplePredictions> = systems.iter().collect();
        assert_eq!(combine_example(&refs, 1, false).unwrap().short, sp(50, 52));
        assert_eq!(combine_example(&refs, 1, true).unwrap().short, sp(2, 4));
    }

    #[test]
    fn argument_errors() {
        let a = example("q", &[], &[]);
        let b = example("r", &[], &[]);
        assert!(combine_example(&[], 0, false).is_err());
        assert!(combine_example(&[&a], 2, false).is_err());
        assert!(combine_example(&[&a, &b], 2, false).is_err());
        let p = combine_example(&[&a], 1, false).unwrap();
        assert!(p.long.is_null() && p.short.is_null());
    }

    fn run(id: &str, examples: &[(&str, f64)]) -> ModelRun {
        let mut r = ModelRun::new(id);
        for &(ex, score) in examples {
            r.predictions.insert(
                ex.to_string(),
                example(ex, &[(sp(0, 5), score), (sp(5, 9), score / 2.0), (sp(0, 5), score / 3.0)], &[(sp(1, 2), score)]),
            );
        }
        r
    }

    #[test]
    fn single_member_is_its_own_argmax() {
        let runs = vec![run("a", &[("x", 0.9), ("y", 0.4)])];
        let spec = EnsembleSpec::new(vec!["a".into()], CombineConfig::default()).unwrap();
        let out = combine_runs(&runs, &spec, None).unwrap();
        assert_eq!(out["x"].long, sp(0, 5));
        assert_eq!(out["x"].long_score, 0.9);
        assert_eq!(out["y"].short_score, 0.4);
    }

    #[test]
    fn duplicate_runs_match_single() {
        let base = run("a", &[("x", 0.9), ("y", 0.4)]);
        let mut twin = base.clone();
        twin.model_id = "b".into();
        let runs = vec![base, twin];
        let cfg = CombineConfig::uniform(AggregationStrategy::ReciprocalRankSum, CalibrationMode::Identity);
        let one = combine_runs(&runs, &EnsembleSpec::new(vec!["a".into()], cfg).unwrap(), None).unwrap();
        let two = combine_runs(&runs, &EnsembleSpec::new(vec!["a".into(), "b".into()], cfg).unwrap(), None).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn coverage_mismatch_lists_ids() {
        let runs = vec![run("a", &[("x", 0.9), ("y", 0.4)]), run("b", &[("x", 0.9)])];
        let spec = EnsembleSpec::new(vec!["a".into(), "b".into()], CombineConfig::default()).unwrap();
        let err = combine_runs(&runs, &spec, None).unwrap_err().to_string();
        assert!(err.contains("b is missing y"), "{err}");
    }

    #[test]
    fn noisy_or_on_raw_scores_names_example() {
        let runs = vec![run("a", &[("x", 3.5)])];
        let cfg = CombineConfig::uniform(AggregationStrategy::NoisyOr, CalibrationMode::Identity);
        let spec = EnsembleSpec::new(vec!["a".into()], cfg).unwrap();
        let err = combine_runs(&runs, &spec, None).unwrap_err();
        assert!(matches!(err, Error::Aggregate { ref example_id, .. } if example_id == "x"));
    }

    #[test]
    fn logistic_without_calibrators_is_config_error() {
        let runs = vec![run("a", &[("x", 0.5)])];
        let spec = EnsembleSpec::new(vec!["a".into()], CombineConfig::headline()).unwrap();
        assert!(matches!(combine_runs(&runs, &spec, None), Err(Error::Config(_))));
    }

    #[test]
    fn spec_validation() {
        assert!(EnsembleSpec::new(vec![], CombineConfig::default()).is_err());
        assert!(EnsembleSpec::new(vec!["a".into(), "a".into()], CombineConfig::default()).is_err());
    }
}
