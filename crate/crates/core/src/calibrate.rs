//! Score normalization applied per (model, answer type) before aggregation.
//!
//! The logistic calibrator is a single-feature logistic regression fitted on
//! each example's top-1 score against whether that top-1 answer is correct.
//! The L2 strength is chosen by stratified k-fold cross-validation on
//! validation log-loss; the final weights are refit on all data by Newton's
//! method.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::evaluate::is_correct;
use crate::model::{rank_candidates, AnswerType, Candidate, GoldSet, ModelRun};

pub const DEFAULT_FOLDS: usize = 5;
pub const MAX_ITERATIONS: usize = 500;
pub const GRADIENT_TOLERANCE: f64 = 1e-8;

/// `1e-3, 1e-2, ..., 1e3`.
pub fn default_l2_grid() -> Vec<f64> {
    (-3..=3).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrateError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("need at least {needed} samples for {folds}-fold cross-validation, got {got}")]
    TooFewSamples {
        got: usize,
        needed: usize,
        folds: usize,
    },
    #[error("labels contain a single class; logistic calibration needs both")]
    SingleClass,
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("regularization grid must be non-empty and strictly positive")]
    InvalidGrid,
    #[error("fold count must be at least 2")]
    InvalidFolds,
    #[error("logistic fit diverged (non-finite parameters)")]
    Diverged,
    #[error("no calibrator for model {model_id} ({answer_type})")]
    Missing {
        model_id: String,
        answer_type: AnswerType,
    },
}

impl CalibrateError {
    /// Numeric failures as opposed to bad input data.
    pub fn is_numeric(&self) -> bool {
        matches!(self, CalibrateError::Diverged)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibratorKind {
    Identity,
    Logistic,
}

/// Persisted as `{"kind": "identity"|"logistic", "weight", "bias", "l2"}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibrator {
    pub kind: CalibratorKind,
    pub weight: f64,
    pub bias: f64,
    pub l2: f64,
}

impl Calibrator {
    pub const IDENTITY: Calibrator = Calibrator {
        kind: CalibratorKind::Identity,
        weight: 1.0,
        bias: 0.0,
        l2: 0.0,
    };

    pub fn logistic(weight: f64, bias: f64, l2: f64) -> Self {
        Calibrator {
            kind: CalibratorKind::Logistic,
            weight,
            bias,
            l2,
        }
    }

    pub fn transform(&self, score: f64) -> f64 {
        match self.kind {
            CalibratorKind::Identity => score,
            CalibratorKind::Logistic => sigmoid(self.weight * score + self.bias),
        }
    }
}

/// Maps scores through the calibrator and restores canonical order.
pub fn apply(calibrator: &Calibrator, candidates: &[Candidate]) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = candidates
        .iter()
        .map(|c| Candidate::new(c.span, calibrator.transform(c.score)))
        .collect();
    rank_candidates(&mut out);
    out
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn log_loss(z: f64, label: bool) -> f64 {
    if label {
        softplus(-z)
    } else {
        softplus(z)
    }
}

/// Outcome of [`fit_logistic`].
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub calibrator: Calibrator,
    /// False when the final refit hit the iteration cap; the best iterate is
    /// still returned.
    pub converged: bool,
    pub iterations: usize,
    /// Mean validation log-loss per grid value, in grid order.
    pub cv_loss: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy)]
struct Solution {
    weight: f64,
    bias: f64,
    converged: bool,
    iterations: usize,
}

fn objective(x: &[f64], y: &[bool], w: f64, b: f64, l2: f64) -> f64 {
    let data: f64 = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| log_loss(w * xi + b, yi))
        .sum();
    data + 0.5 * l2 * w * w
}

/// Minimizes `sum log-loss + l2/2 * weight^2` (bias unpenalized) by damped
/// Newton steps with backtracking.
fn newton_fit(x: &[f64], y: &[bool], l2: f64) -> Result<Solution, CalibrateError> {
    let positives = y.iter().filter(|&&v| v).count() as f64;
    let n = y.len() as f64;
    let prior = ((positives + 0.5) / (n - positives + 0.5)).ln();
    let (mut w, mut b) = (0.0f64, prior);
    let mut value = objective(x, y, w, b, l2);

    for iteration in 0..MAX_ITERATIONS {
        let (mut gw, mut gb) = (l2 * w, 0.0);
        let (mut hww, mut hwb, mut hbb) = (l2, 0.0, 0.0);
        for (&xi, &yi) in x.iter().zip(y) {
            let p = sigmoid(w * xi + b);
            let r = p - if yi { 1.0 } else { 0.0 };
            let s = p * (1.0 - p);
            gw += r * xi;
            gb += r;
            hww += s * xi * xi;
            hwb += s * xi;
            hbb += s;
        }
        let grad_norm = gw.hypot(gb);
        if !grad_norm.is_finite() {
            return Err(CalibrateError::Diverged);
        }
        if grad_norm <= GRADIENT_TOLERANCE {
            return Ok(Solution {
                weight: w,
                bias: b,
                converged: true,
                iterations: iteration,
            });
        }

        // Levenberg-style damping keeps the system solvable when the
        // curvature collapses (saturated probabilities).
        let mut damping = 0.0;
        let (dw, db) = loop {
            let a = hww + damping;
            let d = hbb + damping;
            let det = a * d - hwb * hwb;
            if det > 1e-300 && det.is_finite() {
                break ((d * gw - hwb * gb) / det, (a * gb - hwb * gw) / det);
            }
            damping = if damping == 0.0 { 1e-10 } else { damping * 10.0 };
            if damping > 1e10 {
                break (gw * 1e-3, gb * 1e-3);
            }
        };

        let slope = gw * dw + gb * db;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let (nw, nb) = (w - step * dw, b - step * db);
            let candidate = objective(x, y, nw, nb, l2);
            // near the optimum the objective change drops below f64
            // resolution, so full Newton steps are taken without the
            // sufficient-decrease test
            let local = step == 1.0 && grad_norm < 1e-3;
            if candidate.is_finite() && (local || candidate <= value - 1e-4 * step * slope) {
                w = nw;
                b = nb;
                value = candidate;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Ok(Solution {
                weight: w,
                bias: b,
                converged: false,
                iterations: iteration + 1,
            });
        }
    }
    if !(w.is_finite() && b.is_finite()) {
        return Err(CalibrateError::Diverged);
    }
    Ok(Solution {
        weight: w,
        bias: b,
        converged: false,
        iterations: MAX_ITERATIONS,
    })
}

/// Stratified fold index per sample: each class is shuffled with the seeded
/// generator and dealt round-robin across folds.
pub fn stratified_folds(labels: &[bool], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; labels.len()];
    let mut offset = 0;
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for (j, &i) in idx.iter().enumerate() {
            assignment[i] = (offset + j) % folds;
        }
        // continue dealing where the previous class stopped so fold sizes stay balanced
        offset = (offset + idx.len()) % folds;
    }
    assignment
}

fn validate(scores: &[f64], labels: &[bool], folds: usize) -> Result<(), CalibrateError> {
    if scores.len() != labels.len() {
        return Err(CalibrateError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if folds < 2 {
        return Err(CalibrateError::InvalidFolds);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(CalibrateError::NonFinite(i));
    }
    if scores.len() < 2 * folds {
        return Err(CalibrateError::TooFewSamples {
            got: scores.len(),
            needed: 2 * folds,
            folds,
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(CalibrateError::SingleClass);
    }
    Ok(())
}

/// Fits a logistic calibrator, selecting the L2 strength by stratified
/// cross-validation (lowest mean validation log-loss, ties to the smaller
/// strength).
pub fn fit_logistic(
    scores: &[f64],
    labels: &[bool],
    l2_grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<LogisticFit, CalibrateError> {
    validate(scores, labels, folds)?;
    if l2_grid.is_empty() || l2_grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(CalibrateError::InvalidGrid);
    }
    let assignment = stratified_folds(labels, folds, seed);

    let mut cv_loss = Vec::with_capacity(l2_grid.len());
    for &l2 in l2_grid {
        let mut fold_losses = Vec::with_capacity(folds);
        for fold in 0..folds {
            let (mut tx, mut ty, mut vx, mut vy) = (vec![], vec![], vec![], vec![]);
            for i in 0..scores.len() {
                if assignment[i] == fold {
                    vx.push(scores[i]);
                    vy.push(labels[i]);
                } else {
                    tx.push(scores[i]);
                    ty.push(labels[i]);
                }
            }
            if vx.is_empty() {
                continue;
            }
            let sol = newton_fit(&tx, &ty, l2)?;
            let loss: f64 = vx
                .iter()
                .zip(&vy)
                .map(|(&xi, &yi)| log_loss(sol.weight * xi + sol.bias, yi))
                .sum::<f64>()
                / vx.len() as f64;
            fold_losses.push(loss);
        }
        let mean = fold_losses.iter().sum::<f64>() / fold_losses.len() as f64;
        cv_loss.push((l2, mean));
    }

    let mut best = cv_loss[0];
    for &(l2, loss) in &cv_loss[1..] {
        if loss < best.1 || (loss == best.1 && l2 < best.0) {
            best = (l2, loss);
        }
    }

    let sol = newton_fit(scores, labels, best.0)?;
    if !sol.converged {
        log::warn!(
            "logistic refit did not reach gradient norm {GRADIENT_TOLERANCE:e} in {MAX_ITERATIONS} iterations"
        );
    }
    if sol.weight <= 0.0 {
        log::warn!(
            "fitted calibration weight {} is not positive; calibrated ranking will be inverted",
            sol.weight
        );
    }
    Ok(LogisticFit {
        calibrator: Calibrator::logistic(sol.weight, sol.bias, best.0),
        converged: sol.converged,
        iterations: sol.iterations,
        cv_loss,
    })
}

/// One `(top-1 score, top-1 correct)` pair per example of `run` that has at
/// least one candidate of the given type.
pub fn build_training_pairs(
    run: &ModelRun,
    gold: &GoldSet,
    answer_type: AnswerType,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut scores = Vec::with_capacity(run.len());
    let mut labels = Vec::with_capacity(run.len());
    for (id, preds) in &run.predictions {
        if gold.get(id).is_none() {
            return Err(Error::Validation(format!(
                "model {}: example {id:?} is not in the gold set",
                run.model_id
            )));
        }
        let Some(top) = preds.top(answer_type) else {
            continue;
        };
        scores.push(top.score);
        labels.push(is_correct(gold, id, top.span, answer_type));
    }
    Ok((scores, labels))
}

/// Calibrators for one model, one per answer type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelCalibrators {
    pub long: Calibrator,
    pub short: Calibrator,
}

impl ModelCalibrators {
    pub fn get(&self, answer_type: AnswerType) -> &Calibrator {
        match answer_type {
            AnswerType::Long => &self.long,
            AnswerType::Short => &self.short,
        }
    }
}

/// `model_id -> {long, short}` calibrators.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CalibratorTable(pub BTreeMap<String, ModelCalibrators>);

impl CalibratorTable {
    pub fn get(&self, model_id: &str, answer_type: AnswerType) -> Option<&Calibrator> {
        self.0.get(model_id).map(|m| m.get(answer_type))
    }

    pub fn require(
        &self,
        model_id: &str,
        answer_type: AnswerType,
    ) -> Result<&Calibrator, CalibrateError> {
        self.get(model_id, answer_type)
            .ok_or_else(|| CalibrateError::Missing {
                model_id: model_id.to_string(),
                answer_type,
            })
    }
}

/// Settings for [`fit_table`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub l2_grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            l2_grid: default_l2_grid(),
            folds: DEFAULT_FOLDS,
            seed: 0,
        }
    }
}

/// Fits long and short logistic calibrators for every run against `gold`.
/// Only examples present in `gold` are used.
pub fn fit_table(runs: &[&ModelRun], gold: &GoldSet, settings: &FitSettings) -> Result<CalibratorTable> {
    let fitted: Vec<Result<(String, ModelCalibrators)>> = runs
        .par_iter()
        .map(|run| {
            let restricted = run.restrict(gold.example_ids());
            let fit = |answer_type| -> Result<Calibrator> {
                let (scores, labels) = build_training_pairs(&restricted, gold, answer_type)?;
                let result = fit_logistic(&scores, &labels, &settings.l2_grid, settings.folds, settings.seed)
                    .map_err(|e| match e {
                        CalibrateError::Diverged => Error::Calibrate(e),
                        other => Error::Validation(format!(
                            "calibrating model {} ({answer_type}): {other}",
                            run.model_id
                        )),
                    })?;
                Ok(result.calibrator)
            };
            let long = fit(AnswerType::Long)?;
            let short = fit(AnswerType::Short)?;
            Ok((run.model_id.clone(), ModelCalibrators { long, short }))
        })
        .collect();
    let mut table = CalibratorTable::default();
    for entry in fitted {
        let (id, cal) = entry?;
        table.0.insert(id, cal);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ExamplePredictions, GoldAnnotation, Span};
    use proptest::prelude::*;
    use rand::Rng;

    fn synthetic(n: usize, w: f64, b: f64, seed: u64) -> (Vec<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = rng.random_range(-1.0..2.0);
            let p = 1.0 / (1.0 + (-(w * x + b)).exp());
            xs.push(x);
            ys.push(rng.random::<f64>() < p);
        }
        (xs, ys)
    }

    #[test]
    fn recovers_known_parameters() {
        let (x, y) = synthetic(2000, 4.0, -2.0, 7);
        let fit = fit_logistic(&x, &y, &default_l2_grid(), 5, 11).unwrap();
        assert!(fit.converged);
        let c = fit.calibrator;
        assert!((c.weight - 4.0).abs() <= 0.3, "weight {}", c.weight);
        assert!((c.bias + 2.0).abs() <= 0.3, "bias {}", c.bias);
        assert_eq!(fit.cv_loss.len(), 7);
    }

    #[test]
    fn selection_is_deterministic() {
        let (x, y) = synthetic(500, 2.0, 0.5, 3);
        let a = fit_logistic(&x, &y, &default_l2_grid(), 5, 42).unwrap();
        let b = fit_logistic(&x, &y, &default_l2_grid(), 5, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn separable_data_stays_bounded() {
        let x: Vec<f64> = (0..40).map(|i| i as f64 / 10.0).collect();
        let y: Vec<bool> = x.iter().map(|&v| v >= 2.0).collect();
        let fit = fit_logistic(&x, &y, &default_l2_grid(), 5, 0).unwrap();
        let c = fit.calibrator;
        assert!(c.weight.is_finite() && c.bias.is_finite());
        assert!(c.weight > 0.0 && c.weight < 1e4, "weight {}", c.weight);
    }

    #[test]
    fn input_errors() {
        let x = vec![0.1; 20];
        assert_eq!(
            fit_logistic(&x, &[true; 20], &default_l2_grid(), 5, 0),
            Err(CalibrateError::SingleClass)
        );
        let y: Vec<bool> = (0..20).map(|i| i % 2 == 0).collect();
        assert!(matches!(
            fit_logistic(&x[..9], &y[..9], &default_l2_grid(), 5, 0),
            Err(CalibrateError::TooFewSamples { .. })
        ));
        let mut bad = x.clone();
        bad[3] = f64::NAN;
        assert_eq!(
            fit_logistic(&bad, &y, &default_l2_grid(), 5, 0),
            Err(CalibrateError::NonFinite(3))
        );
        assert_eq!(
            fit_logistic(&x, &y, &[], 5, 0),
            Err(CalibrateError::InvalidGrid)
        );
    }

    #[test]
    fn folds_are_stratified() {
        let labels: Vec<bool> = (0..103).map(|i| i % 3 == 0).collect();
        let folds = stratified_folds(&labels, 5, 9);
        for f in 0..5 {
            let pos = (0..labels.len()).filter(|&i| folds[i] == f && labels[i]).count();
            let total = folds.iter().filter(|&&g| g == f).count();
            assert!((6..=7).contains(&pos), "fold {f} has {pos} positives");
            assert!((20..=21).contains(&total));
        }
    }

    #[test]
    fn apply_examples() {
        let c = |s: i64, x: f64| Candidate::new(Span::new(s, s + 1).unwrap(), x);
        let mut list = vec![c(0, 0.9), c(1, 0.3)];
        rank_candidates(&mut list);
        assert_eq!(apply(&Calibrator::IDENTITY, &list), list);

        let logistic = Calibrator::logistic(1.0, 0.0, 1.0);
        assert_eq!(logistic.transform(0.0), 0.5);
    }

    #[test]
    fn persisted_format() {
        let json = serde_json::to_value(Calibrator::logistic(2.0, -1.0, 0.1)).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"kind": "logistic", "weight": 2.0, "bias": -1.0, "l2": 0.1})
        );
        let id: Calibrator =
            serde_json::from_str(r#"{"kind":"identity","weight":1.0,"bias":0.0,"l2":0.0}"#).unwrap();
        assert_eq!(id, Calibrator::IDENTITY);
    }

    #[test]
    fn training_pairs() {
        let long_gold = Span::new(10, 20).unwrap();
        let ann = GoldAnnotation::new(Some(long_gold), vec![]).unwrap();
        let mut gold = GoldSet::new(1);
        for id in ["a", "b", "c"] {
            gold.insert(id, vec![ann.clone()]).unwrap();
        }
        let mut run = ModelRun::new("m");
        let mk = |id: &str, span: Span, score: f64| {
            ExamplePredictions::new(id, vec![Candidate::new(span, score)], vec![], 20)
        };
        run.predictions.insert("a".into(), mk("a", long_gold, 2.0));
        run.predictions
            .insert("b".into(), mk("b", Span::new(10, 21).unwrap(), 1.0));
        run.predictions.insert("c".into(), mk("c", Span::NULL, 0.5));
        let (scores, labels) = build_training_pairs(&run, &gold, AnswerType::Long).unwrap();
        assert_eq!(scores, vec![2.0, 1.0, 0.5]);
        assert_eq!(labels, vec![true, false, false]);

        run.predictions.insert("zzz".into(), mk("zzz", long_gold, 1.0));
        assert!(build_training_pairs(&run, &gold, AnswerType::Long).is_err());
    }

    proptest! {
        #[test]
        fn logistic_preserves_ranking(
            scores in prop::collection::vec(-10.0f64..10.0, 1..20),
            w in 0.01f64..5.0,
            b in -3.0f64..3.0,
        ) {
            let mut list: Vec<Candidate> = scores
                .iter()
                .enumerate()
                .map(|(i, &x)| Candidate::new(Span::new(i as i64, i as i64 + 1).unwrap(), x))
                .collect();
            rank_candidates(&mut list);
            let cal = Calibrator::logistic(w, b, 1.0);
            let out = apply(&cal, &list);
            for (c, orig) in out.iter().map(|c| (c, list.iter().find(|o| o.span == c.span).unwrap())) {
                let z = w * orig.score + b;
                prop_assert!((0.0..=1.0).contains(&c.score));
                if z.abs() < 30.0 {
                    prop_assert!(c.score > 0.0 && c.score < 1.0);
                }
            }
            // the best raw candidate keeps the best calibrated score
            prop_assert_eq!(out[0].score, cal.transform(list[0].score));
            for pair in out.windows(2) {
                let a = list.iter().find(|c| c.span == pair[0].span).unwrap();
                let b = list.iter().find(|c| c.span == pair[1].span).unwrap();
                prop_assert!(pair[0].score == pair[1].score || a.score > b.score);
            }
        }
    }
}
