//! Exact-match F1 at the optimal confidence threshold, computed separately
//! for long and short answers.
//!
//! A prediction "attempts" an answer when its span is non-null and its score
//! is strictly greater than the threshold. Precision is over attempts, recall
//! over gold-answerable examples. F1 is a step function of the threshold that
//! only changes at observed scores, so sweeping those (plus -inf) is exact.

use std::cmp::Ordering;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{AnswerType, GoldAnnotation, GoldSet, Predictions, Span};

/// True iff `pred` is non-null and equals some annotator's long answer.
pub fn is_correct_long(pred: Span, gold: &[GoldAnnotation]) -> bool {
    !pred.is_null() && gold.iter().any(|a| a.long == Some(pred))
}

/// True iff `pred` is non-null and some annotator's short-answer set is
/// exactly `{pred}`.
pub fn is_correct_short(pred: Span, gold: &[GoldAnnotation]) -> bool {
    !pred.is_null()
        && gold
            .iter()
            .any(|a| !a.short_sets.is_empty() && a.short_sets.iter().all(|s| *s == pred))
}

/// Correctness as counted by the evaluator: the example must be
/// gold-answerable for this answer type and the span must match.
pub fn is_correct(gold: &GoldSet, example_id: &str, pred: Span, answer_type: AnswerType) -> bool {
    let Some(anns) = gold.get(example_id) else {
        return false;
    };
    if !gold.is_answerable(example_id, answer_type) {
        return false;
    }
    match answer_type {
        AnswerType::Long => is_correct_long(pred, anns),
        AnswerType::Short => is_correct_short(pred, anns),
    }
}

/// Precision, recall and F1 at one operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TypeMetrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
    pub attempts: usize,
    pub correct: usize,
    pub answerable: usize,
}

impl TypeMetrics {
    fn at(threshold: f64, attempts: usize, correct: usize, answerable: usize) -> Self {
        let precision = if attempts == 0 {
            0.0
        } else {
            correct as f64 / attempts as f64
        };
        let recall = if answerable == 0 {
            0.0
        } else {
            correct as f64 / answerable as f64
        };
        // 2PR/(P+R) == 2c/(a+g)
        let f1 = if correct == 0 {
            0.0
        } else {
            2.0 * correct as f64 / (attempts + answerable) as f64
        };
        TypeMetrics {
            f1,
            precision,
            recall,
            threshold,
            attempts,
            correct,
            answerable,
        }
    }

    /// Exact comparison of F1 values as rationals.
    fn cmp_f1(&self, other: &TypeMetrics) -> Ordering {
        let lhs = self.correct as u128 * (other.attempts + other.answerable) as u128;
        let rhs = other.correct as u128 * (self.attempts + self.answerable) as u128;
        match (self.correct, other.correct) {
            (0, 0) => Ordering::Equal,
            _ => lhs.cmp(&rhs),
        }
    }
}

/// Headline evaluation for both answer types.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(serialize_with = "ser_metric")]
    pub long_f1: f64,
    #[serde(serialize_with = "ser_metric")]
    pub long_precision: f64,
    #[serde(serialize_with = "ser_metric")]
    pub long_recall: f64,
    #[serde(serialize_with = "ser_threshold", deserialize_with = "de_threshold")]
    pub long_threshold: f64,
    #[serde(serialize_with = "ser_metric")]
    pub short_f1: f64,
    #[serde(serialize_with = "ser_metric")]
    pub short_precision: f64,
    #[serde(serialize_with = "ser_metric")]
    pub short_recall: f64,
    #[serde(serialize_with = "ser_threshold", deserialize_with = "de_threshold")]
    pub short_threshold: f64,
    pub n_examples: usize,
}

impl EvalReport {
    pub fn from_metrics(long: &TypeMetrics, short: &TypeMetrics, n_examples: usize) -> Self {
        EvalReport {
            long_f1: long.f1,
            long_precision: long.precision,
            long_recall: long.recall,
            long_threshold: long.threshold,
            short_f1: short.f1,
            short_precision: short.precision,
            short_recall: short.recall,
            short_threshold: short.threshold,
            n_examples,
        }
    }

    pub fn f1(&self, answer_type: AnswerType) -> f64 {
        match answer_type {
            AnswerType::Long => self.long_f1,
            AnswerType::Short => self.short_f1,
        }
    }
}

/// Round half to even at four decimals.
pub fn round4(x: f64) -> f64 {
    (x * 1e4).round_ties_even() / 1e4
}

fn ser_metric<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round4(*x))
}

// -inf has no JSON encoding; it is written as null
fn ser_threshold<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else {
        s.serialize_none()
    }
}

fn de_threshold<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
}

/// `(score, correct)` for every non-null prediction on a gold example, plus
/// the number of gold-answerable examples.
fn attempts_for(preds: &Predictions, gold: &GoldSet, answer_type: AnswerType) -> (Vec<(f64, bool)>, usize) {
    let mut items = Vec::new();
    for id in gold.example_ids() {
        let Some(p) = preds.get(id) else { continue };
        let span = p.span(answer_type);
        if span.is_null() {
            continue;
        }
        items.push((p.score(answer_type), is_correct(gold, id, span, answer_type)));
    }
    (items, gold.answerable_count(answer_type))
}

/// Metrics for one answer type at a fixed threshold.
pub fn evaluate_at(
    preds: &Predictions,
    gold: &GoldSet,
    answer_type: AnswerType,
    threshold: f64,
) -> TypeMetrics {
    let (items, answerable) = attempts_for(preds, gold, answer_type);
    let attempted = items.iter().filter(|(s, _)| *s > threshold);
    let (attempts, correct) = attempted.fold((0, 0), |(a, c), (_, ok)| (a + 1, c + *ok as usize));
    TypeMetrics::at(threshold, attempts, correct, answerable)
}

/// Best operating point for one answer type. Ties go to the higher threshold.
pub fn optimal_threshold(preds: &Predictions, gold: &GoldSet, answer_type: AnswerType) -> TypeMetrics {
    let (mut items, answerable) = attempts_for(preds, gold, answer_type);
    items.sort_by(|a, b| b.0.total_cmp(&a.0));

    // highest threshold first: nothing attempted at t = max score
    let first = items.first().map_or(f64::NEG_INFINITY, |x| x.0);
    let mut best = TypeMetrics::at(first, 0, 0, answerable);
    let (mut attempts, mut correct) = (0usize, 0usize);
    let mut i = 0;
    while i < items.len() {
        let score = items[i].0;
        while i < items.len() && items[i].0 == score {
            attempts += 1;
            correct += items[i].1 as usize;
            i += 1;
        }
        let threshold = items.get(i).map_or(f64::NEG_INFINITY, |x| x.0);
        let point = TypeMetrics::at(threshold, attempts, correct, answerable);
        if point.cmp_f1(&best) == Ordering::Greater {
            best = point;
        }
    }
    best
}

/// Evaluates `preds` against every example of `gold`. Gold examples with no
/// prediction count as null answers.
pub fn evaluate(preds: &Predictions, gold: &GoldSet) -> Result<EvalReport> {
    if gold.is_empty() {
        return Err(Error::Validation("gold set is empty".into()));
    }
    let missing = gold.example_ids().filter(|id| !preds.contains_key(*id)).count();
    if missing > 0 {
        log::warn!(
            "{missing} of {} gold examples have no prediction; treating them as null",
            gold.len()
        );
    }
    let long = optimal_threshold(preds, gold, AnswerType::Long);
    let short = optimal_threshold(preds, gold, AnswerType::Short);
    Ok(EvalReport::from_metrics(&long, &short, gold.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FinalPrediction;
    use proptest::prelude::*;

    fn sp(a: i64, b: i64) -> Span {
        Span::new(a, b).unwrap()
    }

    fn ann(long: Option<Span>, shorts: Vec<Span>) -> GoldAnnotation {
        GoldAnnotation::new(long, shorts).unwrap()
    }

    #[test]
    fn long_correctness() {
        let gold = [ann(Some(sp(10, 20)), vec![]), GoldAnnotation::null()];
        assert!(is_correct_long(sp(10, 20), &gold));
        assert!(!is_correct_long(sp(10, 21), &gold));
        assert!(!is_correct_long(Span::NULL, &gold));
    }

    #[test]
    fn short_correctness() {
        let long = Some(sp(0, 50));
        assert!(is_correct_short(sp(5, 7), &[ann(long, vec![sp(5, 7)])]));
        assert!(!is_correct_short(sp(5, 7), &[ann(long, vec![sp(5, 7), sp(9, 11)])]));
        assert!(!is_correct_short(sp(5, 7), &[ann(long, vec![]), GoldAnnotation::null()]));
        assert!(!is_correct_short(Span::NULL, &[ann(long, vec![sp(5, 7)])]));
    }

    /// One long answer per example, correct or not, one annotator.
    fn instance(rows: &[(f64, bool)], answerable: usize) -> (Predictions, GoldSet) {
        let mut gold = GoldSet::new(1);
        let mut preds = Predictions::new();
        for i in 0..rows.len().max(answerable) {
            let id = format!("q{i:03}");
            let gold_span = sp(0, 10);
            let anns = if i < answerable {
                vec![ann(Some(gold_span), vec![])]
            } else {
                vec![GoldAnnotation::null()]
            };
            gold.insert(id.clone(), anns).unwrap();
            if let Some(&(score, ok)) = rows.get(i) {
                let span = if ok { gold_span } else { sp(20, 30) };
                preds.insert(
                    id,
                    FinalPrediction::joined((span, score), (Span::NULL, 0.0), 0.0),
                );
            }
        }
        (preds, gold)
    }

    #[test]
    fn worked_sweep_example() {
        // (0.9 ok), (0.8 wrong), (0.7 ok), (0.6 wrong); 3 answerable
        let (preds, mut gold) = instance(&[(0.9, true), (0.8, false), (0.7, true), (0.6, false)], 0);
        let mk = |s| vec![ann(Some(s), vec![])];
        gold.annotations.insert("q000".into(), mk(sp(0, 10)));
        gold.annotations.insert("q002".into(), mk(sp(0, 10)));
        gold.annotations.insert("q003".into(), mk(sp(50, 60)));
        let m = optimal_threshold(&preds, &gold, AnswerType::Long);
        // best: attempt the top three, P = 2/3, R = 2/3
        assert_eq!((m.attempts, m.correct, m.answerable), (3, 2, 3));
        assert_eq!(m.threshold, 0.6);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn worked_sweep_example_four_attempts() {
        // same scores with 3 answerable examples where the best cut keeps all
        // four attempts: P = 2/4, R = 2/3 -> F1 = 4/7
        let (preds, gold) = instance(&[(0.9, true), (0.8, false), (0.7, true), (0.6, false)], 3);
        let at = |t| evaluate_at(&preds, &gold, AnswerType::Long, t).f1;
        assert!((at(f64::NEG_INFINITY) - 4.0 / 7.0).abs() < 1e-15);
        assert!((at(0.8) - 0.5).abs() < 1e-15);
        let best = optimal_threshold(&preds, &gold, AnswerType::Long);
        assert!(best.f1 >= at(0.8) && best.f1 >= at(f64::NEG_INFINITY));
    }

    #[test]
    fn perfect_and_null_extremes() {
        let (preds, gold) = instance(&[(0.3, true), (0.2, true), (0.9, true)], 3);
        let m = optimal_threshold(&preds, &gold, AnswerType::Long);
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.threshold, f64::NEG_INFINITY);

        let mut nulls = Predictions::new();
        for id in gold.example_ids() {
            nulls.insert(id.clone(), FinalPrediction::null());
        }
        let r = evaluate(&nulls, &gold).unwrap();
        assert_eq!(r.long_f1, 0.0);
        assert_eq!(r.short_f1, 0.0);
        assert!(evaluate(&Predictions::new(), &gold).is_ok());
        assert!(evaluate(&nulls, &GoldSet::new(2)).is_err());
    }

    #[test]
    fn report_json_rounds_and_encodes_neg_inf() {
        let r = EvalReport {
            long_f1: 0.123_45,
            long_precision: 0.5,
            long_recall: 2.0 / 3.0,
            long_threshold: f64::NEG_INFINITY,
            short_f1: 0.0,
            short_precision: 0.0,
            short_recall: 0.0,
            short_threshold: 1.25,
            n_examples: 4,
        };
        let v = serde_json::to_value(r).unwrap();
        assert_eq!(v["long_f1"], 0.1234);
        assert_eq!(v["long_recall"], 0.6667);
        assert!(v["long_threshold"].is_null());
        assert_eq!(v["short_threshold"], 1.25);
        let back: EvalReport = serde_json::from_value(v).unwrap();
        assert_eq!(back.long_threshold, f64::NEG_INFINITY);
    }

    fn arb_rows() -> impl Strategy<Value = (Vec<(f64, bool)>, usize)> {
        prop::collection::vec(((0u32..=50).prop_map(|x| x as f64 / 50.0), any::<bool>()), 0..40)
            .prop_flat_map(|rows| {
                let n = rows.len();
                (Just(rows), 0..=n + 5)
            })
    }

    proptest! {
        #[test]
        fn optimum_dominates_fixed_thresholds((rows, extra) in arb_rows(), t in -0.1f64..1.1) {
            let answerable = rows.iter().filter(|r| r.1).count() + extra;
            let (preds, gold) = instance(&rows, answerable);
            let best = optimal_threshold(&preds, &gold, AnswerType::Long);
            let fixed = evaluate_at(&preds, &gold, AnswerType::Long, t);
            prop_assert!(best.f1 >= fixed.f1);
        }

        #[test]
        fn fixing_an_error_never_hurts((rows, extra) in arb_rows(), pick in any::<prop::sample::Index>()) {
            prop_assume!(!rows.is_empty());
            let answerable = rows.iter().filter(|r| r.1).count() + extra + 1;
            let (preds, gold) = instance(&rows, answerable);
            let before = optimal_threshold(&preds, &gold, AnswerType::Long).f1;
            let mut fixed = rows.clone();
            let i = pick.index(rows.len());
            fixed[i].1 = true;
            let (preds2, gold2) = instance(&fixed, answerable);
            let after = optimal_threshold(&preds2, &gold2, AnswerType::Long).f1;
            prop_assert!(after >= before);
        }

        #[test]
        fn monotone_rescaling_keeps_optimum((rows, extra) in arb_rows(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let answerable = rows.iter().filter(|r| r.1).count() + extra;
            let (preds, gold) = instance(&rows, answerable);
            let rescaled: Vec<(f64, bool)> = rows.iter().map(|&(s, ok)| ((a * s + b).exp(), ok)).collect();
            let (preds2, gold2) = instance(&rescaled, answerable);
            let f = optimal_threshold(&preds, &gold, AnswerType::Long).f1;
            let g = optimal_threshold(&preds2, &gold2, AnswerType::Long).f1;
            prop_assert_eq!(f, g);
        }
    }
}
