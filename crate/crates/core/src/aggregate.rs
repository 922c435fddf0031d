//! Collapsing repeated predictions of the same span within one system's list.
//!
//! Overlapping document windows make a system emit the same span several
//! times. Every strategy here reduces the descending vector of that span's
//! scores to a single number.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{rank_candidates, Candidate, Span};

/// Decay used by [`AggregationStrategy::ExponentialSum`] unless overridden.
pub const DEFAULT_BETA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggregateError {
    #[error("score vector is empty")]
    Empty,
    #[error("score vector is not sorted in descending order")]
    Unsorted,
    #[error("noisy-or needs probabilities in [0, 1], got {0} (calibrate scores first)")]
    OutOfRange(f64),
    #[error("beta must lie in (0, 1), got {0}")]
    InvalidBeta(f64),
    #[error("unknown aggregation strategy {0:?} (expected max, rrs, expsum or noisyor)")]
    Unknown(String),
}

/// Non-empty, descending vector of one span's scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(values: Vec<f64>) -> Result<Self, AggregateError> {
        if values.is_empty() {
            return Err(AggregateError::Empty);
        }
        if values.windows(2).any(|w| w[0] < w[1]) {
            return Err(AggregateError::Unsorted);
        }
        Ok(ScoreVector(values))
    }

    /// Sorts descending before wrapping.
    pub fn from_unsorted(mut values: Vec<f64>) -> Result<Self, AggregateError> {
        values.sort_by(|a, b| b.total_cmp(a));
        ScoreVector::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregationStrategy {
    Max,
    ReciprocalRankSum,
    ExponentialSum { beta: f64 },
    NoisyOr,
}

impl AggregationStrategy {
    pub fn exponential(beta: f64) -> Result<Self, AggregateError> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(AggregateError::InvalidBeta(beta));
        }
        Ok(AggregationStrategy::ExponentialSum { beta })
    }

    /// Parses a CLI name (`max`, `rrs`, `expsum`, `noisyor`).
    pub fn parse_with_beta(name: &str, beta: f64) -> Result<Self, AggregateError> {
        match name.to_ascii_lowercase().as_str() {
            "max" => Ok(AggregationStrategy::Max),
            "rrs" => Ok(AggregationStrategy::ReciprocalRankSum),
            "expsum" => AggregationStrategy::exponential(beta),
            "noisyor" => Ok(AggregationStrategy::NoisyOr),
            other => Err(AggregateError::Unknown(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggregationStrategy::Max => "max",
            AggregationStrategy::ReciprocalRankSum => "rrs",
            AggregationStrategy::ExponentialSum { .. } => "expsum",
            AggregationStrategy::NoisyOr => "noisyor",
        }
    }

    /// Whether the strategy only makes sense on probabilities.
    pub fn requires_probabilities(&self) -> bool {
        matches!(self, AggregationStrategy::NoisyOr)
    }
}

impl FromStr for AggregationStrategy {
    type Err = AggregateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AggregationStrategy::parse_with_beta(s, DEFAULT_BETA)
    }
}

impl fmt::Display for AggregationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregationStrategy::ExponentialSum { beta } => write!(f, "expsum(beta={beta})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Reduces a span's score vector to one score.
///
/// Positions `i` in the weighted sums are 1-based indices into the span's
/// own sorted vector, not ranks in the system's full list.
pub fn aggregate_score(
    scores: &ScoreVector,
    strategy: AggregationStrategy,
) -> Result<f64, AggregateError> {
    let p = scores.values();
    match strategy {
        AggregationStrategy::Max => Ok(p[0]),
        AggregationStrategy::ReciprocalRankSum => Ok(p
            .iter()
            .enumerate()
            .map(|(i, &x)| x / (i + 1) as f64)
            .sum()),
        AggregationStrategy::ExponentialSum { beta } => {
            if !(beta > 0.0 && beta < 1.0) {
                return Err(AggregateError::InvalidBeta(beta));
            }
            let mut weight = 1.0;
            let mut total = 0.0;
            for &x in p {
                total += x * weight;
                weight *= beta;
            }
            Ok(total)
        }
        AggregationStrategy::NoisyOr => {
            if let Some(&bad) = p.iter().find(|&&x| !(0.0..=1.0).contains(&x)) {
                return Err(AggregateError::OutOfRange(bad));
            }
            Ok(p.iter().fold(0.0, |acc, &x| acc + (1.0 - acc) * x))
        }
    }
}

/// One candidate per distinct span, scored by `strategy`, in canonical order.
pub fn dedupe(
    candidates: &[Candidate],
    strategy: AggregationStrategy,
) -> Result<Vec<Candidate>, AggregateError> {
    let mut by_span: BTreeMap<Span, Vec<f64>> = BTreeMap::new();
    for c in candidates {
        by_span.entry(c.span).or_default().push(c.score);
    }
    let mut out = Vec::with_capacity(by_span.len());
    for (span, scores) in by_span {
        let vector = ScoreVector::from_unsorted(scores)?;
        out.push(Candidate::new(span, aggregate_score(&vector, strategy)?));
    }
    rank_candidates(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EXP: AggregationStrategy = AggregationStrategy::ExponentialSum { beta: 0.5 };
    const ALL: [AggregationStrategy; 4] = [
        AggregationStrategy::Max,
        AggregationStrategy::ReciprocalRankSum,
        EXP,
        AggregationStrategy::NoisyOr,
    ];

    fn agg(values: &[f64], s: AggregationStrategy) -> f64 {
        aggregate_score(&ScoreVector::new(values.to_vec()).unwrap(), s).unwrap()
    }

    #[test]
    fn worked_examples() {
        assert_eq!(agg(&[0.9, 0.5, 0.2], AggregationStrategy::Max), 0.9);
        assert!((agg(&[0.8, 0.4, 0.2], EXP) - 1.05).abs() < 1e-12);
        assert!((agg(&[0.9, 0.3], AggregationStrategy::ReciprocalRankSum) - 1.05).abs() < 1e-12);
        assert!((agg(&[0.5, 0.5], AggregationStrategy::NoisyOr) - 0.75).abs() < 1e-12);
        assert_eq!(agg(&[0.0, 0.0], AggregationStrategy::NoisyOr), 0.0);
    }

    #[test]
    fn noisy_or_rejects_unnormalized() {
        let v = ScoreVector::new(vec![3.5, 0.2]).unwrap();
        assert_eq!(
            aggregate_score(&v, AggregationStrategy::NoisyOr),
            Err(AggregateError::OutOfRange(3.5))
        );
        let v = ScoreVector::new(vec![0.2, -0.1]).unwrap();
        assert!(aggregate_score(&v, AggregationStrategy::NoisyOr).is_err());
    }

    #[test]
    fn vector_validation_and_parsing() {
        assert_eq!(ScoreVector::new(vec![]), Err(AggregateError::Empty));
        assert_eq!(ScoreVector::new(vec![0.1, 0.2]), Err(AggregateError::Unsorted));
        assert_eq!("rrs".parse(), Ok(AggregationStrategy::ReciprocalRankSum));
        assert_eq!("expsum".parse(), Ok(EXP));
        assert!(AggregationStrategy::parse_with_beta("expsum", 1.0).is_err());
        assert!("mean".parse::<AggregationStrategy>().is_err());
    }

    fn cand(start: i64, score: f64) -> Candidate {
        Candidate::new(Span::new(start, start + 1).unwrap(), score)
    }

    #[test]
    fn dedupe_examples() {
        let a = Span::new(0, 1).unwrap();
        let b = Span::new(5, 6).unwrap();
        let input = [cand(0, 0.8), cand(5, 0.6), cand(0, 0.4)];

        let out = dedupe(&input, AggregationStrategy::Max).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].span, out[0].score, out[0].rank), (a, 0.8, 1));
        assert_eq!((out[1].span, out[1].score, out[1].rank), (b, 0.6, 2));

        // A = 0.8 + 0.4/2, B = 0.6
        let out = dedupe(&input, AggregationStrategy::ReciprocalRankSum).unwrap();
        assert_eq!(out[0].span, a);
        assert!((out[0].score - 1.0).abs() < 1e-12);
        assert_eq!(out[1].score, 0.6);

        let distinct = [cand(0, 0.9), cand(3, 0.5), cand(7, 0.1)];
        let mut expected = distinct.to_vec();
        rank_candidates(&mut expected);
        assert_eq!(dedupe(&distinct, AggregationStrategy::Max).unwrap(), expected);
    }

    fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }

    proptest! {
        #[test]
        fn singleton_is_identity(x in 0.0f64..=1.0) {
            for s in ALL {
                prop_assert_eq!(agg(&[x], s), x);
            }
        }

        #[test]
        fn monotone_in_each_element(
            v in prop::collection::vec(0.0f64..=1.0, 1..8),
            idx in any::<prop::sample::Index>(),
            bump in 0.0f64..=1.0,
        ) {
            let base = sorted_desc(v.clone());
            let i = idx.index(v.len());
            let mut raised = v.clone();
            raised[i] = (raised[i] + bump).min(1.0);
            let raised = sorted_desc(raised);
            for s in ALL {
                prop_assert!(agg(&raised, s) >= agg(&base, s) - 1e-12, "{s}");
            }
        }

        #[test]
        fn canonical_sort_makes_order_irrelevant(v in prop::collection::vec(0.0f64..=1.0, 1..8)) {
            let mut rev = v.clone();
            rev.reverse();
            for s in ALL {
                let a = aggregate_score(&ScoreVector::from_unsorted(v.clone()).unwrap(), s).unwrap();
                let b = aggregate_score(&ScoreVector::from_unsorted(rev.clone()).unwrap(), s).unwrap();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn noisy_or_bounds(v in prop::collection::vec(0.0f64..=0.9, 1..6), one in any::<bool>()) {
            let mut v = v;
            if one {
                v.push(1.0);
            }
            let r = agg(&sorted_desc(v), AggregationStrategy::NoisyOr);
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert_eq!(r == 1.0, one);
        }

        #[test]
        fn exponential_sum_bounded_by_geometric_series(
            v in prop::collection::vec(0.0f64..=10.0, 1..20),
            beta in 0.01f64..0.99,
        ) {
            let v = sorted_desc(v);
            let r = agg(&v, AggregationStrategy::ExponentialSum { beta });
            prop_assert!(r <= v[0] / (1.0 - beta) + 1e-9);
        }

        #[test]
        fn dedupe_is_idempotent(
            items in prop::collection::vec((0i64..6, 0.0f64..=1.0), 0..20),
            which in 0usize..4,
        ) {
            let cands: Vec<Candidate> = items.iter().map(|&(s, x)| cand(s, x)).collect();
            let once = dedupe(&cands, ALL[which]).unwrap();
            let twice = dedupe(&once, ALL[which]).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
