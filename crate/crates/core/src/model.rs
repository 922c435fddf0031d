//! Domain types shared by every stage of the pipeline.
//!
//! Nothing in here performs I/O. Constructors validate the invariants the
//! rest of the crate relies on (half-open spans, sorted candidate lists,
//! the null-long/null-short pairing of final predictions).

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of candidates kept per system, example and answer type.
pub const DEFAULT_TOP_M: usize = 20;

/// Default number of annotators that must agree before an example counts as
/// answerable.
pub const DEFAULT_MIN_AGREEMENT: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpanError {
    #[error("empty span ({start}, {end}): start must be < end")]
    Empty { start: i64, end: i64 },
    #[error("invalid span ({start}, {end}): only (-1, -1) may use negative offsets")]
    Negative { start: i64, end: i64 },
}

/// Half-open token interval `[start, end)`. `(-1, -1)` is the null answer.
///
/// Ordering is lexicographic on `(start, end)`, so the null span sorts first.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(try_from = "RawSpan", into = "RawSpan")]
pub struct Span {
    start: i64,
    end: i64,
}

#[derive(Serialize, Deserialize)]
struct RawSpan {
    start: i64,
    end: i64,
}

impl TryFrom<RawSpan> for Span {
    type Error = SpanError;

    fn try_from(raw: RawSpan) -> Result<Self, Self::Error> {
        Span::new(raw.start, raw.end)
    }
}

impl From<Span> for RawSpan {
    fn from(span: Span) -> Self {
        RawSpan {
            start: span.start,
            end: span.end,
        }
    }
}

impl Span {
    pub const NULL: Span = Span { start: -1, end: -1 };

    pub fn new(start: i64, end: i64) -> Result<Self, SpanError> {
        if start == -1 && end == -1 {
            return Ok(Span::NULL);
        }
        if start < 0 || end < 0 {
            return Err(SpanError::Negative { start, end });
        }
        if start >= end {
            return Err(SpanError::Empty { start, end });
        }
        Ok(Span { start, end })
    }

    pub fn start(&self) -> i64 {
        self.start
    }

    pub fn end(&self) -> i64 {
        self.end
    }

    pub fn is_null(&self) -> bool {
        *self == Span::NULL
    }

    pub fn len(&self) -> usize {
        if self.is_null() {
            0
        } else {
            (self.end - self.start) as usize
        }
    }

    pub fn is_empty(&self) -> bool {
        self.is_null()
    }

    /// True when `other` lies inside `self`. Nothing is contained in the null span.
    pub fn contains(&self, other: &Span) -> bool {
        !self.is_null() && !other.is_null() && self.start <= other.start && other.end <= self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_null() {
            write!(f, "null")
        } else {
            write!(f, "[{}, {})", self.start, self.end)
        }
    }
}

/// Which of the two answer granularities a value refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerType {
    Long,
    Short,
}

impl AnswerType {
    pub const BOTH: [AnswerType; 2] = [AnswerType::Long, AnswerType::Short];

    pub fn opposite(self) -> Self {
        match self {
            AnswerType::Long => AnswerType::Short,
            AnswerType::Short => AnswerType::Long,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerType::Long => "long",
            AnswerType::Short => "short",
        }
    }
}

impl fmt::Display for AnswerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A scored span inside one system's ranked list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub span: Span,
    pub score: f64,
    /// 1-based position within its list.
    pub rank: u32,
}

impl Candidate {
    pub fn new(span: Span, score: f64) -> Self {
        Candidate {
            span,
            score,
            rank: 0,
        }
    }
}

/// Canonical list order: score descending, then span ascending.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.span.cmp(&b.span))
}

/// Sorts into canonical order and assigns ranks `1..=len`.
pub fn rank_candidates(candidates: &mut [Candidate]) {
    candidates.sort_by(candidate_order);
    for (i, c) in candidates.iter_mut().enumerate() {
        c.rank = (i + 1) as u32;
    }
}

/// One system's candidates for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamplePredictions {
    pub example_id: String,
    pub long: Vec<Candidate>,
    pub short: Vec<Candidate>,
}

impl ExamplePredictions {
    /// Builds a canonical entry: both lists sorted, truncated to `top_m`
    /// and re-ranked.
    pub fn new(
        example_id: impl Into<String>,
        mut long: Vec<Candidate>,
        mut short: Vec<Candidate>,
        top_m: usize,
    ) -> Self {
        rank_candidates(&mut long);
        rank_candidates(&mut short);
        long.truncate(top_m);
        short.truncate(top_m);
        ExamplePredictions {
            example_id: example_id.into(),
            long,
            short,
        }
    }

    pub fn candidates(&self, answer_type: AnswerType) -> &[Candidate] {
        match answer_type {
            AnswerType::Long => &self.long,
            AnswerType::Short => &self.short,
        }
    }

    pub fn top(&self, answer_type: AnswerType) -> Option<&Candidate> {
        self.candidates(answer_type).first()
    }
}

/// All predictions of one system, keyed by example id.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRun {
    pub model_id: String,
    pub predictions: BTreeMap<String, ExamplePredictions>,
}

impl ModelRun {
    pub fn new(model_id: impl Into<String>) -> Self {
        ModelRun {
            model_id: model_id.into(),
            predictions: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    /// Keeps only the examples whose id appears in `ids`.
    pub fn restrict<'a, I>(&self, ids: I) -> ModelRun
    where
        I: IntoIterator<Item = &'a String>,
    {
        let predictions = ids
            .into_iter()
            .filter_map(|id| self.predictions.get(id).map(|p| (id.clone(), p.clone())))
            .collect();
        ModelRun {
            model_id: self.model_id.clone(),
            predictions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GoldError {
    #[error("annotation has short answers but no long answer")]
    ShortWithoutLong,
    #[error("example has no annotations")]
    NoAnnotations,
}

/// One annotator's judgement for one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    pub long: Option<Span>,
    pub short_sets: Vec<Span>,
}

impl GoldAnnotation {
    pub fn new(long: Option<Span>, short_sets: Vec<Span>) -> Result<Self, GoldError> {
        // a null span in the long slot means "no long answer"
        let long = long.filter(|s| !s.is_null());
        if long.is_none() && !short_sets.is_empty() {
            return Err(GoldError::ShortWithoutLong);
        }
        Ok(GoldAnnotation { long, short_sets })
    }

    pub fn null() -> Self {
        GoldAnnotation {
            long: None,
            short_sets: Vec::new(),
        }
    }

    pub fn has_long(&self) -> bool {
        self.long.is_some()
    }

    pub fn has_short(&self) -> bool {
        !self.short_sets.is_empty()
    }
}

/// Multi-annotator gold answers for a set of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldSet {
    pub annotations: BTreeMap<String, Vec<GoldAnnotation>>,
    pub min_agreement: usize,
}

impl GoldSet {
    pub fn new(min_agreement: usize) -> Self {
        GoldSet {
            annotations: BTreeMap::new(),
            min_agreement: min_agreement.max(1),
        }
    }

    pub fn insert(
        &mut self,
        example_id: impl Into<String>,
        annotations: Vec<GoldAnnotation>,
    ) -> Result<(), GoldError> {
        if annotations.is_empty() {
            return Err(GoldError::NoAnnotations);
        }
        self.annotations.insert(example_id.into(), annotations);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn example_ids(&self) -> impl Iterator<Item = &String> {
        self.annotations.keys()
    }

    pub fn get(&self, example_id: &str) -> Option<&[GoldAnnotation]> {
        self.annotations.get(example_id).map(Vec::as_slice)
    }

    /// Whether enough annotators supplied an answer of this type.
    pub fn is_answerable(&self, example_id: &str, answer_type: AnswerType) -> bool {
        self.get(example_id)
            .is_some_and(|anns| count_answers(anns, answer_type) >= self.min_agreement)
    }

    pub fn answerable_count(&self, answer_type: AnswerType) -> usize {
        self.annotations
            .values()
            .filter(|anns| count_answers(anns, answer_type) >= self.min_agreement)
            .count()
    }
}

fn count_answers(annotations: &[GoldAnnotation], answer_type: AnswerType) -> usize {
    annotations
        .iter()
        .filter(|a| match answer_type {
            AnswerType::Long => a.has_long(),
            AnswerType::Short => a.has_short(),
        })
        .count()
}

/// The ensemble's answer for one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinalPrediction {
    pub long: Span,
    pub long_score: f64,
    pub short: Span,
    pub short_score: f64,
}

impl FinalPrediction {
    /// Pairs a long and short answer, forcing the short answer to null when
    /// the long answer is null. `null_short_score` is the score attached to
    /// the forced null.
    pub fn joined(
        long: (Span, f64),
        short: (Span, f64),
        null_short_score: f64,
    ) -> Self {
        let (short, short_score) = if long.0.is_null() && !short.0.is_null() {
            (Span::NULL, null_short_score)
        } else {
            short
        };
        FinalPrediction {
            long: long.0,
            long_score: long.1,
            short,
            short_score,
        }
    }

    pub fn null() -> Self {
        FinalPrediction {
            long: Span::NULL,
            long_score: f64::NEG_INFINITY,
            short: Span::NULL,
            short_score: f64::NEG_INFINITY,
        }
    }

    pub fn span(&self, answer_type: AnswerType) -> Span {
        match answer_type {
            AnswerType::Long => self.long,
            AnswerType::Short => self.short,
        }
    }

    pub fn score(&self, answer_type: AnswerType) -> f64 {
        match answer_type {
            AnswerType::Long => self.long_score,
            AnswerType::Short => self.short_score,
        }
    }

    pub fn respects_null_join(&self) -> bool {
        !(self.long.is_null() && !self.short.is_null())
    }
}

/// Per-example final predictions, ordered by example id.
pub type Predictions = BTreeMap<String, FinalPrediction>;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn make_span_accepts_valid_and_null() {
        let s = Span::new(3, 7).unwrap();
        assert_eq!((s.start(), s.end()), (3, 7));
        assert_eq!(s.len(), 4);
        assert!(Span::new(-1, -1).unwrap().is_null());
    }

    #[test]
    fn make_span_rejects_bad_input() {
        assert_eq!(
            Span::new(5, 5),
            Err(SpanError::Empty { start: 5, end: 5 })
        );
        assert!(matches!(Span::new(7, 3), Err(SpanError::Empty { .. })));
        assert!(matches!(Span::new(-1, 5), Err(SpanError::Negative { .. })));
        assert!(matches!(Span::new(-2, -1), Err(SpanError::Negative { .. })));
        assert!(matches!(Span::new(3, -1), Err(SpanError::Negative { .. })));
    }

    #[test]
    fn span_deserialization_validates() {
        let ok: Span = serde_json::from_str(r#"{"start":1,"end":4}"#).unwrap();
        assert_eq!(ok, Span::new(1, 4).unwrap());
        assert!(serde_json::from_str::<Span>(r#"{"start":4,"end":4}"#).is_err());
    }

    #[test]
    fn containment() {
        let long = Span::new(10, 40).unwrap();
        assert!(long.contains(&Span::new(10, 12).unwrap()));
        assert!(long.contains(&Span::new(39, 40).unwrap()));
        assert!(!long.contains(&Span::new(39, 41).unwrap()));
        assert!(!long.contains(&Span::NULL));
        assert!(!Span::NULL.contains(&long));
    }

    #[test]
    fn gold_annotation_requires_long_for_short() {
        let s = Span::new(1, 2).unwrap();
        assert_eq!(
            GoldAnnotation::new(None, vec![s]),
            Err(GoldError::ShortWithoutLong)
        );
        assert!(GoldAnnotation::new(Some(Span::new(0, 5).unwrap()), vec![s]).is_ok());
    }

    #[test]
    fn answerability_respects_min_agreement() {
        let long = Some(Span::new(0, 10).unwrap());
        let mut anns = vec![GoldAnnotation::new(long, vec![]).unwrap()];
        anns.extend((0..4).map(|_| GoldAnnotation::null()));
        let mut gold = GoldSet::new(2);
        gold.insert("q", anns).unwrap();
        assert!(!gold.is_answerable("q", AnswerType::Long));
        gold.min_agreement = 1;
        assert!(gold.is_answerable("q", AnswerType::Long));
        assert!(!gold.is_answerable("q", AnswerType::Short));
    }

    #[test]
    fn joined_forces_null_short() {
        let p = FinalPrediction::joined(
            (Span::NULL, 0.9),
            (Span::new(3, 5).unwrap(), 0.8),
            0.1,
        );
        assert!(p.short.is_null());
        assert_eq!(p.short_score, 0.1);
        assert!(p.respects_null_join());
    }

    fn arb_span() -> impl Strategy<Value = Span> {
        prop_oneof![
            Just(Span::NULL),
            (0i64..50, 1i64..10).prop_map(|(s, l)| Span::new(s, s + l).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn span_order_is_total(a in arb_span(), b in arb_span(), c in arb_span()) {
            // antisymmetry
            if a <= b && b <= a {
                prop_assert_eq!(a, b);
            }
            // transitivity
            if a <= b && b <= c {
                prop_assert!(a <= c);
            }
            // totality
            prop_assert!(a <= b || b <= a);
        }

        #[test]
        fn candidate_sort_is_deterministic(
            items in prop::collection::vec((arb_span(), -5.0f64..5.0), 0..30),
            seed in any::<u64>(),
        ) {
            let mut a: Vec<Candidate> = items.iter().map(|&(s, x)| Candidate::new(s, x)).collect();
            let mut b = a.clone();
            // scramble b deterministically before sorting
            let n = b.len();
            if n > 1 {
                for i in 0..n {
                    let j = (seed.wrapping_mul(i as u64 + 1) % n as u64) as usize;
                    b.swap(i, j);
                }
            }
            rank_candidates(&mut a);
            rank_candidates(&mut b);
            prop_assert_eq!(a, b);
        }
    }
}
