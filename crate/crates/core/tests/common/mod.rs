//! Brute-force reference implementations shared by the integration tests.
//! Deliberately naive: linear scans, no sorting tricks, no shared code with
//! the library beyond the data types.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use spanfuse::model::{AnswerType, GoldSet, ModelRun, Predictions, Span};

pub const EPS: f64 = 1e-12;

static CHECKED: AtomicUsize = AtomicUsize::new(0);
static VIOLATIONS: AtomicUsize = AtomicUsize::new(0);

/// Counts predictions pairing a null long answer with a non-null short one.
pub fn record_null_join(preds: &Predictions) {
    for p in preds.values() {
        CHECKED.fetch_add(1, Ordering::Relaxed);
        if p.long.is_null() && !p.short.is_null() {
            VIOLATIONS.fetch_add(1, Ordering::Relaxed);
        }
    }
}

pub fn null_join_tally() -> (usize, usize) {
    (CHECKED.load(Ordering::Relaxed), VIOLATIONS.load(Ordering::Relaxed))
}

/// Aggregation by direct formula evaluation. `p` may be in any order.
pub fn oracle_aggregate(p: &[f64], kind: &str, beta: f64) -> f64 {
    let mut v = p.to_vec();
    // insertion sort, descending
    for i in 1..v.len() {
        let mut j = i;
        while j > 0 && v[j - 1] < v[j] {
            v.swap(j - 1, j);
            j -= 1;
        }
    }
    match kind {
        "max" => v[0],
        "rrs" => {
            let mut s = 0.0;
            for (i, x) in v.iter().enumerate() {
                s += x / (i + 1) as f64;
            }
            s
        }
        "expsum" => {
            let mut s = 0.0;
            for (i, x) in v.iter().enumerate() {
                s += x * beta.powi(i as i32);
            }
            s
        }
        "noisyor" => {
            let mut miss = 1.0;
            for x in &v {
                miss *= 1.0 - x;
            }
            1.0 - miss
        }
        other => panic!("unknown aggregation {other}"),
    }
}

/// How the oracle treats one answer type.
#[derive(Clone, Copy)]
pub struct OraclePolicy {
    pub agg: &'static str,
    pub beta: f64,
    /// Per-model `(weight, bias)` logistic map, or raw scores when `None`.
    pub logistic: Option<fn(usize) -> (f64, f64)>,
}

impl OraclePolicy {
    pub const RAW_MAX: OraclePolicy = OraclePolicy {
        agg: "max",
        beta: 0.5,
        logistic: None,
    };

    fn transform(&self, model: usize, x: f64) -> f64 {
        match self.logistic {
            None => x,
            Some(f) => {
                let (w, b) = f(model);
                1.0 / (1.0 + (-(w * x + b)).exp())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleAnswer {
    pub long: Span,
    pub long_score: f64,
    pub short: Span,
    pub short_score: f64,
}

fn union_means(
    runs: &[&ModelRun],
    id: &str,
    at: AnswerType,
    policy: &OraclePolicy,
    top_m: usize,
) -> Vec<(Span, f64)> {
    let k = runs.len() as f64;
    let lists: Vec<Vec<(Span, f64)>> = runs
        .iter()
        .enumerate()
        .map(|(m, r)| {
            let ex = &r.predictions[id];
            let list = match at {
                AnswerType::Long => &ex.long,
                AnswerType::Short => &ex.short,
            };
            list.iter()
                .take(top_m)
                .map(|c| (c.span, policy.transform(m, c.score)))
                .collect()
        })
        .collect();
    let mut union: Vec<Span> = Vec::new();
    for list in &lists {
        for (s, _) in list {
            if !union.contains(s) {
                union.push(*s);
            }
        }
    }
    union
        .into_iter()
        .map(|u| {
            let mut total = 0.0;
            for list in &lists {
                let scores: Vec<f64> = list.iter().filter(|(s, _)| *s == u).map(|(_, x)| *x).collect();
                if !scores.is_empty() {
                    total += oracle_aggregate(&scores, policy.agg, policy.beta);
                }
            }
            (u, total / k)
        })
        .collect()
}

fn best(means: &[(Span, f64)]) -> Option<(Span, f64)> {
    let mut out: Option<(Span, f64)> = None;
    for &(s, x) in means {
        out = match out {
            None => Some((s, x)),
            Some((bs, bx)) if x > bx || (x == bx && s < bs) => Some((s, x)),
            keep => keep,
        };
    }
    out
}

/// Mean-with-zero-imputation combination, recomputed from scratch.
pub fn oracle_combine(
    runs: &[&ModelRun],
    long: &OraclePolicy,
    short: &OraclePolicy,
    top_m: usize,
) -> BTreeMap<String, OracleAnswer> {
    let mut out = BTreeMap::new();
    for id in runs[0].predictions.keys() {
        let long_means = union_means(runs, id, AnswerType::Long, long, top_m);
        let short_means = union_means(runs, id, AnswerType::Short, short, top_m);
        let (l, ls) = best(&long_means).unwrap_or((Span::NULL, 0.0));
        let null_short = short_means
            .iter()
            .find(|(s, _)| s.is_null())
            .map_or(0.0, |(_, x)| *x);
        let (s, ss) = if l.is_null() {
            (Span::NULL, null_short)
        } else {
            best(&short_means).unwrap_or((Span::NULL, 0.0))
        };
        out.insert(
            id.clone(),
            OracleAnswer {
                long: l,
                long_score: ls,
                short: s,
                short_score: ss,
            },
        );
    }
    out
}

/// Exact-match correctness with the annotator-agreement rule, by direct counting.
pub fn oracle_correct(gold: &GoldSet, id: &str, pred: Span, at: AnswerType) -> bool {
    if pred.is_null() {
        return false;
    }
    let anns = gold.get(id).unwrap_or(&[]);
    let mut agree = 0;
    let mut matched = false;
    for a in anns {
        match at {
            AnswerType::Long => {
                if a.long.is_some() {
                    agree += 1;
                }
                if a.long == Some(pred) {
                    matched = true;
                }
            }
            AnswerType::Short => {
                if !a.short_sets.is_empty() {
                    agree += 1;
                }
                if a.short_sets.len() == 1 && a.short_sets[0] == pred {
                    matched = true;
                }
            }
        }
    }
    agree >= gold.min_agreement && matched
}

/// Optimal F1 as the exact fraction `(2c, a + g)`, trying every observed
/// score and -inf as the threshold.
pub fn oracle_best_f1(preds: &Predictions, gold: &GoldSet, at: AnswerType) -> (u64, u64) {
    let mut g = 0u64;
    for id in gold.example_ids() {
        let anns = gold.get(id).unwrap();
        let n = anns
            .iter()
            .filter(|a| match at {
                AnswerType::Long => a.long.is_some(),
                AnswerType::Short => !a.short_sets.is_empty(),
            })
            .count();
        if n >= gold.min_agreement {
            g += 1;
        }
    }
    let mut thresholds = vec![f64::NEG_INFINITY];
    for p in preds.values() {
        thresholds.push(p.score(at));
    }
    let mut best = (0u64, 1u64);
    for t in thresholds {
        let (mut a, mut c) = (0u64, 0u64);
        for id in gold.example_ids() {
            if let Some(p) = preds.get(id) {
                let span = p.span(at);
                if !span.is_null() && p.score(at) > t {
                    a += 1;
                    if oracle_correct(gold, id, span, at) {
                        c += 1;
                    }
                }
            }
        }
        let cand = (2 * c, if c == 0 { 1 } else { a + g });
        if cand.0 * best.1 > best.0 * cand.1 {
            best = cand;
        }
    }
    best
}

pub fn ratio(f: (u64, u64)) -> f64 {
    f.0 as f64 / f.1 as f64
}

/// Splits `gold` by example order: the first `n_train` ids go to train.
pub fn split_gold(gold: &GoldSet, n_train: usize) -> (GoldSet, GoldSet) {
    let mut train = GoldSet::new(gold.min_agreement);
    let mut test = GoldSet::new(gold.min_agreement);
    for (i, id) in gold.example_ids().enumerate() {
        let anns = gold.get(id).unwrap().to_vec();
        let target = if i < n_train { &mut train } else { &mut test };
        target.insert(id.clone(), anns).unwrap();
    }
    (train, test)
}
