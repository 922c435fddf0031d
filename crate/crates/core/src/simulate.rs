//! Seeded generator of synthetic gold sets and model runs.
//!
//! Documents are integer token ranges split into paragraphs; paragraphs are
//! the long-answer candidates and short spans live inside them. Model `i`
//! puts the right answer (the gold span, or the null span for unanswerable
//! examples) at rank 1 with probability `skill[i]`. Errors are correlated
//! across models through a Gaussian copula on a shared per-example
//! difficulty draw, so `correlation = 0` gives independent models and
//! `correlation = 1` makes every model succeed or fail together (up to
//! differing skills).

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::ingest::{save_model_run, write_gold};
use crate::model::{
    Candidate, ExamplePredictions, GoldAnnotation, GoldSet, ModelRun, Span, DEFAULT_MIN_AGREEMENT,
    DEFAULT_TOP_M,
};

/// Mean rank-1 score before the per-model affine transform, when the model is right.
const SUCCESS_MEAN: f64 = 2.0;
/// Same, when the model is wrong.
const FAILURE_MEAN: f64 = 0.8;
const TOP_SCORE_SD: f64 = 0.7;
/// Mean drop in score between consecutive ranks.
const MEAN_GAP: f64 = 0.35;
/// Chance that a wrong model still lists the right answer further down.
const RECALL_ON_FAILURE: f64 = 0.75;
/// Chance that a wrong model abstains (null at rank 1) on an answerable example.
const NULL_ON_FAILURE: f64 = 0.3;
/// Chance that an annotator beyond the agreement quorum gives no answer.
const ANNOTATOR_DROPOUT: f64 = 0.2;
/// Chance that a sub-quorum annotator marks a long answer on an unanswerable example.
const SPURIOUS_ANNOTATION: f64 = 0.3;
const DISTRACTOR_POOL: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_examples: usize,
    pub n_models: usize,
    pub n_annotators: usize,
    pub answerable_rate: f64,
    pub skill: Vec<f64>,
    pub correlation: f64,
    pub top_m: usize,
    pub duplicate_rate: f64,
    pub seed: u64,
}

impl SimConfig {
    /// `n_models` models of equal skill, other fields at their defaults.
    pub fn uniform(n_examples: usize, n_models: usize, skill: f64, seed: u64) -> Self {
        SimConfig {
            n_examples,
            n_models,
            n_annotators: 5,
            answerable_rate: 0.65,
            skill: vec![skill; n_models],
            correlation: 0.0,
            top_m: DEFAULT_TOP_M,
            duplicate_rate: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_examples == 0 || self.n_models == 0 || self.n_annotators == 0 || self.top_m == 0 {
            return bad("n_examples, n_models, n_annotators and top_m must be positive".into());
        }
        if self.skill.len() != self.n_models {
            return bad(format!(
                "{} skill values given for {} models",
                self.skill.len(),
                self.n_models
            ));
        }
        for (name, v) in [
            ("answerable_rate", self.answerable_rate),
            ("correlation", self.correlation),
            ("duplicate_rate", self.duplicate_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if let Some(s) = self.skill.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return bad(format!("skill values must lie in [0, 1], got {s}"));
        }
        Ok(())
    }

    /// Agreement quorum the generated gold set is built around.
    pub fn min_agreement(&self) -> usize {
        DEFAULT_MIN_AGREEMENT.min(self.n_annotators)
    }
}

pub fn model_id(index: usize) -> String {
    format!("model_{index:02}")
}

pub fn example_id(index: usize) -> String {
    format!("ex{index:06}")
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

struct Document {
    paragraphs: Vec<Span>,
    answerable: bool,
    gold_long: Span,
    gold_short: Span,
    long_pool: Vec<Span>,
    short_pool: Vec<Span>,
    difficulty: f64,
}

fn random_subspan(rng: &mut ChaCha8Rng, within: Span) -> Span {
    let max_len = (within.len() as i64).min(4);
    let len = rng.random_range(1..=max_len);
    let start = rng.random_range(within.start()..=within.end() - len);
    Span::new(start, start + len).expect("subspan of a valid paragraph")
}

fn make_document(rng: &mut ChaCha8Rng, answerable_rate: f64) -> Document {
    let n_paragraphs = rng.random_range(8..=25);
    let mut paragraphs = Vec::with_capacity(n_paragraphs);
    let mut offset = 0i64;
    for _ in 0..n_paragraphs {
        let len = rng.random_range(20..=80);
        paragraphs.push(Span::new(offset, offset + len).expect("positive length"));
        offset += len;
    }
    let answerable = rng.random::<f64>() < answerable_rate;
    let gold_idx = rng.random_range(0..n_paragraphs);
    let gold_long = paragraphs[gold_idx];
    let gold_short = random_subspan(rng, gold_long);

    let mut others: Vec<Span> = paragraphs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != gold_idx)
        .map(|(_, s)| *s)
        .collect();
    others.shuffle(rng);
    others.truncate(DISTRACTOR_POOL);
    let long_pool = others;

    // near misses around the gold short answer plus spans in other paragraphs
    let mut short_pool = Vec::new();
    for (ds, de) in [(-1, 0), (1, 0), (0, 1), (0, -1), (-1, 1)] {
        if let Ok(s) = Span::new(gold_short.start() + ds, gold_short.end() + de) {
            if s != gold_short && gold_long.contains(&s) {
                short_pool.push(s);
            }
        }
    }
    for p in long_pool.iter().take(DISTRACTOR_POOL - short_pool.len().min(DISTRACTOR_POOL)) {
        short_pool.push(random_subspan(rng, *p));
    }
    short_pool.sort();
    short_pool.dedup();
    short_pool.retain(|s| *s != gold_short);

    let difficulty: f64 = rng.sample(StandardNormal);
    Document {
        paragraphs,
        answerable,
        gold_long,
        gold_short,
        long_pool,
        short_pool,
        difficulty,
    }
}

fn make_annotations(
    rng: &mut ChaCha8Rng,
    doc: &Document,
    n_annotators: usize,
    quorum: usize,
) -> Vec<GoldAnnotation> {
    (0..n_annotators)
        .map(|j| {
            if doc.answerable {
                if j < quorum || rng.random::<f64>() >= ANNOTATOR_DROPOUT {
                    GoldAnnotation::new(Some(doc.gold_long), vec![doc.gold_short])
                        .expect("long answer present")
                } else {
                    GoldAnnotation::null()
                }
            } else if j + 1 < quorum && rng.random::<f64>() < SPURIOUS_ANNOTATION {
                let p = *doc.paragraphs.choose(rng).expect("non-empty document");
                GoldAnnotation::new(Some(p), vec![]).expect("long answer present")
            } else {
                GoldAnnotation::null()
            }
        })
        .collect()
}

/// Per-model affine map from latent scores to the model's own scale.
#[derive(Debug, Clone, Copy)]
struct ScoreScale {
    gain: f64,
    offset: f64,
}

struct ListSpec<'a> {
    target: Span,
    pool: &'a [Span],
    success: bool,
    answerable: bool,
}

fn make_list(
    rng: &mut ChaCha8Rng,
    spec: &ListSpec<'_>,
    top_m: usize,
    scale: ScoreScale,
    duplicate_rate: f64,
) -> Vec<Candidate> {
    let gap = Exp::new(1.0 / MEAN_GAP).expect("positive rate");
    let mut distractors: Vec<Span> = spec.pool.to_vec();
    distractors.shuffle(rng);
    let mut distractors = distractors.into_iter();

    let mut order: Vec<Span> = Vec::with_capacity(top_m);
    if spec.success {
        order.push(spec.target);
    } else {
        let top = if spec.answerable && rng.random::<f64>() < NULL_ON_FAILURE {
            Some(Span::NULL)
        } else {
            distractors.next()
        };
        order.extend(top);
    }
    let mut rest: Vec<Span> = distractors.collect();
    if spec.answerable && spec.success {
        // right models still give abstention some low-ranked weight
        let pos = rng.random_range(0..=rest.len());
        rest.insert(pos, Span::NULL);
    }
    if !spec.success && !order.contains(&spec.target) && rng.random::<f64>() < RECALL_ON_FAILURE {
        let pos = rng.random_range(0..rest.len().clamp(1, 4));
        rest.insert(pos.min(rest.len()), spec.target);
    }
    order.extend(rest);
    order.truncate(top_m);

    let top_mean = if spec.success { SUCCESS_MEAN } else { FAILURE_MEAN };
    let top = Normal::new(top_mean, TOP_SCORE_SD).expect("positive sd");
    let mut latent = top.sample(rng);
    let mut out = Vec::with_capacity(order.len() * 2);
    for span in order {
        out.push(Candidate::new(span, scale.gain * latent + scale.offset));
        if rng.random::<f64>() < duplicate_rate {
            let dup = latent - gap.sample(rng) * 0.5;
            out.push(Candidate::new(span, scale.gain * dup + scale.offset));
        }
        latent -= gap.sample(rng);
    }
    out
}

/// Generates a gold set and one run per model. Fully determined by `cfg`.
pub fn generate(cfg: &SimConfig) -> Result<(GoldSet, Vec<ModelRun>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let quorum = cfg.min_agreement();

    let scales: Vec<ScoreScale> = (0..cfg.n_models)
        .map(|_| ScoreScale {
            gain: rng.random_range(0.7..1.5),
            offset: rng.random_range(-1.0..1.0),
        })
        .collect();
    let thresholds: Vec<f64> = cfg.skill.clone();
    let shared = cfg.correlation.sqrt();
    let own = (1.0 - cfg.correlation).sqrt();

    let mut gold = GoldSet::new(quorum);
    let mut runs: Vec<ModelRun> = (0..cfg.n_models).map(|i| ModelRun::new(model_id(i))).collect();

    for e in 0..cfg.n_examples {
        let id = example_id(e);
        let doc = make_document(&mut rng, cfg.answerable_rate);
        let annotations = make_annotations(&mut rng, &doc, cfg.n_annotators, quorum);
        gold.insert(id.clone(), annotations)
            .expect("annotator count is positive");

        for (i, run) in runs.iter_mut().enumerate() {
            let mut succeeds = || {
                let eps: f64 = rng.sample(StandardNormal);
                std_normal_cdf(shared * doc.difficulty + own * eps) < thresholds[i]
            };
            let long_ok = succeeds();
            let short_ok = succeeds();
            let (long_target, short_target) = if doc.answerable {
                (doc.gold_long, doc.gold_short)
            } else {
                (Span::NULL, Span::NULL)
            };
            let long = make_list(
                &mut rng,
                &ListSpec {
                    target: long_target,
                    pool: &doc.long_pool,
                    success: long_ok,
                    answerable: doc.answerable,
                },
                cfg.top_m,
                scales[i],
                cfg.duplicate_rate,
            );
            let short = make_list(
                &mut rng,
                &ListSpec {
                    target: short_target,
                    pool: &doc.short_pool,
                    success: short_ok,
                    answerable: doc.answerable,
                },
                cfg.top_m,
                scales[i],
                cfg.duplicate_rate,
            );
            run.predictions
                .insert(id.clone(), ExamplePredictions::new(id.clone(), long, short, cfg.top_m));
        }
    }
    Ok((gold, runs))
}

/// Files written by [`write_dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub gold_files: Vec<PathBuf>,
    pub run_files: Vec<PathBuf>,
}

/// Writes `gold_{i}.jsonl` shards (contiguous in example order) and one
/// `<model_id>.jsonl` per run into `dir`.
pub fn write_dataset(
    gold: &GoldSet,
    runs: &[ModelRun],
    dir: &Path,
    gold_shards: usize,
) -> Result<DatasetFiles> {
    if gold_shards == 0 {
        return Err(Error::Config("gold_shards must be positive".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ids: Vec<String> = gold.example_ids().cloned().collect();
    let per_shard = ids.len().div_ceil(gold_shards).max(1);
    let mut gold_files = Vec::with_capacity(gold_shards);
    for shard in 0..gold_shards {
        let path = dir.join(format!("gold_{shard}.jsonl"));
        let lo = (shard * per_shard).min(ids.len());
        let hi = ((shard + 1) * per_shard).min(ids.len());
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_gold(gold, Some(&ids[lo..hi]), BufWriter::new(file)).map_err(|e| Error::io(&path, e))?;
        gold_files.push(path);
    }
    let mut run_files = Vec::with_capacity(runs.len());
    for run in runs {
        let path = dir.join(format!("{}.jsonl", run.model_id));
        save_model_run(run, &path)?;
        run_files.push(path);
    }
    Ok(DatasetFiles {
        gold_files,
        run_files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AnswerType;

    #[test]
    fn config_validation() {
        let mut cfg = SimConfig::uniform(10, 2, 0.5, 1);
        assert!(cfg.validate().is_ok());
        cfg.skill.pop();
        assert!(cfg.validate().is_err());
        let mut cfg = SimConfig::uniform(10, 2, 0.5, 1);
        cfg.correlation = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = SimConfig::uniform(10, 2, 0.5, 1);
        cfg.skill[0] = -0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let mut cfg = SimConfig::uniform(50, 3, 0.6, 9);
        cfg.duplicate_rate = 0.3;
        cfg.correlation = 0.4;
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        cfg.seed = 10;
        assert_ne!(generate(&cfg).unwrap().1, a.1);
    }

    #[test]
    fn structure_is_valid() {
        let mut cfg = SimConfig::uniform(200, 2, 0.5, 3);
        cfg.duplicate_rate = 0.5;
        let (gold, runs) = generate(&cfg).unwrap();
        assert_eq!(gold.len(), 200);
        assert_eq!(runs.len(), 2);
        let mut saw_duplicate = false;
        for run in &runs {
            assert_eq!(run.len(), 200);
            for p in run.predictions.values() {
                assert!(p.long.len() <= cfg.top_m && p.short.len() <= cfg.top_m);
                let mut spans: Vec<Span> = p.long.iter().map(|c| c.span).collect();
                spans.sort();
                let before = spans.len();
                spans.dedup();
                saw_duplicate |= spans.len() < before;
            }
        }
        assert!(saw_duplicate);
        // answerable fraction near the configured rate
        let rate = gold.answerable_count(AnswerType::Long) as f64 / 200.0;
        assert!((rate - 0.65).abs() < 0.12, "answerable rate {rate}");
    }

    #[test]
    fn single_annotator_mode() {
        let mut cfg = SimConfig::uniform(100, 1, 0.5, 3);
        cfg.n_annotators = 1;
        let (gold, _) = generate(&cfg).unwrap();
        assert_eq!(gold.min_agreement, 1);
        assert!(gold.answerable_count(AnswerType::Short) > 30);
    }
}
