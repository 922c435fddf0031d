//! Reading and writing the JSONL interchange files, and the dev-train /
//! dev-test partition of gold shards.
//!
//! Prediction file, one object per line:
//!
//! ```text
//! {"example_id": "q1", "long": [{"start": 0, "end": 40, "score": 3.2}], "short": [...]}
//! ```
//!
//! Gold file, one object per line:
//!
//! ```text
//! {"example_id": "q1", "annotations": [{"long": {"start": 0, "end": 40} | null, "short_sets": [...]}]}
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Candidate, ExamplePredictions, FinalPrediction, GoldAnnotation, GoldSet, ModelRun,
    Predictions, Span,
};

#[derive(Debug, Serialize, Deserialize)]
struct ScoredSpanRecord {
    start: i64,
    end: i64,
    score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRecord {
    example_id: String,
    #[serde(default)]
    long: Vec<ScoredSpanRecord>,
    #[serde(default)]
    short: Vec<ScoredSpanRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SpanRecord {
    start: i64,
    end: i64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    long: Option<SpanRecord>,
    #[serde(default)]
    short_sets: Vec<SpanRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GoldRecord {
    example_id: String,
    annotations: Vec<AnnotationRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FinalRecord {
    example_id: String,
    long: ScoredSpanRecord,
    short: ScoredSpanRecord,
}

/// Dev-set partition by gold shard file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
}

/// The first `n_train` files form the train split, the rest the test split.
pub fn split_by_files<P: AsRef<Path>>(gold_files: &[P], n_train: usize) -> Result<SplitSpec> {
    if n_train == 0 {
        return Err(Error::Config("n_train must be positive".into()));
    }
    if n_train >= gold_files.len() {
        return Err(Error::Config(format!(
            "n_train = {n_train} leaves no test files out of {}",
            gold_files.len()
        )));
    }
    let files: Vec<PathBuf> = gold_files.iter().map(|p| p.as_ref().to_path_buf()).collect();
    for (i, f) in files.iter().enumerate() {
        if files[..i].contains(f) {
            return Err(Error::Config(format!(
                "gold file {} listed twice",
                f.display()
            )));
        }
    }
    let (train, test) = files.split_at(n_train);
    Ok(SplitSpec {
        train_files: train.to_vec(),
        test_files: test.to_vec(),
    })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Model id used when none is given: the file stem.
pub fn model_id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn load_model_run(path: impl AsRef<Path>, model_id: &str, top_m: usize) -> Result<ModelRun> {
    let path = path.as_ref();
    read_model_run(open(path)?, path, model_id, top_m)
}

/// Parses a prediction stream. Lists are re-sorted by score, truncated to
/// `top_m` and re-ranked; the order in the file is not trusted.
pub fn read_model_run<R: BufRead>(
    reader: R,
    source: &Path,
    model_id: &str,
    top_m: usize,
) -> Result<ModelRun> {
    if top_m == 0 {
        return Err(Error::Config("top_m must be positive".into()));
    }
    let mut run = ModelRun::new(model_id);
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord = serde_json::from_str(&line)
            .map_err(|e| parse_error(source, lineno, e.to_string()))?;
        if record.example_id.is_empty() {
            return Err(parse_error(source, lineno, "empty example_id"));
        }
        let convert = |items: Vec<ScoredSpanRecord>| -> Result<Vec<Candidate>> {
            items
                .into_iter()
                .map(|r| {
                    let span = Span::new(r.start, r.end)
                        .map_err(|e| parse_error(source, lineno, e.to_string()))?;
                    if !r.score.is_finite() {
                        return Err(parse_error(source, lineno, "non-finite score"));
                    }
                    Ok(Candidate::new(span, r.score))
                })
                .collect()
        };
        let long = convert(record.long)?;
        let short = convert(record.short)?;
        if run.predictions.contains_key(&record.example_id) {
            return Err(parse_error(
                source,
                lineno,
                format!("duplicate example_id {:?}", record.example_id),
            ));
        }
        let preds = ExamplePredictions::new(record.example_id.clone(), long, short, top_m);
        run.predictions.insert(record.example_id, preds);
    }
    Ok(run)
}

pub fn write_model_run<W: Write>(run: &ModelRun, mut writer: W) -> std::io::Result<()> {
    let to_records = |cands: &[Candidate]| -> Vec<ScoredSpanRecord> {
        cands
            .iter()
            .map(|c| ScoredSpanRecord {
                start: c.span.start(),
                end: c.span.end(),
                score: c.score,
            })
            .collect()
    };
    for preds in run.predictions.values() {
        let record = PredictionRecord {
            example_id: preds.example_id.clone(),
            long: to_records(&preds.long),
            short: to_records(&preds.short),
        };
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_model_run(run: &ModelRun, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_model_run(run, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Loads and merges gold shards. An example id may appear in only one file.
pub fn load_gold<P: AsRef<Path>>(paths: &[P], min_agreement: usize) -> Result<GoldSet> {
    if min_agreement == 0 {
        return Err(Error::Config("min_agreement must be positive".into()));
    }
    let mut gold = GoldSet::new(min_agreement);
    for path in paths {
        let path = path.as_ref();
        read_gold_into(open(path)?, path, &mut gold)?;
    }
    Ok(gold)
}

pub fn read_gold_into<R: BufRead>(reader: R, source: &Path, gold: &mut GoldSet) -> Result<()> {
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: GoldRecord = serde_json::from_str(&line)
            .map_err(|e| parse_error(source, lineno, e.to_string()))?;
        if record.example_id.is_empty() {
            return Err(parse_error(source, lineno, "empty example_id"));
        }
        if gold.annotations.contains_key(&record.example_id) {
            return Err(parse_error(
                source,
                lineno,
                format!("duplicate example_id {:?}", record.example_id),
            ));
        }
        let span = |r: SpanRecord| {
            Span::new(r.start, r.end).map_err(|e| parse_error(source, lineno, e.to_string()))
        };
        let mut annotations = Vec::with_capacity(record.annotations.len());
        for ann in record.annotations {
            let long = ann.long.map(span).transpose()?;
            let shorts = ann
                .short_sets
                .into_iter()
                .map(span)
                .collect::<Result<Vec<_>>>()?;
            let ann = GoldAnnotation::new(long, shorts)
                .map_err(|e| parse_error(source, lineno, e.to_string()))?;
            annotations.push(ann);
        }
        gold.insert(record.example_id, annotations)
            .map_err(|e| parse_error(source, lineno, e.to_string()))?;
    }
    Ok(())
}

/// Writes the given example ids of `gold` (all of them when `ids` is `None`).
pub fn write_gold<W: Write>(
    gold: &GoldSet,
    ids: Option<&[String]>,
    mut writer: W,
) -> std::io::Result<()> {
    let all: Vec<&String>;
    let selected: Vec<&String> = match ids {
        Some(ids) => ids.iter().collect(),
        None => {
            all = gold.example_ids().collect();
            all
        }
    };
    for id in selected {
        let Some(anns) = gold.annotations.get(id) else {
            continue;
        };
        let record = GoldRecord {
            example_id: id.clone(),
            annotations: anns
                .iter()
                .map(|a| AnnotationRecord {
                    long: a.long.map(|s| SpanRecord {
                        start: s.start(),
                        end: s.end(),
                    }),
                    short_sets: a
                        .short_sets
                        .iter()
                        .map(|s| SpanRecord {
                            start: s.start(),
                            end: s.end(),
                        })
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn write_predictions<W: Write>(preds: &Predictions, mut writer: W) -> std::io::Result<()> {
    for (id, p) in preds {
        let record = FinalRecord {
            example_id: id.clone(),
            long: ScoredSpanRecord {
                start: p.long.start(),
                end: p.long.end(),
                score: p.long_score,
            },
            short: ScoredSpanRecord {
                start: p.short.start(),
                end: p.short.end(),
                score: p.short_score,
            },
        };
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Predictions> {
    let path = path.as_ref();
    read_predictions(open(path)?, path)
}

pub fn read_predictions<R: BufRead>(reader: R, source: &Path) -> Result<Predictions> {
    let mut out = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: FinalRecord = serde_json::from_str(&line)
            .map_err(|e| parse_error(source, lineno, e.to_string()))?;
        let long = Span::new(record.long.start, record.long.end)
            .map_err(|e| parse_error(source, lineno, e.to_string()))?;
        let short = Span::new(record.short.start, record.short.end)
            .map_err(|e| parse_error(source, lineno, e.to_string()))?;
        if record.long.score.is_nan() || record.short.score.is_nan() {
            return Err(parse_error(source, lineno, "NaN score"));
        }
        let pred = FinalPrediction {
            long,
            long_score: record.long.score,
            short,
            short_score: record.short.score,
        };
        if !pred.respects_null_join() {
            return Err(parse_error(
                source,
                lineno,
                "null long answer paired with a non-null short answer",
            ));
        }
        if out.insert(record.example_id.clone(), pred).is_some() {
            return Err(parse_error(
                source,
                lineno,
                format!("duplicate example_id {:?}", record.example_id),
            ));
        }
    }
    Ok(out)
}
