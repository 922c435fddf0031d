//! Ensembling span-extraction QA systems: per-system score aggregation,
//! logistic calibration, cross-system combination, threshold-tuned F1
//! evaluation, ensemble search and a synthetic data generator.

pub mod aggregate;
pub mod calibrate;
pub mod cli;
pub mod combine;
pub mod error;
pub mod evaluate;
pub mod ingest;
pub mod model;
pub mod search;
pub mod simulate;

pub use aggregate::{aggregate_score, AggregationStrategy, ScoreVector};
pub use calibrate::{Calibrator, CalibratorTable};
pub use combine::{combine_runs, CalibrationMode, CombineConfig, EnsembleSpec};
pub use error::{Error, Result};
pub use evaluate::{evaluate, EvalReport};
pub use model::{AnswerType, Candidate, ExamplePredictions, FinalPrediction, GoldSet, ModelRun, Predictions, Span};
pub use search::{SearchConfig, SearchResult, SearchStrategy};
