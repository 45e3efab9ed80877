//! Multimodal acute respiratory failure (ARF) diagnosis pipeline.
//!
//! The crate covers the whole path from raw hospital stays to evaluated
//! late-fusion classifiers:
//!
//! - [`cohort`]: ARF onset, inclusion and exclusion rules, observation window,
//!   radiograph study selection, NDJSON ingestion.
//! - [`labels`]: chart-review consensus, ICD-10 plus medication phenotypes,
//!   inter-rater agreement and the held-out physician benchmark.
//! - [`featurize`]: most-recent-value extraction and five-bin binary encoding
//!   with explicit missingness.
//! - [`imaging`]: grayscale radiograph preprocessing and the frozen-embedding
//!   file contract.
//! - [`models`]: EHR, image and combined classifiers trained with SGD and
//!   momentum under early stopping.
//! - [`eval`]: patient-level splits, AUROC, AUPR, calibration, PPV operating
//!   point and cross-split summaries.
//! - [`explain`]: grouped permutation importance and rank aggregation.
//! - [`pipeline`]: the in-memory stages shared by the CLI and the tests.
//! - [`synth`]: seeded synthetic cohorts with a known generative model.
//! - [`cli`]: the `arfdx` command-line front end.

pub mod cli;
pub mod cohort;
pub mod diagnosis;
pub mod eval;
pub mod explain;
pub mod featurize;
pub mod imaging;
pub mod labels;
pub mod models;
pub mod output;
pub mod pipeline;
pub mod stats;
pub mod synth;

pub use diagnosis::{Diagnosis, PerDiagnosis};
