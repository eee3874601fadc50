//! Survival-analysis toolkit built around a time-varying Cox model whose
//! log-hazard exponent is either linear or a small neural network, trained by
//! maximizing the Efron-corrected partial likelihood.
//!
//! The crate covers the full pipeline: long-format ingestion and
//! counting-process expansion ([`data`]), preprocessing fit on the training
//! fold only ([`preprocess`]), the hazard exponents with exact
//! forward/backward passes ([`model`]), the partial likelihood with Efron,
//! Breslow and exact-average tie handling plus the training loop
//! ([`likelihood`]), survival estimators and percentile scoring
//! ([`estimators`]), integrated-gradients attribution ([`explain`]),
//! horizon-anchored evaluation ([`evaluation`]), and a synthetic cohort
//! generator with known ground truth ([`synth`]).

pub mod artifact;
pub mod data;
pub mod error;
pub mod estimators;
pub mod evaluation;
pub mod explain;
pub mod likelihood;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod schema;
pub mod synth;
pub(crate) mod util;

pub use data::{
    build_event_groups, expand_cohort, expand_counting_process, load_dataset, stratified_split,
    DesignMatrix, EventGroup, ExpandedRow, Outcome, PatientTimeline,
};
pub use error::{Error, ErrorCategory, Result};
pub use model::{AdamState, Exponent, LinearExponent, NeuralExponent};
pub use schema::{FeatureDef, FeatureKind, FeatureSchema, RawValue};
