//! Worst-case subpopulation risk of a fixed model under shifts in a chosen set
//! of mutable variables, with the distribution of the immutable variables held fixed.
//!
//! The crate covers data ingestion and fold assignment ([`data`]), the nuisance
//! learners ([`learners`]), the cross-fitted estimator ([`estimator`]), exact
//! oracles and synthetic generators ([`oracle`], [`synth`]), and reporting
//! ([`report`], [`config`], [`analysis`]).

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod estimator;
pub mod learners;
pub mod oracle;
pub mod report;
pub mod synth;

pub use analysis::{run_analysis, AnalysisOutput};
pub use config::AnalysisConfig;
pub use data::{
    assign_folds, build_frame, compute_losses, load_dataset, EvaluationFrame, FoldAssignment,
    LossSpec, TabularDataset, VariablePartition,
};
pub use error::{Error, Result};
pub use estimator::{estimate_worst_case, risk_curve, EstimatorConfig, WorstCaseEstimate};
pub use oracle::{exact_worst_case_discrete, DiscreteInstance};
pub use report::{RiskCurve, SubsampleReport};
