//! Class-dependent score-margin thresholds for two-stage (little/big)
//! classifier cascades.
//!
//! The crate works on exported prediction files, not on models: given the
//! probability outputs of both stages on a validation set, it picks a
//! stopping threshold per predicted class that trades false positives
//! against big-model invocations, then evaluates accuracy and expected
//! energy on held-out data.

pub mod cascade;
pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod optimizer;
pub mod synth;

pub use cascade::{
    cascade_decide, predicted_label, score_margin, CascadeDecision, CascadeSpec, Normalization,
    PredictionSet, SampleRecord, Stage, ThresholdPolicy, Thresholds,
};
pub use error::{Error, Result};
pub use eval::{
    accuracy_gain_points, compare_policies, evaluate_policy, expected_energy, max_accuracy_summary,
    sm_histogram, sweep_alpha, EvaluationReport, PolicyMode, TradeoffCurve,
};
pub use optimizer::{
    build_class_slices, candidate_thresholds, escalations_for_class, false_positives_for_class,
    objective, objective_curve, optimize_class_thresholds, optimize_global_threshold, ClassSlice,
    ObjectiveValue, OptimizationResult,
};
pub use synth::{generate, resample_by_class, split, ClassProfile, GeneratorConfig};
