//! Synthetically controlled Thompson sampling.
//!
//! Adaptive experiment design for a single experimental unit observed
//! alongside a pool of untreated donor units that share a low-rank factor
//! structure. The crate covers instance generation, factor recovery, the
//! ridge regression on recovered contexts, the SCTS / UCB / fixed /
//! switchback designs, post-experiment estimators, re-randomization
//! inference and the benchmark harness behind the `scts` binary.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod error;
pub mod estimation;
pub mod inference;
pub mod latent;
pub mod linalg;
pub mod panel;
pub mod policy;
pub mod ridge;
pub mod seed;

pub use error::{Result, SctsError};
pub use latent::{estimate_factors, procrustes_align, spectral_noise_bound, LatentEstimate};
pub use panel::{
    canonicalize_decomposition, generate_instance, ingest_panel_csv, make_semi_synthetic,
    Action, EpochObservation, FactorModelSpec, OutcomeSource, PanelData, PanelLayout,
};
pub use policy::{
    run_experiment, scts_step, ucb_step, DesignConfig, DesignKind, ExperimentResult,
    PolicyState, RegretTrace,
};
pub use ridge::{beta_t, elliptical_potential_bound, fit_ridge, BetaMode, BetaSchedule, RidgeFit};
pub use estimation::{
    estimate_diff_in_means, estimate_ridge, estimate_sc, estimate_scts, fit_sc_weights, hp_interval_sc,
    EffectEstimate, EstimatorKind, ScWeights,
};
pub use inference::{
    invert_to_ci, rerandomize_test, ConfidenceSet, Grid, RerandomizationConfig, Rerandomizer, TestReport,
};
pub use bench::{run_benchmark, run_inference_benchmark, BenchmarkConfig, BenchmarkReport, InferenceReport};
