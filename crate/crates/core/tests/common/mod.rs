#![allow(dead_code)]

use scts_core::panel::{generate_instance, FactorModelSpec};
use scts_core::policy::{run_experiment, DesignConfig, DesignKind, ExperimentResult};
use scts_core::ridge::{BetaMode, BetaSchedule};

/// Small instance: n=30 donors, r=3, T0=T=40.
pub fn small_spec(sigma: f64, tau: f64, seed: u64) -> FactorModelSpec {
    FactorModelSpec::gaussian(30, 3, 40, 40, sigma, tau, seed).unwrap()
}

pub fn beta_for(spec: &FactorModelSpec, mode: BetaMode) -> BetaSchedule {
    let canonical = spec.canonical().unwrap();
    BetaSchedule {
        sigma: spec.sigma,
        context_bound: canonical.factor_norm_bound(),
        r: spec.r,
        n: spec.n,
        horizon: spec.t,
        lambda_norm_plus_tau: canonical.lambda_star.norm() + spec.tau_star.abs(),
        mode,
    }
}

pub fn design(kind: DesignKind, spec: &FactorModelSpec, mode: BetaMode, sampler_seed: u64) -> DesignConfig {
    DesignConfig {
        kind,
        r: spec.r,
        rho: 1.0,
        beta: beta_for(spec, mode),
        sampler_seed,
        refresh_every: 1,
        trace_fits: false,
    }
}

pub fn run(kind: DesignKind, spec: FactorModelSpec, mode: BetaMode, seed: u64) -> ExperimentResult {
    let cfg = design(kind, &spec, mode, seed ^ 0x9e37_79b9);
    let (mut src, _) = generate_instance(spec, seed).unwrap();
    run_experiment(&cfg, &mut src, Some(seed)).unwrap()
}

/// SCTS history on a small instance with exploration scale 0.1.
pub fn scts_history(sigma: f64, tau: f64, seed: u64) -> ExperimentResult {
    run(DesignKind::Scts, small_spec(sigma, tau, seed), BetaMode::Scaled(0.1), seed)
}
