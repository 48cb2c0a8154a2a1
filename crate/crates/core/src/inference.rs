//! Re-randomization tests of sharp nulls H_τ and confidence sets by test
//! inversion.

use std::borrow::Cow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SctsError};
use crate::latent::FactorPath;
use crate::policy::{run_experiment_with_path, CounterfactualReplay, ExperimentResult};
use crate::ridge::{fit_ridge_with_gram, residual_scale};
use crate::seed::{derive_seed, SeedPart};

/// Evenly spaced inversion grid lo, lo + step, ... ≤ hi.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Grid {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || !(self.step > 0.0) || !self.step.is_finite() {
            return Err(SctsError::Config(format!(
                "grid needs lo < hi and step > 0, got ({}, {}, {})",
                self.lo, self.hi, self.step
            )));
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<f64> {
        let count = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| self.lo + i as f64 * self.step).collect()
    }

    /// τ̂_T ± 6·se with step se/4, where se = σ̂_T scaled by the residual
    /// standard deviation of the final fit.
    pub fn around(center: f64, se: f64) -> Self {
        Self {
            lo: center - 6.0 * se,
            hi: center + 6.0 * se,
            step: se / 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerandomizationConfig {
    /// Number of replays.
    pub k: usize,
    /// Significance level.
    pub alpha: f64,
    /// Inversion grid; `None` picks the default around the observed τ̂_T.
    pub grid: Option<Grid>,
    pub base_seed: u64,
    /// Use p₂ = 2·min(p, 1 − p) instead of the one-sided p-value.
    #[serde(default)]
    pub two_sided: bool,
}

impl Default for RerandomizationConfig {
    fn default() -> Self {
        Self {
            k: 100,
            alpha: 0.1,
            grid: None,
            base_seed: 0,
            two_sided: false,
        }
    }
}

impl RerandomizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(SctsError::Config("k must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(SctsError::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if let Some(g) = &self.grid {
            g.validate()?;
        }
        Ok(())
    }

    /// Sampler seed of replay `i`.
    pub fn replay_seed(&self, i: usize) -> u64 {
        derive_seed(self.base_seed, &[SeedPart::Label("replay"), SeedPart::from(i as u64)])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub tau_null: f64,
    pub statistic: f64,
    pub samples: Vec<f64>,
    pub p_value: f64,
    pub rejected: bool,
}

impl TestReport {
    /// p = 1 − #{samples < statistic}/k, rejected iff p < α.
    pub fn from_samples(tau_null: f64, statistic: f64, samples: Vec<f64>, alpha: f64, two_sided: bool) -> Self {
        let below = samples.iter().filter(|&&s| s < statistic).count();
        let p_one = (samples.len() - below) as f64 / samples.len() as f64;
        let p_value = if two_sided {
            (2.0 * p_one.min(1.0 - p_one)).min(1.0)
        } else {
            p_one
        };
        Self {
            tau_null,
            statistic,
            samples,
            p_value,
            rejected: p_value < alpha,
        }
    }

    /// Number of samples strictly below the statistic.
    pub fn rank(&self) -> usize {
        self.samples.iter().filter(|&&s| s < self.statistic).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSet {
    pub grid: Grid,
    pub alpha: f64,
    pub accepted: Vec<f64>,
    pub p_values: Vec<f64>,
    /// [min, max] of the accepted points.
    pub hull: Option<(f64, f64)>,
    /// Set when nothing on the grid was accepted.
    pub empty: bool,
}

impl ConfidenceSet {
    pub fn contains_in_hull(&self, tau: f64) -> bool {
        self.hull.is_some_and(|(lo, hi)| lo <= tau && tau <= hi)
    }
}

/// Re-randomization engine for one recorded experiment. The factor path of
/// the recorded donor panel is computed once and shared by every replay.
pub struct Rerandomizer<'a> {
    history: &'a ExperimentResult,
    path: Cow<'a, FactorPath>,
    statistic: f64,
    se: f64,
}

impl<'a> Rerandomizer<'a> {
    pub fn new(history: &'a ExperimentResult) -> Result<Self> {
        if history.panel.n() == 0 {
            return Err(SctsError::MissingDonorPanel);
        }
        let path = FactorPath::from_panel(&history.panel, history.design.r);
        Self::with_path(history, Cow::Owned(path))
    }

    pub fn with_path(history: &'a ExperimentResult, path: Cow<'a, FactorPath>) -> Result<Self> {
        let panel = &history.panel;
        if panel.n() == 0 {
            return Err(SctsError::MissingDonorPanel);
        }
        if panel.treatment_epochs() == 0 {
            return Err(SctsError::Data("history has no treatment epochs".into()));
        }
        let (est, gram) = path.at(panel.epochs());
        let fit = fit_ridge_with_gram(panel.unit(), panel.actions(), &est.z_hat, gram, history.design.rho)?;
        let scale = residual_scale(panel.unit(), panel.actions(), &est.z_hat, &fit);
        let se = if scale > 0.0 { scale * fit.sigma_hat } else { fit.sigma_hat };
        Ok(Self {
            history,
            path,
            statistic: fit.tau_hat,
            se,
        })
    }

    /// Observed τ̂_T.
    pub fn statistic(&self) -> f64 {
        self.statistic
    }

    pub fn default_grid(&self) -> Grid {
        Grid::around(self.statistic, self.se)
    }

    /// τ̂_T of replay `i` under H_{tau_null}.
    pub fn replay(&self, tau_null: f64, sampler_seed: u64) -> Result<f64> {
        let mut design = self.history.design;
        design.sampler_seed = sampler_seed;
        design.trace_fits = false;
        let mut source = CounterfactualReplay::new(&self.history.panel, tau_null);
        let run = run_experiment_with_path(&design, &mut source, None, Some(self.path.as_ref()))?;
        Ok(run.final_fit.expect("final fit").tau_hat)
    }

    pub fn test(&self, tau_null: f64, config: &RerandomizationConfig) -> Result<TestReport> {
        config.validate()?;
        let samples = (0..config.k)
            .into_par_iter()
            .map(|i| self.replay(tau_null, config.replay_seed(i)))
            .collect::<Result<Vec<f64>>>()?;
        Ok(TestReport::from_samples(
            tau_null,
            self.statistic,
            samples,
            config.alpha,
            config.two_sided,
        ))
    }

    pub fn invert(&self, config: &RerandomizationConfig) -> Result<ConfidenceSet> {
        config.validate()?;
        let grid = config.grid.unwrap_or_else(|| self.default_grid());
        grid.validate()?;
        let mut accepted = Vec::new();
        let mut p_values = Vec::new();
        for tau in grid.points() {
            let report = self.test(tau, config)?;
            p_values.push(report.p_value);
            if !report.rejected {
                accepted.push(tau);
            }
        }
        let hull = match (accepted.first(), accepted.last()) {
            (Some(&lo), Some(&hi)) => Some((lo, hi)),
            _ => None,
        };
        Ok(ConfidenceSet {
            grid,
            alpha: config.alpha,
            empty: accepted.is_empty(),
            accepted,
            p_values,
            hull,
        })
    }
}

/// Tests H_{tau_null} by replaying the recorded design on counterfactual
/// outcomes y_hist + τ a − τ a_hist with fresh sampler seeds.
pub fn rerandomize_test(
    history: &ExperimentResult,
    tau_null: f64,
    config: &RerandomizationConfig,
) -> Result<TestReport> {
    Rerandomizer::new(history)?.test(tau_null, config)
}

/// Grid points whose sharp null is not rejected.
pub fn invert_to_ci(history: &ExperimentResult, config: &RerandomizationConfig) -> Result<ConfidenceSet> {
    Rerandomizer::new(history)?.invert(config)
}
