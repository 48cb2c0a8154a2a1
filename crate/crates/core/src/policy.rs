//! Experiment designs and the epoch loop.
//!
//! SCTS and the optimistic (UCB) variant refit the factor estimate and the
//! ridge regression after every epoch and act on (τ̂_t, σ̂_t, β_t); the fixed
//! and switchback designs ignore the data.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SctsError};
use crate::latent::{estimate_factors, FactorPath, FactorTracker, LatentEstimate};
use crate::panel::{Action, EpochObservation, OutcomeSource, PanelData};
use crate::ridge::{fit_ridge, fit_ridge_with_gram, residual_scale, BetaSchedule, RidgeFit};
use crate::seed::{rng_from_seed, Rng};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    Scts,
    Ucb,
    Fixed,
    Switchback,
}

impl DesignKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DesignKind::Scts => "scts",
            DesignKind::Ucb => "ucb",
            DesignKind::Fixed => "fixed",
            DesignKind::Switchback => "switchback",
        }
    }

    pub fn uses_fit(self) -> bool {
        matches!(self, DesignKind::Scts | DesignKind::Ucb)
    }
}

impl std::str::FromStr for DesignKind {
    type Err = SctsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scts" => Ok(DesignKind::Scts),
            "ucb" => Ok(DesignKind::Ucb),
            "fixed" | "sc" => Ok(DesignKind::Fixed),
            "switchback" => Ok(DesignKind::Switchback),
            other => Err(SctsError::Config(format!("unknown design {other:?}"))),
        }
    }
}

/// Static description of a design run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignConfig {
    pub kind: DesignKind,
    pub r: usize,
    pub rho: f64,
    pub beta: BetaSchedule,
    pub sampler_seed: u64,
    /// Recompute the SVD every `refresh_every` epochs; in between, new
    /// epochs are projected on the last left singular vectors.
    pub refresh_every: usize,
    /// Fit the ridge regression every epoch even for designs that do not
    /// need it, so τ̂_t can be traced.
    pub trace_fits: bool,
}

/// What a design did at one treatment epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub action: Action,
    pub tau_hat: Option<f64>,
    pub sigma_hat: Option<f64>,
    pub beta: Option<f64>,
    pub tau_tilde: Option<f64>,
}

/// Mutable state of a running design.
#[derive(Debug, Clone)]
pub struct PolicyState {
    pub config: DesignConfig,
    pub rng: Rng,
    pub current_fit: Option<RidgeFit>,
    pub latent: Option<LatentEstimate>,
}

impl PolicyState {
    pub fn new(config: DesignConfig) -> Self {
        Self {
            config,
            rng: rng_from_seed(config.sampler_seed),
            current_fit: None,
            latent: None,
        }
    }

    /// Chooses a_{t+1} given the fit over data up to treatment epoch `t`.
    pub fn decide(&mut self, fit: Option<&RidgeFit>, t: usize) -> StepRecord {
        let cfg = self.config;
        match cfg.kind {
            DesignKind::Fixed => StepRecord {
                action: 1,
                tau_hat: fit.map(|f| f.tau_hat),
                sigma_hat: fit.map(|f| f.sigma_hat),
                beta: None,
                tau_tilde: None,
            },
            DesignKind::Switchback => StepRecord {
                action: u8::from(self.rng.random_bool(0.5)),
                tau_hat: fit.map(|f| f.tau_hat),
                sigma_hat: fit.map(|f| f.sigma_hat),
                beta: None,
                tau_tilde: None,
            },
            DesignKind::Scts => {
                let fit = fit.expect("SCTS needs a ridge fit");
                let beta = cfg.beta.beta_t(t.max(1));
                let half = beta * fit.sigma_hat;
                let u: f64 = self.rng.random();
                let tau_tilde = fit.tau_hat + half * (2.0 * u - 1.0);
                StepRecord {
                    action: u8::from(tau_tilde >= 0.0),
                    tau_hat: Some(fit.tau_hat),
                    sigma_hat: Some(fit.sigma_hat),
                    beta: Some(beta),
                    tau_tilde: Some(tau_tilde),
                }
            }
            DesignKind::Ucb => {
                let fit = fit.expect("UCB needs a ridge fit");
                let beta = cfg.beta.beta_t(t.max(1));
                let ucb = fit.tau_hat + beta * fit.sigma_hat;
                StepRecord {
                    action: u8::from(ucb >= 0.0),
                    tau_hat: Some(fit.tau_hat),
                    sigma_hat: Some(fit.sigma_hat),
                    beta: Some(beta),
                    tau_tilde: None,
                }
            }
        }
    }

    /// Reference step: full SVD of every donor epoch in `panel`, ridge refit,
    /// then the design's decision for the next epoch.
    pub fn step(&mut self, panel: &PanelData) -> Result<StepRecord> {
        let m = panel.epochs();
        let t = panel.treatment_epochs();
        let fit = if self.config.kind.uses_fit() || self.config.trace_fits {
            let latent = estimate_factors(&panel.donor_matrix(m), self.config.r);
            let fit = fit_ridge(panel.unit(), panel.actions(), &latent.z_hat, self.config.rho)?;
            self.latent = Some(latent);
            self.current_fit = Some(fit);
            self.current_fit.as_ref()
        } else {
            None
        };
        let fit = fit.cloned();
        Ok(self.decide(fit.as_ref(), t))
    }
}

/// One SCTS step: a_{t+1} = 1 iff τ̃_t ≥ 0 with τ̃_t ~ Unif[τ̂_t ± β_t σ̂_t].
pub fn scts_step(state: &mut PolicyState, panel: &PanelData) -> Result<StepRecord> {
    if state.config.kind != DesignKind::Scts {
        return Err(SctsError::Config("scts_step called on a non-SCTS state".into()));
    }
    state.step(panel)
}

/// One optimistic step: a_{t+1} = 1 iff τ̂_t + β_t σ̂_t ≥ 0.
pub fn ucb_step(state: &mut PolicyState, panel: &PanelData) -> Result<StepRecord> {
    if state.config.kind != DesignKind::Ucb {
        return Err(SctsError::Config("ucb_step called on a non-UCB state".into()));
    }
    state.step(panel)
}

/// Per-epoch regret R_t = |τ*| 1{a_t ≠ a*}, with a* = 1 iff τ* ≥ 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretTrace {
    pub per_epoch: Vec<f64>,
    pub total: f64,
    pub suboptimal_count: usize,
}

impl RegretTrace {
    pub fn from_actions(tau_star: f64, actions: &[Action]) -> Self {
        let optimal = u8::from(tau_star >= 0.0);
        let per_epoch: Vec<f64> = actions
            .iter()
            .map(|&a| if a == optimal { 0.0 } else { tau_star.abs() })
            .collect();
        let suboptimal_count = actions.iter().filter(|&&a| a != optimal).count();
        Self {
            total: tau_star.abs() * suboptimal_count as f64,
            per_epoch,
            suboptimal_count,
        }
    }

    /// Fraction of epochs with the suboptimal action.
    pub fn normalized(&self) -> f64 {
        if self.per_epoch.is_empty() {
            0.0
        } else {
            self.suboptimal_count as f64 / self.per_epoch.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalFit {
    pub tau_hat: f64,
    pub sigma_hat: f64,
    pub lambda_hat: Vec<f64>,
    pub residual_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub instance: Option<u64>,
    pub sampler: u64,
}

/// Everything recorded by one run of a design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    pub design: DesignConfig,
    pub seeds: Seeds,
    pub tau_star: Option<f64>,
    pub panel: PanelData,
    pub regret: Option<RegretTrace>,
    pub trace: Vec<StepRecord>,
    /// M = {t ≥ 1 : a_t = 1}.
    pub treated_set: Vec<usize>,
    pub final_fit: Option<FinalFit>,
}

impl ExperimentResult {
    pub fn horizon(&self) -> usize {
        self.panel.treatment_epochs()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let result: Self = serde_json::from_str(text)?;
        if result.panel.n() == 0 {
            return Err(SctsError::MissingDonorPanel);
        }
        Ok(result)
    }
}

/// Where the engine gets Ẑ_t from.
enum Factors<'a> {
    Live {
        tracker: FactorTracker,
        stale: Option<DMatrix<f64>>,
    },
    Cached(&'a FactorPath),
}

impl Factors<'_> {
    fn push(&mut self, k: usize, column: &[f64]) -> Result<()> {
        match self {
            Factors::Live { tracker, .. } => {
                tracker.push_column(column);
                Ok(())
            }
            Factors::Cached(path) => {
                if path.matches_column(k, column) {
                    Ok(())
                } else {
                    Err(SctsError::Data(format!(
                        "donor column {k} differs from the precomputed factor path"
                    )))
                }
            }
        }
    }

    fn fit(
        &mut self,
        panel: &PanelData,
        rho: f64,
        refresh: bool,
    ) -> Result<(RidgeFit, Option<DMatrix<f64>>)> {
        let m = panel.epochs();
        match self {
            Factors::Cached(path) => {
                let (est, gram) = path.at(m);
                let fit = fit_ridge_with_gram(panel.unit(), panel.actions(), &est.z_hat, gram, rho)?;
                Ok((fit, None))
            }
            Factors::Live { tracker, stale } => {
                let z_hat = match (refresh, stale.as_ref()) {
                    (false, Some(u)) => {
                        let n = panel.n();
                        panel.donor_matrix(m).tr_mul(u) / (n as f64).sqrt()
                    }
                    _ => {
                        let est = tracker.estimate();
                        *stale = Some(est.u_hat.clone());
                        est.z_hat
                    }
                };
                let fit = fit_ridge(panel.unit(), panel.actions(), &z_hat, rho)?;
                Ok((fit, Some(z_hat)))
            }
        }
    }
}

/// Runs a design against an outcome source: T0 epochs with a = 0, then T
/// treatment epochs where each action depends only on earlier epochs.
pub fn run_experiment(
    design: &DesignConfig,
    source: &mut dyn OutcomeSource,
    instance_seed: Option<u64>,
) -> Result<ExperimentResult> {
    run_experiment_with_path(design, source, instance_seed, None)
}

/// As [`run_experiment`], reusing factor estimates precomputed from the same
/// donor panel (donors do not depend on actions, so every design and every
/// replay of an instance sees the same Ẑ_t).
pub fn run_experiment_with_path(
    design: &DesignConfig,
    source: &mut dyn OutcomeSource,
    instance_seed: Option<u64>,
    path: Option<&FactorPath>,
) -> Result<ExperimentResult> {
    let n = source.n_donors();
    let t0 = source.t0();
    let horizon = source.horizon();
    let r = design.r;
    if r == 0 {
        return Err(SctsError::Config("rank r must be at least 1".into()));
    }
    if design.refresh_every == 0 {
        return Err(SctsError::Config("refresh_every must be at least 1".into()));
    }
    let mut state = PolicyState::new(*design);
    let mut panel = PanelData::new(n, t0);
    let mut factors = match path {
        Some(p) => Factors::Cached(p),
        None => Factors::Live {
            tracker: FactorTracker::new(n, r),
            stale: None,
        },
    };
    let observe = |panel: &mut PanelData, factors: &mut Factors<'_>, obs: EpochObservation, a| {
        let k = panel.epochs();
        factors.push(k, &obs.donor_row)?;
        panel.push(obs, a)
    };
    for _ in 0..t0 {
        let obs = source.next_epoch(0)?;
        observe(&mut panel, &mut factors, obs, 0)?;
    }
    let needs_fit = design.kind.uses_fit() || design.trace_fits;
    let mut trace = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let fit = if needs_fit {
            let refresh = t % design.refresh_every == 0;
            Some(factors.fit(&panel, design.rho, refresh)?.0)
        } else {
            None
        };
        let record = state.decide(fit.as_ref(), t);
        let obs = source.next_epoch(record.action)?;
        observe(&mut panel, &mut factors, obs, record.action)?;
        trace.push(record);
    }
    let (fit, z_hat) = factors.fit(&panel, design.rho, true)?;
    let z_hat = match z_hat {
        Some(z) => z,
        None => path.expect("cached").at(panel.epochs()).0.z_hat.clone(),
    };
    let final_fit = FinalFit {
        tau_hat: fit.tau_hat,
        sigma_hat: fit.sigma_hat,
        lambda_hat: fit.lambda_hat.iter().copied().collect(),
        residual_scale: residual_scale(panel.unit(), panel.actions(), &z_hat, &fit),
    };
    let tau_star = source.tau_star();
    let regret = tau_star.map(|tau| RegretTrace::from_actions(tau, panel.actions_treatment()));
    Ok(ExperimentResult {
        schema_version: SCHEMA_VERSION,
        design: *design,
        seeds: Seeds {
            instance: instance_seed,
            sampler: design.sampler_seed,
        },
        tau_star,
        treated_set: panel.treated_set(),
        panel,
        regret,
        trace,
        final_fit: Some(final_fit),
    })
}

/// Replays a recorded panel under the sharp null "effect = τ": donors are
/// served verbatim and the unit outcome becomes y_hist + τ a − τ a_hist.
#[derive(Debug, Clone)]
pub struct CounterfactualReplay<'a> {
    history: &'a PanelData,
    tau_null: f64,
    epoch: usize,
}

impl<'a> CounterfactualReplay<'a> {
    pub fn new(history: &'a PanelData, tau_null: f64) -> Self {
        Self {
            history,
            tau_null,
            epoch: 0,
        }
    }
}

impl OutcomeSource for CounterfactualReplay<'_> {
    fn n_donors(&self) -> usize {
        self.history.n()
    }

    fn t0(&self) -> usize {
        self.history.t0()
    }

    fn horizon(&self) -> usize {
        self.history.treatment_epochs()
    }

    fn tau_star(&self) -> Option<f64> {
        None
    }

    fn next_epoch(&mut self, action: Action) -> Result<EpochObservation> {
        let k = self.epoch;
        if k >= self.history.epochs() {
            return Err(SctsError::Data("replay ran past the recorded history".into()));
        }
        self.epoch += 1;
        let a_hist = f64::from(self.history.actions()[k]);
        Ok(EpochObservation {
            donor_row: self.history.donor_column(k).to_vec(),
            unit_value: self.history.unit()[k] + self.tau_null * (f64::from(action) - a_hist),
        })
    }
}

/// Σ_t ‖x̄_t‖_{Ω̄_{t−1}⁻¹} over the treatment epochs, with x̄_t = [a_t, z̄_t]
/// built from the true factors, and the largest ‖x̄_t‖ seen.
pub fn elliptical_potential_of_run(
    actions: &[Action],
    true_factors_treatment: &DMatrix<f64>,
    rho: f64,
) -> (f64, f64) {
    let r = true_factors_treatment.ncols();
    let mut acc = crate::ridge::EllipticalPotential::new(r + 1, rho);
    for (t, &a) in actions.iter().enumerate() {
        let x = DVector::from_fn(r + 1, |j, _| {
            if j == 0 {
                f64::from(a)
            } else {
                true_factors_treatment[(t, j - 1)]
            }
        });
        acc.push(&x);
    }
    (acc.total, acc.max_norm)
}
