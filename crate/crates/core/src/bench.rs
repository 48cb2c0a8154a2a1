//! Benchmark harness: instance ensembles, head-to-head design comparisons,
//! re-randomization coverage/power tables and their CSV/JSON emission.

use std::borrow::Cow;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SctsError};
use crate::estimation::{estimate_diff_in_means, estimate_sc, estimate_scts, fit_sc_weights, threshold_ridge};
use crate::inference::{RerandomizationConfig, Rerandomizer};
use crate::latent::FactorPath;
use crate::panel::{
    generate_instance, ingest_panel_csv, make_semi_synthetic, max_row_norm, rank_r_residual_variance,
    FactorModelSpec, OutcomeSource, PanelData, PanelLayout,
};
use crate::policy::{
    elliptical_potential_of_run, run_experiment_with_path, DesignConfig, DesignKind, ExperimentResult, SCHEMA_VERSION,
};
use crate::ridge::{elliptical_potential_bound, BetaMode, BetaSchedule, DEFAULT_RHO};
use crate::seed::{derive_seed, SeedPart};

/// Multiplier on the theoretical β_t used by default in benchmarks. Chosen
/// by pilot runs at desk scale on seeds disjoint from the test suite.
pub const DEFAULT_BETA_SCALE: f64 = 0.002;
pub const DEFAULT_INFERENCE_BETA_SCALE: f64 = 0.1;
pub const OUTPUT_DIR_ENV: &str = "SCTS_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "scts-output";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Synthetic,
    SemiSynthetic,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Synthetic => "synthetic",
            Scenario::SemiSynthetic => "semi_synthetic",
        }
    }
}

/// Gaussian factor-model ensemble; defaults are the desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub n: usize,
    pub r: usize,
    pub t0: usize,
    pub t: usize,
    pub sigma: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            n: 200,
            r: 10,
            t0: 200,
            t: 200,
            sigma: 1.0,
        }
    }
}

/// Real panel with an injected effect. `tau_values` are read in units of the
/// estimated noise level σ̂ (SNR).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemiSyntheticSection {
    pub data_path: PathBuf,
    #[serde(default)]
    pub layout: PanelLayout,
    pub r: usize,
    /// Stand-in for ‖λ*‖ + |τ*| in β_t; defaults to √r + 1.
    #[serde(default)]
    pub lambda_bound: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoverageMethod {
    /// Coverage of τ* ⟺ H_{τ*} is not rejected.
    #[default]
    NullTest,
    /// Coverage of τ* ⟺ τ* lies in the hull of the inverted grid.
    CiHull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub k: usize,
    pub alpha: f64,
    pub snr: Vec<f64>,
    /// Defaults to the benchmark's `instances`.
    pub instances: Option<usize>,
    pub coverage: CoverageMethod,
    pub two_sided: bool,
    /// Exploration schedule of the SCTS histories. Kept separate from the
    /// regret benchmark's: a small scale commits early and leaves replays
    /// with nothing to re-randomize.
    pub beta_mode: BetaMode,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            k: 100,
            alpha: 0.1,
            snr: vec![0.01, 0.1, 1.0],
            instances: None,
            coverage: CoverageMethod::NullTest,
            two_sided: false,
            beta_mode: BetaMode::Scaled(DEFAULT_INFERENCE_BETA_SCALE),
        }
    }
}

fn default_beta() -> BetaMode {
    BetaMode::Scaled(DEFAULT_BETA_SCALE)
}
fn default_rho() -> f64 {
    DEFAULT_RHO
}
fn default_refresh() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub scenario: Scenario,
    pub designs: Vec<DesignKind>,
    pub instances: usize,
    #[serde(default)]
    pub base_seed: u64,
    pub tau_values: Vec<f64>,
    #[serde(default = "default_beta")]
    pub beta_mode: BetaMode,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_refresh")]
    pub refresh_every: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSection>,
    #[serde(default)]
    pub semi_synthetic: Option<SemiSyntheticSection>,
    #[serde(default)]
    pub inference: Option<InferenceSection>,
}

impl BenchmarkConfig {
    /// Desk-scale synthetic benchmark with every design.
    pub fn desk_scale() -> Self {
        Self {
            scenario: Scenario::Synthetic,
            designs: vec![DesignKind::Scts, DesignKind::Ucb, DesignKind::Fixed, DesignKind::Switchback],
            instances: 30,
            base_seed: 0,
            tau_values: vec![1.0, -1.0],
            beta_mode: default_beta(),
            rho: DEFAULT_RHO,
            refresh_every: 1,
            output_dir: None,
            synthetic: Some(SyntheticSection::default()),
            semi_synthetic: None,
            inference: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| SctsError::Config(format!("benchmark config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| SctsError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SctsError::Config(m));
        if self.instances == 0 {
            return bad("instances must be at least 1".into());
        }
        if self.designs.is_empty() {
            return bad("designs must not be empty".into());
        }
        if self.tau_values.is_empty() {
            return bad("tau_values must not be empty".into());
        }
        if let Some(t) = self.tau_values.iter().find(|t| !t.is_finite() || **t == 0.0) {
            return bad(format!("tau values must be finite and non-zero, got {t}"));
        }
        if !(self.rho > 0.0) {
            return bad(format!("rho must be positive, got {}", self.rho));
        }
        if self.refresh_every == 0 {
            return bad("refresh_every must be at least 1".into());
        }
        if let BetaMode::Scaled(c) = self.beta_mode {
            if !(c > 0.0) {
                return bad(format!("beta scale must be positive, got {c}"));
            }
        }
        match self.scenario {
            Scenario::Synthetic => {
                let s = self.synthetic.as_ref().ok_or_else(|| SctsError::Config("missing [synthetic] section".into()))?;
                if s.n == 0 || s.r == 0 || s.t == 0 || s.r > s.n {
                    return bad("synthetic section needs n ≥ r ≥ 1 and t ≥ 1".into());
                }
                if !(s.sigma >= 0.0) {
                    return bad("sigma must be non-negative".into());
                }
            }
            Scenario::SemiSynthetic => {
                let s = self
                    .semi_synthetic
                    .as_ref()
                    .ok_or_else(|| SctsError::Config("missing [semi_synthetic] section".into()))?;
                if s.r == 0 {
                    return bad("semi_synthetic.r must be at least 1".into());
                }
            }
        }
        if let Some(inf) = &self.inference {
            if inf.snr.is_empty() {
                return bad("inference.snr must not be empty".into());
            }
            RerandomizationConfig {
                k: inf.k,
                alpha: inf.alpha,
                grid: None,
                base_seed: 0,
                two_sided: inf.two_sided,
            }
            .validate()?;
            if let BetaMode::Scaled(c) = inf.beta_mode {
                if !(c > 0.0) {
                    return bad(format!("inference beta scale must be positive, got {c}"));
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the configuration (output directory excluded).
    pub fn hash(&self) -> String {
        let mut copy = self.clone();
        copy.output_dir = None;
        let text = serde_json::to_string(&copy).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `$SCTS_OUTPUT_DIR`, else `output_dir`, else `scts-output`.
    pub fn resolve_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self
                .output_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR)),
        }
    }

    fn rank(&self) -> usize {
        match self.scenario {
            Scenario::Synthetic => self.synthetic.as_ref().map_or(1, |s| s.r),
            Scenario::SemiSynthetic => self.semi_synthetic.as_ref().map_or(1, |s| s.r),
        }
    }
}

/// A real panel loaded once and shared by every semi-synthetic instance.
struct SemiData {
    observations: DMatrix<f64>,
    t0: usize,
    sigma_hat: f64,
    lambda_bound: f64,
    /// Unit order, a seeded permutation of the rows.
    units: Vec<usize>,
}

impl SemiData {
    fn load(section: &SemiSyntheticSection, base_seed: u64) -> Result<Self> {
        if !section.data_path.exists() {
            return Err(SctsError::Data(format!("data file {} not found", section.data_path.display())));
        }
        let (observations, _) = ingest_panel_csv(&section.data_path, &section.layout)?;
        let (rows, cols) = observations.shape();
        if rows < 2 || cols < 2 {
            return Err(SctsError::Data("panel needs at least two units and two epochs".into()));
        }
        let t0 = if section.layout.t0 == 0 { cols / 2 } else { section.layout.t0 };
        if t0 >= cols {
            return Err(SctsError::Data(format!("T0 = {t0} leaves no treatment epochs")));
        }
        let r = section.r.min(rows - 1);
        let sigma_hat = rank_r_residual_variance(&observations, r).sqrt();
        let mut units: Vec<usize> = (0..rows).collect();
        let mut keyed: Vec<(u64, usize)> = units
            .iter()
            .map(|&u| (derive_seed(base_seed, &[SeedPart::Label("unit-order"), SeedPart::from(u)]), u))
            .collect();
        keyed.sort_unstable();
        units = keyed.into_iter().map(|(_, u)| u).collect();
        Ok(Self {
            observations,
            t0,
            sigma_hat,
            lambda_bound: section.lambda_bound.unwrap_or((section.r as f64).sqrt() + 1.0),
            units,
        })
    }
}

/// Everything needed to rebuild one problem instance.
enum InstanceModel {
    Synthetic { spec: FactorModelSpec, noise_seed: u64 },
    Semi { unit: usize },
}

struct Instance<'d> {
    model: InstanceModel,
    tau_star: f64,
    semi: Option<&'d SemiData>,
}

impl Instance<'_> {
    fn source(&self) -> Result<Box<dyn OutcomeSource + '_>> {
        match &self.model {
            InstanceModel::Synthetic { spec, noise_seed } => {
                let mut spec = spec.clone();
                spec.tau_star = self.tau_star;
                Ok(Box::new(generate_instance(spec, *noise_seed)?.0))
            }
            InstanceModel::Semi { unit } => {
                let data = self.semi.expect("semi data");
                Ok(Box::new(make_semi_synthetic(&data.observations, *unit, self.tau_star, data.t0)?))
            }
        }
    }

    /// Factor path of the (action-independent) donor panel.
    fn factor_path(&self, r: usize) -> Result<FactorPath> {
        let mut source = self.source()?;
        let mut panel = PanelData::new(source.n_donors(), source.t0());
        for _ in 0..source.t0() + source.horizon() {
            panel.push(source.next_epoch(0)?, 0)?;
        }
        Ok(FactorPath::from_panel(&panel, r))
    }

    fn beta(&self, path: &FactorPath, r: usize, mode: BetaMode) -> Result<BetaSchedule> {
        match &self.model {
            InstanceModel::Synthetic { spec, .. } => {
                let canonical = spec.canonical()?;
                Ok(BetaSchedule {
                    sigma: spec.sigma,
                    context_bound: canonical.factor_norm_bound(),
                    r,
                    n: spec.n,
                    horizon: spec.t,
                    lambda_norm_plus_tau: canonical.lambda_star.norm() + self.tau_star.abs(),
                    mode,
                })
            }
            InstanceModel::Semi { .. } => {
                let data = self.semi.expect("semi data");
                let (rows, cols) = data.observations.shape();
                Ok(BetaSchedule {
                    sigma: data.sigma_hat,
                    context_bound: max_row_norm(&path.at(data.t0).0.z_hat),
                    r,
                    n: rows - 1,
                    horizon: cols - data.t0,
                    lambda_norm_plus_tau: data.lambda_bound,
                    mode,
                })
            }
        }
    }

    /// Canonical true factors over the treatment epochs (synthetic only).
    fn true_treatment_factors(&self) -> Result<Option<DMatrix<f64>>> {
        match &self.model {
            InstanceModel::Synthetic { spec, .. } => {
                let canonical = spec.canonical()?;
                Ok(Some(canonical.factors.rows(spec.t0, spec.t).into_owned()))
            }
            InstanceModel::Semi { .. } => Ok(None),
        }
    }
}

fn synthetic_model(section: &SyntheticSection, instance_seed: u64) -> Result<InstanceModel> {
    let spec = FactorModelSpec::gaussian(
        section.n,
        section.r,
        section.t0,
        section.t,
        section.sigma,
        0.0,
        derive_seed(instance_seed, &[SeedPart::Label("model")]),
    )?;
    Ok(InstanceModel::Synthetic {
        spec,
        noise_seed: derive_seed(instance_seed, &[SeedPart::Label("noise")]),
    })
}

/// One (design, τ*, instance) experiment, condensed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub design: DesignKind,
    pub tau_star: f64,
    pub instance: usize,
    pub instance_seed: u64,
    pub sampler_seed: u64,
    pub normalized_regret: f64,
    pub suboptimal_count: usize,
    /// The design's reported effect estimate (see `estimator`).
    pub estimate: f64,
    pub estimator: String,
    pub m_size: usize,
    pub sign_correct: bool,
    /// SC-based counterpart: τ̃^SC thresholded for adaptive designs, vanilla
    /// SC for the fixed design.
    pub sc_estimate: Option<f64>,
    pub diff_in_means: Option<f64>,
    pub epl_total: Option<f64>,
    pub epl_bound: Option<f64>,
    /// Cumulative suboptimal pulls after each treatment epoch.
    pub cumulative_suboptimal: Vec<u32>,
    /// Effect estimate after each treatment epoch.
    pub estimate_path: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub design: DesignKind,
    pub tau_star: f64,
    pub instances: usize,
    pub normalized_regret_mean: f64,
    pub rmse_relative: f64,
    pub sign_accuracy: f64,
    pub estimator: String,
    pub note: Option<String>,
}

/// Plot-ready series: regret_t/(t|τ*|) and rmse_t/|τ*| for t = 1..T.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub design: DesignKind,
    pub tau_star: f64,
    pub regret: Vec<f64>,
    pub rmse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: BenchmarkConfig,
    pub rows: Vec<SummaryRow>,
    pub series: Vec<Series>,
    pub runs: Vec<RunRecord>,
}

fn instance_seed(cfg: &BenchmarkConfig, tau: f64, index: usize) -> u64 {
    derive_seed(
        cfg.base_seed,
        &[
            SeedPart::Label(cfg.scenario.as_str()),
            SeedPart::Float(tau),
            SeedPart::from(index),
        ],
    )
}

fn sampler_seed(instance_seed: u64, design: DesignKind) -> u64 {
    derive_seed(instance_seed, &[SeedPart::Label("sampler"), SeedPart::Label(design.as_str())])
}

#[allow(clippy::too_many_arguments)]
fn run_design(
    cfg: &BenchmarkConfig,
    instance: &Instance<'_>,
    path: &FactorPath,
    beta: BetaSchedule,
    design: DesignKind,
    index: usize,
    seed: u64,
    true_factors: Option<&DMatrix<f64>>,
) -> Result<RunRecord> {
    let r = beta.r;
    let config = DesignConfig {
        kind: design,
        r,
        rho: cfg.rho,
        beta,
        sampler_seed: sampler_seed(seed, design),
        refresh_every: cfg.refresh_every,
        trace_fits: true,
    };
    let mut source = instance.source()?;
    let result = run_experiment_with_path(&config, source.as_mut(), Some(seed), Some(path))?;
    let tau = instance.tau_star;
    let panel = &result.panel;
    let horizon = panel.treatment_epochs();
    let t0 = panel.t0();
    let regret = result.regret.clone().expect("synthetic sources know τ*");
    let final_tau_hat = result.final_fit.as_ref().expect("final fit").tau_hat;
    let weights = if t0 > 0 {
        Some(fit_sc_weights(&panel.donor_pre(), panel.unit_pre())?)
    } else {
        None
    };
    let semi = matches!(instance.model, InstanceModel::Semi { .. });

    let mut cumulative_suboptimal = Vec::with_capacity(horizon);
    let optimal = u8::from(tau >= 0.0);
    let mut count = 0u32;
    for &a in panel.actions_treatment() {
        count += u32::from(a != optimal);
        cumulative_suboptimal.push(count);
    }
    // τ̂ after t observed treatment epochs: the fit that preceded decision t.
    let ridge_path: Vec<f64> = (1..=horizon)
        .map(|t| {
            if t < horizon {
                result.trace[t].tau_hat.unwrap_or(0.0)
            } else {
                final_tau_hat
            }
        })
        .collect();

    let (estimate, estimator, thresholded, sc_estimate, estimate_path) = match design {
        DesignKind::Scts | DesignKind::Ucb => {
            let e = threshold_ridge(final_tau_hat, panel, horizon);
            let sc = match &weights {
                Some(w) => Some(estimate_scts(panel, w, horizon)?.value),
                None => None,
            };
            (e.value, "ridge_thresholded", true, sc, ridge_path)
        }
        DesignKind::Fixed if !semi && weights.is_some() => {
            let w = weights.as_ref().expect("weights");
            let e = estimate_sc(panel, w)?;
            let mut running = Vec::with_capacity(horizon);
            let mut acc = 0.0;
            for (t, k) in (t0..t0 + horizon).enumerate() {
                acc += panel.unit()[k] - w.synthetic(panel.donor_column(k));
                running.push(acc / (t + 1) as f64);
            }
            (e.value, "sc", false, Some(e.value), running)
        }
        DesignKind::Fixed => (final_tau_hat, "pca_ridge", false, None, ridge_path),
        DesignKind::Switchback => (final_tau_hat, "ridge", false, None, ridge_path),
    };
    let m_size = panel.actions_treatment().iter().filter(|&&a| a == 1).count();
    let sign_correct = if thresholded {
        (estimate != 0.0) == (tau > 0.0)
    } else {
        (estimate > 0.0) == (tau > 0.0)
    };
    let diff_in_means = if design == DesignKind::Switchback {
        estimate_diff_in_means(panel).ok().map(|e| e.value)
    } else {
        None
    };
    let (epl_total, epl_bound) = match (design, true_factors) {
        (DesignKind::Scts, Some(z)) => {
            let (total, max_norm) = elliptical_potential_of_run(panel.actions_treatment(), z, cfg.rho);
            (
                Some(total),
                Some(elliptical_potential_bound(max_norm, cfg.rho, r + 1, horizon)),
            )
        }
        _ => (None, None),
    };
    Ok(RunRecord {
        design,
        tau_star: tau,
        instance: index,
        instance_seed: seed,
        sampler_seed: config.sampler_seed,
        normalized_regret: regret.normalized(),
        suboptimal_count: regret.suboptimal_count,
        estimate,
        estimator: estimator.to_string(),
        m_size,
        sign_correct,
        sc_estimate,
        diff_in_means,
        epl_total,
        epl_bound,
        cumulative_suboptimal,
        estimate_path,
    })
}

fn load_semi(cfg: &BenchmarkConfig) -> Result<Option<SemiData>> {
    match cfg.scenario {
        Scenario::SemiSynthetic => Ok(Some(SemiData::load(
            cfg.semi_synthetic.as_ref().expect("validated"),
            cfg.base_seed,
        )?)),
        Scenario::Synthetic => Ok(None),
    }
}

/// Instance `index` at τ value `tau` with the benchmark's seeding.
fn build_instance<'d>(
    cfg: &BenchmarkConfig,
    semi: Option<&'d SemiData>,
    tau: f64,
    index: usize,
) -> Result<(Instance<'d>, u64)> {
    let seed = instance_seed(cfg, tau, index);
    let (model, tau_star) = match cfg.scenario {
        Scenario::Synthetic => (synthetic_model(cfg.synthetic.as_ref().expect("validated"), seed)?, tau),
        Scenario::SemiSynthetic => {
            let data = semi.expect("loaded");
            let unit = data.units[index % data.units.len()];
            (InstanceModel::Semi { unit }, tau * data.sigma_hat)
        }
    };
    Ok((Instance { model, tau_star, semi }, seed))
}

/// One design on one benchmark instance, with the same seeds `run_benchmark`
/// would use. The full history is returned for later inference.
pub fn simulate(cfg: &BenchmarkConfig, design: DesignKind, tau: f64, index: usize) -> Result<ExperimentResult> {
    cfg.validate()?;
    let semi = load_semi(cfg)?;
    let r = cfg.rank();
    let (instance, seed) = build_instance(cfg, semi.as_ref(), tau, index)?;
    let path = instance.factor_path(r)?;
    let beta = instance.beta(&path, r, cfg.beta_mode)?;
    let config = DesignConfig {
        kind: design,
        r,
        rho: cfg.rho,
        beta,
        sampler_seed: sampler_seed(seed, design),
        refresh_every: cfg.refresh_every,
        trace_fits: false,
    };
    let mut source = instance.source()?;
    run_experiment_with_path(&config, source.as_mut(), Some(seed), Some(&path))
}

/// Runs every design on every (τ*, instance) pair. Instances are shared by
/// designs; sampler seeds differ per design.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let semi = load_semi(cfg)?;
    let r = cfg.rank();
    let jobs: Vec<(f64, usize)> = cfg
        .tau_values
        .iter()
        .flat_map(|&tau| (0..cfg.instances).map(move |i| (tau, i)))
        .collect();
    let per_job: Vec<Vec<RunRecord>> = jobs
        .par_iter()
        .map(|&(tau, index)| {
            let (instance, seed) = build_instance(cfg, semi.as_ref(), tau, index)?;
            let path = instance.factor_path(r)?;
            let beta = instance.beta(&path, r, cfg.beta_mode)?;
            let truth = instance.true_treatment_factors()?;
            cfg.designs
                .iter()
                .map(|&d| run_design(cfg, &instance, &path, beta, d, index, seed, truth.as_ref()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    // Jobs are (τ, instance)-ordered; regroup by design in configured order.
    let mut runs: Vec<RunRecord> = Vec::with_capacity(per_job.len() * cfg.designs.len());
    for d in 0..cfg.designs.len() {
        runs.extend(per_job.iter().map(|job| job[d].clone()));
    }
    let (rows, series) = aggregate(&runs, cfg.scenario);
    Ok(BenchmarkReport {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        rows,
        series,
        runs,
    })
}

/// Recomputes summary rows and series from run records alone.
pub fn aggregate(runs: &[RunRecord], scenario: Scenario) -> (Vec<SummaryRow>, Vec<Series>) {
    let mut groups: Vec<((DesignKind, u64), Vec<&RunRecord>)> = Vec::new();
    for run in runs {
        let key = (run.design, run.tau_star.to_bits());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(run),
            None => groups.push((key, vec![run])),
        }
    }
    let mut rows = Vec::with_capacity(groups.len());
    let mut series = Vec::with_capacity(groups.len());
    for ((design, _), group) in &groups {
        let tau = group[0].tau_star;
        let count = group.len() as f64;
        let regret = group.iter().map(|r| r.normalized_regret).sum::<f64>() / count;
        let mse = group.iter().map(|r| (r.estimate - tau).powi(2)).sum::<f64>() / count;
        let sign = group.iter().filter(|r| r.sign_correct).count() as f64 / count;
        let estimator = group[0].estimator.clone();
        let note = (scenario == Scenario::SemiSynthetic && *design == DesignKind::Fixed)
            .then(|| "pca+ridge variant, not comparable to robust-SC baselines".to_string());
        rows.push(SummaryRow {
            design: *design,
            tau_star: tau,
            instances: group.len(),
            normalized_regret_mean: regret,
            rmse_relative: mse.sqrt() / tau.abs(),
            sign_accuracy: sign,
            estimator,
            note,
        });
        let horizon = group.iter().map(|r| r.cumulative_suboptimal.len()).min().unwrap_or(0);
        let regret_series = (0..horizon)
            .map(|t| group.iter().map(|r| f64::from(r.cumulative_suboptimal[t])).sum::<f64>() / (count * (t + 1) as f64))
            .collect();
        let rmse_series = (0..horizon)
            .map(|t| {
                let mse = group.iter().map(|r| (r.estimate_path[t] - tau).powi(2)).sum::<f64>() / count;
                mse.sqrt() / tau.abs()
            })
            .collect();
        series.push(Series {
            design: *design,
            tau_star: tau,
            regret: regret_series,
            rmse: rmse_series,
        });
    }
    (rows, series)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> SctsError {
    SctsError::Io(std::io::Error::other(e))
}

/// Writes summary.csv, runs.csv, report.json and the series files.
pub fn write_report(report: &BenchmarkReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let summary = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary).map_err(csv_err)?;
    w.write_record([
        "schema_version",
        "config_hash",
        "design",
        "tau_star",
        "instances",
        "normalized_regret_mean",
        "rmse_relative",
        "sign_accuracy",
        "estimator",
        "note",
    ])
    .map_err(csv_err)?;
    for row in &report.rows {
        w.write_record([
            report.schema_version.to_string(),
            report.config_hash.clone(),
            row.design.as_str().to_string(),
            row.tau_star.to_string(),
            row.instances.to_string(),
            row.normalized_regret_mean.to_string(),
            row.rmse_relative.to_string(),
            row.sign_accuracy.to_string(),
            row.estimator.clone(),
            row.note.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    written.push(summary);

    let runs = dir.join("runs.csv");
    let mut w = csv::Writer::from_path(&runs).map_err(csv_err)?;
    w.write_record([
        "config_hash",
        "design",
        "tau_star",
        "instance",
        "instance_seed",
        "sampler_seed",
        "normalized_regret",
        "suboptimal_count",
        "estimate",
        "estimator",
        "m_size",
        "sign_correct",
        "sc_estimate",
        "diff_in_means",
        "epl_total",
        "epl_bound",
    ])
    .map_err(csv_err)?;
    for run in &report.runs {
        w.write_record([
            report.config_hash.clone(),
            run.design.as_str().to_string(),
            run.tau_star.to_string(),
            run.instance.to_string(),
            run.instance_seed.to_string(),
            run.sampler_seed.to_string(),
            run.normalized_regret.to_string(),
            run.suboptimal_count.to_string(),
            run.estimate.to_string(),
            run.estimator.clone(),
            run.m_size.to_string(),
            run.sign_correct.to_string(),
            opt(run.sc_estimate),
            opt(run.diff_in_means),
            opt(run.epl_total),
            opt(run.epl_bound),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    written.push(runs);

    let json = dir.join("report.json");
    std::fs::write(&json, serde_json::to_string_pretty(report)?)?;
    written.push(json);

    written.extend(emit_series(report, &dir.join("series"))?);
    Ok(written)
}

/// One CSV per (design, τ*) with columns t, regret_norm, rmse_norm.
pub fn emit_series(report: &BenchmarkReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(report.series.len());
    for s in &report.series {
        let path = dir.join(format!("{}_tau_{}.csv", s.design.as_str(), s.tau_star));
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(["t", "regret_norm", "rmse_norm"]).map_err(csv_err)?;
        for (t, (reg, rmse)) in s.regret.iter().zip(&s.rmse).enumerate() {
            w.write_record([(t + 1).to_string(), reg.to_string(), rmse.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRow {
    pub snr: f64,
    pub tau_star: f64,
    pub instances: usize,
    pub k: usize,
    pub alpha: f64,
    pub coverage: f64,
    pub power: f64,
    /// Instances whose inverted set was empty (CI-hull method only).
    pub empty_sets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub coverage_method: CoverageMethod,
    pub rows: Vec<InferenceRow>,
    /// Per (snr, instance): (covered, rejected H₀).
    pub outcomes: Vec<Vec<(bool, bool)>>,
}

/// Coverage of τ* and power against H₀: τ = 0 of the re-randomization test
/// on SCTS histories, per SNR. Each instance's donor panel is shared across
/// SNR levels; τ* = SNR·σ.
pub fn run_inference_benchmark(cfg: &BenchmarkConfig) -> Result<InferenceReport> {
    cfg.validate()?;
    let section = cfg.inference.clone().unwrap_or_default();
    let instances = section.instances.unwrap_or(cfg.instances);
    let semi = load_semi(cfg)?;
    let sigma = match (&semi, cfg.synthetic.as_ref()) {
        (Some(data), _) => data.sigma_hat,
        (None, Some(s)) => s.sigma,
        (None, None) => unreachable!("validated"),
    };
    let r = cfg.rank();
    let per_instance: Vec<Vec<(bool, bool, bool)>> = (0..instances)
        .into_par_iter()
        .map(|index| {
            let seed = derive_seed(
                cfg.base_seed,
                &[
                    SeedPart::Label(cfg.scenario.as_str()),
                    SeedPart::Label("inference"),
                    SeedPart::from(index),
                ],
            );
            let model = |_: ()| -> Result<InstanceModel> {
                match cfg.scenario {
                    Scenario::Synthetic => synthetic_model(cfg.synthetic.as_ref().expect("validated"), seed),
                    Scenario::SemiSynthetic => {
                        let data = semi.as_ref().expect("loaded");
                        Ok(InstanceModel::Semi {
                            unit: data.units[index % data.units.len()],
                        })
                    }
                }
            };
            let base = Instance {
                model: model(())?,
                tau_star: 0.0,
                semi: semi.as_ref(),
            };
            let path = base.factor_path(r)?;
            section
                .snr
                .iter()
                .map(|&snr| {
                    let instance = Instance {
                        model: model(())?,
                        tau_star: snr * sigma,
                        semi: semi.as_ref(),
                    };
                    let beta = instance.beta(&path, r, section.beta_mode)?;
                    let design = DesignConfig {
                        kind: DesignKind::Scts,
                        r,
                        rho: cfg.rho,
                        beta,
                        sampler_seed: derive_seed(seed, &[SeedPart::Label("history"), SeedPart::Float(snr)]),
                        refresh_every: cfg.refresh_every,
                        trace_fits: false,
                    };
                    let mut source = instance.source()?;
                    let history = run_experiment_with_path(&design, source.as_mut(), Some(seed), Some(&path))?;
                    let rr = RerandomizationConfig {
                        k: section.k,
                        alpha: section.alpha,
                        grid: None,
                        base_seed: derive_seed(seed, &[SeedPart::Label("rerandomize"), SeedPart::Float(snr)]),
                        two_sided: section.two_sided,
                    };
                    inference_outcome(&history, &path, instance.tau_star, &rr, section.coverage)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(section.snr.len());
    let mut outcomes = Vec::with_capacity(section.snr.len());
    for (s, &snr) in section.snr.iter().enumerate() {
        let column: Vec<(bool, bool, bool)> = per_instance.iter().map(|v| v[s]).collect();
        let count = column.len() as f64;
        rows.push(InferenceRow {
            snr,
            tau_star: snr * sigma,
            instances: column.len(),
            k: section.k,
            alpha: section.alpha,
            coverage: column.iter().filter(|c| c.0).count() as f64 / count,
            power: column.iter().filter(|c| c.1).count() as f64 / count,
            empty_sets: column.iter().filter(|c| c.2).count(),
        });
        outcomes.push(column.iter().map(|c| (c.0, c.1)).collect());
    }
    Ok(InferenceReport {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        coverage_method: section.coverage,
        rows,
        outcomes,
    })
}

/// (τ* covered, H₀ rejected, inverted set empty) for one history.
fn inference_outcome(
    history: &ExperimentResult,
    path: &FactorPath,
    tau_star: f64,
    rr: &RerandomizationConfig,
    method: CoverageMethod,
) -> Result<(bool, bool, bool)> {
    let engine = Rerandomizer::with_path(history, Cow::Borrowed(path))?;
    let rejected_null = engine.test(0.0, rr)?.rejected;
    match method {
        CoverageMethod::NullTest => {
            let covered = !engine.test(tau_star, rr)?.rejected;
            Ok((covered, rejected_null, false))
        }
        CoverageMethod::CiHull => {
            let set = engine.invert(rr)?;
            Ok((set.contains_in_hull(tau_star), rejected_null, set.empty))
        }
    }
}

pub fn write_inference_report(report: &InferenceReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join("inference.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    w.write_record([
        "schema_version",
        "config_hash",
        "snr",
        "tau_star",
        "instances",
        "k",
        "alpha",
        "coverage",
        "power",
        "coverage_method",
        "empty_sets",
    ])
    .map_err(csv_err)?;
    let method = match report.coverage_method {
        CoverageMethod::NullTest => "null_test",
        CoverageMethod::CiHull => "ci_hull",
    };
    for row in &report.rows {
        w.write_record([
            report.schema_version.to_string(),
            report.config_hash.clone(),
            row.snr.to_string(),
            row.tau_star.to_string(),
            row.instances.to_string(),
            row.k.to_string(),
            row.alpha.to_string(),
            row.coverage.to_string(),
            row.power.to_string(),
            method.to_string(),
            row.empty_sets.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    let json_path = dir.join("inference.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(report)?)?;
    Ok(vec![csv_path, json_path])
}
