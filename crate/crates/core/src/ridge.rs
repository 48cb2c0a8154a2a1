//! Ridge regression of experimental-unit outcomes on the action and the
//! estimated contexts, and the posterior-width schedule β_t.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SctsError};
use crate::latent::recovery_radius;
use crate::linalg::spd_solve_with_inverse;
use crate::panel::Action;

pub const DEFAULT_RHO: f64 = 1.0;

/// Solution of the regularized regression at one epoch.
///
/// Coordinate 0 of the design is the action, coordinates 1..=r the context.
#[derive(Debug, Clone)]
pub struct RidgeFit {
    pub tau_hat: f64,
    pub lambda_hat: DVector<f64>,
    /// Ω = ρI + Σ x xᵀ.
    pub omega: DMatrix<f64>,
    pub omega_inv: DMatrix<f64>,
    /// √(Ω⁻¹)₁₁.
    pub sigma_hat: f64,
    pub rho: f64,
}

impl RidgeFit {
    /// Fit with no observations: the ridge prior.
    pub fn prior(r: usize, rho: f64) -> Self {
        let d = r + 1;
        Self {
            tau_hat: 0.0,
            lambda_hat: DVector::zeros(r),
            omega: DMatrix::identity(d, d) * rho,
            omega_inv: DMatrix::identity(d, d) / rho,
            sigma_hat: 1.0 / rho.sqrt(),
            rho,
        }
    }

    pub fn theta(&self) -> DVector<f64> {
        let mut th = DVector::zeros(self.lambda_hat.len() + 1);
        th[0] = self.tau_hat;
        th.rows_mut(1, self.lambda_hat.len()).copy_from(&self.lambda_hat);
        th
    }
}

fn check_inputs(y0: &[f64], actions: &[Action], z_hat: &DMatrix<f64>, rho: f64) -> Result<()> {
    if y0.len() != actions.len() || y0.len() != z_hat.nrows() {
        return Err(SctsError::Dimension(format!(
            "ridge inputs disagree: {} outcomes, {} actions, {} context rows",
            y0.len(),
            actions.len(),
            z_hat.nrows()
        )));
    }
    if !(rho > 0.0) {
        return Err(SctsError::Config(format!("ridge penalty must be positive, got {rho}")));
    }
    Ok(())
}

/// Minimizes Σ_s (y⁰_s − τ a_s − ⟨λ, ẑ_s⟩)² + ρ(τ² + ‖λ‖²).
pub fn fit_ridge(y0: &[f64], actions: &[Action], z_hat: &DMatrix<f64>, rho: f64) -> Result<RidgeFit> {
    check_inputs(y0, actions, z_hat, rho)?;
    let gram = z_hat.tr_mul(z_hat);
    fit_ridge_with_gram(y0, actions, z_hat, &gram, rho)
}

/// Same as [`fit_ridge`] with ẐᵀẐ supplied by the caller.
pub fn fit_ridge_with_gram(
    y0: &[f64],
    actions: &[Action],
    z_hat: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    rho: f64,
) -> Result<RidgeFit> {
    check_inputs(y0, actions, z_hat, rho)?;
    let r = z_hat.ncols();
    let d = r + 1;
    let mut omega = DMatrix::identity(d, d) * rho;
    let mut rhs = DVector::zeros(d);
    let mut treated = 0.0;
    let mut a_y = 0.0;
    let mut a_z = DVector::<f64>::zeros(r);
    let mut z_y = DVector::<f64>::zeros(r);
    for (s, (&y, &a)) in y0.iter().zip(actions).enumerate() {
        let z = z_hat.row(s);
        for j in 0..r {
            z_y[j] += z[j] * y;
        }
        if a == 1 {
            treated += 1.0;
            a_y += y;
            for j in 0..r {
                a_z[j] += z[j];
            }
        }
    }
    omega[(0, 0)] += treated;
    for j in 0..r {
        omega[(0, j + 1)] += a_z[j];
        omega[(j + 1, 0)] += a_z[j];
        for k in 0..r {
            omega[(j + 1, k + 1)] += gram[(j, k)];
        }
    }
    rhs[0] = a_y;
    rhs.rows_mut(1, r).copy_from(&z_y);
    let (theta, omega_inv) = spd_solve_with_inverse(&omega, &rhs)
        .ok_or_else(|| SctsError::Data("precision matrix is not positive definite".into()))?;
    Ok(RidgeFit {
        tau_hat: theta[0],
        lambda_hat: theta.rows(1, r).into_owned(),
        sigma_hat: omega_inv[(0, 0)].max(0.0).sqrt(),
        omega,
        omega_inv,
        rho,
    })
}

/// Root-mean-square residual of a fit, with degrees of freedom corrected for
/// the r + 1 coefficients.
pub fn residual_scale(y0: &[f64], actions: &[Action], z_hat: &DMatrix<f64>, fit: &RidgeFit) -> f64 {
    let m = y0.len();
    if m == 0 {
        return 0.0;
    }
    let sse: f64 = (0..m)
        .map(|s| {
            let pred = fit.tau_hat * f64::from(actions[s]) + z_hat.row(s).dot(&fit.lambda_hat.transpose());
            (y0[s] - pred).powi(2)
        })
        .sum();
    let dof = m.saturating_sub(fit.lambda_hat.len() + 1).max(1);
    (sse / dof as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "scale", rename_all = "snake_case")]
pub enum BetaMode {
    Theoretical,
    Scaled(f64),
}

/// Expansion-factor schedule of the uniform approximate posterior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub sigma: f64,
    /// Bound B on ‖z̄_t‖.
    pub context_bound: f64,
    pub r: usize,
    pub n: usize,
    pub horizon: usize,
    /// ‖λ*‖ + |τ*| or a configured proxy.
    pub lambda_norm_plus_tau: f64,
    pub mode: BetaMode,
}

impl BetaSchedule {
    pub fn recovery_radius(&self) -> f64 {
        recovery_radius(self.sigma, self.n.max(1), self.horizon)
    }

    /// β_t = 2σ√(2(r+1)·log t·(r+1 + t(B+1+α))) + (‖λ*‖+|τ*|)(1+α), with
    /// log t floored at log 2 and t floored at 1.
    pub fn theoretical(&self, t: usize) -> f64 {
        let t = t.max(1) as f64;
        let d = (self.r + 1) as f64;
        let alpha = self.recovery_radius();
        let log_t = t.ln().max(std::f64::consts::LN_2);
        let inner = 2.0 * d * log_t * (d + t * (self.context_bound + 1.0 + alpha));
        2.0 * self.sigma * inner.sqrt() + self.lambda_norm_plus_tau * (1.0 + alpha)
    }

    pub fn beta_t(&self, t: usize) -> f64 {
        match self.mode {
            BetaMode::Theoretical => self.theoretical(t),
            BetaMode::Scaled(c) => c * self.theoretical(t),
        }
    }
}

/// Free-function form of [`BetaSchedule::beta_t`].
pub fn beta_t(schedule: &BetaSchedule, t: usize) -> f64 {
    schedule.beta_t(t)
}

/// √((B²/ρ)·d·T·log(1 + T B²/(dρ))), the elliptical-potential bound on
/// Σ_t ‖x_t‖_{Ω_{t−1}⁻¹}.
pub fn elliptical_potential_bound(context_bound: f64, rho: f64, d: usize, horizon: usize) -> f64 {
    if horizon == 0 {
        return 0.0;
    }
    let b2 = context_bound * context_bound;
    let t = horizon as f64;
    let d = d as f64;
    ((b2 / rho) * d * t * (1.0 + t * b2 / (d * rho)).ln()).sqrt()
}

/// Accumulates Σ_t ‖x_t‖_{Ω_{t−1}⁻¹} along a sequence of design vectors,
/// with Ω_0 = ρI.
#[derive(Debug, Clone)]
pub struct EllipticalPotential {
    omega: DMatrix<f64>,
    pub total: f64,
    pub max_norm: f64,
    pub steps: usize,
}

impl EllipticalPotential {
    pub fn new(d: usize, rho: f64) -> Self {
        Self {
            omega: DMatrix::identity(d, d) * rho,
            total: 0.0,
            max_norm: 0.0,
            steps: 0,
        }
    }

    pub fn push(&mut self, x: &DVector<f64>) {
        let chol = self.omega.clone().cholesky().expect("Ω is SPD");
        let w = chol.solve(x);
        self.total += x.dot(&w).max(0.0).sqrt();
        self.max_norm = self.max_norm.max(x.norm());
        self.omega.ger(1.0, x, x, 1.0);
        self.steps += 1;
    }
}
