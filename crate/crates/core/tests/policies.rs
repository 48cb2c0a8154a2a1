mod common;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use scts_core::latent::estimate_factors;
use scts_core::panel::{generate_instance, FactorModelSpec, OutcomeSource, PanelData};
use scts_core::policy::{run_experiment, DesignConfig, DesignKind, PolicyState, RegretTrace};
use scts_core::ridge::{fit_ridge, BetaMode, BetaSchedule, RidgeFit};
use scts_core::seed::rng_from_seed;

use common::{design, run, small_spec};

/// σ=0, τ*=−1, r=1, z̄=1, λ^i=1, λ⁰=2, no pre-treatment epochs.
fn failure_instance(horizon: usize) -> FactorModelSpec {
    FactorModelSpec::new(
        DMatrix::from_element(20, 1, 1.0),
        DMatrix::from_element(horizon, 1, 1.0),
        DVector::from_element(1, 2.0),
        0,
        0.0,
        -1.0,
    )
    .unwrap()
}

fn failure_design(kind: DesignKind, seed: u64) -> DesignConfig {
    DesignConfig {
        kind,
        r: 1,
        rho: 1.0,
        beta: BetaSchedule {
            sigma: 0.0,
            context_bound: 1.0,
            r: 1,
            n: 20,
            horizon: 500,
            lambda_norm_plus_tau: 3.0,
            mode: BetaMode::Theoretical,
        },
        sampler_seed: seed,
        refresh_every: 1,
        trace_fits: false,
    }
}

#[test]
fn scts_escapes_the_ucb_failure_instance() {
    let mut fractions = Vec::new();
    for seed in 0..10 {
        let (mut ucb_src, _) = generate_instance(failure_instance(500), 0).unwrap();
        let ucb = run_experiment(&failure_design(DesignKind::Ucb, seed), &mut ucb_src, None).unwrap();
        assert_eq!(ucb.regret.as_ref().unwrap().total, 500.0);

        let (mut src, _) = generate_instance(failure_instance(500), 0).unwrap();
        let scts = run_experiment(&failure_design(DesignKind::Scts, seed), &mut src, None).unwrap();
        let frac = scts.regret.as_ref().unwrap().suboptimal_count as f64 / 500.0;
        fractions.push(frac);
    }
    assert!(fractions.iter().all(|&f| f < 0.2), "{fractions:?}");
}

#[test]
fn uniform_draw_quartile_and_fair_coin() {
    let spec = small_spec(1.0, 0.0, 2);
    let mut state = PolicyState::new(design(DesignKind::Scts, &spec, BetaMode::Theoretical, 5));
    let mut fit = RidgeFit::prior(spec.r, 1.0);
    let draws = 10_000;
    let ones = (0..draws).filter(|_| state.decide(Some(&fit), 3).action == 1).count();
    assert!((ones as f64 / draws as f64 - 0.5).abs() <= 0.02, "{ones}");

    fit.tau_hat = 0.37;
    let hits = (0..draws)
        .filter(|_| {
            let rec = state.decide(Some(&fit), 3);
            rec.tau_tilde.unwrap() >= fit.tau_hat + rec.beta.unwrap() * fit.sigma_hat / 2.0
        })
        .count();
    assert!((hits as f64 / draws as f64 - 0.25).abs() <= 0.01, "{hits}");
}

#[test]
fn zero_width_interval_is_deterministic_and_ties_pick_treatment() {
    let spec = small_spec(0.0, 0.0, 3);
    let mut cfg = design(DesignKind::Scts, &spec, BetaMode::Scaled(1.0), 1);
    cfg.beta.lambda_norm_plus_tau = 0.0;
    let mut state = PolicyState::new(cfg);
    let mut fit = RidgeFit::prior(spec.r, 1.0);
    assert_eq!(cfg.beta.beta_t(4), 0.0);
    for tau in [0.5, 0.0] {
        fit.tau_hat = tau;
        assert!((0..100).all(|_| state.decide(Some(&fit), 4).action == 1));
    }
    fit.tau_hat = -1e-12;
    assert!((0..100).all(|_| state.decide(Some(&fit), 4).action == 0));
}

#[test]
fn first_action_without_pre_treatment_is_a_fair_coin() {
    let runs = 400;
    let ones: usize = (0..runs)
        .map(|seed| {
            let spec = FactorModelSpec::gaussian(10, 1, 0, 3, 1.0, 0.3, seed).unwrap();
            usize::from(run(DesignKind::Scts, spec, BetaMode::Theoretical, seed).panel.actions_treatment()[0])
        })
        .sum();
    // Binomial(400, 1/2): 4 standard deviations is 40.
    assert!((ones as i64 - 200).abs() <= 40, "{ones}");
}

#[test]
fn optimal_action_probability_is_at_least_a_quarter() {
    // Along SCTS trajectories with the theoretical schedule, the sampler's
    // probability of the optimal action given the current fit.
    let mut worst = 1.0f64;
    let mut total = 0.0;
    let mut steps = 0;
    for seed in 0..20 {
        for tau in [0.5, -0.5] {
            let spec = small_spec(1.0, tau, 100 + seed);
            let result = run(DesignKind::Scts, spec, BetaMode::Theoretical, 100 + seed);
            for rec in &result.trace {
                let (tau_hat, half) = (rec.tau_hat.unwrap(), rec.beta.unwrap() * rec.sigma_hat.unwrap());
                let p_one = ((tau_hat + half) / (2.0 * half)).clamp(0.0, 1.0);
                let p = if tau >= 0.0 { p_one } else { 1.0 - p_one };
                worst = worst.min(p);
                total += p;
                steps += 1;
            }
        }
    }
    assert!(worst >= 0.25 - 0.02, "min probability {worst}, mean {}", total / steps as f64);
}

#[test]
fn rotated_contexts_give_identical_actions() {
    for seed in 0..5u64 {
        let spec = small_spec(1.0, 0.4, 200 + seed);
        let r = spec.r;
        let cfg = design(DesignKind::Scts, &spec, BetaMode::Scaled(0.5), seed);
        let mut rng = rng_from_seed(300 + seed);
        let phi = DMatrix::from_fn(r, r, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q();
        let (mut src, _) = generate_instance(spec, seed).unwrap();
        let mut panel = PanelData::new(src.n_donors(), src.t0());
        for _ in 0..src.t0() {
            panel.push(src.next_epoch(0).unwrap(), 0).unwrap();
        }
        let (mut plain, mut rotated) = (PolicyState::new(cfg), PolicyState::new(cfg));
        for t in 0..src.horizon() {
            let z = estimate_factors(&panel.donor_matrix(panel.epochs()), r).z_hat;
            let f1 = fit_ridge(panel.unit(), panel.actions(), &z, 1.0).unwrap();
            let f2 = fit_ridge(panel.unit(), panel.actions(), &(&z * &phi), 1.0).unwrap();
            let a1 = plain.decide(Some(&f1), t).action;
            let a2 = rotated.decide(Some(&f2), t).action;
            assert_eq!(a1, a2, "seed {seed}, epoch {t}");
            panel.push(src.next_epoch(a1).unwrap(), a1).unwrap();
        }
    }
}

#[test]
fn baseline_designs_have_known_regret() {
    let mut switchback = Vec::new();
    for seed in 0..50 {
        let neg = run(DesignKind::Fixed, small_spec(1.0, -1.0, seed), BetaMode::Theoretical, seed);
        assert_eq!(neg.regret.as_ref().unwrap().normalized(), 1.0);
        let pos = run(DesignKind::Fixed, small_spec(1.0, 1.0, seed), BetaMode::Theoretical, seed);
        assert_eq!(pos.regret.as_ref().unwrap().normalized(), 0.0);
        let sb = run(DesignKind::Switchback, small_spec(1.0, -1.0, seed), BetaMode::Theoretical, seed);
        let trace = sb.regret.clone().unwrap();
        assert_eq!(trace, RegretTrace::from_actions(-1.0, sb.panel.actions_treatment()));
        assert_eq!(trace.total, trace.suboptimal_count as f64);
        switchback.push(trace.normalized());
    }
    let mean = switchback.iter().sum::<f64>() / switchback.len() as f64;
    assert!((mean - 0.5).abs() <= 0.05, "{mean}");
}

#[test]
fn actions_do_not_look_ahead() {
    // Same seeds, horizon cut short: the shared prefix of actions agrees.
    for seed in 0..5 {
        let full = small_spec(1.0, 0.3, 400 + seed);
        let mut short = full.clone();
        short.t = 25;
        short.factors = full.factors.rows(0, short.t0 + 25).into_owned();
        let mut cfg = design(DesignKind::Scts, &full, BetaMode::Scaled(0.5), seed);
        let a = run_with(&cfg, full, seed);
        cfg.beta.horizon = 40;
        let b = run_with(&cfg, short, seed);
        assert_eq!(&a[..25], &b[..]);
    }
}

fn run_with(cfg: &DesignConfig, spec: FactorModelSpec, seed: u64) -> Vec<u8> {
    let (mut src, _) = generate_instance(spec, seed).unwrap();
    run_experiment(cfg, &mut src, None).unwrap().panel.actions_treatment().to_vec()
}
