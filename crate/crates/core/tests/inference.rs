mod common;

use rand::Rng as _;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use scts_core::policy::DesignKind;
use scts_core::ridge::BetaMode;
use scts_core::inference::{invert_to_ci, rerandomize_test, Grid, RerandomizationConfig, Rerandomizer};
use scts_core::seed::rng_from_seed;
use scts_core::SctsError;

use common::scts_history;

fn config(k: usize, seed: u64) -> RerandomizationConfig {
    RerandomizationConfig {
        k,
        base_seed: seed,
        ..RerandomizationConfig::default()
    }
}

#[test]
fn identical_inputs_give_identical_reports() {
    let history = scts_history(1.0, 0.5, 3);
    let a = rerandomize_test(&history, 0.2, &config(30, 9)).unwrap();
    let b = rerandomize_test(&history, 0.2, &config(30, 9)).unwrap();
    assert_eq!(a, b);
    let c = rerandomize_test(&history, 0.2, &config(30, 10)).unwrap();
    assert_ne!(a.samples, c.samples);
    assert_eq!(a.samples.len(), 30);
    let below = a.samples.iter().filter(|&&s| s < a.statistic).count();
    assert_eq!(a.p_value, (30 - below) as f64 / 30.0);
}

#[test]
fn rank_is_uniform_under_the_true_null() {
    // History generated with effect exactly tau and replays under H_tau: the
    // statistic is exchangeable with the samples, so its rank (ties broken
    // uniformly) is uniform on {0..k}.
    let k = 19;
    let instances = 200;
    let mut tie_rng = rng_from_seed(77);
    for tau in [1.0, 0.05] {
        let mut counts = vec![0usize; k + 1];
        for i in 0..instances {
            let history = scts_history(1.0, tau, 10_000 + i);
            let report = rerandomize_test(&history, tau, &config(k, 20_000 + i)).unwrap();
            let below = report.rank();
            let ties = report.samples.iter().filter(|&&s| s == report.statistic).count();
            counts[below + tie_rng.random_range(0..=ties)] += 1;
        }
        let expected = instances as f64 / (k + 1) as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(k as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "tau={tau}: chi2={chi2:.2}, p={p:.4}, counts={counts:?}");
    }
}

#[test]
fn p_value_rises_as_the_null_moves_past_the_truth() {
    let history = scts_history(1.0, 1.0, 41);
    let engine = Rerandomizer::new(&history).unwrap();
    let grid = engine.default_grid();
    let rr = config(100, 5);
    let p: Vec<f64> = grid.points().iter().map(|&t| engine.test(t, &rr).unwrap().p_value).collect();
    let smooth: Vec<f64> = p.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for w in smooth.windows(2) {
        assert!(w[1] >= w[0] - 1e-12, "moving average decreased: {smooth:?}");
    }
    assert!(smooth[0] < 0.05, "{p:?}");
    assert!(*smooth.last().unwrap() > 0.95, "{p:?}");
}

fn noiseless_set(tau: f64, seed: u64, scale: f64, two_sided: bool) -> (f64, f64) {
    let spec = common::small_spec(0.0, tau, seed);
    let history = common::run(DesignKind::Scts, spec, BetaMode::Scaled(scale), seed);
    let rr = RerandomizationConfig {
        k: 50,
        grid: Some(Grid { lo: tau - 1.0, hi: tau + 1.0, step: NOISELESS_STEP }),
        two_sided,
        ..config(50, 6)
    };
    let set = invert_to_ci(&history, &rr).unwrap();
    assert!(!set.empty);
    set.hull.unwrap()
}

const NOISELESS_STEP: f64 = 0.05;

#[test]
fn noiseless_one_sided_set_starts_at_the_truth() {
    // The one-sided statistic only rejects nulls below the truth; above it
    // the set runs to the end of the grid.
    let tau = 0.8;
    for seed in [51, 52, 53] {
        let (lo, hi) = noiseless_set(tau, seed, 1.0, false);
        assert!((lo - tau).abs() <= NOISELESS_STEP + 1e-9, "seed {seed}: hull {lo}..{hi}");
        assert!((hi - (tau + 1.0)).abs() < 1e-9);
    }
}

#[test]
fn noiseless_two_sided_set_concentrates_with_wide_exploration() {
    let tau = 0.8;
    for seed in [51, 52, 53] {
        let (lo, hi) = noiseless_set(tau, seed, 5.0, true);
        assert!(lo >= tau - NOISELESS_STEP - 1e-9 && hi <= tau + NOISELESS_STEP + 1e-9, "seed {seed}: hull {lo}..{hi}");
    }
}

#[test]
fn coverage_is_stable_in_k() {
    let instances = 60;
    let coverage = |k: usize| {
        (0..instances)
            .filter(|&i| {
                let history = scts_history(1.0, 0.5, 30_000 + i);
                !rerandomize_test(&history, 0.5, &config(k, 40_000 + i)).unwrap().rejected
            })
            .count() as f64
            / instances as f64
    };
    let (c25, c100) = (coverage(25), coverage(100));
    assert!((c25 - c100).abs() < 0.05, "coverage {c25} at k=25 vs {c100} at k=100");
}

#[test]
fn alpha_one_rejects_unless_no_sample_is_below() {
    let history = scts_history(1.0, 1.0, 61);
    let rr = RerandomizationConfig {
        alpha: 1.0,
        ..config(40, 7)
    };
    for tau in [-2.0, 0.0, 1.0, 3.0] {
        let report = rerandomize_test(&history, tau, &rr).unwrap();
        assert_eq!(report.rejected, report.rank() > 0, "tau={tau} p={}", report.p_value);
    }
}

#[test]
fn history_without_donors_is_rejected() {
    let mut history = scts_history(1.0, 1.0, 71);
    history.panel = scts_core::panel::PanelData::new(0, history.panel.t0());
    assert!(matches!(
        rerandomize_test(&history, 0.0, &config(5, 0)),
        Err(SctsError::MissingDonorPanel)
    ));
    let json = history.to_json().unwrap();
    assert!(matches!(
        scts_core::policy::ExperimentResult::from_json(&json),
        Err(SctsError::MissingDonorPanel)
    ));
}

#[test]
fn invalid_configs_are_config_errors() {
    let history = scts_history(1.0, 1.0, 81);
    let bad_grid = RerandomizationConfig {
        grid: Some(Grid { lo: 1.0, hi: 0.0, step: 0.1 }),
        ..config(5, 0)
    };
    assert!(matches!(invert_to_ci(&history, &bad_grid), Err(SctsError::Config(_))));
    assert!(matches!(rerandomize_test(&history, 0.0, &config(0, 0)), Err(SctsError::Config(_))));
}
