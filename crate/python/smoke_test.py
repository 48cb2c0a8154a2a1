"""Smoke test for the `scts` extension module.

Build and install first, e.g.

    pip install maturin
    maturin develop --release -m crates/python/Cargo.toml

then run `python python/smoke_test.py`.
"""

import json
import math
import random

import scts

TINY = """
scenario = "synthetic"
designs = ["scts", "fixed", "switchback"]
instances = 2
base_seed = 11
tau_values = [1.0, -1.0]

[synthetic]
n = 30
r = 2
t0 = 20
t = 30
sigma = 0.5

[inference]
k = 10
snr = [1.0]
instances = 2
"""


def check_factors():
    ones = [[1.0] * 5 for _ in range(8)]
    z_hat, sv = scts.estimate_factors(ones, 1)
    assert all(abs(row[0] - 1.0) < 1e-12 for row in z_hat)
    assert abs(sv[0] - math.sqrt(40.0)) < 1e-12

    rng = random.Random(3)
    a = [[rng.gauss(0, 1) for _ in range(3)] for _ in range(12)]
    phi, residual = scts.procrustes_align(a, a)
    assert residual < 1e-10
    assert all(abs(phi[i][j] - (i == j)) < 1e-10 for i in range(3) for j in range(3))


def check_ridge_and_beta():
    for t in (1, 5, 40):
        fit = scts.fit_ridge([1.0] * t, [1] * t, [[1.0]] * t, rho=1.0)
        assert abs(fit["tau_hat"] - t / (1.0 + 2 * t)) < 1e-9
    args = dict(sigma=1.0, context_bound=2.0, r=3, n=50, horizon=100, lambda_norm_plus_tau=2.0)
    full = scts.beta_t(10, **args)
    assert abs(scts.beta_t(10, scale=0.1, **args) - 0.1 * full) < 1e-12
    assert scts.beta_t(20, **args) >= full


def check_weights():
    donors = [[1.0, 0.0, 2.0], [0.0, 1.0, -1.0], [3.0, 3.0, 0.5]]
    w = scts.fit_sc_weights(donors, donors[1])
    assert abs(sum(w) - 1.0) < 1e-10 and min(w) >= 0.0
    assert abs(w[1] - 1.0) < 1e-6
    try:
        scts.fit_sc_weights([[1.0, 2.0]], [1.0])
    except ValueError:
        pass
    else:
        raise AssertionError("length mismatch accepted")


def check_experiment():
    exp = scts.simulate(TINY, design="scts", tau=-1.0, instance=0)
    assert exp.design == "scts" and exp.tau_star == -1.0
    assert len(exp.actions) == 30
    assert 0.0 <= exp.normalized_regret <= 1.0
    again = scts.Experiment.from_json(exp.to_json())
    assert again.actions == exp.actions and again.tau_hat == exp.tau_hat

    stat, p, rejected = exp.test(exp.tau_hat, k=20, seed=1)
    assert 0.0 <= p <= 1.0 and stat == exp.tau_hat
    accepted, hull = exp.confidence_set(k=10, grid=(-3.0, 3.0, 1.0))
    assert all(-3.0 <= x <= 3.0 for x in accepted)
    if accepted:
        assert hull == (accepted[0], accepted[-1])


def check_benchmarks():
    report = json.loads(scts.run_benchmark(TINY))
    designs = {(r["design"], r["tau_star"]): r for r in report["rows"]}
    assert designs[("fixed", -1.0)]["normalized_regret_mean"] == 1.0
    assert designs[("fixed", 1.0)]["normalized_regret_mean"] == 0.0
    inference = json.loads(scts.run_inference_benchmark(TINY))
    assert [row["snr"] for row in inference["rows"]] == [1.0]
    try:
        scts.run_benchmark('scenario = "synthetic"\ndesigns = []\ninstances = 1\ntau_values = [1.0]')
    except ValueError:
        pass
    else:
        raise AssertionError("empty design list accepted")


if __name__ == "__main__":
    for check in (check_factors, check_ridge_and_beta, check_weights, check_experiment, check_benchmarks):
        check()
        print(f"ok  {check.__name__}")
    print("smoke test passed")
