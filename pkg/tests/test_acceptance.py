"""Acceptance criteria 1-10, each printed as one PASS/FAIL line.

Seeds and configurations are fixed in advance; nothing here is tuned to a
particular draw. The Monte-Carlo criteria (5-9) cache their tables so that
criterion 10 can rerun them with two workers and compare the CSV output.
"""

import math
import time

import numpy as np
import pytest

from brute import eb_partial_sums_by_paths, expected_psi, random_mdp, random_policy, suite
from drlope.experiments import (
    ExperimentConfig,
    build_environment,
    loglog_slope,
    run_replications,
)
from drlope.mdp import (
    density_ratio_eta,
    exact_policy_value,
    exact_q,
    oracle_w,
    stationary_distribution,
)
from drlope.nuisance import FeatureMap, fit_q_lstdq, fit_w_linear, residual_L
from drlope.oracle import (
    DIVERGENT,
    curse_diagnostic,
    eb_m1,
    eb_m1_partial_sums,
    eb_m2,
    eb_m2_partial_sums,
    eb_m3,
)
from drlope.sampling import expected_transitions

pytestmark = pytest.mark.acceptance

CONFIGS = {
    5: ExperimentConfig(env="random", n_states=5, n_actions=3, alpha_mix=0.4,
                        Ts=[4000, 16000, 64000], estimators=["drl3"], replications=100,
                        master_seed=5005),
    6: ExperimentConfig(env="random", n_states=5, n_actions=3, alpha_mix=0.4,
                        sampling="transition", Ts=[100_000], estimators=["drl3_oracle"],
                        replications=200, master_seed=6006),
    7: ExperimentConfig(env="gridworld", width=4, height=4, alpha_mix=0.4,
                        Ts=[16000, 64000, 256000], estimators=["dm", "mis", "drl3"],
                        settings=["BothCorrect", "OnlyWCorrect", "OnlyQCorrect"],
                        replications=100, master_seed=7007),
    8: ExperimentConfig(env="random", n_states=5, n_actions=3, alpha_mix=0.4,
                        Ts=[50_000], estimators=["drl3_oracle"], replications=200,
                        master_seed=8008),
    9: ExperimentConfig(env="curse", n_states=5, n_actions=4, env_seed=3, Ts=[64000],
                        estimators=["is", "drl3"], replications=100, master_seed=9009),
}

_first_runs = {}


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return emit


def _table(n, workers=1):
    cfg = CONFIGS[n]
    start = time.perf_counter()
    table = run_replications(cfg, workers=workers)
    elapsed = time.perf_counter() - start
    if workers == 1:
        _first_runs[n] = table
    return table, elapsed


def _cached(n):
    if n not in _first_runs:
        _table(n)
    return _first_runs[n]


# ---------------------------------------------------------------- exact criteria


def test_criterion_1_exact_double_robustness(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for mdp, pi_e, pi_b in suite(50):
        S, A = mdp.n_states, mdp.n_actions
        d = stationary_distribution(mdp, pi_b)
        rho = exact_policy_value(mdp, pi_e)
        w, q = oracle_w(mdp, pi_e, pi_b, d), exact_q(mdp, pi_e)
        q_any = rng.uniform(-2, 2 * mdp.r_max / (1 - mdp.gamma), (S, A))
        w_any = rng.uniform(0, 4, S)
        for ww, qq in ((w, q_any), (w_any, q)):
            worst = max(worst, abs(expected_psi(mdp, pi_e, pi_b, d, ww, qq) - rho))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 10
    assert verdict(1, ok, f"max |E psi - rho| = {worst:.2e}, {elapsed:.1f} s")


def test_criterion_2_ratio_moment_identity(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    for mdp, pi_e, pi_b in suite(50):
        d = stationary_distribution(mdp, pi_b)
        data = expected_transitions(mdp, pi_b, d)
        F = rng.normal(size=(mdp.n_states, 20))
        res = residual_L(data, oracle_w(mdp, pi_e, pi_b, d), F, density_ratio_eta(pi_e, pi_b),
                         pi_e.initial_dist, mdp.gamma)
        worst = max(worst, float(np.max(np.abs(res))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 5
    assert verdict(2, ok, f"max |L| = {worst:.2e}, {elapsed:.1f} s")


def test_criterion_3_oracle_recovery(verdict):
    start = time.perf_counter()
    err_w = err_q = 0.0
    for mdp, pi_e, pi_b in suite(50):
        S, A = mdp.n_states, mdp.n_actions
        d = stationary_distribution(mdp, pi_b)
        data = expected_transitions(mdp, pi_b, d)
        fm = FeatureMap.tabular(S, A)
        w = fit_w_linear(data, fm, density_ratio_eta(pi_e, pi_b), pi_e.initial_dist,
                         mdp.gamma, clip=False)
        q = fit_q_lstdq(data, fm, pi_e, mdp.gamma, clip=False)
        err_w = max(err_w, float(np.max(np.abs(w.values - oracle_w(mdp, pi_e, pi_b, d)))))
        err_q = max(err_q, float(np.max(np.abs(q.values - exact_q(mdp, pi_e)))))
    elapsed = time.perf_counter() - start
    ok = err_w <= 1e-8 and err_q <= 1e-8 and elapsed < 10
    assert verdict(3, ok, f"w err {err_w:.1e}, q err {err_q:.1e}, {elapsed:.1f} s")


def test_criterion_4_bound_recursions(verdict):
    start = time.perf_counter()
    worst = scaled = 0.0
    for seed in range(10):
        mdp = random_mdp(400 + seed, S=3, A=2, gamma=0.9)
        pi_e = random_policy(500 + seed, 3, 2)
        pi_b = random_policy(600 + seed, 3, 2)
        d = stationary_distribution(mdp, pi_b)
        b1, b2 = eb_partial_sums_by_paths(mdp, pi_e, pi_b, d, pi_e.initial_dist, 5,
                                          exact_q(mdp, pi_e))
        r1 = eb_m1_partial_sums(mdp, pi_e, pi_b, d, pi_e.initial_dist, 5)
        r2 = eb_m2_partial_sums(mdp, pi_e, pi_b, d, pi_e.initial_dist, 5)
        for got, ref in ((r1, b1), (r2, b2)):
            gap = np.abs(got - ref)
            worst = max(worst, float(np.max(gap)))
            # sums reach ~1e5 when eta is large; there 1e-10 is below one ulp
            scaled = max(scaled, float(np.max(gap / np.maximum(1.0, np.abs(ref)))))
    order_bad = 0
    for mdp, pi_e, pi_b in suite(50):
        d = stationary_distribution(mdp, pi_b)
        m1 = eb_m1(mdp, pi_e, pi_b, d, pi_e.initial_dist)
        m2 = eb_m2(mdp, pi_e, pi_b, d, pi_e.initial_dist)
        # a divergent m1 dominates anything
        if not (m1 == DIVERGENT or m2 <= m1 + 1e-9):
            order_bad += 1
    elapsed = time.perf_counter() - start
    ok = scaled <= 1e-10 and order_bad == 0 and elapsed < 30
    assert verdict(4, ok, f"path gap {scaled:.1e} scaled, {worst:.1e} absolute, "
                          f"ordering violations {order_bad}, {elapsed:.1f} s")


# ---------------------------------------------------------------- Monte-Carlo criteria


def test_criterion_5_mse_scaling(verdict):
    table, elapsed = _table(5)
    Ts = CONFIGS[5].Ts
    mses = [table.row("drl3", T=T)["mse"] for T in Ts]
    slope = loglog_slope(Ts, mses)
    max_eta = float(np.max(build_environment(CONFIGS[5]).eta))
    ok = -1.35 <= slope <= -0.65 and elapsed < 300
    assert verdict(5, ok, f"slope {slope:.3f}, mse {['%.2e' % m for m in mses]}, "
                          f"max eta {max_eta:.2f}, {elapsed:.0f} s")


def test_criterion_6_efficiency_at_bound(verdict):
    cfg = CONFIGS[6]
    table, elapsed = _table(6)
    env = build_environment(cfg)
    bound = eb_m3(env.mdp, env.pi_e, env.pi_b, env.state_law)
    n = cfg.Ts[0]
    scaled = n * table.row("drl3_oracle")["variance"]
    rel = scaled / bound - 1
    ok = abs(rel) <= 0.15 and elapsed < 300
    assert verdict(6, ok, f"n var {scaled:.4f} vs eb_m3 {bound:.4f} ({rel:+.1%}), "
                          f"{elapsed:.0f} s")


def test_criterion_7_robustness_under_misspecification(verdict):
    table, elapsed = _table(7)
    T = max(CONFIGS[7].Ts)

    def mse(est, setting):
        return table.row(est, setting=setting, T=T)["mse"]

    q_bad = mse("drl3", "OnlyWCorrect") / mse("dm", "OnlyWCorrect")
    w_bad = mse("drl3", "OnlyQCorrect") / mse("mis", "OnlyQCorrect")
    both = mse("drl3", "BothCorrect") / min(mse("dm", "BothCorrect"),
                                            mse("mis", "BothCorrect"))
    ok = q_bad <= 0.2 and w_bad <= 0.2 and both <= 2 and elapsed < 600
    assert verdict(7, ok, f"q wrong {q_bad:.3f}, w wrong {w_bad:.3f}, both right {both:.3f}, "
                          f"{elapsed:.0f} s")


def test_criterion_8_coverage(verdict):
    table, elapsed = _table(8)
    cov = table.row("drl3_oracle")["coverage"]
    ok = 0.90 <= cov <= 0.99 and elapsed < 300
    assert verdict(8, ok, f"coverage {cov:.3f}, {elapsed:.0f} s")


def test_criterion_9_curse_of_horizon(verdict):
    cfg = CONFIGS[9]
    env = build_environment(cfg)
    rep = curse_diagnostic(env.mdp, env.pi_e, env.pi_b)
    table, elapsed = _table(9)
    ratio = table.row("is")["mse"] / table.row("drl3")["mse"]
    ok = (rep.expected_log_eta >= rep.neg_log_gamma and rep.bounds.eb_m1 == DIVERGENT
          and math.isfinite(rep.bounds.eb_m3) and ratio >= 10 and elapsed < 300)
    assert verdict(9, ok, f"E log eta {rep.expected_log_eta:.3f} >= {rep.neg_log_gamma:.3f}, "
                          f"{rep.summary()}, IS/DRL mse {ratio:.3g}, {elapsed:.0f} s")


def test_criterion_10_determinism_across_workers(verdict):
    mismatched = []
    for n in (5, 6, 7, 8, 9):
        first = _cached(n)
        again, _ = _table(n, workers=2)
        if (again.to_csv() != first.to_csv()
                or again.replicates_csv() != first.replicates_csv()):
            mismatched.append(n)
    ok = not mismatched
    assert verdict(10, ok, "bit-identical CSVs for 1 and 2 workers" if ok
                   else f"mismatch in {mismatched}")
