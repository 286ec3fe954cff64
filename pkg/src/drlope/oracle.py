"""Exact efficiency bounds and the curse-of-horizon diagnostic for tabular MDPs.

The trajectory-model bounds are series over k of gamma^{2(k-1)} times a
second moment of a density ratio against the one-step conditional variance

    g(s, a) = Var(r + gamma v(s') | s, a) = V_r(s, a) + gamma^2 Var_P(v(s') | s, a).

For the cumulative ratio that second moment follows the linear recursion
m_k = eta^2 pi_b * (P^T m_{k-1}); for the marginal ratio it is
sum p_e^(k)^2 / p_b^(k), propagated forward. A bound is reported as
divergent (``math.inf``) when gamma^2 times the growth rate of its terms
reaches 1.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .mdp import (
    density_ratio_eta,
    exact_q,
    exact_v,
    oracle_w,
    stationary_distribution,
)

DIVERGENT = math.inf
DEFAULT_TOL = 1e-12
GROWTH_ITERS = 200
DIVERGENCE_MARGIN = 1e-6
MAX_TERMS = 1_000_000
BOUND_COLUMNS = ("eb_m1", "eb_m2", "eb_m3", "verdicts", "truncation_k")


def is_divergent(x):
    return x is None or math.isinf(x)


@dataclass
class BoundReport:
    eb_m1: float
    eb_m2: float
    eb_m3: float
    truncation_k: int
    tail_bound: float = 0.0
    gamma_C_product: float = 0.0

    @property
    def verdicts(self):
        return ";".join(f"{k}={'Divergent' if is_divergent(v) else 'Finite'}"
                        for k, v in (("m1", self.eb_m1), ("m2", self.eb_m2), ("m3", self.eb_m3)))

    def csv_row(self):
        def fmt(x):
            return "Divergent" if is_divergent(x) else repr(float(x))

        return ",".join([fmt(self.eb_m1), fmt(self.eb_m2), fmt(self.eb_m3), self.verdicts,
                         str(self.truncation_k)])

    @classmethod
    def from_csv_row(cls, row):
        f = row.strip().split(",")
        if len(f) != len(BOUND_COLUMNS):
            raise ValueError(f"expected {len(BOUND_COLUMNS)} fields, got {len(f)}")

        def val(x):
            return DIVERGENT if x == "Divergent" else float(x)

        return cls(val(f[0]), val(f[1]), val(f[2]), int(f[4]))


def conditional_variance(mdp, pi_e, q=None):
    """g(s, a) = V_r(s, a) + gamma^2 Var(v(s') | s, a) for the target's v."""
    q = exact_q(mdp, pi_e) if q is None else q
    v = exact_v(q, pi_e)
    ev = mdp.transition @ v
    ev2 = mdp.transition @ (v * v)
    var_v = np.clip(ev2 - ev * ev, 0.0, None)
    return mdp.reward_var + mdp.gamma ** 2 * var_v


def eb_m3(mdp, pi_e, pi_b, denom_dist):
    """E_{s ~ denom, a ~ pi_b}[w^2 eta^2 g] with w the ratio to ``denom_dist``."""
    denom = np.asarray(denom_dist, dtype=float)
    w = oracle_w(mdp, pi_e, pi_b, denom)
    eta = density_ratio_eta(pi_e, pi_b)
    g = conditional_variance(mdp, pi_e)
    return float(np.sum(denom[:, None] * pi_b.action_probs * (w[:, None] * eta) ** 2 * g))


def _initial_ratio(p0_b, p0_e):
    p0_b = np.asarray(p0_b, dtype=float)
    p0_e = np.asarray(p0_e, dtype=float)
    if np.any((p0_e > 0) & (p0_b <= 0)):
        return None
    r = np.zeros_like(p0_e)
    np.divide(p0_e, p0_b, out=r, where=p0_b > 0)
    return r


def nu_moment_operator(mdp, pi_e, pi_b):
    """Matrix of m -> eta^2 pi_b * (P^T m) acting on flattened (s, a)."""
    S, A = mdp.n_states, mdp.n_actions
    eta = density_ratio_eta(pi_e, pi_b)
    P = mdp.transition.reshape(S * A, S)
    scale = (eta ** 2 * pi_b.action_probs).reshape(S * A)
    # new[(s,a)] = scale[(s,a)] * sum_{(s-,a-)} P[(s-,a-), s] m[(s-,a-)]
    return scale[:, None] * np.repeat(P.T, A, axis=0)


def nu_moment_start(pi_e, pi_b, p0_b, p0_e):
    """m_0(s, a) = (p0_e / p0_b)^2 eta^2 pi_b p0_b, i.e. E_b[nu_0^2 ; s_0 = s, a_0 = a]."""
    ratio = _initial_ratio(p0_b, p0_e)
    if ratio is None:
        return None
    eta = density_ratio_eta(pi_e, pi_b)
    return ((ratio ** 2 * np.asarray(p0_b))[:, None] * eta ** 2 * pi_b.action_probs).reshape(-1)


def growth_rate(step, x0, iters=GROWTH_ITERS):
    """Asymptotic per-step growth of ``x -> step(x)`` by normalized power iteration.

    Uses the geometric mean over the second half of the iterations, which
    also settles for periodic structure.
    """
    x = np.asarray(x0, dtype=float)
    logs = []
    for _ in range(iters):
        x = step(x)
        nrm = float(np.sum(np.abs(x)))
        if nrm == 0.0:
            return 0.0
        logs.append(math.log(nrm))
        x = x / nrm
    half = iters // 2
    return math.exp(sum(logs[half:]) / (iters - half))


def _sum_series(term, ratio_bound, tol, max_terms=MAX_TERMS):
    """Sum term(k) for k = 0, 1, ... until a geometric tail bound drops below tol."""
    total = 0.0
    for k in range(max_terms):
        t = term(k)
        total += t
        if k >= 50:
            tail = t * ratio_bound / (1.0 - ratio_bound)
            if tail < tol:
                return total, k + 1, tail
    return total, max_terms, t * ratio_bound / (1.0 - ratio_bound)


def eb_m1_partial_sums(mdp, pi_e, pi_b, p0_b, p0_e, k_max):
    """Partial sums S_K = (1 - gamma)^2 sum_{k<K} gamma^{2k} <m_k, g> for K = 1..k_max."""
    g = conditional_variance(mdp, pi_e).reshape(-1)
    Mop = nu_moment_operator(mdp, pi_e, pi_b)
    m = nu_moment_start(pi_e, pi_b, p0_b, p0_e)
    c = (1.0 - mdp.gamma) ** 2
    out, total = [], 0.0
    for k in range(k_max):
        total += c * mdp.gamma ** (2 * k) * (m @ g)
        out.append(total)
        m = Mop @ m
    return np.array(out)


def eb_m1(mdp, pi_e, pi_b, p0_b, p0_e, tol=DEFAULT_TOL, details=False):
    """Bound under the non-Markov trajectory model, or ``math.inf`` if the series diverges.

    With ``details=True`` returns ``(value, truncation_k, tail_bound, gamma2_growth)``.
    """
    gamma = mdp.gamma
    m0 = nu_moment_start(pi_e, pi_b, p0_b, p0_e)
    Mop = nu_moment_operator(mdp, pi_e, pi_b)
    if m0 is None:
        res = (DIVERGENT, 0, math.inf, math.inf)
        return res if details else res[0]
    growth = growth_rate(lambda x: Mop @ x, np.ones_like(m0) + m0)
    r = gamma ** 2 * growth
    if r >= 1.0 - DIVERGENCE_MARGIN:
        res = (DIVERGENT, 0, math.inf, r)
        return res if details else res[0]
    g = conditional_variance(mdp, pi_e).reshape(-1)
    c = (1.0 - gamma) ** 2
    # carry gamma^{2k} m_k so the state stays bounded when gamma^2 growth < 1
    state = {"m": m0, "k": 0}
    Mg = gamma ** 2 * Mop

    def term(k):
        if k != state["k"]:
            state["m"] = Mg @ state["m"]
            state["k"] = k
        return c * float(state["m"] @ g)

    total, k, tail = _sum_series(term, max(r, gamma ** 2), tol)
    res = (total, k, tail, r)
    return res if details else res[0]


def _marginal_second_moment(pe, pb):
    """sum_{s,a} pe^2 / pb, or inf on a support violation."""
    if np.any((pe > 0) & (pb <= 0)):
        return math.inf, None
    ratio2 = np.zeros_like(pe)
    np.divide(pe * pe, pb, out=ratio2, where=pb > 0)
    return None, ratio2


def _marginal_iter(mdp, pi_e, pi_b, p0_b, p0_e):
    de = np.asarray(p0_e, dtype=float)
    db = np.asarray(p0_b, dtype=float)
    while True:
        pe = de[:, None] * pi_e.action_probs
        pb = db[:, None] * pi_b.action_probs
        yield pe, pb
        de = np.einsum("sa,sat->t", pe, mdp.transition)
        db = np.einsum("sa,sat->t", pb, mdp.transition)


def eb_m2_partial_sums(mdp, pi_e, pi_b, p0_b, p0_e, k_max):
    g = conditional_variance(mdp, pi_e)
    c = (1.0 - mdp.gamma) ** 2
    out, total = [], 0.0
    for k, (pe, pb) in zip(range(k_max), _marginal_iter(mdp, pi_e, pi_b, p0_b, p0_e)):
        bad, ratio2 = _marginal_second_moment(pe, pb)
        total += math.inf if bad is not None else c * mdp.gamma ** (2 * k) * float(
            np.sum(ratio2 * g))
        out.append(total)
    return np.array(out)


def eb_m2(mdp, pi_e, pi_b, p0_b, p0_e, tol=DEFAULT_TOL, details=False):
    """Bound under the time-varying Markov trajectory model, or ``math.inf``.

    Divergence is read off the growth of E_b[mu_k^2] over the first 200 steps.
    """
    gamma = mdp.gamma
    g = conditional_variance(mdp, pi_e)
    c = (1.0 - gamma) ** 2
    moments = []
    terms = []
    it = _marginal_iter(mdp, pi_e, pi_b, p0_b, p0_e)

    def advance():
        pe, pb = next(it)
        bad, ratio2 = _marginal_second_moment(pe, pb)
        if bad is not None:
            return False
        moments.append(float(ratio2.sum()))
        terms.append(float(np.sum(ratio2 * g)))
        return True

    for _ in range(GROWTH_ITERS + 1):
        if not advance():
            res = (DIVERGENT, 0, math.inf, math.inf)
            return res if details else res[0]
    half = GROWTH_ITERS // 2
    lo, hi = moments[half], moments[GROWTH_ITERS]
    growth = (hi / lo) ** (1.0 / (GROWTH_ITERS - half)) if lo > 0 else 0.0
    r = gamma ** 2 * growth
    if r >= 1.0 - DIVERGENCE_MARGIN:
        res = (DIVERGENT, 0, math.inf, r)
        return res if details else res[0]

    def term(k):
        while k >= len(terms):
            if not advance():
                return math.inf
        return c * gamma ** (2 * k) * terms[k]

    total, k, tail = _sum_series(term, max(r, gamma ** 2), tol)
    res = (total, k, tail, r)
    return res if details else res[0]


def efficiency_bounds(mdp, pi_e, pi_b, p0_b=None, p0_e=None, denom=None, tol=DEFAULT_TOL):
    """All three bounds in one report.

    ``p0_b`` defaults to the behavior chain's stationary law, ``p0_e`` to the
    target's initial law and ``denom`` (the w denominator and transition
    sampling law) to ``p0_b``.
    """
    if p0_b is None:
        p0_b = stationary_distribution(mdp, pi_b)
    p0_e = pi_e.initial_dist if p0_e is None else p0_e
    denom = p0_b if denom is None else denom
    m1, k1, tail1, r1 = eb_m1(mdp, pi_e, pi_b, p0_b, p0_e, tol, details=True)
    m2, k2, tail2, _ = eb_m2(mdp, pi_e, pi_b, p0_b, p0_e, tol, details=True)
    m3 = eb_m3(mdp, pi_e, pi_b, denom)
    tails = [t for t in (tail1, tail2) if math.isfinite(t)]
    return BoundReport(m1, m2, m3, max(k1, k2), max(tails) if tails else math.inf,
                       math.sqrt(r1) if math.isfinite(r1) else math.inf)


@dataclass
class CurseReport:
    expected_log_eta: float
    neg_log_gamma: float
    bounds: BoundReport
    p0_b: Optional[np.ndarray] = None

    @property
    def horizon_cursed(self):
        return self.expected_log_eta >= self.neg_log_gamma

    def summary(self):
        b = self.bounds
        return (f"E[log eta] = {self.expected_log_eta:.6g}, "
                f"-log gamma = {self.neg_log_gamma:.6g}; {b.verdicts}")


def curse_diagnostic(mdp, pi_e, pi_b, gamma=None, p0_b=None):
    """Compare the per-step log ratio growth with -log gamma and report all verdicts.

    ``expected_log_eta`` is E[log eta(s, a)] with s from the behavior
    stationary law (or ``p0_b``) and a ~ pi_e, i.e. the average KL(pi_e || pi_b).
    Under the behavior's own action law the same average is never positive,
    so it cannot signal growth.
    """
    gamma = mdp.gamma if gamma is None else gamma
    if p0_b is None:
        p0_b = stationary_distribution(mdp, pi_b)
    eta = density_ratio_eta(pi_e, pi_b)
    pe = pi_e.action_probs
    logs = np.zeros_like(eta)
    np.log(eta, out=logs, where=pe > 0)
    ell = float(np.sum(np.asarray(p0_b)[:, None] * pe * logs))
    bounds = efficiency_bounds(mdp, pi_e, pi_b, p0_b=p0_b)
    return CurseReport(ell, -math.log(gamma), bounds, np.asarray(p0_b))
