"""Policy-value estimators, fold schemes, variances and confidence intervals.

Trajectory estimators (IS, SNIS, the cumulative/marginal-ratio DRL forms)
average one value per trajectory; transition estimators (DM, MIS, the
stationary-ratio DRL form) average one value per transition.
"""

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import norm

from .errors import IdentifiabilityError, InfeasibleSchemeError
from .mdp import density_ratio_eta, exact_v
from .nuisance import NuisancePair
from .sampling import TrajectoryDataset, TransitionDataset, trajectory_to_transitions

SCHEMES = ("Adaptive", "CrossTrajectory2", "CrossTime4", "OracleNuisance")
REPORT_COLUMNS = ("estimator", "scheme", "N", "T", "n", "rho_hat", "var_hat",
                  "ci_low", "ci_high", "seed", "wall_ms")


@dataclass
class EstimateReport:
    rho_hat: float
    variance_hat: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    n_effective: int = 0
    estimator_name: str = ""
    fitting_scheme: str = "Adaptive"
    diagnostics: dict = field(default_factory=dict)

    def csv_row(self, N="", T="", seed="", wall_ms=""):
        def fmt(x):
            if x is None or x == "":
                return ""
            return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)

        vals = (self.estimator_name, self.fitting_scheme, N, T, self.n_effective, self.rho_hat,
                self.variance_hat, self.ci_low, self.ci_high, seed, wall_ms)
        return ",".join(fmt(v) for v in vals)


def confidence_interval(rho_hat, variance_hat, n, alpha=0.05):
    """Normal interval rho_hat -/+ z_{1 - alpha/2} sqrt(variance_hat / n)."""
    if variance_hat < 0 or n < 1:
        raise ValueError("need variance_hat >= 0 and n >= 1")
    half = norm.ppf(1.0 - alpha / 2.0) * math.sqrt(variance_hat / n)
    return rho_hat - half, rho_hat + half


def _report(values, name, scheme, alpha, weights=None, **diag):
    """Mean, ddof-0 variance and interval of per-unit contributions."""
    values = np.asarray(values, dtype=float)
    n = values.size
    if weights is None:
        rho = float(np.mean(values))
        var = float(np.mean((values - rho) ** 2))
    else:
        wsum = weights.sum()
        rho = float(weights @ values / wsum)
        var = float(weights @ (values - rho) ** 2 / wsum)
    lo, hi = confidence_interval(rho, var, n, alpha)
    return EstimateReport(rho, var, lo, hi, n, name, scheme, diag)


def horizon_normalizer(gamma, horizon):
    """c_T = 1 / sum_{t <= T} gamma^t."""
    return 1.0 / np.sum(gamma ** np.arange(horizon + 1))


def _as_transitions(data):
    return trajectory_to_transitions(data) if isinstance(data, TrajectoryDataset) else data


# ---------------------------------------------------------------- folds


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """Fold id per transition plus the fold whose nuisances each fold uses."""

    scheme: str
    fold_of: np.ndarray
    nuisance_fold_for: dict

    @property
    def n_folds(self):
        return len(self.nuisance_fold_for)

    def members(self, j):
        return np.flatnonzero(self.fold_of == j)

    def training(self, j):
        return np.flatnonzero(self.fold_of == self.nuisance_fold_for[j])


def make_folds(data, scheme, seed=None):
    """Partition transitions for cross-fitting.

    ``CrossTrajectory2`` splits trajectories into two halves (earlier fold gets
    the extra one; shuffled first when ``seed`` is given) and each half uses
    the other's nuisances. ``CrossTime4`` splits the time steps into four
    contiguous quarters and fold j uses fold (j + 2) mod 4. ``Adaptive`` and
    ``OracleNuisance`` put everything in fold 0.

    Raises
    ------
    InfeasibleSchemeError
        Fewer than 2 trajectories for cross-trajectory, fewer than 8 time
        steps for cross-time.
    """
    data = _as_transitions(data)
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    fold_of = np.zeros(data.n, dtype=np.int64)
    if scheme in ("Adaptive", "OracleNuisance"):
        return FoldAssignment(scheme, fold_of, {0: 0})
    if scheme == "CrossTrajectory2":
        ids = np.unique(data.traj_id)
        if ids.size < 2:
            raise InfeasibleSchemeError(
                f"cross-trajectory requires N >= 2 trajectories, got N = {ids.size}")
        if seed is not None:
            ids = np.random.default_rng(seed).permutation(ids)
        for j, part in enumerate(np.array_split(ids, 2)):
            fold_of[np.isin(data.traj_id, part)] = j
        return FoldAssignment(scheme, fold_of, {0: 1, 1: 0})
    steps = np.unique(data.t)
    if steps.size < 8:
        raise InfeasibleSchemeError(
            f"cross-time requires at least 8 time steps per trajectory, got {steps.size}")
    for j, part in enumerate(np.array_split(steps, 4)):
        fold_of[np.isin(data.t, part)] = j
    return FoldAssignment(scheme, fold_of, {j: (j + 2) % 4 for j in range(4)})


# ---------------------------------------------------------------- stationary-ratio form


def psi_values(data: TransitionDataset, w, q, pi_e, gamma, eta):
    """Estimating-function values, one per transition.

    psi = (1 - gamma) E_{p0_e}[v(s0)] + w(s) eta(s,a) (r + gamma v(s') - q(s,a))
    """
    w = np.asarray(w, dtype=float)
    q = np.asarray(q, dtype=float)
    v = exact_v(q, pi_e)
    dm_term = (1.0 - gamma) * (pi_e.initial_dist @ v)
    weight = w[data.s] * eta[data.s, data.a]
    return dm_term + weight * (data.r + gamma * v[data.s_next] - q[data.s, data.a])


def psi_eval(tr, w, q, pi_e, gamma, dm_term, eta=None):
    """psi for a single transition ``tr`` with a precomputed DM constant."""
    q = np.asarray(q, dtype=float)
    w = np.asarray(w, dtype=float)
    v = exact_v(q, pi_e)
    e = eta[tr.s, tr.a] if eta is not None else 1.0
    return dm_term + (w[tr.s] * e) * (tr.r + gamma * v[tr.s_next] - q[tr.s, tr.a])


def fit_fold_nuisances(data, folds: FoldAssignment, w_fitter, q_fitter):
    """Fit (w, q) on each fold's training part; failures carry the fold id."""
    data = _as_transitions(data)
    pairs = []
    for j in range(folds.n_folds):
        train = data.subset(folds.training(j))
        try:
            pairs.append(NuisancePair(w_fitter(train), q_fitter(train), "Fitted", j))
        except Exception as exc:
            exc.fold_id = j
            exc.args = (f"fold {j} ({folds.scheme}): {exc.args[0] if exc.args else exc}",
                        ) + exc.args[1:]
            raise
    return pairs


def drl_m3_from_nuisances(data, folds: FoldAssignment, pairs, pi_e, pi_b, gamma, alpha=0.05,
                          name="drl3"):
    """Average psi with each transition scored by its own fold's nuisances."""
    data = _as_transitions(data)
    eta = density_ratio_eta(pi_e, pi_b)
    psi = np.empty(data.n)
    for j in range(folds.n_folds):
        idx = folds.members(j)
        pair = pairs[j]
        psi[idx] = psi_values(data.subset(idx), pair.w_hat, pair.q_hat, pi_e, gamma, eta)
    sizes = [int(folds.members(j).size) for j in range(folds.n_folds)]
    return _report(psi, name, folds.scheme, alpha, data.weights, fold_sizes=sizes)


def estimate_drl_m3(data, scheme, w_fitter, q_fitter, pi_e, pi_b, gamma, alpha=0.05, *,
                    nuisances=None, fold_seed=None):
    """Cross-fitted (or adaptive) stationary-ratio DRL estimate.

    Parameters
    ----------
    data : TransitionDataset or TrajectoryDataset
    scheme : {"Adaptive", "CrossTrajectory2", "CrossTime4", "OracleNuisance"}
    w_fitter, q_fitter : callable
        Map a training TransitionDataset to a WFunction / QFunction.
    nuisances : NuisancePair, optional
        Required for ``OracleNuisance``; used for every transition.
    """
    start = time.perf_counter()
    folds = make_folds(data, scheme, fold_seed)
    if scheme == "OracleNuisance":
        if nuisances is None:
            raise ValueError("OracleNuisance needs the nuisances argument")
        pairs = [nuisances]
    else:
        pairs = fit_fold_nuisances(data, folds, w_fitter, q_fitter)
    rep = drl_m3_from_nuisances(data, folds, pairs, pi_e, pi_b, gamma, alpha)
    rep.diagnostics["wall_ms"] = (time.perf_counter() - start) * 1e3
    return rep


def estimate_mis(data, w_hat, pi_e, pi_b, alpha=0.05):
    """Marginalized IS: mean of w(s) eta(s,a) r."""
    data = _as_transitions(data)
    eta = density_ratio_eta(pi_e, pi_b)
    w = np.asarray(w_hat, dtype=float)
    vals = (w[data.s] * eta[data.s, data.a]) * data.r
    return _report(vals, "mis", "Adaptive", alpha, data.weights)


def estimate_dm(q_hat, pi_e, gamma):
    """Direct method (1 - gamma) E_{p0_e}[v(s0)]; exact in the known initial law."""
    v = exact_v(np.asarray(q_hat, dtype=float), pi_e)
    return EstimateReport(float((1.0 - gamma) * (pi_e.initial_dist @ v)),
                          estimator_name="dm", fitting_scheme="Adaptive")


# ---------------------------------------------------------------- trajectory forms


def initial_ratio(trajs: TrajectoryDataset, pi_e, pi_b):
    """p0_e(s0) / p0_b(s0) per trajectory; p0_b is the dataset's recorded initial law."""
    p0_b = trajs.initial_dist if trajs.initial_dist is not None else pi_b.initial_dist
    p0_e = pi_e.initial_dist
    bad = np.flatnonzero((p0_e > 0) & (p0_b <= 0))
    if bad.size:
        raise IdentifiabilityError(
            f"initial overlap violated at state {bad[0]}: target mass, no behavior mass")
    ratio = np.zeros_like(p0_e)
    np.divide(p0_e, p0_b, out=ratio, where=p0_b > 0)
    return ratio[trajs.states[:, 0]]


def cumulative_weights(trajs: TrajectoryDataset, pi_e, pi_b, horizon):
    """nu_t for t = 0..horizon, shape (N, horizon + 1), including the initial ratio."""
    eta = density_ratio_eta(pi_e, pi_b)
    H = horizon + 1
    steps = eta[trajs.states[:, :H], trajs.actions[:, :H]]
    return initial_ratio(trajs, pi_e, pi_b)[:, None] * np.cumprod(steps, axis=1)


def _horizon(trajs, horizon):
    if horizon is None:
        return trajs.T
    if not 0 <= horizon <= trajs.T:
        raise ValueError(f"horizon must lie in [0, T={trajs.T}], got {horizon}")
    return int(horizon)


def is_from_weights(nu, rewards, gamma):
    """Per-trajectory truncated IS values c_H sum_t gamma^t nu_t r_t."""
    H = nu.shape[1] - 1
    disc = gamma ** np.arange(H + 1)
    return horizon_normalizer(gamma, H) * np.sum(disc * (nu * rewards[:, :H + 1]), axis=1)


def snis_from_weights(nu, rewards, gamma):
    """c_H sum_t gamma^t P_N[nu_t r_t] / P_N[nu_t]."""
    H = nu.shape[1] - 1
    norm_t = np.mean(nu, axis=0)
    if np.any(norm_t <= 0):
        raise ZeroDivisionError(f"self-normalizer vanishes at t={int(np.argmax(norm_t <= 0))}")
    disc = gamma ** np.arange(H + 1)
    return float(horizon_normalizer(gamma, H)
                 * np.sum(disc * np.mean(nu * rewards[:, :H + 1], axis=0) / norm_t))


def estimate_is(trajs: TrajectoryDataset, pi_e, pi_b, gamma, horizon=None, alpha=0.05):
    H = _horizon(trajs, horizon)
    vals = is_from_weights(cumulative_weights(trajs, pi_e, pi_b, H), trajs.rewards, gamma)
    return _report(vals, "is", "Adaptive", alpha, horizon=H)


def estimate_snis(trajs: TrajectoryDataset, pi_e, pi_b, gamma, horizon=None):
    H = _horizon(trajs, horizon)
    rho = snis_from_weights(cumulative_weights(trajs, pi_e, pi_b, H), trajs.rewards, gamma)
    return EstimateReport(rho, n_effective=trajs.N, estimator_name="snis",
                          fitting_scheme="Adaptive", diagnostics={"horizon": H})


def default_omega(N, T):
    """min(T, ceil(ln(N + 2)^1.5)): grows faster than log N, never exceeds T."""
    return int(min(T, math.ceil(math.log(N + 2) ** 1.5)))


def trajectory_folds(trajs: TrajectoryDataset, scheme, seed=None):
    """Fold id per trajectory for the trajectory-level estimators."""
    if scheme == "CrossTime4":
        raise InfeasibleSchemeError("cumulative and marginal ratio forms need whole "
                                    "trajectories; use CrossTrajectory2 or Adaptive")
    folds = make_folds(trajectory_to_transitions(trajs), scheme, seed)
    return FoldAssignment(scheme, folds.fold_of.reshape(trajs.N, -1)[:, 0],
                          folds.nuisance_fold_for)


def _dr_trajectory_values(trajs, weights, prev_weights, q_hats, pi_e, gamma, omega, folds):
    """c_w (E_{p0_e}[v_0] + sum_t gamma^t (W_t (r_t - q_t) + W_{t-1} v_t)) per trajectory."""
    if folds is None:
        folds = FoldAssignment("Adaptive", np.zeros(trajs.N, dtype=np.int64), {0: 0})
    if isinstance(q_hats, np.ndarray) and q_hats.ndim == 3:
        q_hats = [q_hats] * folds.n_folds
    H = omega + 1
    s, a, r = trajs.states[:, :H], trajs.actions[:, :H], trajs.rewards[:, :H]
    disc = gamma ** np.arange(H)
    c = horizon_normalizer(gamma, omega)
    out = np.empty(trajs.N)
    for j in range(folds.n_folds):
        idx = folds.members(j)
        qt = np.asarray(q_hats[folds.nuisance_fold_for[j]], dtype=float)[:H]
        if qt.shape[0] < H:
            raise ValueError(f"need q_t for t = 0..{omega}, got {qt.shape[0]}")
        vt = np.einsum("tsa,sa->ts", qt, pi_e.action_probs)
        tt = np.arange(H)
        q_obs = qt[tt, s[idx], a[idx]]
        v_obs = vt[tt, s[idx]]
        init = pi_e.initial_dist @ vt[0]
        W, Wp = weights[idx], prev_weights[idx]
        terms = disc * (W * (r[idx] - q_obs)) + disc * (Wp * v_obs)
        out[idx] = c * (init + np.sum(terms, axis=1))
    return out


def estimate_drl_m1(trajs: TrajectoryDataset, pi_e, pi_b, gamma, q_hats, omega=None,
                    folds=None, alpha=0.05):
    """Cumulative-ratio DRL with truncation omega.

    ``q_hats`` is one (omega + 1, S, A) array or a list indexed by fold. The
    t = 0 baseline uses the known initial law exactly, so W_{-1} v_0 is
    replaced by E_{p0_e}[v_0] and the W_{t-1} v_t terms start at t = 1.
    """
    omega = default_omega(trajs.N, trajs.T) if omega is None else _horizon(trajs, omega)
    nu = cumulative_weights(trajs, pi_e, pi_b, omega)
    prev = np.concatenate([np.zeros((trajs.N, 1)), nu[:, :-1]], axis=1)
    vals = _dr_trajectory_values(trajs, nu, prev, q_hats, pi_e, gamma, omega, folds)
    scheme = folds.scheme if folds is not None else "Adaptive"
    return _report(vals, "drl1", scheme, alpha, omega=omega)


def estimate_drl_m2(trajs: TrajectoryDataset, pi_e, pi_b, gamma, mu_hats, q_hats, omega=None,
                    folds=None, alpha=0.05):
    """Marginal-ratio DRL: as the cumulative form with mu_t(s_t, a_t) in place of nu_t.

    ``mu_hats`` is an array (>= omega + 1, S, A) of per-time ratio tables, or a
    callable returning per-trajectory weights of shape (N, omega + 1).
    """
    omega = default_omega(trajs.N, trajs.T) if omega is None else _horizon(trajs, omega)
    H = omega + 1
    if callable(mu_hats):
        mu = np.asarray(mu_hats(trajs, omega), dtype=float)
    else:
        tab = np.asarray(mu_hats, dtype=float)
        if tab.shape[0] < H:
            raise ValueError(f"need mu_t for t = 0..{omega}")
        mu = tab[np.arange(H), trajs.states[:, :H], trajs.actions[:, :H]]
    prev = np.concatenate([np.zeros((trajs.N, 1)), mu[:, :-1]], axis=1)
    vals = _dr_trajectory_values(trajs, mu, prev, q_hats, pi_e, gamma, omega, folds)
    scheme = folds.scheme if folds is not None else "Adaptive"
    return _report(vals, "drl2", scheme, alpha, omega=omega)
