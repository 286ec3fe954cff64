"""Fitting the stationary ratio w and the q-function from data.

Both linear fits solve a square system of empirical moment equations. A
reciprocal condition number below ``RCOND_MIN`` is a hard error unless the
caller opts into a small ridge; silent regularization would blur the
misspecification experiments.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import SingularSystemError
from .mdp import Policy, _backward_recursion, exact_v, solve_q
from .sampling import TransitionDataset

log = logging.getLogger(__name__)

RCOND_MIN = 1e-12
RIDGE_SCALE = 1e-8
PROVENANCES = ("Oracle", "Fitted", "Corrupted")


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Linear features of states (for w) and of state-action pairs (for q).

    Parameters
    ----------
    matrix_s : ndarray, shape (S, d_w), optional
        Row s is psi(s).
    matrix_sa : ndarray, shape (S, A, d_q), optional
        Entry [s, a] is psi(s, a).
    kind : {"Tabular", "Custom"}
    """

    matrix_s: Optional[np.ndarray] = None
    matrix_sa: Optional[np.ndarray] = None
    kind: str = "Custom"

    @classmethod
    def tabular(cls, n_states, n_actions):
        eye_sa = np.eye(n_states * n_actions).reshape(n_states, n_actions, -1)
        return cls(np.eye(n_states), eye_sa, "Tabular")

    @property
    def dim(self):
        return self.matrix_s.shape[1] if self.matrix_s is not None else self.matrix_sa.shape[2]

    def features_s(self, s):
        return self.matrix_s[s]

    def features_sa(self, s, a):
        return self.matrix_sa[s, a]


@dataclass(frozen=True, eq=False)
class WFunction:
    """Tabulated w(s). ``coef`` keeps the linear coefficients when fitted."""

    values: np.ndarray
    provenance: str = "Fitted"
    coef: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def __call__(self, s):
        return self.values[s]


@dataclass(frozen=True, eq=False)
class QFunction:
    """Tabulated q(s, a)."""

    values: np.ndarray
    provenance: str = "Fitted"
    coef: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def __call__(self, s, a):
        return self.values[s, a]


@dataclass(frozen=True, eq=False)
class NuisancePair:
    w_hat: WFunction
    q_hat: QFunction
    provenance: str = "Fitted"
    fold_id: Optional[int] = None


def _cross(data: TransitionDataset, X, Y):
    """Empirical (or exact, for weighted data) moment E[X^T Y]."""
    if data.weights is None:
        return X.T @ Y / data.n
    return X.T @ (data.weights[:, None] * Y) / data.weights.sum()


def _solve(M, b, ridge, what, visit_counts=None):
    rcond = 1.0 / np.linalg.cond(M, 1) if np.all(np.isfinite(M)) else 0.0
    if not rcond >= RCOND_MIN:
        if not ridge:
            raise SingularSystemError(
                f"{what} moment matrix is singular or ill-conditioned (rcond={rcond:.3g}); "
                "check for unvisited states or actions, or enable ridge",
                rcond=rcond, visit_counts=visit_counts,
            )
        lam = RIDGE_SCALE * abs(np.trace(M)) / M.shape[0]
        M = M + lam * np.eye(M.shape[0])
    return np.linalg.solve(M, b), rcond


def fit_w_linear(data: TransitionDataset, fmap: FeatureMap, eta, p0_e, gamma, *,
                 ridge=False, clip=True, c_w=None):
    """Linear w(s) = beta^T psi(s) solving the moment equations L(w, psi_k) = 0 for every feature:

        E_n[(gamma eta psi(s') - psi(s)) psi(s)^T] beta + (1 - gamma) E_{p0_e}[psi] = 0.

    The fitted w is the ratio of the target's discounted visitation to the
    law of s in ``data``. Negative values are clipped to 0 (count in
    ``diagnostics["clipped"]``); ``c_w`` adds an upper clip.

    Raises
    ------
    SingularSystemError
        If the moment matrix has reciprocal condition below 1e-12 and ``ridge`` is off.
    """
    if data.n == 0:
        raise ValueError("cannot fit w on an empty dataset")
    F = np.asarray(fmap.matrix_s, dtype=float)
    psi, psi_next = F[data.s], F[data.s_next]
    e = np.asarray(eta)[data.s, data.a]
    M = _cross(data, gamma * e[:, None] * psi_next - psi, psi)
    b = (1.0 - gamma) * (np.asarray(p0_e) @ F)
    counts = np.bincount(data.s, minlength=F.shape[0])
    beta, rcond = _solve(M, -b, ridge, "w", counts)
    raw = F @ beta
    values, clipped = _clip(raw, 0.0, c_w if clip else None, clip)
    return WFunction(values, "Fitted", beta, {"rcond": rcond, "clipped": clipped,
                                              "residual": float(np.max(np.abs(M @ beta + b)))})


def _clip(x, lo, hi, enabled=True):
    if not enabled:
        return np.array(x, dtype=float), 0
    y = np.clip(x, lo, hi)
    n = int(np.count_nonzero(y != x))
    if n:
        log.debug("clipped %d entries to [%s, %s]", n, lo, hi)
    return y, n


def fit_q_lstdq(data: TransitionDataset, fmap: FeatureMap, pi_e: Policy, gamma, *,
                r_max=None, ridge=False, clip=True):
    """LSTDQ: solve E_n[psi(s,a) (psi(s,a) - gamma psi_e(s'))^T] beta = E_n[r psi(s,a)].

    ``psi_e(s')`` is sum_a' pi_e(a'|s') psi(s', a').

    With ``r_max`` given and ``clip`` on, output is clipped to [0, r_max / (1 - gamma)].
    """
    if data.n == 0:
        raise ValueError("cannot fit q on an empty dataset")
    G = np.asarray(fmap.matrix_sa, dtype=float)
    S, A, _ = G.shape
    G_next = np.einsum("sa,sad->sd", pi_e.action_probs, G)
    phi = G[data.s, data.a]
    M = _cross(data, phi, phi - gamma * G_next[data.s_next])
    b = _cross(data, phi, data.r[:, None])[:, 0]
    beta, rcond = _solve(M, b, ridge, "q", data.visit_counts(S, A))
    raw = G @ beta
    hi = r_max / (1.0 - gamma) if r_max is not None else None
    values, clipped = _clip(raw, 0.0, hi, clip and r_max is not None)
    return QFunction(values, "Fitted", beta, {"rcond": rcond, "clipped": clipped})


def empirical_model(data: TransitionDataset, n_states, n_actions, r_max):
    """Empirical transition kernel and mean rewards.

    Unvisited pairs become self-loops paying r_max / 2; their indices are
    returned so callers can report them.
    """
    wts = np.ones(data.n) if data.weights is None else data.weights
    idx = data.s * n_actions + data.a
    mass = np.bincount(idx, weights=wts, minlength=n_states * n_actions)
    rsum = np.bincount(idx, weights=wts * data.r, minlength=n_states * n_actions)
    P = np.bincount(idx * n_states + data.s_next, weights=wts,
                    minlength=n_states * n_actions * n_states).reshape(n_states * n_actions,
                                                                       n_states)
    R = np.empty(n_states * n_actions)
    seen = mass > 0
    P[seen] /= mass[seen, None]
    R[seen] = rsum[seen] / mass[seen]
    unvisited = np.flatnonzero(~seen)
    for k in unvisited:
        P[k] = 0.0
        P[k, k // n_actions] = 1.0
        R[k] = r_max / 2.0
    if unvisited.size:
        log.info("imputed %d unvisited state-action pairs as self-loops", unvisited.size)
    pairs = [(int(k // n_actions), int(k % n_actions)) for k in unvisited]
    return P.reshape(n_states, n_actions, n_states), R.reshape(n_states, n_actions), pairs


def fit_q_model_based(data: TransitionDataset, pi_e: Policy, gamma, r_max, *, clip=True):
    """Exact q of the empirical MDP built from ``data``."""
    S, A = pi_e.action_probs.shape
    P, R, imputed = empirical_model(data, S, A, r_max)
    raw = solve_q(P, R, pi_e.action_probs, gamma)
    residual = float(np.max(np.abs(R + gamma * P @ exact_v(raw, pi_e) - raw)))
    values, clipped = _clip(raw, 0.0, r_max / (1.0 - gamma), clip)
    return QFunction(values, "Fitted", None,
                     {"imputed": imputed, "clipped": clipped, "residual": residual})


def fit_q_truncated(data: TransitionDataset, pi_e: Policy, gamma, r_max, omega):
    """Finite-horizon q_t for t = 0..omega by backward recursion on the empirical MDP.

    Returns an array of shape (omega + 1, S, A).
    """
    S, A = pi_e.action_probs.shape
    P, R, _ = empirical_model(data, S, A, r_max)
    return _backward_recursion(P, R, pi_e.action_probs, gamma, omega)


def corrupt_nuisance(x, noise_mean, noise_sd, seed=None, lower=None, upper=None):
    """Add one iid N(noise_mean, noise_sd^2) draw per entry, then clip to [lower, upper]."""
    rng = np.random.default_rng(seed)
    vals = np.asarray(x.values, dtype=float)
    noisy = vals + rng.normal(noise_mean, noise_sd, size=vals.shape)
    if lower is not None or upper is not None:
        noisy = np.clip(noisy, lower, upper)
    return replace(x, values=noisy, provenance="Corrupted")


def v_from_q(q, pi_e):
    """v(s) = sum_a pi_e(a|s) q(s, a)."""
    return exact_v(np.asarray(q, dtype=float), pi_e)


def residual_L(data: TransitionDataset, w, f_w, eta, p0_e, gamma):
    """Moment vector E_n[gamma w(s) eta(s,a) f(s') - w(s) f(s)] + (1 - gamma) E_{p0_e}[f].

    ``f_w`` is a FeatureMap, an (S, d) matrix, or an (S,) vector. The result is
    zero exactly when w is the ratio for the data's state law.
    """
    F = f_w.matrix_s if isinstance(f_w, FeatureMap) else np.asarray(f_w, dtype=float)
    vec = F.ndim == 1
    F = F.reshape(F.shape[0], -1)
    wv = np.asarray(w, dtype=float)[data.s]
    e = np.asarray(eta)[data.s, data.a]
    terms = gamma * (wv * e)[:, None] * F[data.s_next] - wv[:, None] * F[data.s]
    out = data.average(terms) + (1.0 - gamma) * (np.asarray(p0_e) @ F)
    return out[0] if vec else out
