"""Tabular MDPs, policies, and exact dynamic-programming quantities.

Everything here is computed exactly from the model by dense linear algebra:
q/v functions, the discounted visitation distribution, the behavior chain's
stationary distribution, and the density ratios (policy ratio ``eta``,
cumulative ratio ``nu``, marginal ratio ``mu`` and stationary ratio ``w``).
"""

from dataclasses import dataclass
from math import gcd
from typing import NamedTuple

import numpy as np
from scipy import linalg
from scipy.sparse.csgraph import connected_components

from .errors import IdentifiabilityError

REWARD_NOISES = ("gaussian", "two_point")
STOCHASTIC_ATOL = 1e-12


def _check_stochastic(x, axis, name):
    if np.any(x < 0):
        raise ValueError(f"{name} has negative entries")
    dev = np.max(np.abs(x.sum(axis=axis) - 1.0)) if x.size else 0.0
    if dev > STOCHASTIC_ATOL:
        raise ValueError(f"{name} rows must sum to 1 (max deviation {dev:.3g})")


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP with rewards conditionally independent of the next state.

    Parameters
    ----------
    transition : ndarray, shape (S, A, S)
        ``transition[s, a, s']`` is P(s' | s, a).
    reward_mean, reward_var : ndarray, shape (S, A)
        Mean and variance of the reward law at each state-action pair.
    gamma : float
        Discount factor in (0, 1).
    r_max : float
        Upper bound of the reward range ``[0, r_max]``.
    reward_noise : {"gaussian", "two_point"}
        Reward law around its mean. ``two_point`` draws from {0, r_max}, which
        pins the variance to ``m (r_max - m)``.
    """

    transition: np.ndarray
    reward_mean: np.ndarray
    reward_var: np.ndarray
    gamma: float
    r_max: float
    reward_noise: str = "gaussian"

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        R = np.array(self.reward_mean, dtype=float)
        V = np.array(self.reward_var, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        if R.shape != P.shape[:2] or V.shape != P.shape[:2]:
            raise ValueError("reward_mean and reward_var must have shape (S, A)")
        _check_stochastic(P, 2, "transition")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if np.any(R < 0) or np.any(R > self.r_max):
            raise ValueError("reward_mean must lie in [0, r_max]")
        if np.any(V < 0):
            raise ValueError("reward_var must be nonnegative")
        if self.reward_noise not in REWARD_NOISES:
            raise ValueError(f"reward_noise must be one of {REWARD_NOISES}")
        if self.reward_noise == "two_point":
            implied = R * (self.r_max - R)
            if not np.allclose(V, implied, rtol=1e-9, atol=1e-12):
                raise ValueError("two_point rewards require reward_var == mean * (r_max - mean)")
        for arr in (P, R, V):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward_mean", R)
        object.__setattr__(self, "reward_var", V)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "r_max", float(self.r_max))

    @classmethod
    def with_two_point_rewards(cls, transition, reward_mean, gamma, r_max):
        R = np.asarray(reward_mean, dtype=float)
        return cls(transition, R, R * (r_max - R), gamma, r_max, "two_point")

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    @property
    def q_max(self):
        return self.r_max / (1.0 - self.gamma)


@dataclass(frozen=True, eq=False)
class Policy:
    """Stochastic policy ``action_probs[s, a]`` plus the initial state law it is paired with."""

    action_probs: np.ndarray
    initial_dist: np.ndarray

    def __post_init__(self):
        pi = np.array(self.action_probs, dtype=float)
        p0 = np.array(self.initial_dist, dtype=float)
        if pi.ndim != 2 or p0.shape != (pi.shape[0],):
            raise ValueError("action_probs must be (S, A) and initial_dist (S,)")
        _check_stochastic(pi, 1, "action_probs")
        _check_stochastic(p0, 0, "initial_dist")
        pi.setflags(write=False)
        p0.setflags(write=False)
        object.__setattr__(self, "action_probs", pi)
        object.__setattr__(self, "initial_dist", p0)

    @property
    def n_states(self):
        return self.action_probs.shape[0]

    @property
    def n_actions(self):
        return self.action_probs.shape[1]

    def with_initial(self, initial_dist):
        return Policy(self.action_probs, initial_dist)


class RatioTables(NamedTuple):
    eta: np.ndarray  # (S, A)
    mu: np.ndarray  # (t_max + 1, S, A)


def _check_dims(mdp, *policies):
    for pi in policies:
        if pi.action_probs.shape != (mdp.n_states, mdp.n_actions):
            raise ValueError(
                f"policy shape {pi.action_probs.shape} does not match MDP "
                f"({mdp.n_states}, {mdp.n_actions})"
            )


def state_kernel(mdp, pi):
    """State-to-state transition matrix under ``pi``: K[s, s'] = sum_a pi(a|s) P(s'|s,a)."""
    return np.einsum("sa,sat->st", pi.action_probs, mdp.transition)


def bellman_operator(mdp, pi_e, q):
    """One application of q -> R + gamma * P * (pi_e q)."""
    v = exact_v(q, pi_e)
    return mdp.reward_mean + mdp.gamma * mdp.transition @ v


def exact_q(mdp, pi_e):
    """Solve the policy-evaluation Bellman equation for q by one dense solve."""
    _check_dims(mdp, pi_e)
    return solve_q(mdp.transition, mdp.reward_mean, pi_e.action_probs, mdp.gamma)


def solve_q(P, R, pi, gamma):
    """q solving q = R + gamma * P (pi q) for raw arrays P (S, A, S), R (S, A), pi (S, A)."""
    S, A = R.shape
    # Pi maps q (flattened) to v: v[s] = sum_a pi(a|s) q[s, a]
    Pi = np.zeros((S, S * A))
    for s in range(S):
        Pi[s, s * A:(s + 1) * A] = pi[s]
    M = np.eye(S * A) - gamma * P.reshape(S * A, S) @ Pi
    return linalg.solve(M, R.reshape(-1)).reshape(S, A)


def exact_v(q, pi_e):
    """Marginalize q over the policy's action distribution."""
    q = np.asarray(q, dtype=float)
    pi = pi_e.action_probs if isinstance(pi_e, Policy) else np.asarray(pi_e)
    if q.shape != pi.shape:
        raise ValueError(f"q shape {q.shape} does not match policy shape {pi.shape}")
    return np.sum(q * pi, axis=1)


def exact_policy_value(mdp, pi_e):
    """Normalized value (1 - gamma) * E_{s0 ~ p0_e}[v(s0)]."""
    v = exact_v(exact_q(mdp, pi_e), pi_e)
    return float((1.0 - mdp.gamma) * pi_e.initial_dist @ v)


def truncated_q(mdp, pi_e, omega):
    """Finite-horizon q-functions ``q_t`` for t = 0..omega (rewards up to step omega).

    Built by backward recursion q_omega = R, q_t = R + gamma P v_{t+1}.
    Returns an array of shape (omega + 1, S, A).
    """
    _check_dims(mdp, pi_e)
    return _backward_recursion(mdp.transition, mdp.reward_mean, pi_e.action_probs,
                               mdp.gamma, omega)


def _backward_recursion(P, R, pi, gamma, omega):
    out = np.empty((omega + 1,) + R.shape)
    out[omega] = R
    for t in range(omega - 1, -1, -1):
        v_next = np.sum(out[t + 1] * pi, axis=1)
        out[t] = R + gamma * (P @ v_next)
    return out


def discounted_visitation(mdp, pi):
    """Normalized discounted state-visitation distribution of ``pi`` from its initial law."""
    _check_dims(mdp, pi)
    K = state_kernel(mdp, pi)
    M = np.eye(mdp.n_states) - mdp.gamma * K.T
    d = linalg.solve(M, (1.0 - mdp.gamma) * pi.initial_dist)
    return np.clip(d, 0.0, None)


def communicating_classes(K):
    """Strongly connected components of the positive-probability graph of kernel K."""
    n, labels = connected_components(K > 0, directed=True, connection="strong")
    return [np.flatnonzero(labels == c).tolist() for c in range(n)]


def chain_period(K):
    """Period of an irreducible chain via BFS levels: gcd of level[u] + 1 - level[v] over edges."""
    n = K.shape[0]
    level = np.full(n, -1)
    level[0] = 0
    frontier = [0]
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(K[u] > 0):
                if level[v] < 0:
                    level[v] = level[u] + 1
                    nxt.append(v)
        frontier = nxt
    g = 0
    for u, v in zip(*np.nonzero(K > 0)):
        g = gcd(g, int(abs(level[u] + 1 - level[v])))
    return g


def stationary_distribution(mdp, pi_b):
    """Invariant distribution of the behavior state chain.

    Raises
    ------
    IdentifiabilityError
        If the chain is reducible (the message lists its communicating classes)
        or periodic.
    """
    _check_dims(mdp, pi_b)
    K = state_kernel(mdp, pi_b)
    classes = communicating_classes(K)
    if len(classes) > 1:
        raise IdentifiabilityError(
            f"behavior chain is reducible; communicating classes: {classes}"
        )
    period = chain_period(K)
    if period > 1:
        raise IdentifiabilityError(f"behavior chain is periodic with period {period}")
    S = mdp.n_states
    M = K.T - np.eye(S)
    M[-1, :] = 1.0
    rhs = np.zeros(S)
    rhs[-1] = 1.0
    d = linalg.solve(M, rhs)
    return np.clip(d, 0.0, None)


def density_ratio_eta(pi_e, pi_b):
    """Policy ratio pi_e / pi_b, zero where both vanish.

    Raises
    ------
    IdentifiabilityError
        If some action has target mass but no behavior mass.
    """
    pe, pb = pi_e.action_probs, pi_b.action_probs
    bad = np.argwhere((pe > 0) & (pb <= 0))
    if len(bad):
        s, a = bad[0]
        raise IdentifiabilityError(
            f"overlap violated at state {s}, action {a}: target {pe[s, a]:.3g}, behavior 0"
        )
    eta = np.zeros_like(pe)
    np.divide(pe, pb, out=eta, where=pb > 0)
    return eta


def stationary_ratio(d_gamma, denom):
    """w = d_gamma / denom; the denominator must be strictly positive."""
    denom = np.asarray(denom, dtype=float)
    zero = np.flatnonzero(denom <= 0)
    if len(zero):
        raise IdentifiabilityError(
            f"denominator distribution has zero mass at states {zero.tolist()}"
        )
    return d_gamma / denom


def oracle_w(mdp, pi_e, pi_b, denom="initial"):
    """Stationary density ratio w(s) = p_{e,gamma}^(inf)(s) / denom(s).

    ``denom`` is ``"initial"`` (the behavior policy's initial law),
    ``"stationary"`` (the behavior chain's invariant law), or an explicit
    probability vector.
    """
    _check_dims(mdp, pi_e, pi_b)
    if isinstance(denom, str):
        if denom == "initial":
            d = pi_b.initial_dist
        elif denom == "stationary":
            d = stationary_distribution(mdp, pi_b)
        else:
            raise ValueError(f"unknown denominator {denom!r}")
    else:
        d = denom
    return stationary_ratio(discounted_visitation(mdp, pi_e), d)


def state_action_marginals(mdp, pi, t_max):
    """Marginal laws p^(t)(s, a) for t = 0..t_max, shape (t_max + 1, S, A)."""
    out = np.empty((t_max + 1, mdp.n_states, mdp.n_actions))
    d = np.array(pi.initial_dist)
    for t in range(t_max + 1):
        out[t] = d[:, None] * pi.action_probs
        d = np.einsum("sa,sat->t", out[t], mdp.transition)
    return out


def marginal_ratio_mu(mdp, pi_e, pi_b, t_max):
    """Marginal ratios mu_t = p_e^(t)(s,a) / p_b^(t)(s,a) for t = 0..t_max.

    Entries where both marginals vanish are set to 0.
    """
    _check_dims(mdp, pi_e, pi_b)
    eta = density_ratio_eta(pi_e, pi_b)
    pe = state_action_marginals(mdp, pi_e, t_max)
    pb = state_action_marginals(mdp, pi_b, t_max)
    bad = np.argwhere((pe > 0) & (pb <= 0))
    if len(bad):
        t, s, a = bad[0]
        raise IdentifiabilityError(
            f"marginal support violated at t={t}, state {s}, action {a}"
        )
    mu = np.zeros_like(pe)
    np.divide(pe, pb, out=mu, where=pb > 0)
    return RatioTables(eta=eta, mu=mu)


def cumulative_ratio_nu(trajectory, pi_e, pi_b, t):
    """Cumulative ratio prod_{k<=t} eta(s_k, a_k) along one trajectory.

    ``trajectory`` is anything with ``states`` and ``actions`` sequences, or a
    ``(states, actions)`` pair.
    """
    if hasattr(trajectory, "states"):
        states, actions = trajectory.states, trajectory.actions
    else:
        states, actions = trajectory
    if not 0 <= t < len(actions):
        raise ValueError(f"t={t} outside trajectory of length {len(actions)}")
    eta = density_ratio_eta(pi_e, pi_b)
    s = np.asarray(states[:t + 1], dtype=int)
    a = np.asarray(actions[:t + 1], dtype=int)
    return float(np.prod(eta[s, a]))
