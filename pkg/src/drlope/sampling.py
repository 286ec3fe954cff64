"""Dataset generation under trajectory and transition sampling.

Randomness is counter based: a master seed plus a tuple of integers
(replication index, stream purpose) names an independent stream through
``numpy.random.SeedSequence``, so results do not depend on which worker ran
which replication.
"""

import csv
import io
from bisect import bisect_right
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import ParseError
from .mdp import Policy, TabularMdp, state_kernel, stationary_distribution

REGIMES = ("StationaryInit", "ErgodicBurnIn", "ArbitraryInit")
SOURCES = ("Iid", "FromTrajectories", "ExactMoments")
CSV_COLUMNS = ("traj_id", "t", "s", "a", "r", "s_next")
DEFAULT_BURN_IN = 1000

# stream purposes for derive_rng
STREAM_DATA = 0
STREAM_FOLDS = 1
STREAM_CORRUPT_Q = 2
STREAM_CORRUPT_W = 3
STREAM_MISC = 4


def derive_seed(master_seed, *key):
    """SeedSequence for stream ``key`` (e.g. replication, purpose) under a master seed."""
    return np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))


def derive_rng(master_seed, *key):
    return np.random.default_rng(derive_seed(master_seed, *key))


class Transition(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int
    traj_id: int
    t: int


class Trajectory(NamedTuple):
    states: np.ndarray  # (T + 2,), includes s_{T+1}
    actions: np.ndarray  # (T + 1,)
    rewards: np.ndarray  # (T + 1,)


def _frozen(x, dtype):
    x = np.array(x, dtype=dtype)
    x.setflags(write=False)
    return x


@dataclass(frozen=True, eq=False)
class TrajectoryDataset:
    """N trajectories observed over time steps t = 0..T.

    Attributes
    ----------
    states : ndarray of int, shape (N, T + 2)
        ``states[i, t]`` is s_t; the last column holds the final next state.
    actions : ndarray of int, shape (N, T + 1)
    rewards : ndarray of float, shape (N, T + 1)
    initial_dist : ndarray, shape (S,)
        Law of s_0 actually used by the generator.
    regime_tag : str
        One of ``StationaryInit``, ``ErgodicBurnIn``, ``ArbitraryInit``.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    initial_dist: Optional[np.ndarray] = None
    regime_tag: str = "ArbitraryInit"

    def __post_init__(self):
        st = _frozen(self.states, np.int64)
        ac = _frozen(self.actions, np.int64)
        rw = _frozen(self.rewards, float)
        if ac.ndim != 2 or rw.shape != ac.shape or st.shape != (ac.shape[0], ac.shape[1] + 1):
            raise ValueError("expected states (N, T+2), actions and rewards (N, T+1)")
        if self.regime_tag not in REGIMES:
            raise ValueError(f"regime_tag must be one of {REGIMES}")
        object.__setattr__(self, "states", st)
        object.__setattr__(self, "actions", ac)
        object.__setattr__(self, "rewards", rw)
        if self.initial_dist is not None:
            object.__setattr__(self, "initial_dist", _frozen(self.initial_dist, float))

    @property
    def N(self):
        return self.actions.shape[0]

    @property
    def T(self):
        return self.actions.shape[1] - 1

    @property
    def n(self):
        return self.actions.size

    def trajectory(self, i):
        return Trajectory(self.states[i], self.actions[i], self.rewards[i])

    @property
    def trajectories(self):
        return [self.trajectory(i) for i in range(self.N)]


@dataclass(frozen=True, eq=False)
class TransitionDataset:
    """Column store of (s, a, r, s') quadruplets with provenance.

    ``weights`` is None for ordinary samples. A weighted dataset stands for an
    exact expectation: every empirical average becomes the weighted sum.
    """

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    traj_id: Optional[np.ndarray] = None
    t: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    source: str = "Iid"

    def __post_init__(self):
        s = _frozen(self.s, np.int64).reshape(-1)
        n = s.size
        cols = {"s": s, "a": _frozen(self.a, np.int64).reshape(-1),
                "r": _frozen(self.r, float).reshape(-1),
                "s_next": _frozen(self.s_next, np.int64).reshape(-1),
                "traj_id": _frozen(np.arange(n) if self.traj_id is None else self.traj_id,
                                   np.int64).reshape(-1),
                "t": _frozen(np.zeros(n) if self.t is None else self.t, np.int64).reshape(-1)}
        for name, col in cols.items():
            if col.size != n:
                raise ValueError(f"column {name} has length {col.size}, expected {n}")
            object.__setattr__(self, name, col)
        if self.weights is not None:
            w = _frozen(self.weights, float).reshape(-1)
            if w.size != n or np.any(w < 0):
                raise ValueError("weights must be nonnegative with one entry per transition")
            object.__setattr__(self, "weights", w)
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}")

    @property
    def n(self):
        return self.s.size

    def __len__(self):
        return self.n

    @property
    def transitions(self):
        return [Transition(int(s), int(a), float(r), int(s2), int(i), int(t))
                for s, a, r, s2, i, t in zip(self.s, self.a, self.r, self.s_next,
                                             self.traj_id, self.t)]

    def average(self, values):
        """Empirical mean over transitions (weighted sum for exact-moment data)."""
        values = np.asarray(values, dtype=float)
        if self.weights is None:
            return np.mean(values, axis=0)
        return np.tensordot(self.weights, values, axes=1) / self.weights.sum()

    def subset(self, mask):
        mask = np.asarray(mask)
        return TransitionDataset(self.s[mask], self.a[mask], self.r[mask], self.s_next[mask],
                                 self.traj_id[mask], self.t[mask],
                                 None if self.weights is None else self.weights[mask],
                                 self.source)

    def visit_counts(self, n_states, n_actions):
        return np.bincount(self.s * n_actions + self.a,
                           minlength=n_states * n_actions).reshape(n_states, n_actions)


def _joint_cdf(mdp, pi_b):
    """Per-state cumulative table over the joint outcome (a, s')."""
    S, A = mdp.n_states, mdp.n_actions
    joint = (pi_b.action_probs[:, :, None] * mdp.transition).reshape(S, A * S)
    tables = []
    for row in joint:
        cum = np.cumsum(row)
        cum /= cum[-1]
        last = np.flatnonzero(row > 0)[-1]
        cum[last:] = 1.0
        tables.append(cum.tolist())
    return tables


def _draw_rewards(mdp, s, a, rng):
    mean = mdp.reward_mean[s, a]
    if mdp.reward_noise == "two_point":
        u = rng.random(np.shape(s))
        return np.where(u * mdp.r_max < mean, mdp.r_max, 0.0)
    z = rng.standard_normal(np.shape(s))
    return mean + np.sqrt(mdp.reward_var[s, a]) * z


def _check_dist(p, S, name):
    p = np.asarray(p, dtype=float)
    if p.shape != (S,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} must be a probability vector of length {S}")
    return p


def _categorical(p, u):
    cum = np.cumsum(p)
    return np.minimum(np.searchsorted(cum / cum[-1], u, side="right"),
                      np.flatnonzero(p > 0)[-1])


def sample_trajectories(mdp: TabularMdp, pi_b: Policy, N, T, init="StationaryInit",
                        burn_in=DEFAULT_BURN_IN, seed=None, initial_dist=None):
    """Draw N behavior trajectories, each observed at t = 0..T.

    Parameters
    ----------
    init : {"StationaryInit", "ErgodicBurnIn", "ArbitraryInit"}
        ``StationaryInit`` draws s_0 from the behavior chain's invariant law.
        ``ErgodicBurnIn`` starts from ``initial_dist`` (default
        ``pi_b.initial_dist``) and discards ``burn_in`` steps.
        ``ArbitraryInit`` starts from ``initial_dist`` directly.
    seed : int, SeedSequence or Generator

    Returns
    -------
    TrajectoryDataset
        ``initial_dist`` holds the exact law of s_0 under the chosen regime.
    """
    if init not in REGIMES:
        raise ValueError(f"init must be one of {REGIMES}")
    if N < 0 or T < 0:
        raise ValueError("N and T must be nonnegative")
    S = mdp.n_states
    rng = np.random.default_rng(seed)
    start = _check_dist(pi_b.initial_dist if initial_dist is None else initial_dist, S,
                        "initial_dist")
    if init == "StationaryInit":
        p0 = stationary_distribution(mdp, pi_b)
    elif init == "ErgodicBurnIn":
        K = state_kernel(mdp, pi_b)
        p0 = start @ np.linalg.matrix_power(K, int(burn_in))
    else:
        p0 = start
    cdf = _joint_cdf(mdp, pi_b)
    steps = T + 1 + (burn_in if init == "ErgodicBurnIn" else 0)
    first = _categorical(start if init == "ErgodicBurnIn" else p0, rng.random(N))
    states = np.empty((N, T + 2), dtype=np.int64)
    actions = np.empty((N, T + 1), dtype=np.int64)
    skip = steps - (T + 1)
    for i in range(N):
        u = rng.random(steps).tolist()
        s = int(first[i])
        srow = [0] * (T + 2)
        arow = [0] * (T + 1)
        for k in range(steps):
            j = bisect_right(cdf[s], u[k])
            a, s_next = divmod(j, S)
            if k >= skip:
                srow[k - skip] = s
                arow[k - skip] = a
            s = s_next
        srow[T + 1] = s
        states[i] = srow
        actions[i] = arow
    rewards = _draw_rewards(mdp, states[:, :-1], actions, rng)
    return TrajectoryDataset(states, actions, rewards, p0, init)


def sample_transitions(mdp: TabularMdp, pi_b: Policy, state_dist, n, seed=None):
    """Draw n iid quadruplets with s ~ state_dist, a ~ pi_b(.|s), then r and s'."""
    S, A = mdp.n_states, mdp.n_actions
    p = _check_dist(state_dist, S, "state_dist")
    rng = np.random.default_rng(seed)
    s = _categorical(p, rng.random(n))
    cum_pi = np.cumsum(pi_b.action_probs, axis=1)
    u = rng.random(n)
    a = np.minimum((u[:, None] >= cum_pi[s]).sum(axis=1), A - 1)
    cum_P = np.cumsum(mdp.transition[s, a], axis=1)
    u = rng.random(n)
    s_next = np.minimum((u[:, None] >= cum_P).sum(axis=1), S - 1)
    r = _draw_rewards(mdp, s, a, rng)
    return TransitionDataset(s, a, r, s_next, source="Iid")


def trajectory_to_transitions(ds: TrajectoryDataset):
    """Flatten trajectories into transitions ordered by (traj_id, t)."""
    if ds.n == 0:
        raise ValueError("empty trajectory dataset")
    N, T1 = ds.actions.shape
    return TransitionDataset(ds.states[:, :-1].ravel(), ds.actions.ravel(), ds.rewards.ravel(),
                             ds.states[:, 1:].ravel(), np.repeat(np.arange(N), T1),
                             np.tile(np.arange(T1), N), source="FromTrajectories")


def transitions_to_trajectories(data: TransitionDataset, initial_dist=None,
                                regime_tag="ArbitraryInit"):
    """Rebuild a TrajectoryDataset from transitions carrying (traj_id, t) provenance.

    Every trajectory must cover t = 0..T with the same T and chain consistently
    (s_next at t equals s at t + 1).
    """
    order = np.lexsort((data.t, data.traj_id))
    ids, counts = np.unique(data.traj_id, return_counts=True)
    if data.n == 0 or np.any(counts != counts[0]):
        raise ValueError("trajectories must be nonempty and of equal length")
    N, T1 = ids.size, int(counts[0])
    t = data.t[order].reshape(N, T1)
    if np.any(t != np.arange(T1)):
        raise ValueError("each trajectory must have time steps 0..T without gaps")
    s = data.s[order].reshape(N, T1)
    s2 = data.s_next[order].reshape(N, T1)
    if np.any(s[:, 1:] != s2[:, :-1]):
        raise ValueError("transitions do not chain into trajectories")
    states = np.concatenate([s, s2[:, -1:]], axis=1)
    return TrajectoryDataset(states, data.a[order].reshape(N, T1),
                             data.r[order].reshape(N, T1), initial_dist, regime_tag)


def expected_transitions(mdp: TabularMdp, pi_b: Policy, state_dist):
    """Exact-moment surrogate: one weighted row per reachable (s, a, s').

    Weights are state_dist(s) pi_b(a|s) P(s'|s,a) and rewards are the reward
    means, so ``average`` returns exact expectations of anything affine in r.
    """
    p = _check_dist(state_dist, mdp.n_states, "state_dist")
    wts = p[:, None, None] * pi_b.action_probs[:, :, None] * mdp.transition
    s, a, s2 = np.nonzero(wts > 0)
    return TransitionDataset(s, a, mdp.reward_mean[s, a], s2, weights=wts[s, a, s2],
                             source="ExactMoments")


def dataset_to_csv(data):
    """CSV text with a mandatory header; rewards use 17 significant digits."""
    if isinstance(data, TrajectoryDataset):
        data = trajectory_to_transitions(data)
    buf = io.StringIO()
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for i, t, s, a, r, s2 in zip(data.traj_id.tolist(), data.t.tolist(), data.s.tolist(),
                                 data.a.tolist(), data.r.tolist(), data.s_next.tolist()):
        buf.write(f"{i},{t},{s},{a},{r:.17g},{s2}\n")
    return buf.getvalue()


def dataset_from_csv(text, source="FromTrajectories"):
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("missing header row", line=1, column=1) from None
    if tuple(h.strip() for h in header) != CSV_COLUMNS:
        raise ParseError(f"header must be {','.join(CSV_COLUMNS)}", line=1, column=1)
    cols = [[] for _ in CSV_COLUMNS]
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_COLUMNS):
            raise ParseError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}",
                             line=lineno, column=1)
        for j, (name, tok) in enumerate(zip(CSV_COLUMNS, row)):
            try:
                cols[j].append(float(tok) if name == "r" else int(tok))
            except ValueError:
                raise ParseError(f"bad {name} value {tok!r}", line=lineno, column=j + 1) from None
    traj_id, t, s, a, r, s2 = cols
    return TransitionDataset(np.array(s, dtype=np.int64), np.array(a, dtype=np.int64),
                             np.array(r, dtype=float), np.array(s2, dtype=np.int64),
                             np.array(traj_id, dtype=np.int64), np.array(t, dtype=np.int64),
                             source=source)


def check_indices(data: TransitionDataset, n_states, n_actions):
    """Raise ValueError if any state or action index is outside the MDP."""
    for name, col, hi in (("s", data.s, n_states), ("a", data.a, n_actions),
                          ("s_next", data.s_next, n_states)):
        bad = np.flatnonzero((col < 0) | (col >= hi))
        if bad.size:
            raise ValueError(f"{name} index {col[bad[0]]} out of range at row {bad[0]}")


__all__ = [
    "Transition", "Trajectory", "TrajectoryDataset", "TransitionDataset", "derive_seed",
    "derive_rng", "sample_trajectories", "sample_transitions", "trajectory_to_transitions",
    "transitions_to_trajectories", "expected_transitions", "dataset_to_csv", "dataset_from_csv",
    "check_indices",
]
