"""Monte-Carlo harness: environments, policy pairs, misspecification settings, MSE tables.

Every replication draws from its own counter-based stream keyed by
(cell index, replication, purpose), so tables are identical for any worker
count. Tables aggregate replications in index order.
"""

import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .errors import (
    IdentifiabilityError,
    InfeasibleSchemeError,
    ParseError,
    SingularSystemError,
)
from .estimators import (
    confidence_interval,
    default_omega,
    drl_m3_from_nuisances,
    estimate_dm,
    estimate_drl_m1,
    estimate_drl_m2,
    estimate_is,
    estimate_mis,
    estimate_snis,
    fit_fold_nuisances,
    make_folds,
    trajectory_folds,
)
from .mdp import (
    Policy,
    TabularMdp,
    density_ratio_eta,
    exact_policy_value,
    exact_q,
    marginal_ratio_mu,
    oracle_w,
    stationary_distribution,
)
from .nuisance import (
    FeatureMap,
    NuisancePair,
    QFunction,
    WFunction,
    corrupt_nuisance,
    fit_q_model_based,
    fit_q_truncated,
    fit_w_linear,
)
from .sampling import (
    STREAM_CORRUPT_Q,
    STREAM_CORRUPT_W,
    STREAM_DATA,
    STREAM_FOLDS,
    derive_seed,
    sample_trajectories,
    sample_transitions,
    trajectory_to_transitions,
)
from .textio import write_atomic

SETTINGS = ("BothCorrect", "OnlyWCorrect", "OnlyQCorrect")
ESTIMATORS = ("is", "snis", "dm", "mis", "dr", "drl1", "drl2", "drl3", "drl3_ct", "drl3_cx",
              "drl3_oracle")
CORRUPTION = (1.0, 1.0)
SOFTEN = 0.05
MSE_COLUMNS = ("estimator", "setting", "N", "T", "mse", "bias2", "variance", "coverage",
               "replications", "skipped")
REPLICATE_COLUMNS = ("estimator", "setting", "N", "T", "rep", "rho_hat", "ci_low", "ci_high",
                     "status")


# ---------------------------------------------------------------- environments


def make_gridworld(width, height, slip_prob=0.1, reward_spec=None, gamma=0.98):
    """Grid of ``width * height`` cells with actions up/right/down/left.

    The intended move happens with probability ``1 - slip_prob``; the slip
    mass is split between the two lateral moves. Moves into a wall stay put.
    Any action at the goal cell pays ``goal_reward`` and resets to
    ``reset_to``; every other pair pays ``step_reward``.

    Parameters
    ----------
    reward_spec : dict, optional
        Keys ``goal`` (x, y), ``reset_to`` (x, y), ``goal_reward``,
        ``step_reward``, ``noise_var`` and ``r_max``.
    """
    if width < 1 or height < 1 or width * height > 400:
        raise ValueError("grid needs 1 <= width * height <= 400")
    if not 0.0 <= slip_prob <= 1.0:
        raise ValueError("slip_prob must lie in [0, 1]")
    spec = {"goal": (width - 1, height - 1), "reset_to": (0, 0), "goal_reward": 1.0,
            "step_reward": 0.0, "noise_var": 0.1, "r_max": None}
    spec.update(reward_spec or {})
    S, A = width * height, 4
    moves = [(0, 1), (1, 0), (0, -1), (-1, 0)]

    def cell(x, y):
        return y * width + x

    def step(x, y, d):
        nx, ny = x + moves[d][0], y + moves[d][1]
        return cell(nx, ny) if 0 <= nx < width and 0 <= ny < height else cell(x, y)

    gx, gy = spec["goal"]
    goal = cell(gx, gy)
    reset = cell(*spec["reset_to"])
    P = np.zeros((S, A, S))
    R = np.full((S, A), float(spec["step_reward"]))
    for y in range(height):
        for x in range(width):
            s = cell(x, y)
            for a in range(A):
                if s == goal:
                    P[s, a, reset] = 1.0
                    R[s, a] = spec["goal_reward"]
                    continue
                P[s, a, step(x, y, a)] += 1.0 - slip_prob
                P[s, a, step(x, y, (a + 1) % 4)] += slip_prob / 2
                P[s, a, step(x, y, (a + 3) % 4)] += slip_prob / 2
    r_max = spec["r_max"] or max(spec["goal_reward"], spec["step_reward"], 1e-12)
    return TabularMdp(P, R, np.full((S, A), float(spec["noise_var"])), gamma, r_max)


def make_random_mdp(n_states, n_actions, seed, gamma=0.98, noise_var=0.1, concentration=1.0,
                    r_max=1.0):
    """Dense Dirichlet transitions and uniform mean rewards; irreducible and aperiodic."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    P = np.maximum(P, 1e-300)
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(0.0, r_max, (n_states, n_actions))
    return TabularMdp(P, R, np.full((n_states, n_actions), noise_var), gamma, r_max)


def value_iteration(mdp, sweeps=None, q0=None, tol=1e-12, max_sweeps=100_000):
    """Optimal-control q iteration; runs ``sweeps`` steps or until converged."""
    q = np.zeros((mdp.n_states, mdp.n_actions)) if q0 is None else np.array(q0, dtype=float)
    n = sweeps if sweeps is not None else max_sweeps
    for _ in range(n):
        nxt = mdp.reward_mean + mdp.gamma * mdp.transition @ q.max(axis=1)
        done = np.max(np.abs(nxt - q)) < tol
        q = nxt
        if sweeps is None and done:
            break
    return q


def sampled_q_iteration(mdp, sweeps, q0, rng):
    """Synchronous q-learning on the true model's samples.

    Each sweep draws one successor per (s, a) and moves q toward
    r(s, a) + gamma * max q(s') with step 1 / (k + 1). A few sweeps give a
    partly trained q whose greedy policy usually differs from the optimum.
    """
    q = np.array(q0, dtype=float)
    S = mdp.n_states
    cdf = np.cumsum(mdp.transition, axis=2)
    for k in range(sweeps):
        u = rng.random(q.shape + (1,))
        nxt = np.minimum((u > cdf).sum(axis=2), S - 1)
        step = 1.0 / (k + 1)
        q = (1.0 - step) * q + step * (mdp.reward_mean + mdp.gamma * q.max(axis=1)[nxt])
    return q


def soften(greedy_actions, n_actions, eps=SOFTEN):
    pi = np.full((greedy_actions.size, n_actions), eps / n_actions)
    pi[np.arange(greedy_actions.size), greedy_actions] += 1.0 - eps
    return pi


def make_policy_pair(mdp, gamma=None, alpha=0.5, seed=0, sweeps=60, initial_dist=None,
                     eps=SOFTEN):
    """Target = softened optimal policy; behavior = alpha * target + (1 - alpha) * softened pi_+.

    pi_+ is greedy after ceil(sweeps / 6) sampled q-learning sweeps from a
    seeded random start, so it is a partly trained policy. Exact sweeps are
    not used here: on small fast-mixing MDPs their greedy policy is already
    optimal after a handful of sweeps, which would make every mixture
    on-policy. The behavior's initial law is its stationary law when that is
    identified, uniform otherwise.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if gamma is not None and gamma != mdp.gamma:
        mdp = replace(mdp, gamma=gamma)
    S, A = mdp.n_states, mdp.n_actions
    rng = np.random.default_rng(seed)
    q_star = value_iteration(mdp)
    q0 = rng.uniform(0.0, mdp.q_max, (S, A))
    q_plus = sampled_q_iteration(mdp, math.ceil(sweeps / 6), q0, rng)
    pe = soften(np.argmax(q_star, axis=1), A, eps)
    pp = soften(np.argmax(q_plus, axis=1), A, eps)
    p0 = np.full(S, 1.0 / S) if initial_dist is None else np.asarray(initial_dist, float)
    pi_e = Policy(pe, p0)
    pb = alpha * pe + (1.0 - alpha) * pp
    pi_b = Policy(pb, np.full(S, 1.0 / S))
    try:
        pi_b = pi_b.with_initial(stationary_distribution(mdp, pi_b))
    except IdentifiabilityError:
        pass
    return pi_e, pi_b


def make_curse_pair(mdp, initial_dist=None):
    """Deterministic greedy target against a uniform behavior, so eta takes values {A, 0}."""
    S, A = mdp.n_states, mdp.n_actions
    pe = np.zeros((S, A))
    pe[np.arange(S), np.argmax(value_iteration(mdp), axis=1)] = 1.0
    p0 = np.full(S, 1.0 / S) if initial_dist is None else np.asarray(initial_dist, float)
    pi_b = Policy(np.full((S, A), 1.0 / A), np.full(S, 1.0 / S))
    pi_b = pi_b.with_initial(stationary_distribution(mdp, pi_b))
    return Policy(pe, p0), pi_b


# ---------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    """Experiment grid. ``sampling = "transition"`` draws T iid transitions per replication."""

    env: str = "random"  # random | gridworld | curse
    n_states: int = 5
    n_actions: int = 3
    width: int = 4
    height: int = 4
    slip_prob: float = 0.1
    noise_var: float = 0.1
    env_seed: int = 0
    alpha_mix: float = 0.4
    gamma: float = 0.98
    Ns: list = field(default_factory=lambda: [1])
    Ts: list = field(default_factory=lambda: [1000])
    estimators: list = field(default_factory=lambda: ["drl3"])
    settings: list = field(default_factory=lambda: ["BothCorrect"])
    replications: int = 10
    master_seed: int = 0
    sampling: str = "trajectory"  # trajectory | transition
    init: str = "StationaryInit"
    burn_in: int = 1000
    alpha_ci: float = 0.05
    variance_scale: float = 1.0
    omega: Optional[int] = None
    workers: int = 1

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise ValueError(f"unknown estimators {bad}; choose from {ESTIMATORS}")
        bad = [s for s in self.settings if s not in SETTINGS]
        if bad:
            raise ValueError(f"unknown settings {bad}; choose from {SETTINGS}")
        if self.env not in ("random", "gridworld", "curse"):
            raise ValueError(f"unknown env {self.env!r}")
        if self.sampling not in ("trajectory", "transition"):
            raise ValueError(f"unknown sampling {self.sampling!r}")
        if self.sampling == "transition" and any(n != 1 for n in self.Ns):
            raise ValueError("transition sampling uses Ns = [1]; T is the transition count")


_LIST_KEYS = {"Ns": int, "Ts": int, "estimators": str, "settings": str}


def parse_config(text):
    """Parse the flat ``key = value`` config format.

    Blank lines and lines starting with ``#`` are ignored. List-valued keys
    (Ns, Ts, estimators, settings) take comma-separated values. ``omega``
    accepts ``auto``.
    """
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    defaults = ExperimentConfig()
    kwargs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.strip()
        if not body or body.startswith("#"):
            continue
        if "=" not in body:
            raise ParseError("expected 'key = value'", line=lineno, column=1)
        key, _, value = body.partition("=")
        key, value = key.strip(), value.strip()
        col = line.index("=") + 2
        if key not in types:
            raise ParseError(f"unknown key {key!r}", line=lineno, column=line.index(key) + 1)
        try:
            if key in _LIST_KEYS:
                kwargs[key] = [_LIST_KEYS[key](v.strip()) for v in value.split(",") if v.strip()]
            elif key == "omega":
                kwargs[key] = None if value in ("auto", "") else int(value)
            else:
                kwargs[key] = type(getattr(defaults, key))(value)
        except ValueError as exc:
            raise ParseError(f"bad value for {key}: {exc}", line=lineno, column=col) from None
    try:
        return ExperimentConfig(**kwargs)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def format_config(cfg):
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        elif v is None:
            v = "auto"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- environment bundle


@dataclass(frozen=True, eq=False)
class Environment:
    mdp: TabularMdp
    pi_e: Policy
    pi_b: Policy
    rho: float
    eta: np.ndarray
    q: np.ndarray
    w_stationary: np.ndarray
    state_law: np.ndarray


def build_environment(cfg: ExperimentConfig):
    if cfg.env == "gridworld":
        mdp = make_gridworld(cfg.width, cfg.height, cfg.slip_prob, {"noise_var": cfg.noise_var},
                             cfg.gamma)
    else:
        mdp = make_random_mdp(cfg.n_states, cfg.n_actions, cfg.env_seed, cfg.gamma,
                              cfg.noise_var)
    if cfg.env == "curse":
        pi_e, pi_b = make_curse_pair(mdp)
    else:
        pi_e, pi_b = make_policy_pair(mdp, alpha=cfg.alpha_mix, seed=cfg.env_seed)
    law = stationary_distribution(mdp, pi_b)
    return Environment(mdp, pi_e, pi_b, exact_policy_value(mdp, pi_e),
                       density_ratio_eta(pi_e, pi_b), exact_q(mdp, pi_e),
                       oracle_w(mdp, pi_e, pi_b, law), law)


def apply_setting(pair: NuisancePair, setting, seed, q_bounds=(None, None),
                  w_bounds=(0.0, None), corruption=CORRUPTION):
    """Corrupt the nuisance the setting declares wrong; identity for BothCorrect.

    ``seed`` is a pair of seeds (for q, for w) or one seed used for both.
    """
    if setting == "BothCorrect":
        return pair
    seeds = seed if isinstance(seed, tuple) else (seed, seed)
    mean, sd = corruption
    if setting == "OnlyWCorrect":
        q = corrupt_nuisance(pair.q_hat, mean, sd, seeds[0], *q_bounds)
        return NuisancePair(pair.w_hat, q, "Corrupted", pair.fold_id)
    if setting == "OnlyQCorrect":
        w = corrupt_nuisance(pair.w_hat, mean, sd, seeds[1], *w_bounds)
        return NuisancePair(w, pair.q_hat, "Corrupted", pair.fold_id)
    raise ValueError(f"unknown setting {setting!r}")


# ---------------------------------------------------------------- one replication


_SCHEME_OF = {"drl3": "Adaptive", "drl3_ct": "CrossTime4", "drl3_cx": "CrossTrajectory2"}


def _fitters(env, gamma):
    mdp = env.mdp
    fmap = FeatureMap.tabular(mdp.n_states, mdp.n_actions)

    def w_fit(d):
        return fit_w_linear(d, fmap, env.eta, env.pi_e.initial_dist, gamma)

    def q_fit(d):
        return fit_q_model_based(d, env.pi_e, gamma, mdp.r_max)

    return w_fit, q_fit


def run_one(cfg: ExperimentConfig, env: Environment, cell, N, T, rep):
    """All requested estimators and settings on one dataset.

    Returns a list of (estimator, setting, rho_hat, ci_low, ci_high, status).
    """
    mdp, pi_e, pi_b, gamma = env.mdp, env.pi_e, env.pi_b, cfg.gamma
    data_seed = derive_seed(cfg.master_seed, cell, rep, STREAM_DATA)
    if cfg.sampling == "transition":
        trajs = None
        data = sample_transitions(mdp, pi_b, env.state_law, T, data_seed)
    else:
        trajs = sample_trajectories(mdp, pi_b, N, T, cfg.init, cfg.burn_in, data_seed)
        data = trajs
    w_fit, q_fit = _fitters(env, gamma)
    q_bounds = (0.0, mdp.q_max)
    out = []
    fitted = {}

    def record(name, setting, rep_or_exc):
        if isinstance(rep_or_exc, Exception):
            out.append((name, setting, math.nan, math.nan, math.nan,
                        f"{type(rep_or_exc).__name__}: {rep_or_exc}"))
            return
        r = rep_or_exc
        lo, hi = r.ci_low, r.ci_high
        if r.variance_hat is not None and cfg.variance_scale != 1.0:
            lo, hi = confidence_interval(r.rho_hat, r.variance_hat * cfg.variance_scale,
                                         r.n_effective, cfg.alpha_ci)
        out.append((name, setting, r.rho_hat, math.nan if lo is None else lo,
                    math.nan if hi is None else hi, "ok"))

    def pairs_for(scheme):
        if scheme not in fitted:
            try:
                folds = make_folds(data, scheme,
                                   derive_seed(cfg.master_seed, cell, rep, STREAM_FOLDS))
                fitted[scheme] = (folds, fit_fold_nuisances(data, folds, w_fit, q_fit))
            except (InfeasibleSchemeError, SingularSystemError, np.linalg.LinAlgError) as exc:
                fitted[scheme] = exc
        return fitted[scheme]

    def corrupted(pairs, setting):
        res = []
        for p in pairs:
            j = p.fold_id or 0
            seeds = (derive_seed(cfg.master_seed, cell, rep, STREAM_CORRUPT_Q, j),
                     derive_seed(cfg.master_seed, cell, rep, STREAM_CORRUPT_W, j))
            res.append(apply_setting(p, setting, seeds, q_bounds))
        return res

    trunc_cache = {}

    def truncated(setting, omega, train):
        key = (setting, omega, id(train))
        if key not in trunc_cache:
            qt = fit_q_truncated(train, pi_e, gamma, mdp.r_max, omega)
            if setting == "OnlyWCorrect":
                seed = derive_seed(cfg.master_seed, cell, rep, STREAM_CORRUPT_Q, 99)
                qt = np.clip(qt + np.random.default_rng(seed).normal(*CORRUPTION, qt.shape),
                             *q_bounds)
            trunc_cache[key] = qt
        return trunc_cache[key]

    for setting in cfg.settings:
        for name in cfg.estimators:
            try:
                if name in ("is", "snis"):
                    if trajs is None:
                        raise InfeasibleSchemeError("needs trajectory data")
                    fn = estimate_is if name == "is" else estimate_snis
                    record(name, setting, fn(trajs, pi_e, pi_b, gamma))
                elif name in ("dm", "mis"):
                    got = pairs_for("Adaptive")
                    if isinstance(got, Exception):
                        raise got
                    pair = corrupted(got[1], setting)[0]
                    if name == "dm":
                        record(name, setting, estimate_dm(pair.q_hat, pi_e, gamma))
                    else:
                        record(name, setting, estimate_mis(data, pair.w_hat, pi_e, pi_b,
                                                           cfg.alpha_ci))
                elif name in _SCHEME_OF:
                    got = pairs_for(_SCHEME_OF[name])
                    if isinstance(got, Exception):
                        raise got
                    folds, pairs = got
                    record(name, setting, drl_m3_from_nuisances(
                        data, folds, corrupted(pairs, setting), pi_e, pi_b, gamma,
                        cfg.alpha_ci, name))
                elif name == "drl3_oracle":
                    pair = NuisancePair(WFunction(env.w_stationary, "Oracle"),
                                        QFunction(env.q, "Oracle"), "Oracle")
                    folds = make_folds(data, "OracleNuisance")
                    record(name, setting, drl_m3_from_nuisances(
                        data, folds, [pair], pi_e, pi_b, gamma, cfg.alpha_ci, name))
                elif name in ("dr", "drl1", "drl2"):
                    if trajs is None:
                        raise InfeasibleSchemeError("needs trajectory data")
                    omega = default_omega(N, T) if cfg.omega is None else min(cfg.omega, T)
                    scheme = "CrossTrajectory2" if name == "drl1" else "Adaptive"
                    folds = trajectory_folds(
                        trajs, scheme, derive_seed(cfg.master_seed, cell, rep, STREAM_FOLDS))
                    flat = trajectory_to_transitions(trajs)
                    flat_fold = np.repeat(folds.fold_of, T + 1)
                    q_hats = [truncated(setting, omega,
                                        flat.subset(flat_fold == folds.nuisance_fold_for[j]))
                              for j in range(folds.n_folds)]
                    if name == "drl2":
                        behavior = pi_b.with_initial(trajs.initial_dist)
                        mu = marginal_ratio_mu(mdp, pi_e, behavior, omega).mu
                        r = estimate_drl_m2(trajs, pi_e, pi_b, gamma, mu, q_hats, omega, folds,
                                            cfg.alpha_ci)
                    else:
                        r = estimate_drl_m1(trajs, pi_e, pi_b, gamma, q_hats, omega, folds,
                                            cfg.alpha_ci)
                    r.estimator_name = name
                    record(name, setting, r)
            except (InfeasibleSchemeError, SingularSystemError, np.linalg.LinAlgError,
                    IdentifiabilityError, ZeroDivisionError) as exc:
                record(name, setting, exc)
    return out


def _run_task(args):
    cfg, env, cell, N, T, rep = args
    return run_one(cfg, env, cell, N, T, rep)


# ---------------------------------------------------------------- aggregation


@dataclass
class MseTable:
    rows: list
    replicates: list = field(default_factory=list)
    rho: float = math.nan

    def to_csv(self):
        lines = [",".join(MSE_COLUMNS)]
        for r in self.rows:
            lines.append(",".join(_fmt(r[c]) for c in MSE_COLUMNS))
        return "\n".join(lines) + "\n"

    def replicates_csv(self):
        lines = [",".join(REPLICATE_COLUMNS)]
        for r in self.replicates:
            lines.append(",".join(_fmt(x) for x in r))
        return "\n".join(lines) + "\n"

    def row(self, estimator, setting="BothCorrect", N=None, T=None):
        for r in self.rows:
            if (r["estimator"] == estimator and r["setting"] == setting
                    and (N is None or r["N"] == N) and (T is None or r["T"] == T)):
                return r
        raise KeyError((estimator, setting, N, T))

    def plot_data(self, estimator, setting="BothCorrect", N=None):
        """Rows of (T, mse, ci_low, ci_high) with a normal interval on the MSE."""
        pts = []
        for r in self.rows:
            if r["estimator"] == estimator and r["setting"] == setting and (
                    N is None or r["N"] == N) and r["replications"] > 0:
                pts.append((r["T"], r["mse"], r["mse"] - r["mse_se"] * 1.959963984540054,
                            r["mse"] + r["mse_se"] * 1.959963984540054))
        return pts


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    s = str(x)
    return '"' + s.replace('"', "'") + '"' if "," in s else s


def cells(cfg):
    return [(i, N, T) for i, (N, T) in enumerate((N, T) for N in cfg.Ns for T in cfg.Ts)]


def _aggregate(cfg, results, rho):
    rows = []
    replicates = []
    by_key = {}
    for (cell, N, T), per_rep in results:
        for rep, entries in enumerate(per_rep):
            for name, setting, est, lo, hi, status in entries:
                by_key.setdefault((name, setting, N, T), []).append((est, lo, hi, status))
                replicates.append((name, setting, N, T, rep, est, lo, hi, status))
    for N in cfg.Ns:
        for T in cfg.Ts:
            for setting in cfg.settings:
                for name in cfg.estimators:
                    vals = by_key.get((name, setting, N, T), [])
                    ok = [(e, lo, hi) for e, lo, hi, st in vals if st == "ok"]
                    reasons = sorted({st for *_, st in vals if st != "ok"})
                    row = {"estimator": name, "setting": setting, "N": N, "T": T,
                           "replications": len(ok), "skipped": "; ".join(reasons)}
                    if ok:
                        est = np.array([e for e, _, _ in ok])
                        err = est - rho
                        bias = float(np.mean(err))
                        var = float(np.mean((est - np.mean(est)) ** 2))
                        sq = err ** 2
                        mse = float(np.mean(sq))
                        lo = np.array([x for _, x, _ in ok])
                        hi = np.array([x for _, _, x in ok])
                        has_ci = np.all(np.isfinite(lo))
                        cover = (float(np.mean((lo <= rho) & (rho <= hi))) if has_ci
                                 else math.nan)
                        row.update(mse=mse, bias2=bias * bias, variance=var, coverage=cover,
                                   mse_se=float(np.std(sq) / math.sqrt(len(sq))))
                    else:
                        row.update(mse=math.nan, bias2=math.nan, variance=math.nan,
                                   coverage=math.nan, mse_se=math.nan)
                    rows.append(row)
    return MseTable(rows, replicates, rho)


def run_replications(cfg: ExperimentConfig, workers=None, progress=False, env=None):
    """Run every (N, T) cell for ``cfg.replications`` replications and tabulate MSEs.

    Output is a deterministic function of the config: tasks are gathered in
    (cell, replication) order whatever the worker count.
    """
    env = build_environment(cfg) if env is None else env
    workers = cfg.workers if workers is None else workers
    grid = cells(cfg)
    tasks = [(cfg, env, c, N, T, rep) for c, N, T in grid for rep in range(cfg.replications)]
    if workers <= 1:
        flat = []
        for i, t in enumerate(tasks):
            flat.append(_run_task(t))
            if progress and (i + 1) % cfg.replications == 0:
                print(f"cell {(i + 1) // cfg.replications}/{len(grid)} done", file=sys.stderr)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            flat = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    results = []
    for k, (c, N, T) in enumerate(grid):
        results.append(((c, N, T), flat[k * cfg.replications:(k + 1) * cfg.replications]))
    return _aggregate(cfg, results, env.rho)


def run_coverage(cfg: ExperimentConfig, workers=None, env=None):
    """Coverage table rows (estimator, setting, N, T, nominal, coverage, replications)."""
    table = run_replications(cfg, workers, env=env)
    return [{"estimator": r["estimator"], "setting": r["setting"], "N": r["N"], "T": r["T"],
             "nominal": 1.0 - cfg.alpha_ci, "coverage": r["coverage"],
             "replications": r["replications"]} for r in table.rows]


def coverage_csv(rows):
    cols = ("estimator", "setting", "N", "T", "nominal", "coverage", "replications")
    lines = [",".join(cols)] + [",".join(_fmt(r[c]) for c in cols) for r in rows]
    return "\n".join(lines) + "\n"


def loglog_slope(Ts, mses):
    """Least-squares slope of log(mse) against log(T)."""
    return float(np.polyfit(np.log(np.asarray(Ts, float)), np.log(np.asarray(mses, float)), 1)[0])


def write_outputs(table: MseTable, out_path):
    """Write the MSE table, per-replication values and plot-data files atomically."""
    write_atomic(out_path, table.to_csv())
    stem = out_path[:-4] if out_path.endswith(".csv") else out_path
    write_atomic(stem + ".replicates.csv", table.replicates_csv())
    keys = sorted({(r["estimator"], r["setting"], r["N"]) for r in table.rows})
    paths = []
    for est, setting, N in keys:
        pts = table.plot_data(est, setting, N)
        if not pts:
            continue
        text = "x,y,ci_low,ci_high\n" + "".join(
            f"{x},{y!r},{lo!r},{hi!r}\n" for x, y, lo, hi in pts)
        p = f"{stem}.plot.{est}.{setting}.N{N}.csv"
        write_atomic(p, text)
        paths.append(p)
    return paths
