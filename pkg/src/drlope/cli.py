"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (every replication of some cell
failed), 2 usage or parse error, 3 identifiability error, 4 infeasible
fitting scheme.
"""

import argparse
import sys
import time
from dataclasses import replace

import numpy as np

from .errors import IdentifiabilityError, InfeasibleSchemeError, ParseError, SingularSystemError
from .estimators import (
    REPORT_COLUMNS,
    default_omega,
    estimate_dm,
    estimate_drl_m1,
    estimate_drl_m2,
    estimate_drl_m3,
    estimate_is,
    estimate_mis,
    estimate_snis,
    trajectory_folds,
)
from .experiments import (
    ESTIMATORS,
    cells,
    coverage_csv,
    parse_config,
    run_coverage,
    run_replications,
    write_outputs,
)
from .mdp import (
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
    fit_q_model_based,
    fit_q_truncated,
    fit_w_linear,
)
from .oracle import BOUND_COLUMNS, curse_diagnostic
from .sampling import (
    check_indices,
    dataset_from_csv,
    dataset_to_csv,
    sample_trajectories,
    sample_transitions,
    transitions_to_trajectories,
)
from .textio import load_mdp, load_policies, write_atomic

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IDENT, EXIT_INFEASIBLE = 0, 1, 2, 3, 4
SCHEME_FLAGS = {"adaptive": "Adaptive", "cross-trajectory": "CrossTrajectory2",
                "cross-time": "CrossTime4", "oracle": "OracleNuisance"}
CLI_ESTIMATORS = ("is", "snis", "dm", "mis", "dr", "drl1", "drl2", "drl3")


def _emit(text, out):
    if out:
        write_atomic(out, text)
    else:
        sys.stdout.write(text)


def cmd_oracle(args):
    mdp = load_mdp(args.mdp)
    pi_e, pi_b = load_policies(args.policies)
    rho = exact_policy_value(mdp, pi_e)
    curse = curse_diagnostic(mdp, pi_e, pi_b)
    text = ",".join(BOUND_COLUMNS) + "\n" + curse.bounds.csv_row() + "\n"
    _emit(text, args.out)
    print(f"rho = {rho!r}", file=sys.stderr)
    print(curse.summary(), file=sys.stderr)
    return EXIT_OK


def _load_data(path):
    with open(path) as fh:
        return dataset_from_csv(fh.read())


def cmd_estimate(args):
    names = _estimator_list(args, CLI_ESTIMATORS)
    mdp = load_mdp(args.mdp)
    pi_e, pi_b = load_policies(args.policies)
    data = _load_data(args.data)
    try:
        check_indices(data, mdp.n_states, mdp.n_actions)
    except ValueError as exc:
        raise ParseError(str(exc)) from None
    gamma = mdp.gamma
    eta = density_ratio_eta(pi_e, pi_b)
    trajs = None
    try:
        trajs = transitions_to_trajectories(data, pi_b.initial_dist)
    except ValueError:
        pass
    scheme = SCHEME_FLAGS[args.scheme]
    fmap = FeatureMap.tabular(mdp.n_states, mdp.n_actions)

    def w_fit(d):
        return fit_w_linear(d, fmap, eta, pi_e.initial_dist, gamma)

    def q_fit(d):
        return fit_q_model_based(d, pi_e, gamma, mdp.r_max)

    lines = [",".join(REPORT_COLUMNS)]
    N = trajs.N if trajs is not None else ""
    T = trajs.T if trajs is not None else ""
    for name in names:
        start = time.perf_counter()
        if name in ("is", "snis", "dr", "drl1", "drl2") and trajs is None:
            raise InfeasibleSchemeError(f"{name} requires complete trajectories in the data")
        if name == "is":
            rep = estimate_is(trajs, pi_e, pi_b, gamma, alpha=args.alpha_ci)
        elif name == "snis":
            rep = estimate_snis(trajs, pi_e, pi_b, gamma)
        elif name in ("dm", "mis"):
            if args.nuisance == "oracle":
                w = WFunction(oracle_w(mdp, pi_e, pi_b, "stationary"), "Oracle")
                q = QFunction(exact_q(mdp, pi_e), "Oracle")
            else:
                w, q = w_fit(data), q_fit(data)
            rep = (estimate_dm(q, pi_e, gamma) if name == "dm"
                   else estimate_mis(data, w, pi_e, pi_b, args.alpha_ci))
        elif name == "drl3":
            pair = None
            if scheme == "OracleNuisance":
                pair = NuisancePair(WFunction(oracle_w(mdp, pi_e, pi_b, "stationary"), "Oracle"),
                                    QFunction(exact_q(mdp, pi_e), "Oracle"), "Oracle")
            rep = estimate_drl_m3(data, scheme, w_fit, q_fit, pi_e, pi_b, gamma, args.alpha_ci,
                                  nuisances=pair, fold_seed=args.seed)
        else:
            omega = default_omega(trajs.N, trajs.T) if args.omega is None else args.omega
            fscheme = "CrossTrajectory2" if name == "drl1" else "Adaptive"
            folds = trajectory_folds(trajs, fscheme, args.seed)
            flat_fold = np.repeat(folds.fold_of, trajs.T + 1)
            qs = [fit_q_truncated(data.subset(flat_fold == folds.nuisance_fold_for[j]), pi_e,
                                  gamma, mdp.r_max, omega) for j in range(folds.n_folds)]
            if name == "drl2":
                mu = marginal_ratio_mu(mdp, pi_e, pi_b, omega).mu
                rep = estimate_drl_m2(trajs, pi_e, pi_b, gamma, mu, qs, omega, folds,
                                      args.alpha_ci)
            else:
                rep = estimate_drl_m1(trajs, pi_e, pi_b, gamma, qs, omega, folds, args.alpha_ci)
            rep.estimator_name = name
        wall = (time.perf_counter() - start) * 1e3
        lines.append(rep.csv_row(N, T, "" if args.seed is None else args.seed, f"{wall:.3f}"))
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_simulate(args):
    mdp = load_mdp(args.mdp)
    pi_e, pi_b = load_policies(args.policies)
    if args.transitions is not None:
        law = stationary_distribution(mdp, pi_b)
        data = sample_transitions(mdp, pi_b, law, args.transitions, args.seed)
    else:
        data = sample_trajectories(mdp, pi_b, args.N, args.T, args.init, args.burn_in, args.seed)
    _emit(dataset_to_csv(data), args.out)
    return EXIT_OK


def _load_config(args):
    with open(args.config) as fh:
        cfg = parse_config(fh.read())
    over = {}
    if args.seed is not None:
        over["master_seed"] = args.seed
    if args.estimators:
        over["estimators"] = _estimator_list(args, ESTIMATORS)
    if getattr(args, "alpha_ci", None) is not None:
        over["alpha_ci"] = args.alpha_ci
    if over:
        cfg = replace(cfg, **over)
    return cfg


def cmd_experiment(args):
    cfg = _load_config(args)
    if args.dry_run:
        for c, N, T in cells(cfg):
            for setting in cfg.settings:
                for est in cfg.estimators:
                    print(f"cell {c}: N={N} T={T} setting={setting} estimator={est} "
                          f"replications={cfg.replications}")
        return EXIT_OK
    table = run_replications(cfg, workers=args.workers, progress=True)
    if args.out:
        write_outputs(table, args.out)
    else:
        sys.stdout.write(table.to_csv())
    failed = [r for r in table.rows if r["replications"] == 0
              and "InfeasibleSchemeError" not in r["skipped"]]
    return EXIT_FAIL if failed else EXIT_OK


def cmd_coverage(args):
    cfg = _load_config(args)
    rows = run_coverage(cfg, workers=args.workers)
    _emit(coverage_csv(rows), args.out)
    return EXIT_OK


def _estimator_list(args, allowed):
    names = [x.strip() for x in (args.estimators or "").split(",") if x.strip()]
    bad = [x for x in names if x not in allowed]
    if bad or not names:
        args._parser.error(f"unknown or empty estimator list {bad or names}; "
                           f"choose from {','.join(allowed)}")
    return names


def build_parser():
    p = argparse.ArgumentParser(prog="drlope", description="Off-policy evaluation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", help="output path (written atomically); stdout if omitted")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("-v", "--verbose", action="count", default=0)

    sp = sub.add_parser("oracle", help="exact value, efficiency bounds and curse diagnostic")
    sp.add_argument("mdp")
    sp.add_argument("policies")
    common(sp)
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("estimate", help="estimate the target value from a dataset CSV")
    sp.add_argument("data")
    sp.add_argument("--mdp", required=True)
    sp.add_argument("--policies", required=True)
    sp.add_argument("--estimators", default="drl3", help=f"comma list of {CLI_ESTIMATORS}")
    sp.add_argument("--scheme", choices=sorted(SCHEME_FLAGS), default="adaptive")
    sp.add_argument("--nuisance", choices=("fitted", "oracle"), default="fitted",
                    help="nuisances for dm and mis")
    sp.add_argument("--alpha-ci", type=float, default=0.05)
    sp.add_argument("--omega", type=int, default=None)
    common(sp)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("simulate", help="sample a behavior dataset to CSV")
    sp.add_argument("--mdp", required=True)
    sp.add_argument("--policies", required=True)
    sp.add_argument("--N", type=int, default=1)
    sp.add_argument("--T", type=int, default=1000)
    sp.add_argument("--transitions", type=int, default=None,
                    help="draw this many iid transitions from the stationary law instead")
    sp.add_argument("--init", choices=("StationaryInit", "ErgodicBurnIn", "ArbitraryInit"),
                    default="StationaryInit")
    sp.add_argument("--burn-in", type=int, default=1000)
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    for name, func, helptext in (("experiment", cmd_experiment, "run an MSE experiment"),
                                 ("coverage", cmd_coverage, "run a CI coverage study")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--estimators", default=None)
        sp.add_argument("--dry-run", action="store_true")
        sp.add_argument("--alpha-ci", type=float, default=None)
        common(sp)
        sp.set_defaults(func=func)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args._parser = parser
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IdentifiabilityError as exc:
        print(f"identifiability error: {exc}", file=sys.stderr)
        return EXIT_IDENT
    except InfeasibleSchemeError as exc:
        print(f"infeasible scheme: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SingularSystemError as exc:
        print(f"singular system: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
