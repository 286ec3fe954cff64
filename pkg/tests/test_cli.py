import time

import numpy as np
import pytest

from drlope.cli import main
from drlope.estimators import estimate_mis
from drlope.experiments import format_config, make_policy_pair, make_random_mdp, ExperimentConfig
from drlope.mdp import Policy, TabularMdp, oracle_w
from drlope.oracle import BoundReport, efficiency_bounds
from drlope.sampling import dataset_from_csv
from drlope.textio import dumps_policies, save_mdp, write_atomic


@pytest.fixture
def files(tmp_path):
    mdp = make_random_mdp(4, 2, seed=1, gamma=0.9)
    pi_e, pi_b = make_policy_pair(mdp, alpha=0.5, seed=1)
    save_mdp(tmp_path / "mdp.txt", mdp)
    write_atomic(tmp_path / "pol.txt", dumps_policies(pi_e, pi_b))
    return tmp_path, mdp, pi_e, pi_b


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_oracle_one_state(tmp_path, capsys):
    mdp = TabularMdp(np.ones((1, 1, 1)), np.array([[0.3]]), np.array([[0.2]]), 0.9, 1.0)
    pi = Policy(np.ones((1, 1)), np.ones(1))
    save_mdp(tmp_path / "m.txt", mdp)
    write_atomic(tmp_path / "p.txt", dumps_policies(pi, pi))
    code, out, err = run(["oracle", tmp_path / "m.txt", tmp_path / "p.txt"], capsys)
    assert code == 0
    rep = BoundReport.from_csv_row(out.splitlines()[1])
    assert rep.eb_m3 == pytest.approx(0.2)
    assert rep.eb_m1 == pytest.approx(0.2 * 0.1 / 1.9)
    assert "rho = 0.3" in err


def test_oracle_csv_round_trip(files, capsys):
    tmp, mdp, pi_e, pi_b = files
    code, out, _ = run(["oracle", tmp / "mdp.txt", tmp / "pol.txt", "--out", tmp / "b.csv"],
                       capsys)
    assert code == 0 and out == ""
    back = BoundReport.from_csv_row((tmp / "b.csv").read_text().splitlines()[1])
    ref = efficiency_bounds(mdp, pi_e, pi_b)
    assert (back.eb_m1, back.eb_m2, back.eb_m3, back.truncation_k) == (
        ref.eb_m1, ref.eb_m2, ref.eb_m3, ref.truncation_k)


def test_malformed_mdp_exit_2(files, capsys):
    tmp = files[0]
    lines = (tmp / "mdp.txt").read_text().splitlines()
    k = next(i for i, line in enumerate(lines) if line.startswith("gamma"))
    lines[k] = "gamma x"
    (tmp / "bad.txt").write_text("\n".join(lines))
    code, _, err = run(["oracle", tmp / "bad.txt", tmp / "pol.txt"], capsys)
    assert code == 2 and f"line {k + 1}" in err


def test_reducible_chain_exit_3(tmp_path, capsys):
    P = np.zeros((2, 1, 2))
    P[0, 0, 0] = P[1, 0, 1] = 1.0
    mdp = TabularMdp(P, np.zeros((2, 1)), np.zeros((2, 1)), 0.9, 1.0)
    pi = Policy(np.ones((2, 1)), np.array([0.5, 0.5]))
    save_mdp(tmp_path / "m.txt", mdp)
    write_atomic(tmp_path / "p.txt", dumps_policies(pi, pi))
    code, _, err = run(["oracle", tmp_path / "m.txt", tmp_path / "p.txt"], capsys)
    assert code == 3 and "identifiability" in err


def simulate(tmp, capsys, *extra):
    code, _, _ = run(["simulate", "--mdp", tmp / "mdp.txt", "--policies", tmp / "pol.txt",
                      "--seed", 3, "--out", tmp / "data.csv", *extra], capsys)
    assert code == 0
    return tmp / "data.csv"


def test_simulate_is_deterministic(files, capsys):
    tmp = files[0]
    first = simulate(tmp, capsys, "--T", 50).read_text()
    assert simulate(tmp, capsys, "--T", 50).read_text() == first
    data = dataset_from_csv(first)
    assert data.n == 51


def test_estimate_mis_oracle_matches_library(files, capsys):
    tmp, mdp, pi_e, pi_b = files
    path = simulate(tmp, capsys, "--T", 300)
    code, out, _ = run(["estimate", path, "--mdp", tmp / "mdp.txt", "--policies",
                        tmp / "pol.txt", "--estimators", "mis", "--nuisance", "oracle"], capsys)
    assert code == 0
    row = out.splitlines()[1].split(",")
    ref = estimate_mis(dataset_from_csv(path.read_text()),
                       oracle_w(mdp, pi_e, pi_b, "stationary"), pi_e, pi_b)
    assert float(row[5]) == ref.rho_hat and float(row[6]) == ref.variance_hat


def test_estimate_cross_time_on_single_trajectory(files, capsys):
    tmp = files[0]
    path = simulate(tmp, capsys, "--T", 400)
    code, out, _ = run(["estimate", path, "--mdp", tmp / "mdp.txt", "--policies",
                        tmp / "pol.txt", "--estimators", "drl3,dm,is,snis,drl2",
                        "--scheme", "cross-time", "--seed", 1], capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "estimator,scheme,N,T,n,rho_hat,var_hat,ci_low,ci_high,seed,wall_ms"
    assert lines[1].startswith("drl3,CrossTime4,1,400,401,")
    assert len(lines) == 6


def test_estimate_cross_trajectory_on_single_trajectory_exit_4(files, capsys):
    tmp = files[0]
    path = simulate(tmp, capsys, "--T", 40)
    code, _, err = run(["estimate", path, "--mdp", tmp / "mdp.txt", "--policies",
                        tmp / "pol.txt", "--scheme", "cross-trajectory"], capsys)
    assert code == 4 and "N >= 2" in err


def test_unknown_estimator_exit_2(files, capsys):
    tmp = files[0]
    path = simulate(tmp, capsys, "--T", 40)
    with pytest.raises(SystemExit) as err:
        main(["estimate", str(path), "--mdp", str(tmp / "mdp.txt"), "--policies",
              str(tmp / "pol.txt"), "--estimators", "magic"])
    assert err.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_experiment_smoke_and_rerun(tmp_path, capsys):
    cfg = ExperimentConfig(n_states=4, n_actions=2, Ts=[200, 400], replications=2,
                           estimators=["dm", "mis", "drl3"], gamma=0.9)
    (tmp_path / "c.txt").write_text(format_config(cfg))
    start = time.perf_counter()
    code, _, err = run(["experiment", "--config", tmp_path / "c.txt", "--out",
                        tmp_path / "a.csv"], capsys)
    assert code == 0 and time.perf_counter() - start < 10
    assert "cell 2/2 done" in err
    text = (tmp_path / "a.csv").read_text()
    rows = text.splitlines()[1:]
    assert len(rows) == 6 and all(r.split(",")[8] == "2" for r in rows)
    run(["experiment", "--config", tmp_path / "c.txt", "--out", tmp_path / "b.csv",
         "--workers", 2], capsys)
    assert (tmp_path / "b.csv").read_text() == text


def test_experiment_dry_run(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("Ts = 10, 20\nestimators = dm\nreplications = 4\n")
    code, out, _ = run(["experiment", "--config", tmp_path / "c.txt", "--dry-run"], capsys)
    assert code == 0
    assert out.splitlines() == [
        "cell 0: N=1 T=10 setting=BothCorrect estimator=dm replications=4",
        "cell 1: N=1 T=20 setting=BothCorrect estimator=dm replications=4",
    ]


def test_experiment_all_failed_cell_exit_1(tmp_path, capsys):
    # 2 transitions cannot pin down a 5-state ratio: every fit is singular
    (tmp_path / "c.txt").write_text("Ts = 1\nestimators = mis\nreplications = 2\n")
    code, out, _ = run(["experiment", "--config", tmp_path / "c.txt"], capsys)
    assert code == 1 and "SingularSystemError" in out


def test_coverage_command(tmp_path, capsys):
    (tmp_path / "c.txt").write_text(
        "sampling = transition\nTs = 500\nestimators = drl3_oracle\nreplications = 5\n")
    code, out, _ = run(["coverage", "--config", tmp_path / "c.txt"], capsys)
    assert code == 0
    assert out.splitlines()[0] == "estimator,setting,N,T,nominal,coverage,replications"
