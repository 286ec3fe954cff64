"""Corrupt one nuisance at a time and watch which estimators break.

A 5-state random MDP with a 40/60 behavior mixture. For each setting we draw
one behavior trajectory, fit the tabular ratio w and the model-based q, then
add N(1, 1) noise to whichever nuisance the setting marks as wrong. The direct
method leans on q alone, the marginal ratio estimator on w alone; DRL(M3) needs
only one of them to be right.

    python3 demos/double_robustness.py
"""

import numpy as np

from drlope.estimators import estimate_dm, estimate_drl_m3, estimate_mis
from drlope.experiments import apply_setting, make_policy_pair, make_random_mdp
from drlope.mdp import density_ratio_eta, exact_policy_value, stationary_distribution
from drlope.nuisance import FeatureMap, NuisancePair, fit_q_model_based, fit_w_linear
from drlope.sampling import sample_trajectories, trajectory_to_transitions

mdp = make_random_mdp(5, 3, seed=0, gamma=0.95)
pi_e, pi_b = make_policy_pair(mdp, alpha=0.4, seed=0)
pi_b = pi_b.with_initial(stationary_distribution(mdp, pi_b))
rho = exact_policy_value(mdp, pi_e)
eta = density_ratio_eta(pi_e, pi_b)
fm = FeatureMap.tabular(mdp.n_states, mdp.n_actions)
qmax = mdp.r_max / (1 - mdp.gamma)
print(f"true value rho = {rho:.4f}\n")
print(f"{'setting':<14}{'DM':>10}{'MIS':>10}{'DRL(M3)':>10}   squared error over 20 runs")

for setting in ("BothCorrect", "OnlyWCorrect", "OnlyQCorrect"):
    err = {"DM": [], "MIS": [], "DRL(M3)": []}
    for rep in range(20):
        traj = sample_trajectories(mdp, pi_b, 1, 19_999, seed=rep)
        data = trajectory_to_transitions(traj)
        w = fit_w_linear(data, fm, eta, pi_e.initial_dist, mdp.gamma)
        q = fit_q_model_based(data, pi_e, mdp.gamma, mdp.r_max)
        pair = apply_setting(NuisancePair(w, q), setting, (rep, rep + 1000),
                             q_bounds=(0.0, qmax))
        err["DM"].append(estimate_dm(pair.q_hat, pi_e, mdp.gamma).rho_hat - rho)
        err["MIS"].append(estimate_mis(data, pair.w_hat, pi_e, pi_b).rho_hat - rho)
        drl = estimate_drl_m3(data, "OracleNuisance", None, None, pi_e, pi_b, mdp.gamma,
                              nuisances=pair)
        err["DRL(M3)"].append(drl.rho_hat - rho)
    cells = "".join(f"{np.mean(np.square(v)):>10.2e}" for v in err.values())
    print(f"{setting:<14}{cells}")

print("\nOnlyWCorrect spoils q and DM suffers; OnlyQCorrect spoils w and MIS suffers.")
print("DRL(M3) stays well below the broken estimator in both rows. Even with both")
print("nuisances right, MIS is the noisiest: the fitted w inherits the 1/(1-gamma)")
print("amplification of its moment equations.")
