"""Trajectory-wise importance sampling against the stationary-ratio estimator.

The target policy here is deterministic and the behavior uniform over four
actions, so each step multiplies the cumulative ratio by 0 or 4. Its log
grows faster than the discount shrinks, and the moment bound of the
trajectory-ratio model diverges. The stationary ratio w stays bounded, so
DRL(M3) keeps a finite variance.

    python3 demos/curse_of_horizon.py
"""

import numpy as np

from drlope.estimators import estimate_drl_m3, estimate_is
from drlope.experiments import make_curse_pair, make_random_mdp
from drlope.mdp import density_ratio_eta, exact_policy_value, stationary_distribution
from drlope.nuisance import FeatureMap, fit_q_model_based, fit_w_linear
from drlope.oracle import curse_diagnostic
from drlope.sampling import sample_trajectories

mdp = make_random_mdp(5, 4, seed=3, gamma=0.98)
pi_e, pi_b = make_curse_pair(mdp)
pi_b = pi_b.with_initial(stationary_distribution(mdp, pi_b))
report = curse_diagnostic(mdp, pi_e, pi_b)
print(f"E[log eta] = {report.expected_log_eta:.3f}, -log gamma = {report.neg_log_gamma:.3f}")
print(f"bounds: {report.summary()}\n")

rho = exact_policy_value(mdp, pi_e)
eta = density_ratio_eta(pi_e, pi_b)
fm = FeatureMap.tabular(5, 4)
for T in (1000, 4000, 16000):
    is_err, drl_err = [], []
    for rep in range(20):
        data = sample_trajectories(mdp, pi_b, 1, T - 1, seed=rep)
        is_err.append(estimate_is(data, pi_e, pi_b, mdp.gamma).rho_hat - rho)
        drl = estimate_drl_m3(
            data, "Adaptive",
            lambda d: fit_w_linear(d, fm, eta, pi_e.initial_dist, mdp.gamma),
            lambda d: fit_q_model_based(d, pi_e, mdp.gamma, mdp.r_max),
            pi_e, pi_b, mdp.gamma)
        drl_err.append(drl.rho_hat - rho)
    print(f"T = {T:>6}: IS mse {np.mean(np.square(is_err)):.2e}   "
          f"DRL(M3) mse {np.mean(np.square(drl_err)):.2e}")
