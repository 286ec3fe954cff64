"""How close DRL(M3) with exact nuisances gets to its efficiency bound.

With iid transitions from the behavior stationary law and oracle w and q, the
scaled variance n * Var(rho_hat) should approach eb_m3. The other two bounds
are per-trajectory quantities for the cumulative and marginal ratio models,
so they are on a different scale from eb_m3.

    python3 demos/efficiency_bound.py
"""

import numpy as np

from drlope.estimators import estimate_drl_m3
from drlope.experiments import make_policy_pair, make_random_mdp
from drlope.mdp import exact_q, oracle_w, stationary_distribution
from drlope.nuisance import NuisancePair, QFunction, WFunction
from drlope.oracle import efficiency_bounds
from drlope.sampling import sample_transitions

mdp = make_random_mdp(5, 3, seed=1, gamma=0.9)
pi_e, pi_b = make_policy_pair(mdp, alpha=0.4, seed=1)
d = stationary_distribution(mdp, pi_b)
pi_b = pi_b.with_initial(d)
bounds = efficiency_bounds(mdp, pi_e, pi_b)
print(f"per trajectory: eb_m1 = {bounds.eb_m1:.4f}  eb_m2 = {bounds.eb_m2:.4f}")
print(f"per transition: eb_m3 = {bounds.eb_m3:.4f}")

pair = NuisancePair(WFunction(oracle_w(mdp, pi_e, pi_b, d)), QFunction(exact_q(mdp, pi_e)))
n = 20_000
draws = [estimate_drl_m3(sample_transitions(mdp, pi_b, d, n, seed), "OracleNuisance",
                         None, None, pi_e, pi_b, mdp.gamma, nuisances=pair).rho_hat
         for seed in range(200)]
print(f"n * Var(rho_hat) over 200 runs at n = {n}: {n * np.var(draws):.4f}")
