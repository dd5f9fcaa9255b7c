"""
Regret of the two block-coordinate saddle solvers
=================================================

Each step both solvers take a gradient step on the shared parameters and an
ascent step on the perturbation of one randomly picked example. The adaptive
one divides that ascent step by a running estimate of the example's gradient
size. Its payoff depends on how uneven the per-example gradient sizes are,
which ``gradient_norm_ratio`` summarizes.

Run: python demos/regret_of_saddle_solvers.py   (about 15 seconds)
"""
import numpy as np

from atas.saddle import (SaddleRunConfig, asgdbca_run, duality_gap, estimate_constants,
                         gradient_norm_ratio, make_bilinear, regret, sgdbca_run, solve_reference,
                         regret_bound_step_sizes)

RUNNERS = {"sgdbca": sgdbca_run, "asgdbca": asgdbca_run}


def final_regret(P, C, T, method, seed=0):
    et, ex = regret_bound_step_sizes(C, T, P.d, P.n, method)
    traj = RUNNERS[method](P, SaddleRunConfig(T, et, ex, seed=seed, checkpoints=(T,)))
    return traj, regret(traj, P)[-1]


# Regret grows roughly like sqrt(T)
P = make_bilinear(n=20, seed=0)
C = estimate_constants(P)
Ts = [1000, 3000, 10000, 30000]
for method in RUNNERS:
    R = [final_regret(P, C, T, method)[1] for T in Ts]
    slope = np.polyfit(np.log(Ts), np.log(R), 1)[0]
    print(f"{method:8s} R(T) = {np.round(R, 1)}  log-log slope {slope:.2f}")

# Average regret bounds the duality gap of the averaged iterate
ref = solve_reference(P)
traj, R = final_regret(P, C, 10000, "asgdbca")
theta_bar, x_bar = traj.averages[10000]
print(f"gap {duality_gap(P, theta_bar, x_bar, ref):.4f} <= R/T {R / 10000:.4f}")

# Long-tailed gradient sizes favor the adaptive solver; equal sizes do not
for tail in ("pareto", "equal"):
    ratios, a, s = [], [], []
    for seed in range(100, 106):
        P = make_bilinear(seed=seed, tail=tail)
        C = estimate_constants(P)
        ratios.append(gradient_norm_ratio(C.G_xi, 0.5))
        a.append(final_regret(P, C, 10000, "asgdbca", seed)[1])
        s.append(final_regret(P, C, 10000, "sgdbca", seed)[1])
    print(f"{tail:7s} mean ratio {np.mean(ratios):.2f}  adaptive / plain regret {np.mean(a) / np.mean(s):.2f}")
