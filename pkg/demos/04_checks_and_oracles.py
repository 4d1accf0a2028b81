"""The small exact checks that everything else leans on.

Finite differences on every loss, tabular Q against value iteration on a
two-zone toy, and a one-state bandit for the actor-critic update.
"""
import numpy as np

from anonmatch import oracles

worst = oracles.loss_gradient_suite(trials=20)
for name, err in worst.items():
    print(f"{name:14s} worst relative error {err:.1e}")

gap, q_tab, q_vi = oracles.tabular_vs_value_iteration()
print("\nQ from value iteration\n", np.round(q_vi, 4))
print("Q from tabular learning\n", np.round(q_tab, 4))
print(f"largest gap {gap:.1e}")

# from zone 0 head to where the jobs are; from zone 1 take the longer fare back
print("greedy action per zone:", q_vi.argmax(axis=1).tolist())

p = oracles.a2c_bandit(seed=0, updates=3000)
print(f"\nactor-critic bandit, probability of the paying arm after 3000 updates: {p:.3f}")
