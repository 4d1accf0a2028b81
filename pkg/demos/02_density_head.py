"""What the density head of a DE-DQN learns.

Short training run, then we ask one agent's network where it expects the
idle population to be after each possible move, and how spread out that
prediction is.
"""
import numpy as np

from anonmatch.harness import ExperimentConfig, run_single
from anonmatch.learners import HyperParams, make_learner, predicted_density
from anonmatch.matchenv import EnvConfig, MatchingEnv
from anonmatch.numkit import entropy, take_members

hp = HyperParams(hidden=[32, 32], dropout=0.0, lr_q=5e-4, train_every=4, lam=1.0)
env = MatchingEnv(EnvConfig(num_agents=20, total_rate=12.0, demand_skew=1.0))
env.reset(1)
learner = make_learner("dedqn", env.n_agents, env.n_zones, hp, np.random.SeedSequence(1), budget=20_000)

for step in range(20_000):
    agents = env.decision_agents()
    zones, counts = env.local_counts(agents)
    actions = learner.act(agents, zones, counts, step)
    exps = env.step(dict(zip(agents.tolist(), actions.tolist())))
    if exps:
        learner.record(exps)
    learner.train(step)

# agent 0's own network, sitting in zone 0 with 2 idle agents around
net = take_members(learner.net, [0])
moves = np.arange(env.n_zones)
p = predicted_density(net, np.zeros(env.n_zones, dtype=int), np.full(env.n_zones, 2 / 20), moves, env.n_zones)
p = p.reshape(env.n_zones, env.n_zones)
print("move  predicted density over zones 0-4      entropy")
for a in moves:
    print(f"{a:4d}  {np.round(p[a, :5], 3)}  {entropy(p[a]):.3f}")

print("\nidle agents per zone right now:", env.state.idle_counts.tolist())
print("max possible entropy ln 10 =", round(np.log(10), 3))

# the same thing through the harness, with the full-vector error tracked per period
cfg = ExperimentConfig(env=EnvConfig(num_agents=20, demand_skew=1.0), dar=0.6, learner="dedqn", hyper=hp,
                       train_steps=20_000, converged_periods=2, seeds=[1])
log = run_single(cfg, 1)
print("\nfull-vector density error per period:", np.round(log.density_mse, 3).tolist())
print("mean predicted entropy per period:   ", np.round(log.entropy_mean, 3).tolist())
