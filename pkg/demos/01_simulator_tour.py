"""A walk through the matching simulator.

Twenty agents on a 5x2 grid, demand at 0.6 jobs per agent per step.  We let
everyone reposition at random and look at what the market does.
"""
import numpy as np

from anonmatch.matchenv import EnvConfig, MatchingEnv
from anonmatch.oracles import assignment_frequencies

cfg = EnvConfig(grid_width=5, grid_height=2, num_agents=20, total_rate=12.0, demand_skew=1.0)
env = MatchingEnv(cfg)
env.reset(0)
rng = np.random.default_rng(0)

print("travel times from zone 0:", env.zone_map.travel_time[0].tolist())
print("fares from zone 0:       ", np.round(env.zone_map.base_revenue[0], 2).tolist())
print("arrival rate per zone:   ", np.round(env.demand.base_rates, 2).tolist())

# each step: demand arrives and gets matched, then the free agents choose
idle_trace = []
for t in range(2000):
    agents = env.decision_agents()
    moves = rng.integers(0, env.n_zones, agents.size)
    env.step(dict(zip(agents.tolist(), moves.tolist())))
    idle_trace.append(env.state.idle_counts.sum())

tot = env.state.totals
print(f"\nafter 2000 steps: {tot.arrivals} jobs arrived, {tot.served} served, {tot.expired} expired")
print(f"realized demand per agent-step {tot.arrivals / (2000 * 20):.3f}")
print(f"mean idle agents {np.mean(idle_trace):.1f} of 20, yet many jobs expire: supply sits in the wrong zones")
print("mean revenue per agent per 1000 steps", round(env.state.cumulative_revenue.mean() / 2, 1))

# anonymity: with 3 idle agents and 2 jobs in one zone, each agent wins 2/3 of the time
print("\nassignment frequency, 3 idle / 2 jobs:", np.round(assignment_frequencies(trials=5000), 3).tolist())

# what a single agent sees is just (zone, idle count there)
agent = int(np.flatnonzero(env.state.busy == 0)[0])
print("local view of agent", agent, ":", env.observe(agent))
