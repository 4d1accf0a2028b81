"""Tabular Q-learning over (zone, density bucket) states."""
from __future__ import annotations

import numpy as np

from .common import HyperParams, Learner


def density_bucket(d_norm, buckets: int):
    """Equal-width bucket of a normalized density in [0, 1]."""
    return np.minimum(np.floor(np.asarray(d_norm) * buckets).astype(np.int64), buckets - 1)


def tabular_q_update(table: np.ndarray, s, a: int, r: float, s_next, alpha: float, gamma: float) -> float:
    """One Q-learning backup in place; ``s`` and ``s_next`` index the leading
    table axes.  Returns the TD error."""
    td = r + gamma * table[s_next].max() - table[s][a]
    table[s][a] += alpha * td
    return float(td)


class TabularQ(Learner):
    kind = "tabq"
    uses_epsilon = True

    def __init__(self, n_agents: int, n_zones: int, hp: HyperParams, seed, budget: int):
        super().__init__(n_agents, n_zones, hp, seed, budget)
        self.q = np.zeros((self.members, n_zones, hp.density_buckets, n_zones))

    def _bucket(self, counts):
        return density_bucket(np.asarray(counts) / self.n_agents, self.hp.density_buckets)

    def act(self, agents, zones, counts, step):
        agents = np.asarray(agents, dtype=np.int64)
        n = len(agents)
        explore = self.act_rng.random(n) < self.epsilon(step)
        random_zone = self.act_rng.integers(0, self.n_zones, size=n)
        q = self.q[self.member_of[agents], zones, self._bucket(counts)]
        return np.where(explore, random_zone, np.argmax(q, axis=-1)) if n else np.zeros(0, dtype=np.int64)

    def record(self, experiences):
        if not self.training:
            return
        buckets = self.hp.density_buckets
        for e in experiences:
            table = self.q[self.member_of[e.agent]]
            s = (e.z, int(density_bucket(e.d_norm, buckets)))
            s2 = (e.z_next, int(density_bucket(e.d_next_norm, buckets)))
            tabular_q_update(table, s, e.a, e.r, s2, self.hp.alpha, self.hp.gamma)
