"""Small-instance oracles used by the test suite and the ``gradcheck`` and
``oracle`` CLI subcommands.

* finite-difference checks of every training loss on miniature networks,
* tabular Q-learning against value iteration on a two-zone instance,
* an actor-critic two-armed bandit,
* assignment frequencies of the simulator (anonymity).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .learners import A2cLearner, HyperParams, TabularQ
from .learners.a2c import policy_loss_grad, value_loss_grad
from .learners.dqn import combined_loss, density_logits, density_loss_grad, q_loss_grad
from .matchenv import EnvConfig, Experience, Job, MatchingEnv, ZoneMap
from .numkit import forward_cached, grad_check, mlp_init

GRAD_TOLERANCE = 1e-4
VI_TOLERANCE = 1e-3


def kink_free_batch(net, rng: np.random.Generator, rows: int, margin: float = 1e-3, n_zones: int | None = None):
    """Random inputs whose rectifier pre-activations all stay ``margin`` away from zero.

    With ``n_zones`` the inputs follow the learners' encoding: one-hot zone
    followed by densities in [0, 1].
    """
    while True:
        if n_zones is None:
            x = rng.normal(size=(rows, net.input_dim))
        else:
            x = np.zeros((rows, net.input_dim))
            x[np.arange(rows), rng.integers(0, n_zones, rows)] = 1.0
            x[:, n_zones:] = rng.random((rows, net.input_dim - n_zones))
        _, cache = forward_cached(net, x)
        if all(np.abs(z).min() > margin for z in cache.preacts[:-1]):
            return x


def _perturb_biases(net, rng):
    # zero biases make many pre-activations coincide; jitter them for the check
    for b in net.biases:
        b[...] = rng.normal(scale=0.1, size=b.shape)


def _loss_cases(rng: np.random.Generator, n_zones: int, rows: int):
    """Yield ``(name, net, loss_fn)`` for every training loss.

    Each ``loss_fn`` maps the network output of shape (rows, out) to a scalar
    loss and its gradient, exactly as the learners compute them.
    """
    in_dim = n_zones + 1
    hidden = int(rng.integers(3, 9))
    actions = rng.integers(0, n_zones, rows)
    z_next = rng.integers(0, n_zones, rows)
    d_next = rng.random(rows)
    y = rng.normal(size=rows)
    lam = float(rng.uniform(0.1, 2.0))

    q_net = mlp_init([in_dim, hidden, n_zones + n_zones * n_zones], {"q": n_zones, "density": n_zones * n_zones},
                     seed=rng)

    def q_loss(out):
        loss, g = q_loss_grad(q_net.head(out, "q")[None], actions[None], y[None])
        up = np.zeros_like(out)
        up[:, q_net.heads["q"]] = g[0]
        return float(loss[0]), up

    def d_loss(out):
        logits = density_logits(q_net, out, actions, n_zones)
        loss, g = density_loss_grad(logits[None], z_next[None], d_next[None])
        up = np.zeros_like(out)
        cols = q_net.heads["density"].start + actions[:, None] * n_zones + np.arange(n_zones)
        np.put_along_axis(up, cols, g[0], axis=-1)
        return float(loss[0]), up

    def c_loss(out):
        _, _, total, up = combined_loss(q_net, out[None], actions[None], y[None], z_next[None], d_next[None],
                                        lam, n_zones)
        return float(total[0]), up[0]

    yield "q", q_net, q_loss
    yield "density", q_net, d_loss
    yield "combined", q_net, c_loss

    v_net = mlp_init([in_dim, hidden, 1 + n_zones * n_zones], {"v": 1, "density": n_zones * n_zones}, seed=rng)
    weights = (rng.random(rows) < 0.8).astype(float)
    weights[0] = 1.0
    target = rng.normal(size=rows)

    def v_loss(out):
        loss, g = value_loss_grad(out[None, :, 0], target[None], weights[None])
        up = np.zeros_like(out)
        up[:, 0] = g[0]
        return float(loss[0]), up

    def v_d_loss(out):
        # value loss plus lam * density loss, as in the density-entropy critic
        loss, up = v_loss(out)
        logits = density_logits(v_net, out, actions, n_zones)
        dl, g = density_loss_grad(logits[None], z_next[None], d_next[None])
        cols = v_net.heads["density"].start + actions[:, None] * n_zones + np.arange(n_zones)
        np.put_along_axis(up, cols, lam * g[0], axis=-1)
        return loss + lam * float(dl[0]), up

    yield "value", v_net, v_loss
    yield "value_density", v_net, v_d_loss

    p_net = mlp_init([in_dim, hidden, n_zones], {"pi": n_zones}, seed=rng)
    advantage = rng.normal(size=rows)

    def p_loss(out):
        loss, g = policy_loss_grad(out[None], actions[None], advantage[None], weights[None])
        return float(loss[0]), g[0]

    yield "policy", p_net, p_loss


def loss_gradient_suite(trials: int = 100, seed: int = 0, step: float = 1e-3) -> dict[str, float]:
    """Max relative backprop vs central-difference error per loss over ``trials`` random nets."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(trials):
        n_zones = int(rng.integers(2, 6))
        rows = int(rng.integers(1, 5))
        for name, net, loss_fn in _loss_cases(rng, n_zones, rows):
            _perturb_biases(net, rng)
            x = kink_free_batch(net, rng, rows, n_zones=n_zones)
            worst[name] = max(worst.get(name, 0.0), grad_check(net, x, loss_fn, step=step))
    return worst


# -- value iteration on a two-zone instance ---------------------------------

@dataclass
class TwoZoneInstance:
    """Single agent, two zones, fixed demand.

    Zone 1 always holds a waiting job for each destination and zone 0 holds
    none.  From zone 1 the agent may serve the same-zone job (fare
    ``base_revenue[1, 1]``) or the job to zone 0 (fare ``base_revenue[1, 0]``);
    from zone 0 it can only wait or reposition, both unpaid.  The decision
    state is the zone; every decision takes one step.
    """

    rewards: np.ndarray  # (state, action)
    next_state: np.ndarray  # (state, action)
    gamma: float

    @classmethod
    def build(cls, gamma: float = 0.9, rho0: float = 1.0, rho1: float = 1.0):
        zm = ZoneMap(2, 1, rho0=rho0, rho1=rho1)
        rewards = np.array([[0.0, 0.0], [zm.base_revenue[1, 0], zm.base_revenue[1, 1]]])
        next_state = np.array([[0, 1], [0, 1]])
        return cls(rewards, next_state, gamma)

    def value_iteration(self, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
        q = np.zeros_like(self.rewards)
        for _ in range(max_iter):
            new = self.rewards + self.gamma * q.max(axis=1)[self.next_state]
            if np.abs(new - q).max() < tol:
                return new
            q = new
        return q


def tabular_vs_value_iteration(updates: int = 20_000, seed: int = 0, alpha: float = 0.1,
                               gamma: float = 0.9) -> tuple[float, np.ndarray, np.ndarray]:
    """Train the tabular learner on experiences from the instance with uniform
    exploration; returns ``(max gap, Q_tabular, Q_vi)``."""
    inst = TwoZoneInstance.build(gamma)
    q_vi = inst.value_iteration()
    hp = HyperParams(alpha=alpha, gamma=gamma, eps_tau=float("inf"))
    learner = TabularQ(1, 2, hp, seed, budget=updates)
    rng = np.random.default_rng(seed)
    z = 0
    for t in range(updates):
        # a lone agent always sees normalized density 1
        a = int(learner.act(np.array([0]), np.array([z]), np.array([1]), t)[0])
        z2 = int(inst.next_state[z, a])
        learner.record([Experience(0, z, 1, a, float(inst.rewards[z, a]), z2, 1, 1, t, t + 1)])
        z = z2 if rng.random() > 0.05 else int(rng.integers(2))
    bucket = hp.density_buckets - 1
    q_tab = learner.q[0, :, bucket, :]
    return float(np.abs(q_tab - q_vi).max()), q_tab.copy(), q_vi


# -- actor-critic bandit -------------------------------------------------------

def a2c_bandit(seed: int, updates: int = 5_000, lr_policy: float = 1e-3, lr_value: float = 1e-3,
               hidden=(8,)) -> float:
    """Two-armed bandit (arm 1 pays 1, arm 0 pays 0) in a single state.

    Returns the learned probability of arm 1 after ``updates`` one-step
    actor-critic updates.
    """
    hp = HyperParams(gamma=0.0, k=1, lr_policy=lr_policy, lr_value=lr_value, hidden=list(hidden), dropout=0.0,
                     train_every=1)
    learner = A2cLearner(1, 2, hp, seed, budget=updates)
    zone, count = np.array([0]), np.array([1])
    for t in range(updates):
        a = int(learner.act(np.array([0]), zone, count, t)[0])
        learner.record([Experience(0, 0, 1, a, float(a == 1), 0, 1, 1, t, t + 1)])
        learner.train(t)
    return float(learner.policy_probs(np.array([0]), zone, count)[0, 1])


def bandit_suite(seeds=range(10), updates: int = 5_000, threshold: float = 0.95) -> tuple[int, list[float]]:
    probs = [a2c_bandit(s, updates) for s in seeds]
    return sum(p > threshold for p in probs), probs


# -- simulator assignment statistics ---------------------------------------------

def assignment_frequencies(trials: int = 10_000, idle: int = 3, jobs: int = 2, seed: int = 0) -> np.ndarray:
    """Fraction of trials in which each of ``idle`` co-located agents gets one
    of ``jobs`` waiting jobs."""
    env = MatchingEnv(EnvConfig(grid_width=2, grid_height=1, num_agents=idle, total_rate=0.0))
    state = env.reset(seed)
    hits = np.zeros(idle)
    for _ in range(trials):
        state.zone[:] = 0
        state.busy[:] = 0
        state.assigned = None
        for q in state.jobs:
            q.clear()
        for _ in range(jobs):
            state.jobs[0].append(Job(0, 1, 2.0, 2))
        env.assign_jobs()
        hits += state.assigned
    return hits / trials


def _random_actions(env: MatchingEnv, rng: np.random.Generator) -> dict[int, int]:
    agents = env.decision_agents()
    return dict(zip(agents.tolist(), rng.integers(0, env.n_zones, agents.size).tolist()))


def realized_dar(dar: float = 0.6, steps: int = 10_000, seed: int = 0, **env_kw) -> float:
    """Job arrivals per agent per step under random repositioning."""
    env_kw.setdefault("num_agents", 20)
    env = MatchingEnv(EnvConfig(total_rate=dar * env_kw["num_agents"], **env_kw))
    env.reset(seed)
    rng = np.random.default_rng(seed + 1)
    for _ in range(steps):
        env.step(_random_actions(env, rng))
    return env.state.totals.arrivals / (steps * env.n_agents)


def fuzz_invariants(steps: int = 100_000, seed: int = 0, config: EnvConfig | None = None,
                    max_reports: int = 5) -> tuple[int, list[str]]:
    """Drive the simulator with random actions and check, after every step:

    - every agent is either idle in a valid zone or busy with a valid destination,
      and the idle counts match the agents' positions;
    - waiting jobs keep a remaining TTL in [1, ttl - 1] and none outlives its TTL;
    - arrivals = served + expired + waiting, step by step and cumulatively;
    - revenue paid out plus revenue still in transit equals the fares of served jobs.

    Returns the number of steps with a violation and the first few messages.
    """
    cfg = config or EnvConfig(grid_width=5, grid_height=2, num_agents=20, total_rate=12.0, demand_skew=1.0)
    env = MatchingEnv(cfg)
    env.reset(seed)
    rng = np.random.default_rng(seed + 1)
    s = env.state
    fares = 0.0
    bad_steps, reports = 0, []
    for t in range(steps):
        waiting_before = sum(len(q) for q in s.jobs)
        env.decision_agents()
        # fares of this step's matches sit on the agents flagged as assigned
        fares += s.trip_revenue[s.assigned].sum()
        stats = s.stats
        env.step(_random_actions(env, rng))
        problems = []
        idle = s.busy == 0
        if (s.busy < 0).any():
            problems.append("negative remaining travel time")
        if not ((0 <= s.zone) & (s.zone < env.n_zones)).all():
            problems.append("agent outside the grid")
        if not np.array_equal(s.idle_counts, np.bincount(s.zone[idle], minlength=env.n_zones)):
            problems.append("idle counts disagree with agent positions")
        if s.idle_counts.sum() + (~idle).sum() != cfg.num_agents:
            problems.append("agents created or lost")
        ttls = [job.remaining_ttl for q in s.jobs for job in q]
        if ttls and not (1 <= min(ttls) and max(ttls) <= cfg.ttl - 1):
            problems.append(f"TTL out of range: {min(ttls)}..{max(ttls)}")
        waiting = len(ttls)
        if waiting_before + stats.arrivals - stats.served - stats.expired != waiting:
            problems.append("per-step job count not conserved")
        if s.totals.arrivals != s.totals.served + s.totals.expired + waiting:
            problems.append("cumulative job count not conserved")
        paid = s.cumulative_revenue.sum() + s.trip_revenue[~idle].sum()
        if not np.isclose(paid, fares, rtol=1e-9, atol=1e-6):
            problems.append(f"revenue not conserved: {paid} vs {fares}")
        if s.time != t + 1:
            problems.append("clock skipped")
        if problems:
            bad_steps += 1
            if len(reports) < max_reports:
                reports.append(f"step {t}: " + "; ".join(problems))
    return bad_steps, reports

