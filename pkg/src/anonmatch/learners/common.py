"""Pieces shared by all learners: hyperparameters, exploration schedule,
feature encoding, replay memory and the mean-action table."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError
from ..numkit import forward, take_members

LEARNER_KINDS = ("tabq", "dqn", "a2c", "dedqn", "dea2c", "mmfq")


@dataclass
class HyperParams:
    gamma: float = 0.9
    alpha: float = 0.1
    lr_q: float = 1e-4
    lr_policy: float = 1e-5
    lr_value: float = 1e-4
    beta: float = 1e-2
    lam: float = 1e-2
    eps_start: float = 1.0
    eps_floor: float = 0.05
    # None: derived so that epsilon reaches the floor at the end of training
    eps_tau: float | None = None
    replay_capacity: int = 50_000
    batch_size: int = 32
    min_fill: int = 1_000
    target_sync: int = 1_000
    train_every: int = 1
    k: int = 5
    hidden: list[int] = field(default_factory=lambda: [256, 256])
    dropout: float = 0.5
    density_buckets: int = 5
    shared: bool = False
    # force a density head on DQN/A2C networks (for reduction checks)
    density_head: bool = False
    mean_action_period: int = 100

    def validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("hyper.gamma must lie in [0, 1)")
        for name in ("alpha", "lr_q", "lr_policy", "lr_value"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"hyper.{name} must be positive")
        if self.beta < 0 or self.lam < 0:
            raise ConfigError("hyper.beta and hyper.lam must be nonnegative")
        if not 0.0 < self.eps_floor <= self.eps_start <= 1.0:
            raise ConfigError("need 0 < hyper.eps_floor <= hyper.eps_start <= 1")
        for name in ("replay_capacity", "batch_size", "target_sync", "train_every", "k",
                     "density_buckets", "mean_action_period"):
            if getattr(self, name) < 1:
                raise ConfigError(f"hyper.{name} must be >= 1")
        if self.min_fill < 0:
            raise ConfigError("hyper.min_fill must be >= 0")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("hyper.hidden needs at least one positive layer width")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("hyper.dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def decay_tau(budget: int, eps_start: float = 1.0, eps_floor: float = 0.05) -> float:
    """Time constant that brings ``eps_start * exp(-t / tau)`` to the floor at ``budget``."""
    if budget <= 0:
        raise ConfigError("training budget must be positive")
    if eps_start <= eps_floor:
        return float("inf")
    return budget / math.log(eps_start / eps_floor)


def epsilon_at(step: int, tau: float, eps_start: float = 1.0, eps_floor: float = 0.05) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if math.isinf(tau):
        return max(eps_floor, eps_start)
    return max(eps_floor, eps_start * math.exp(-step / tau))


def encode(zones, counts_norm, n_zones: int, extra=None) -> np.ndarray:
    """One-hot zone, normalized local density, then any extra columns."""
    zones = np.asarray(zones, dtype=np.int64)
    width = n_zones + 1 + (0 if extra is None else np.shape(extra)[-1])
    x = np.zeros(zones.shape + (width,))
    np.put_along_axis(x, zones[..., None], 1.0, axis=-1)
    x[..., n_zones] = counts_norm
    if extra is not None:
        x[..., n_zones + 1 :] = extra
    return x


class ReplayMemory:
    """One FIFO ring buffer per member, stored as stacked arrays.

    Fields per experience: zone, normalized density, action, reward, next
    zone, next normalized density, and optionally mean-action rows for the
    current and next zone.
    """

    def __init__(self, members: int, capacity: int, extra_dim: int = 0):
        self.members, self.capacity, self.extra_dim = members, capacity, extra_dim
        shape = (members, capacity)
        self.z = np.zeros(shape, dtype=np.int64)
        self.d = np.zeros(shape)
        self.a = np.zeros(shape, dtype=np.int64)
        self.r = np.zeros(shape)
        self.z2 = np.zeros(shape, dtype=np.int64)
        self.d2 = np.zeros(shape)
        self.extra = np.zeros(shape + (extra_dim,)) if extra_dim else None
        self.extra2 = np.zeros(shape + (extra_dim,)) if extra_dim else None
        self.sizes = np.zeros(members, dtype=np.int64)
        self._next = np.zeros(members, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.sizes.sum())

    def push(self, member: int, z, d, a, r, z2, d2, extra=None, extra2=None) -> None:
        i = self._next[member]
        self.z[member, i], self.d[member, i], self.a[member, i] = z, d, a
        self.r[member, i], self.z2[member, i], self.d2[member, i] = r, z2, d2
        if self.extra_dim:
            self.extra[member, i] = extra
            self.extra2[member, i] = extra2
        self._next[member] = (i + 1) % self.capacity
        self.sizes[member] = min(self.sizes[member] + 1, self.capacity)

    def ready(self, batch_size: int, min_fill: int = 0) -> np.ndarray:
        return self.sizes >= max(batch_size, min_fill, 1)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform indices with replacement, shape (members, batch); rows of
        empty members point at slot 0."""
        u = rng.random((self.members, batch_size))
        return np.minimum((u * self.sizes[:, None]).astype(np.int64), np.maximum(self.sizes[:, None] - 1, 0))

    def gather(self, idx: np.ndarray, members=None) -> dict:
        """Experiences at ``idx`` (one row of indices per member, or per entry
        of ``members`` when given)."""
        rows = (np.arange(self.members) if members is None else np.asarray(members))[:, None]
        out = {name: getattr(self, name)[rows, idx] for name in ("z", "d", "a", "r", "z2", "d2")}
        if self.extra_dim:
            out["extra"] = self.extra[rows, idx]
            out["extra2"] = self.extra2[rows, idx]
        return out

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict | None:
        """Uniform batch for every member, or ``None`` if any member holds fewer
        than ``batch_size`` experiences (update deferred)."""
        if (self.sizes < batch_size).any():
            return None
        return self.gather(self.sample_indices(batch_size, rng))


class MeanActionTable:
    """Per-zone action distribution from the previous iteration."""

    def __init__(self, n_zones: int):
        self.n_zones = n_zones
        self.rows = np.full((n_zones, n_zones), 1.0 / n_zones)
        self._counts = np.zeros((n_zones, n_zones))

    def log(self, zones, actions) -> None:
        np.add.at(self._counts, (np.asarray(zones, dtype=np.int64), np.asarray(actions, dtype=np.int64)), 1.0)

    def roll(self) -> None:
        """Close the iteration: logged frequencies become the new rows; zones
        without any logged action fall back to uniform."""
        totals = self._counts.sum(axis=1, keepdims=True)
        uniform = np.full_like(self.rows, 1.0 / self.n_zones)
        self.rows = np.where(totals > 0, self._counts / np.maximum(totals, 1.0), uniform)
        self._counts[:] = 0.0

    def lookup(self, zones) -> np.ndarray:
        return self.rows[np.asarray(zones, dtype=np.int64)]


def spawn_generators(seed, n: int) -> list[np.random.Generator]:
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in seq.spawn(n)]


class Learner:
    """Population of independent learners, one per agent (or one shared).

    The harness drives it with :meth:`act` at decision points, :meth:`record`
    with the experiences the simulator emits and :meth:`train` once per step.
    """

    kind = "base"
    uses_epsilon = False
    has_density = False

    def __init__(self, n_agents: int, n_zones: int, hp: HyperParams, seed, budget: int):
        hp.validate()
        self.n_agents, self.n_zones, self.hp = n_agents, n_zones, hp
        self.members = 1 if hp.shared else n_agents
        self.member_of = np.zeros(n_agents, dtype=np.int64) if hp.shared else np.arange(n_agents)
        self.tau = hp.eps_tau if hp.eps_tau is not None else decay_tau(budget, hp.eps_start, hp.eps_floor)
        (self.init_rng, self.act_rng, self.replay_rng, self.dropout_rng) = spawn_generators(seed, 4)
        self.training = True
        self.last_losses: dict[str, float] = {}

    def epsilon(self, step: int) -> float:
        return epsilon_at(step, self.tau, self.hp.eps_start, self.hp.eps_floor)

    def _forward_rows(self, net, agents: np.ndarray, features: np.ndarray) -> np.ndarray:
        """Evaluation-mode outputs for one feature row per agent, in agent order.

        Only the owning members' weights are touched, which keeps acting cheap
        when few agents decide in a step.
        """
        if len(agents) == 0:
            return np.zeros((0, net.output_dim))
        if self.hp.shared:
            return forward(net, features[None])[0]
        sub = take_members(net, self.member_of[agents])
        return forward(sub, features[:, None, :])[:, 0]

    def act(self, agents, zones, counts, step: int) -> np.ndarray:
        raise NotImplementedError

    def record(self, experiences) -> None:
        raise NotImplementedError

    def train(self, step: int) -> None:
        pass

    def end_period(self) -> None:
        pass

    def density_predictions(self, experiences):
        return None
