"""Grid-world supply/demand matching simulator with anonymous assignment.

Zones are the cells of a ``grid_width x grid_height`` grid.  Each step runs
five phases in a fixed order:

1. Poisson demand arrives in every zone, each job with a time-to-live.
2. Waiting jobs are matched to idle agents of the same zone; which agents
   get a job is decided uniformly at random (identities never matter).
3. Idle agents that were not matched move to the zone they chose.
4. Unserved jobs age by one step and expire when their TTL runs out.
5. Travelling agents count down; arriving agents bank any trip revenue.

After the last phase the idle-agent count of every zone is frozen into a
snapshot.  The snapshot is what agents observe locally at their next
decision, and what the harness reads as the population distribution.

An :class:`Experience` is closed when the agent takes its *next* action, so
revenue earned from jobs matched in between is credited to the move that put
the agent in position.
"""
from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigError, ContractError

TRIP_PATTERNS = ("uniform", "non_uniform")
ARRIVAL_MODES = ("static", "dynamic")
SCHEDULES = ("sinusoidal", "alternating", "rotating")


@dataclass
class EnvConfig:
    grid_width: int = 5
    grid_height: int = 2
    num_agents: int = 20
    # aggregate demand per step, split over zones by ``demand_skew``;
    # ignored when ``zone_rates`` is given
    total_rate: float = 12.0
    zone_rates: list[float] | None = None
    demand_skew: float = 0.0
    ttl: int = 2
    trip_pattern: str = "uniform"
    long_trip_zones: list[int] | None = None
    arrival_mode: str = "static"
    schedule: str = "sinusoidal"
    schedule_period: int = 200
    schedule_amplitude: float = 0.5
    kappa_t: float = 1.0
    rho0: float = 1.0
    rho1: float = 1.0

    @property
    def n_zones(self) -> int:
        return self.grid_width * self.grid_height

    def validate(self) -> None:
        if self.num_agents < 1:
            raise ConfigError("env.num_agents must be >= 1")
        if self.grid_width < 1 or self.grid_height < 1 or self.n_zones < 2:
            raise ConfigError("env grid must contain at least 2 zones")
        if self.ttl < 1:
            raise ConfigError("env.ttl must be >= 1")
        if self.trip_pattern not in TRIP_PATTERNS:
            raise ConfigError(f"env.trip_pattern must be one of {TRIP_PATTERNS}")
        if self.arrival_mode not in ARRIVAL_MODES:
            raise ConfigError(f"env.arrival_mode must be one of {ARRIVAL_MODES}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"env.schedule must be one of {SCHEDULES}")
        if self.schedule_period < 1:
            raise ConfigError("env.schedule_period must be >= 1")
        if not 0.0 <= self.schedule_amplitude <= 1.0:
            raise ConfigError("env.schedule_amplitude must lie in [0, 1]")
        if self.kappa_t <= 0 or self.rho0 <= 0 or self.rho1 <= 0:
            raise ConfigError("env.kappa_t, env.rho0 and env.rho1 must be positive")
        if self.zone_rates is not None:
            if len(self.zone_rates) != self.n_zones:
                raise ConfigError(f"env.zone_rates needs {self.n_zones} entries")
            if min(self.zone_rates) < 0:
                raise ConfigError("env.zone_rates must be nonnegative")
        elif self.total_rate < 0:
            raise ConfigError("env.total_rate must be nonnegative")
        if self.long_trip_zones is not None:
            if any(not 0 <= z < self.n_zones for z in self.long_trip_zones):
                raise ConfigError("env.long_trip_zones contains an unknown zone")

    def to_dict(self) -> dict:
        return asdict(self)


class ZoneMap:
    """Zone coordinates plus travel-time and revenue tables."""

    def __init__(self, width: int, height: int, kappa_t: float = 1.0, rho0: float = 1.0, rho1: float = 1.0):
        self.width, self.height = width, height
        self.coords = np.array([(x, y) for y in range(height) for x in range(width)])
        diff = np.abs(self.coords[:, None, :] - self.coords[None, :, :])
        self.distance = diff.sum(axis=-1)
        self.travel_time = np.maximum(1, np.rint(kappa_t * self.distance)).astype(np.int64)
        self.base_revenue = rho0 + rho1 * self.distance

    @property
    def n_zones(self) -> int:
        return len(self.coords)


def _tilted(distance_row: np.ndarray, theta: float) -> np.ndarray:
    logits = theta * distance_row
    w = np.exp(logits - logits.max())
    return w / w.sum()


def destination_profile(distance_row: np.ndarray, mean_distance: float) -> np.ndarray:
    """Maximum-entropy destination distribution with a prescribed mean trip distance.

    The solution is exponential in the distance, ``p ∝ exp(theta * dist)``;
    ``theta`` is found by bracketing root search.
    """
    lo, hi = distance_row.min(), distance_row.max()
    if not lo < mean_distance < hi:
        if np.isclose(mean_distance, distance_row.mean()):
            return np.full(len(distance_row), 1.0 / len(distance_row))
        raise ConfigError(f"mean trip distance {mean_distance:.3f} not attainable in ({lo}, {hi})")

    def gap(theta):
        return _tilted(distance_row, theta) @ distance_row - mean_distance

    if abs(gap(0.0)) < 1e-12:
        return _tilted(distance_row, 0.0)
    theta = brentq(gap, -60.0, 60.0, xtol=1e-13)
    return _tilted(distance_row, theta)


def default_long_trip_zones(zone_map: ZoneMap) -> list[int]:
    """The two opposite corners of the grid."""
    return sorted({0, zone_map.n_zones - 1})


class DemandModel:
    def __init__(self, config: EnvConfig, zone_map: ZoneMap):
        n = zone_map.n_zones
        if config.zone_rates is not None:
            rates = np.asarray(config.zone_rates, dtype=float)
        else:
            ramp = np.linspace(-0.5, 0.5, n)
            weights = np.exp(config.demand_skew * ramp)
            rates = config.total_rate * weights / weights.sum()
        self.base_rates = rates
        self.ttl = config.ttl
        self.mode = config.arrival_mode
        self.schedule = config.schedule
        self.period = config.schedule_period
        self.amplitude = config.schedule_amplitude
        self.trip_pattern = config.trip_pattern

        dist = zone_map.distance.astype(float)
        uniform_means = dist.mean(axis=1)
        self.long_trip_zones: list[int] = []
        if config.trip_pattern == "uniform":
            target = uniform_means.min()
            self.dest_probs = np.array([destination_profile(dist[o], target) for o in range(n)])
        else:
            longs = config.long_trip_zones or default_long_trip_zones(zone_map)
            self.long_trip_zones = sorted(longs)
            short = 0.5 * uniform_means.min()
            probs = []
            for o in range(n):
                if o in self.long_trip_zones:
                    target = min(2.5 * short, 0.9 * dist[o].max())
                    if target < 2.0 * short:
                        raise ConfigError(f"zone {o} cannot host long trips on this grid")
                else:
                    target = short
                probs.append(destination_profile(dist[o], target))
            self.dest_probs = np.array(probs)
        self.expected_distance = (self.dest_probs * dist).sum(axis=1)
        self._cum_dest = np.cumsum(self.dest_probs, axis=1)

    def rates_at(self, t: int) -> np.ndarray:
        if self.mode == "static":
            return self.base_rates
        if self.schedule == "sinusoidal":
            return self.base_rates * (1.0 + self.amplitude * np.sin(2.0 * np.pi * t / self.period))
        if self.schedule == "alternating":
            return self.base_rates * 2.0 if t % 2 == 0 else np.zeros_like(self.base_rates)
        shift = (t // self.period) % len(self.base_rates)
        return np.roll(self.base_rates, shift)

    @property
    def mean_total_rate(self) -> float:
        return float(self.base_rates.sum())


def dar(config: EnvConfig) -> float:
    """Demand-to-agent ratio: expected customers per step per agent."""
    if config.num_agents <= 0:
        raise ConfigError("DAR undefined for zero agents")
    if config.zone_rates is not None:
        total = float(np.sum(config.zone_rates))
    else:
        total = float(config.total_rate)
    return total / config.num_agents


def total_rate_for_dar(target_dar: float, num_agents: int) -> float:
    return target_dar * num_agents


@dataclass(slots=True)
class Job:
    origin: int
    destination: int
    revenue: float
    remaining_ttl: int


@dataclass(frozen=True)
class Observation:
    zone: int
    count: int
    normalized: float


@dataclass(frozen=True)
class Experience:
    agent: int
    z: int
    d: int
    a: int
    r: float
    z_next: int
    d_next: int
    n_agents: int
    t: int
    t_next: int

    @property
    def d_norm(self) -> float:
        return self.d / self.n_agents

    @property
    def d_next_norm(self) -> float:
        return self.d_next / self.n_agents


@dataclass
class PopulationDistribution:
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def normalized(self) -> np.ndarray | None:
        total = self.total
        if total == 0:
            return None
        return self.counts / total


@dataclass
class StepStats:
    arrivals: int = 0
    served: int = 0
    expired: int = 0


@dataclass
class WorldState:
    time: int
    zone: np.ndarray
    busy: np.ndarray
    destination: np.ndarray
    trip_revenue: np.ndarray
    accrued: np.ndarray
    cumulative_revenue: np.ndarray
    episode_revenue: np.ndarray
    jobs: list[deque]
    idle_counts: np.ndarray
    # open decision per agent: (zone, count, action, time); action -1 = none
    pending_zone: np.ndarray
    pending_count: np.ndarray
    pending_action: np.ndarray
    pending_time: np.ndarray
    rng: np.random.Generator
    prepared: bool = False
    assigned: np.ndarray | None = None
    stats: StepStats = field(default_factory=StepStats)
    totals: StepStats = field(default_factory=StepStats)

    @property
    def n_agents(self) -> int:
        return len(self.zone)

    @property
    def idle(self) -> np.ndarray:
        return self.busy == 0


class MatchingEnv:
    """The simulator.  Owns its configuration and one :class:`WorldState`."""

    def __init__(self, config: EnvConfig):
        config.validate()
        self.config = config
        self.zone_map = ZoneMap(config.grid_width, config.grid_height, config.kappa_t, config.rho0, config.rho1)
        self.demand = DemandModel(config, self.zone_map)
        self.state: WorldState | None = None

    @property
    def n_zones(self) -> int:
        return self.zone_map.n_zones

    @property
    def n_agents(self) -> int:
        return self.config.num_agents

    def reset(self, seed: int | np.random.Generator) -> WorldState:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        n, z = self.config.num_agents, self.n_zones
        zone = rng.integers(0, z, size=n)
        self.state = WorldState(
            time=0,
            zone=zone,
            busy=np.zeros(n, dtype=np.int64),
            destination=zone.copy(),
            trip_revenue=np.zeros(n),
            accrued=np.zeros(n),
            cumulative_revenue=np.zeros(n),
            episode_revenue=np.zeros(n),
            jobs=[deque() for _ in range(z)],
            idle_counts=np.bincount(zone, minlength=z),
            pending_zone=np.full(n, -1, dtype=np.int64),
            pending_count=np.zeros(n, dtype=np.int64),
            pending_action=np.full(n, -1, dtype=np.int64),
            pending_time=np.zeros(n, dtype=np.int64),
            rng=rng,
        )
        return self.state

    def _require_state(self) -> WorldState:
        if self.state is None:
            raise ContractError("call reset() first")
        return self.state

    def generate_demand(self, t: int | None = None) -> list[Job]:
        s = self._require_state()
        t = s.time if t is None else t
        rates = self.demand.rates_at(t)
        counts = s.rng.poisson(rates)
        total = int(counts.sum())
        if total == 0:
            return []
        origins = np.repeat(np.arange(self.n_zones), counts)
        u = s.rng.random(total)
        cum = self.demand._cum_dest[origins]
        dests = np.minimum((u[:, None] >= cum).sum(axis=1), self.n_zones - 1)
        revenue = self.zone_map.base_revenue[origins, dests]
        ttl = self.demand.ttl
        new_jobs = []
        for origin, dest, rev in zip(origins.tolist(), dests.tolist(), revenue.tolist()):
            job = Job(origin, dest, rev, ttl)
            s.jobs[origin].append(job)
            new_jobs.append(job)
        s.stats.arrivals += len(new_jobs)
        return new_jobs

    def assign_jobs(self) -> dict[int, list[tuple[int, Job]]]:
        """Match waiting jobs (oldest first) to uniformly chosen idle agents per zone."""
        s = self._require_state()
        if s.assigned is None:
            s.assigned = np.zeros(s.n_agents, dtype=bool)
        result: dict[int, list[tuple[int, Job]]] = {}
        waiting = [z for z, queue in enumerate(s.jobs) if queue]
        if not waiting:
            return result
        idle_ids = np.flatnonzero(s.idle & ~s.assigned)
        if idle_ids.size == 0:
            return result
        # a fresh random key per idle agent; the m smallest keys in a zone win,
        # which is a uniform m-subset of that zone's idle agents
        keys = s.rng.random(idle_ids.size)
        order = idle_ids[np.lexsort((keys, s.zone[idle_ids]))]
        zones_sorted = s.zone[order]
        starts = np.searchsorted(zones_sorted, waiting, side="left")
        ends = np.searchsorted(zones_sorted, waiting, side="right")
        travel = self.zone_map.travel_time
        for zone_id, lo, hi in zip(waiting, starts.tolist(), ends.tolist()):
            queue = s.jobs[zone_id]
            m = min(hi - lo, len(queue))
            if m == 0:
                continue
            pairs = []
            for agent in order[lo : lo + m].tolist():
                job = queue.popleft()
                s.busy[agent] = travel[zone_id, job.destination]
                s.destination[agent] = job.destination
                s.trip_revenue[agent] = job.revenue
                s.assigned[agent] = True
                pairs.append((agent, job))
            result[zone_id] = pairs
            s.stats.served += m
        return result

    def decision_agents(self) -> np.ndarray:
        """Run demand and matching for the current step; return agents free to act."""
        s = self._require_state()
        if not s.prepared:
            s.stats = StepStats()
            s.assigned = np.zeros(s.n_agents, dtype=bool)
            self.generate_demand(s.time)
            self.assign_jobs()
            s.prepared = True
        return np.flatnonzero(s.idle & ~s.assigned)

    def observe(self, agent: int) -> Observation:
        """Local view of one idle agent: its zone and that zone's idle count."""
        s = self._require_state()
        if s.busy[agent] != 0:
            raise ContractError(f"agent {agent} is busy and has no decision to make")
        zone = int(s.zone[agent])
        count = int(s.idle_counts[zone])
        return Observation(zone, count, count / s.n_agents)

    def local_counts(self, agents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized :meth:`observe`: (zones, idle counts in those zones)."""
        s = self._require_state()
        agents = np.asarray(agents, dtype=np.int64)
        if (s.busy[agents] != 0).any():
            raise ContractError("observation requested for a busy agent")
        zones = s.zone[agents]
        return zones, s.idle_counts[zones]

    def population_distribution(self) -> PopulationDistribution:
        s = self._require_state()
        return PopulationDistribution(s.idle_counts.copy())

    def step(self, actions: Mapping[int, int] | None = None) -> list[Experience]:
        """Advance one step.  ``actions`` must cover exactly the agents returned
        by :meth:`decision_agents` for this step."""
        s = self._require_state()
        eligible = self.decision_agents()
        actions = {} if actions is None else {int(k): int(v) for k, v in dict(actions).items()}
        eligible_set = set(eligible.tolist())
        extra = set(actions) - eligible_set
        if extra:
            raise ContractError(f"actions given for agents that cannot act: {sorted(extra)[:5]}")
        missing = eligible_set - set(actions)
        if missing:
            raise ContractError(f"no action for eligible agents {sorted(missing)[:5]}")

        emitted = []
        for agent in eligible:
            target = actions[int(agent)]
            if not 0 <= target < self.n_zones:
                raise ContractError(f"unknown zone {target}")
            here = int(s.zone[agent])
            count = int(s.idle_counts[here])
            if s.pending_action[agent] >= 0:
                emitted.append(
                    Experience(
                        agent=int(agent),
                        z=int(s.pending_zone[agent]),
                        d=int(s.pending_count[agent]),
                        a=int(s.pending_action[agent]),
                        r=float(s.accrued[agent]),
                        z_next=here,
                        d_next=count,
                        n_agents=s.n_agents,
                        t=int(s.pending_time[agent]),
                        t_next=s.time,
                    )
                )
            s.pending_zone[agent] = here
            s.pending_count[agent] = count
            s.pending_action[agent] = target
            s.pending_time[agent] = s.time
            s.accrued[agent] = 0.0
            s.busy[agent] = self.zone_map.travel_time[here, target]
            s.destination[agent] = target
            s.trip_revenue[agent] = 0.0

        for queue in s.jobs:
            for job in queue:
                job.remaining_ttl -= 1
            # FIFO order with a common TTL keeps the oldest jobs at the front
            while queue and queue[0].remaining_ttl <= 0:
                queue.popleft()
                s.stats.expired += 1

        moving = s.busy > 0
        s.busy[moving] -= 1
        arrived = moving & (s.busy == 0)
        if arrived.any():
            s.zone[arrived] = s.destination[arrived]
            rev = s.trip_revenue[arrived]
            s.cumulative_revenue[arrived] += rev
            s.episode_revenue[arrived] += rev
            s.accrued[arrived] += rev
            s.trip_revenue[arrived] = 0.0

        s.idle_counts = np.bincount(s.zone[s.busy == 0], minlength=self.n_zones)
        s.totals.arrivals += s.stats.arrivals
        s.totals.served += s.stats.served
        s.totals.expired += s.stats.expired
        s.time += 1
        s.prepared = False
        s.assigned = None
        return emitted

    def reset_episode_revenue(self) -> np.ndarray:
        s = self._require_state()
        out = s.episode_revenue.copy()
        s.episode_revenue[:] = 0.0
        return out
