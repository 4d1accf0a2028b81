"""DQN, density-entropy DQN and the mean-field Q baseline.

All three share one network layout: a ``q`` head with one value per target
zone and, when density prediction is on, a ``density`` head made of one
block of ``n_zones`` logits per action.  Softmax over a block gives the
predicted normalized agent distribution after taking that action.
"""
from __future__ import annotations

import numpy as np

from ..errors import TrainingError
from ..numkit import backward_cached, entropy, forward, forward_cached, make_optimizer, mlp_init, optimizer_step, softmax
from .common import HyperParams, Learner, MeanActionTable, ReplayMemory, encode


def density_logits(net, out: np.ndarray, actions, n_zones: int) -> np.ndarray:
    """Logit block of the chosen action, shape ``out.shape[:-1] + (n_zones,)``."""
    blocks = net.head(out, "density").reshape(out.shape[:-1] + (n_zones, n_zones))
    actions = np.asarray(actions, dtype=np.int64)
    return np.take_along_axis(blocks, actions[..., None, None], axis=-2)[..., 0, :]


def predicted_density(net, z, d_norm, a, n_zones: int, extra=None) -> np.ndarray:
    """Predicted next-step normalized density after action ``a`` in ``(z, d)``."""
    x = encode(z, d_norm, n_zones, extra)
    return softmax(density_logits(net, forward(net, x), a, n_zones))


def q_loss_grad(q: np.ndarray, actions, y):
    """Mean squared TD loss per member and its gradient w.r.t. the q head."""
    actions = np.asarray(actions, dtype=np.int64)
    q_sa = np.take_along_axis(q, actions[..., None], axis=-1)[..., 0]
    diff = y - q_sa
    n = q.shape[-2]
    grad = np.zeros_like(q)
    np.put_along_axis(grad, actions[..., None], (-2.0 / n * diff)[..., None], axis=-1)
    return (diff**2).mean(axis=-1), grad


def density_loss_grad(logits: np.ndarray, observed_zone, observed_density):
    """Local-coordinate squared error of the softmax prediction.

    Only the observed zone's coordinate is penalized; the gradient reaches the
    whole block through the softmax.
    """
    p = softmax(logits)
    zone = np.asarray(observed_zone, dtype=np.int64)
    pz = np.take_along_axis(p, zone[..., None], axis=-1)[..., 0]
    diff = observed_density - pz
    n = logits.shape[-2]
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, zone[..., None], 1.0, axis=-1)
    g = (-2.0 / n * diff * pz)[..., None]
    return (diff**2).mean(axis=-1), g * (onehot - p)


def combined_loss(net, out, actions, y, z_next, d_next, lam: float, n_zones: int):
    """``L_Q + lam * L_D`` per member plus the upstream gradient on ``out``.

    The density term is skipped entirely when ``lam`` is zero.
    """
    upstream = np.zeros_like(out)
    q_loss, q_grad = q_loss_grad(net.head(out, "q"), actions, y)
    upstream[..., net.heads["q"]] = q_grad
    d_loss = np.zeros_like(q_loss)
    if lam != 0.0:
        logits = density_logits(net, out, actions, n_zones)
        d_loss, d_grad = density_loss_grad(logits, z_next, d_next)
        start = net.heads["density"].start
        cols = start + np.asarray(actions, dtype=np.int64)[..., None] * n_zones + np.arange(n_zones)
        np.put_along_axis(upstream, cols, lam * d_grad, axis=-1)
        return q_loss, d_loss, q_loss + lam * d_loss, upstream
    return q_loss, d_loss, q_loss, upstream


class DqnLearner(Learner):
    kind = "dqn"
    uses_epsilon = True

    def __init__(self, n_agents: int, n_zones: int, hp: HyperParams, seed, budget: int):
        super().__init__(n_agents, n_zones, hp, seed, budget)
        self.beta = hp.beta if self.has_density else 0.0
        self.lam = hp.lam if self.has_density else 0.0
        self.extra_dim = n_zones if self.kind == "mmfq" else 0
        in_dim = n_zones + 1 + self.extra_dim
        heads = {"q": n_zones}
        if self.has_density or hp.density_head:
            heads["density"] = n_zones * n_zones
        sizes = [in_dim, *hp.hidden, sum(heads.values())]
        self.net = mlp_init(sizes, heads, hp.dropout, seed=self.init_rng, members=self.members)
        self.target = self.net.copy()
        self.opt = make_optimizer(self.net, "adam", hp.lr_q)
        self.replay = ReplayMemory(self.members, hp.replay_capacity, self.extra_dim)
        self.updates = 0
        self.mean_actions: MeanActionTable | None = MeanActionTable(n_zones) if self.extra_dim else None
        if self.extra_dim:
            self._pending_extra = np.full((n_agents, n_zones), 1.0 / n_zones)
            self._closing_extra = self._pending_extra.copy()

    def _features(self, zones, counts_norm, extra=None):
        return encode(zones, counts_norm, self.n_zones, extra)

    def q_values(self, agents, zones, counts) -> np.ndarray:
        agents = np.asarray(agents, dtype=np.int64)
        extra = self.mean_actions.lookup(zones) if self.extra_dim else None
        x = self._features(zones, np.asarray(counts) / self.n_agents, extra)
        return self.net.head(self._forward_rows(self.net, agents, x), "q")

    def act(self, agents, zones, counts, step):
        agents = np.asarray(agents, dtype=np.int64)
        n = len(agents)
        explore = self.act_rng.random(n) < self.epsilon(step)
        random_zone = self.act_rng.integers(0, self.n_zones, size=n)
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        if self.extra_dim:
            self._closing_extra[agents] = self._pending_extra[agents]
            self._pending_extra[agents] = self.mean_actions.lookup(zones)
        greedy = np.argmax(self.q_values(agents, zones, counts), axis=-1)
        return np.where(explore, random_zone, greedy)

    def record(self, experiences):
        if not self.training:
            return
        for e in experiences:
            if self.extra_dim:
                self.replay.push(self.member_of[e.agent], e.z, e.d_norm, e.a, e.r, e.z_next, e.d_next_norm,
                                 self._closing_extra[e.agent], self._pending_extra[e.agent])
            else:
                self.replay.push(self.member_of[e.agent], e.z, e.d_norm, e.a, e.r, e.z_next, e.d_next_norm)

    def targets(self, batch: dict) -> np.ndarray:
        """``r + beta * H + gamma * max_a' Q_target(z', d', a')`` for a gathered batch."""
        x2 = self._features(batch["z2"], batch["d2"], batch.get("extra2"))
        if self.beta != 0.0:
            x = self._features(batch["z"], batch["d"], batch.get("extra"))
            out = forward(self.target, np.concatenate([x2, x], axis=-2))
            nb = x2.shape[-2]
            out_next, out_now = out[..., :nb, :], out[..., nb:, :]
            h = entropy(softmax(density_logits(self.target, out_now, batch["a"], self.n_zones)), axis=-1)
            return batch["r"] + self.beta * h + self.hp.gamma * self.target.head(out_next, "q").max(axis=-1)
        out_next = forward(self.target, x2)
        return batch["r"] + self.hp.gamma * self.target.head(out_next, "q").max(axis=-1)

    def train_batch(self, batch: dict, member_mask=None) -> dict:
        y = self.targets(batch)
        x = self._features(batch["z"], batch["d"], batch.get("extra"))
        out, cache = forward_cached(self.net, x, train_mode=True, dropout_seed=self.dropout_rng)
        q_loss, d_loss, total, upstream = combined_loss(
            self.net, out, batch["a"], y, batch["z2"], batch["d2"], self.lam, self.n_zones
        )
        mask = np.ones(self.members, dtype=bool) if member_mask is None else member_mask
        if not np.isfinite(total[mask]).all():
            raise TrainingError(f"non-finite {self.kind} loss")
        optimizer_step(self.net, backward_cached(self.net, cache, upstream), self.opt, member_mask)
        self.updates += 1
        if self.updates % self.hp.target_sync == 0:
            self.target.load_from(self.net)
        losses = {"q_loss": float(q_loss[mask].mean()), "density_loss": float(d_loss[mask].mean()),
                  "loss": float(total[mask].mean())}
        self.last_losses = losses
        return losses

    def train(self, step):
        if not self.training or step % self.hp.train_every:
            return None
        mask = self.replay.ready(self.hp.batch_size, self.hp.min_fill)
        if not mask.any():
            return None
        batch = self.replay.gather(self.replay.sample_indices(self.hp.batch_size, self.replay_rng))
        return self.train_batch(batch, None if mask.all() else mask)

    def density_predictions(self, experiences):
        if "density" not in self.net.heads or not experiences:
            return None
        agents = np.array([e.agent for e in experiences])
        zones = np.array([e.z for e in experiences])
        d = np.array([e.d_norm for e in experiences])
        acts = np.array([e.a for e in experiences])
        extra = self._closing_extra[agents] if self.extra_dim else None
        out = self._forward_rows(self.net, agents, self._features(zones, d, extra))
        logits = density_logits(self.net, out, acts, self.n_zones)
        return softmax(logits)


class DeDqnLearner(DqnLearner):
    kind = "dedqn"
    has_density = True


class MmfqLearner(DqnLearner):
    """DQN whose input also carries the previous iteration's mean action of
    the agent's zone (centralized information)."""

    kind = "mmfq"


def dqn_target(learner: DqnLearner, experiences) -> np.ndarray:
    """``r + gamma * max Q(z', d'; target)`` for single-member learners."""
    batch = _batch_from(experiences)
    beta = learner.beta
    learner.beta = 0.0
    try:
        return learner.targets(batch)[0]
    finally:
        learner.beta = beta


def dedqn_target(learner: DqnLearner, experiences) -> np.ndarray:
    return learner.targets(_batch_from(experiences))[0]


def density_loss(net, experiences, n_zones: int) -> float:
    """Mean local-coordinate squared error of the density head over a batch."""
    b = _batch_from(experiences)
    out = forward(net, encode(b["z"], b["d"], n_zones))
    loss, _ = density_loss_grad(density_logits(net, out, b["a"], n_zones), b["z2"], b["d2"])
    return float(np.mean(loss))


def dedqn_train_batch(learner: DqnLearner, experiences) -> tuple[float, float, float]:
    losses = learner.train_batch(_batch_from(experiences))
    return losses["q_loss"], losses["density_loss"], losses["loss"]


def mmfq_train_batch(learner: MmfqLearner, experiences, table: MeanActionTable) -> dict:
    b = _batch_from(experiences)
    b["extra"] = table.lookup(b["z"])
    b["extra2"] = table.lookup(b["z2"])
    return learner.train_batch(b)


def _batch_from(experiences) -> dict:
    """Single-member batch arrays of shape (1, n) from experience records."""
    exps = list(experiences)
    return {
        "z": np.array([[e.z for e in exps]], dtype=np.int64),
        "d": np.array([[e.d_norm for e in exps]], dtype=float),
        "a": np.array([[e.a for e in exps]], dtype=np.int64),
        "r": np.array([[e.r for e in exps]], dtype=float),
        "z2": np.array([[e.z_next for e in exps]], dtype=np.int64),
        "d2": np.array([[e.d_next_norm for e in exps]], dtype=float),
    }
