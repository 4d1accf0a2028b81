"""Advantage actor-critic with k-step returns, plain and with density entropy.

Each agent collects on-policy rollouts of ``k`` decisions.  Completed
rollouts queue up and are consumed every ``train_every`` steps with one
update per owning network; partial rollouts are flushed at evaluation-period
cuts.  The density-entropy variant
adds ``beta * H`` to the return target and a ``lam``-weighted density loss on
a replay batch to the value network loss.
"""
from __future__ import annotations

import numpy as np

from ..errors import ContractError, TrainingError
from ..numkit import (backward_cached, entropy, forward, forward_cached, make_optimizer, mlp_init,
                      optimizer_step, softmax, take_members)
from .common import HyperParams, Learner, ReplayMemory, encode
from .dqn import density_logits, density_loss_grad


def k_step_returns(rewards, bootstrap: float, gamma: float) -> np.ndarray:
    """``R_t = sum_{j>=t} gamma^(j-t) r_j + gamma^(T-t) V(s_T)`` for every row of one rollout."""
    out = np.empty(len(rewards))
    acc = bootstrap
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def policy_loss_grad(logits: np.ndarray, actions, advantage, weights):
    """Surrogate ``-mean(log pi(a|s) * A)`` over weighted rows and its logit gradient."""
    p = softmax(logits)
    actions = np.asarray(actions, dtype=np.int64)
    n = np.maximum(weights.sum(axis=-1), 1.0)
    logp = np.log(np.take_along_axis(p, actions[..., None], axis=-1)[..., 0])
    loss = -(weights * advantage * logp).sum(axis=-1) / n
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, actions[..., None], 1.0, axis=-1)
    coef = (-(weights * advantage) / n[..., None])[..., None]
    return loss, coef * (onehot - p)


def value_loss_grad(v: np.ndarray, target, weights):
    n = np.maximum(weights.sum(axis=-1), 1.0)
    diff = target - v
    return (weights * diff**2).sum(axis=-1) / n, -2.0 * weights * diff / n[..., None]


class A2cLearner(Learner):
    kind = "a2c"

    def __init__(self, n_agents: int, n_zones: int, hp: HyperParams, seed, budget: int):
        super().__init__(n_agents, n_zones, hp, seed, budget)
        self.beta = hp.beta if self.has_density else 0.0
        self.lam = hp.lam if self.has_density else 0.0
        in_dim = n_zones + 1
        self.policy = mlp_init([in_dim, *hp.hidden, n_zones], {"pi": n_zones}, hp.dropout,
                               seed=self.init_rng, members=self.members)
        heads = {"v": 1}
        if self.has_density or hp.density_head:
            heads["density"] = n_zones * n_zones
        self.value = mlp_init([in_dim, *hp.hidden, sum(heads.values())], heads, hp.dropout,
                              seed=self.init_rng, members=self.members)
        self.opt_policy = make_optimizer(self.policy, "rmsprop", hp.lr_policy)
        self.opt_value = make_optimizer(self.value, "rmsprop", hp.lr_value)
        self.replay = ReplayMemory(self.members, hp.replay_capacity) if self.lam != 0.0 else None
        self.rollouts: list[list] = [[] for _ in range(n_agents)]
        self._ready: list[list] = []

    def _features(self, zones, counts_norm):
        return encode(zones, counts_norm, self.n_zones)

    def policy_probs(self, agents, zones, counts) -> np.ndarray:
        agents = np.asarray(agents, dtype=np.int64)
        x = self._features(zones, np.asarray(counts) / self.n_agents)
        return softmax(self.policy.head(self._forward_rows(self.policy, agents, x), "pi"))

    def act(self, agents, zones, counts, step):
        agents = np.asarray(agents, dtype=np.int64)
        u = self.act_rng.random(len(agents))
        if len(agents) == 0:
            return np.zeros(0, dtype=np.int64)
        cum = np.cumsum(self.policy_probs(agents, zones, counts), axis=-1)
        return np.minimum((u[:, None] >= cum).sum(axis=-1), self.n_zones - 1)

    def record(self, experiences):
        if not self.training:
            return
        for e in experiences:
            roll = self.rollouts[e.agent]
            roll.append(e)
            if len(roll) == self.hp.k:
                self._ready.append(roll)
                self.rollouts[e.agent] = []
            if self.replay is not None:
                self.replay.push(self.member_of[e.agent], e.z, e.d_norm, e.a, e.r, e.z_next, e.d_next_norm)

    def train(self, step):
        if not self.training or step % self.hp.train_every or not self._ready:
            return None
        ready, self._ready = self._ready, []
        return self.update(ready)

    def end_period(self):
        """Flush completed and partial rollouts (returns are truncated at the cut)."""
        if not self.training:
            return
        ready = self._ready + [r for r in self.rollouts if r]
        self._ready = []
        self.rollouts = [[] for _ in range(self.n_agents)]
        if ready:
            self.update(ready)

    def _layout(self, rollouts):
        """Pad rollouts into (selected members, rows) arrays grouped by owning member."""
        per_member: dict[int, list] = {}
        for roll in rollouts:
            if not roll:
                raise ContractError("empty rollout")
            per_member.setdefault(int(self.member_of[roll[0].agent]), []).append(roll)
        members = np.array(sorted(per_member), dtype=np.int64)
        width = max(sum(len(r) for r in rs) for rs in per_member.values())
        shape = (len(members), width)
        z = np.zeros(shape, dtype=np.int64)
        d = np.zeros(shape)
        a = np.zeros(shape, dtype=np.int64)
        zb = np.zeros(shape, dtype=np.int64)
        db = np.zeros(shape)
        w = np.zeros(shape)
        rewards = np.zeros(shape)
        spans = []
        for row, m in enumerate(members):
            i = 0
            spans.append([])
            for roll in per_member[int(m)]:
                last = roll[-1]
                spans[row].append((i, i + len(roll)))
                for e in roll:
                    z[row, i], d[row, i], a[row, i], rewards[row, i] = e.z, e.d_norm, e.a, e.r
                    zb[row, i], db[row, i] = last.z_next, last.d_next_norm
                    w[row, i] = 1.0
                    i += 1
        return members, z, d, a, zb, db, w, rewards, spans

    def update(self, rollouts):
        """One policy and one value step for every member owning a rollout."""
        members, z, d, a, zb, db, w, rewards, spans = self._layout(rollouts)
        width = z.shape[1]
        value = take_members(self.value, members)
        policy = take_members(self.policy, members)
        x = self._features(z, d)
        xb = self._features(zb, db)
        v_col = self.value.heads["v"].start
        eval_out = forward(value, np.concatenate([x, xb], axis=1))
        v_now = eval_out[:, :width, v_col]
        v_boot = eval_out[:, width:, v_col]
        returns = np.zeros_like(v_now)
        for row, row_spans in enumerate(spans):
            for lo, hi in row_spans:
                returns[row, lo:hi] = k_step_returns(rewards[row, lo:hi], v_boot[row, hi - 1], self.hp.gamma)
        target = returns
        if self.beta != 0.0:
            h = entropy(softmax(density_logits(value, eval_out[:, :width], a, self.n_zones)), axis=-1)
            target = returns + self.beta * h
        advantage = target - v_now

        # value network: (target - V)^2 on rollout rows, lam * density loss on replay rows
        vx = x
        dens = None
        if self.lam != 0.0:
            ready = self.replay.ready(self.hp.batch_size)[members]
            if ready.any():
                idx = self.replay.sample_indices(self.hp.batch_size, self.replay_rng)[members]
                dens = self.replay.gather(idx, members)
                vx = np.concatenate([x, self._features(dens["z"], dens["d"])], axis=1)
        out, cache = forward_cached(value, vx, train_mode=True, dropout_seed=self.dropout_rng)
        upstream = np.zeros_like(out)
        v_loss, v_grad = value_loss_grad(out[:, :width, v_col], target, w)
        upstream[:, :width, v_col] = v_grad
        d_loss = np.zeros(len(members))
        if dens is not None:
            logits = density_logits(value, out[:, width:], dens["a"], self.n_zones)
            d_loss, d_grad = density_loss_grad(logits, dens["z2"], dens["d2"])
            d_loss = d_loss * ready
            start = self.value.heads["density"].start
            cols = start + dens["a"][..., None] * self.n_zones + np.arange(self.n_zones)
            block = np.zeros(upstream[:, width:].shape)
            np.put_along_axis(block, cols, self.lam * d_grad * ready.astype(float)[:, None, None], axis=-1)
            upstream[:, width:] = block
        total_v = v_loss + self.lam * d_loss

        p_out, p_cache = forward_cached(policy, x, train_mode=True, dropout_seed=self.dropout_rng)
        p_loss, p_grad = policy_loss_grad(policy.head(p_out, "pi"), a, advantage, w)

        if not (np.isfinite(total_v).all() and np.isfinite(p_loss).all()):
            raise TrainingError(f"non-finite {self.kind} loss")
        optimizer_step(self.value, backward_cached(value, cache, upstream), self.opt_value, members=members)
        optimizer_step(self.policy, backward_cached(policy, p_cache, p_grad), self.opt_policy, members=members)
        losses = {"value_loss": float(v_loss.mean()), "density_loss": float(d_loss.mean()),
                  "policy_loss": float(p_loss.mean()), "loss": float(total_v.mean())}
        self.last_losses = losses
        return losses

    def density_predictions(self, experiences):
        if "density" not in self.value.heads or not experiences:
            return None
        agents = np.array([e.agent for e in experiences])
        zones = np.array([e.z for e in experiences])
        d = np.array([e.d_norm for e in experiences])
        acts = np.array([e.a for e in experiences])
        out = self._forward_rows(self.value, agents, self._features(zones, d))
        return softmax(density_logits(self.value, out, acts, self.n_zones))


class DeA2cLearner(A2cLearner):
    kind = "dea2c"
    has_density = True


def a2c_update(learner: A2cLearner, rollout) -> dict:
    """Update from a single agent's rollout (list of experiences)."""
    return learner.update([list(rollout)])


def dea2c_update(learner: DeA2cLearner, rollout) -> dict:
    return learner.update([list(rollout)])
