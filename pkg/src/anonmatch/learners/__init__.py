"""Independent learners over local (zone, density) observations."""
from ..errors import UnknownLearnerError
from .a2c import A2cLearner, DeA2cLearner, a2c_update, dea2c_update, k_step_returns
from .common import (
    LEARNER_KINDS,
    HyperParams,
    Learner,
    MeanActionTable,
    ReplayMemory,
    decay_tau,
    encode,
    epsilon_at,
)
from .dqn import (
    DeDqnLearner,
    DqnLearner,
    MmfqLearner,
    combined_loss,
    dedqn_target,
    dedqn_train_batch,
    density_loss,
    dqn_target,
    mmfq_train_batch,
    predicted_density,
)
from .tabular import TabularQ, tabular_q_update

_REGISTRY = {
    "tabq": TabularQ,
    "dqn": DqnLearner,
    "dedqn": DeDqnLearner,
    "mmfq": MmfqLearner,
    "a2c": A2cLearner,
    "dea2c": DeA2cLearner,
}


def make_learner(kind: str, n_agents: int, n_zones: int, hp: HyperParams, seed, budget: int) -> Learner:
    try:
        cls = _REGISTRY[kind]
    except KeyError:
        raise UnknownLearnerError(f"unknown learner kind {kind!r}; expected one of {LEARNER_KINDS}") from None
    return cls(n_agents, n_zones, hp, seed, budget)


__all__ = [
    "A2cLearner", "DeA2cLearner", "DeDqnLearner", "DqnLearner", "HyperParams", "LEARNER_KINDS", "Learner",
    "MeanActionTable", "MmfqLearner", "ReplayMemory", "TabularQ", "a2c_update", "combined_loss", "decay_tau",
    "dea2c_update", "dedqn_target", "dedqn_train_batch", "density_loss", "dqn_target", "encode", "epsilon_at",
    "k_step_returns", "make_learner", "mmfq_train_batch", "predicted_density", "tabular_q_update",
]
