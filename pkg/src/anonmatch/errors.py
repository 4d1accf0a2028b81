"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or inconsistent construction arguments."""


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


class TrainingError(RuntimeError):
    """Non-finite loss, gradient, reward or parameter encountered during a run."""


class UnknownLearnerError(ConfigError):
    """Learner kind outside the registry."""
