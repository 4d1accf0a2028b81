"""Independent reinforcement learners in an anonymous grid matching market.

Modules: ``numkit`` (member-stacked MLPs, Adam, finite differences),
``matchenv`` (the simulator), ``learners``, ``harness`` (runs, metrics,
CSV output), ``oracles`` and ``cli``.
"""
__version__ = "0.1.0"
