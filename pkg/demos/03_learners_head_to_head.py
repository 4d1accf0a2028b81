"""DQN against its density-entropy variant on the DAR 0.6 scenario.

A shortened budget (40k training steps, 20 converged periods) so this runs
in a few minutes; the acceptance suite uses the full 2e5.  Expect small and
noisy differences at this scale.
"""
import sys

import numpy as np

from anonmatch.config import load_config
from anonmatch.harness import fairness_spread, run_experiment

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 40_000
seeds = "[0, 1]"

for kind in ("dqn", "dedqn", "a2c", "dea2c"):
    cfg, _ = load_config("dar60", [f'learner="{kind}"', f"train_steps={steps}", "converged_periods=20",
                                   f"seeds={seeds}"])
    logs = run_experiment(cfg)
    welfare = [log.converged_welfare() for log in logs]
    spread = [fairness_spread(log.converged_window()).std for log in logs]
    curve = np.mean([log.running_avg for log in logs], axis=0)
    print(f"{kind:6s} welfare {np.mean(welfare):7.1f}  per-seed {np.round(welfare, 1).tolist()}  "
          f"revenue std {np.mean(spread):5.1f}  running avg {curve[0]:.0f} -> {curve[-1]:.0f}")
