"""Multi-input multi-output synthesis of missing MRI pulse sequences.

One conditional generator covers every nonempty proper subset of the sequence
set: missing channels are zero-imputed on input, synthesized in a single
forward pass, and trained with a selective L1 plus least-squares adversarial
objective in which present channels are swapped back to real data before
discrimination.
"""

__version__ = "0.1.0"

from .scenario import (
    DEFAULT_CHANNEL_NAMES,
    CurriculumSchedule,
    Scenario,
    enumerate_valid,
    parse_scenario,
)

__all__ = [
    "DEFAULT_CHANNEL_NAMES",
    "CurriculumSchedule",
    "Scenario",
    "enumerate_valid",
    "parse_scenario",
    "__version__",
]
