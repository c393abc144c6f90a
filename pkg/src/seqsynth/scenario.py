"""Scenario algebra: presence masks, difficulty tiers, and sampling schedules.

A scenario is a bit string over the ordered sequence set, e.g. "1010" with the
default 4-channel order (T1, T2, T1c, T2flair): 1 = sequence present, 0 =
missing and to be synthesized. All-present and all-missing strings are invalid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidScenario

DEFAULT_CHANNEL_NAMES = ("T1", "T2", "T1c", "T2flair")

MODE_MIMO = "MIMO"
MODE_MISO = "MISO"


@dataclass(frozen=True)
class Scenario:
    """Immutable presence mask over the ordered sequence set."""

    mask: tuple[int, ...]

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.mask):
            raise InvalidScenario(f"mask bits must be 0/1, got {self.mask}")
        if len(self.mask) < 2:
            raise InvalidScenario(f"need at least 2 channels, got {len(self.mask)}")
        if all(b == 1 for b in self.mask) or all(b == 0 for b in self.mask):
            raise InvalidScenario(
                f"scenario {''.join(map(str, self.mask))} is degenerate: "
                "all sequences present or all missing"
            )

    @property
    def n_channels(self) -> int:
        return len(self.mask)

    @property
    def present(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.mask) if b == 1)

    @property
    def missing(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.mask) if b == 0)

    @property
    def n_missing(self) -> int:
        return len(self.missing)

    def __str__(self) -> str:
        return "".join(str(b) for b in self.mask)


def parse_scenario(s: str, c: int = 4) -> Scenario:
    """Parse a bit string like "0011" into a Scenario with c channels."""
    if len(s) != c:
        raise InvalidScenario(f"expected {c} bits, got {len(s)} in {s!r}")
    if any(ch not in "01" for ch in s):
        raise InvalidScenario(f"illegal characters in scenario string {s!r}")
    return Scenario(tuple(int(ch) for ch in s))


def enumerate_valid(c: int = 4, mode: str = MODE_MIMO, miso_target: int | None = None) -> list[Scenario]:
    """All valid scenarios in ascending binary order of their bit string.

    MIMO: every nonempty proper subset present, 2^c - 2 scenarios.
    MISO: the target bit is always 0 and at least one other bit is 1,
    2^(c-1) - 1 scenarios.
    """
    if c < 2:
        raise ValueError(f"need c >= 2 channels, got {c}")
    if mode == MODE_MISO:
        if miso_target is None or not 0 <= miso_target < c:
            raise ValueError(f"MISO target must be in [0, {c}), got {miso_target}")
    elif mode != MODE_MIMO:
        raise ValueError(f"unknown mode {mode!r}")

    out = []
    for value in range(1, 2**c - 1):
        bits = tuple((value >> (c - 1 - i)) & 1 for i in range(c))
        if mode == MODE_MISO and bits[miso_target] != 0:
            continue
        out.append(Scenario(bits))
    return out


def difficulty_tier(s: Scenario) -> int:
    """Number of missing sequences: 1 = easy, 2 = moderate, 3 = hard for C=4."""
    return s.n_missing


@dataclass(frozen=True)
class CurriculumSchedule:
    """Epoch-indexed scenario difficulty schedule.

    CL mode raises the missing-sequence count by one every ``tier_epochs``
    epochs until ``uniform_after``, then samples uniformly over all valid
    scenarios. RS mode is uniform throughout.
    """

    tier_epochs: int = 10
    uniform_after: int = 30
    total_epochs: int = 60
    mode: str = "CL"

    def __post_init__(self):
        if self.mode not in ("CL", "RS"):
            raise ValueError(f"mode must be CL or RS, got {self.mode!r}")
        if self.tier_epochs <= 0 or self.total_epochs <= 0:
            raise ValueError("tier_epochs and total_epochs must be positive")
        if not 0 <= self.uniform_after <= self.total_epochs:
            raise ValueError("uniform_after must lie within [0, total_epochs]")

    def validate_for_channels(self, c: int) -> None:
        # CL tiers must exactly cover [0, uniform_after): one tier per
        # possible missing-count 1..c-1.
        if self.mode == "CL" and self.tier_epochs * (c - 1) != self.uniform_after:
            raise ValueError(
                f"CL schedule inconsistent: {c - 1} tiers x {self.tier_epochs} "
                f"epochs != uniform_after={self.uniform_after}"
            )


@dataclass
class ScenarioSampler:
    """Draws one scenario per minibatch according to the schedule.

    MISO mode ignores the curriculum and samples uniformly over the target's
    valid scenarios at every epoch.
    """

    schedule: CurriculumSchedule
    c: int = 4
    mode: str = MODE_MIMO
    miso_target: int | None = None
    _all: list[Scenario] = field(init=False, repr=False)
    _by_tier: dict[int, list[Scenario]] = field(init=False, repr=False)

    def __post_init__(self):
        if self.mode == MODE_MIMO:
            self.schedule.validate_for_channels(self.c)
        self._all = enumerate_valid(self.c, self.mode, self.miso_target)
        self._by_tier = {}
        for s in self._all:
            self._by_tier.setdefault(difficulty_tier(s), []).append(s)

    @property
    def all_scenarios(self) -> list[Scenario]:
        return list(self._all)

    def pool(self, epoch: int) -> list[Scenario]:
        """The scenario pool sampled from at the given epoch."""
        if not 0 <= epoch < self.schedule.total_epochs:
            raise ValueError(f"epoch {epoch} outside [0, {self.schedule.total_epochs})")
        if (
            self.mode == MODE_MISO
            or self.schedule.mode == "RS"
            or epoch >= self.schedule.uniform_after
        ):
            return self._all
        tier = epoch // self.schedule.tier_epochs
        return self._by_tier[tier + 1]

    def sample(self, epoch: int, rng: np.random.Generator) -> Scenario:
        pool = self.pool(epoch)
        return pool[int(rng.integers(len(pool)))]


def sample_scenario(
    schedule: CurriculumSchedule,
    epoch: int,
    rng: np.random.Generator,
    c: int = 4,
    mode: str = MODE_MIMO,
    miso_target: int | None = None,
) -> Scenario:
    """Single-shot convenience wrapper around ScenarioSampler."""
    return ScenarioSampler(schedule, c, mode, miso_target).sample(epoch, rng)
