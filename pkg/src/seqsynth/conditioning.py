"""Conditioning tensors and the selective adversarial losses.

The conditioning contract, given a batch with scenario mask and missing set K:

* X_z: generator input; present channels copied from the real image, missing
  channels imputed (zeros / unit Gaussian noise / per-pixel mean of present
  channels).
* X_i: generator output with present channels overwritten by the real data,
  so the discriminator only ever judges the synthesized channels.
* L_r: per-sequence patch target grid, 0.0 on missing channels, 1.0 on
  present ones; L_ar is all ones.

The generator objective is lambda * L1_selective + (1 - lambda) * L2_adv,
where L1_selective sums per-channel mean absolute error over missing channels
only. Disabling selective conditioning reverts to penalizing all channels and
feeding the raw generator output to the discriminator; zero imputation on X_z
is kept either way.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .data import SliceBatch
from .errors import EmptyMissingSet, ShapeMismatch
from .scenario import Scenario

IMPUTATION_KINDS = ("zeros", "noise", "average")


def impute(
    x_real: torch.Tensor,
    scenario: Scenario,
    strategy: str = "zeros",
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Build X_z: real data on present channels, imputed values on missing."""
    if strategy not in IMPUTATION_KINDS:
        raise ValueError(f"unknown imputation strategy {strategy!r}")
    x_z = x_real.clone()
    missing = list(scenario.missing)
    if strategy == "zeros":
        x_z[:, missing] = 0.0
    elif strategy == "noise":
        noise = torch.empty(
            (x_real.shape[0], len(missing), *x_real.shape[2:]), dtype=x_real.dtype
        ).normal_(0.0, 1.0, generator=rng)
        x_z[:, missing] = noise
    else:  # average of the present channels, per pixel
        mean = x_real[:, list(scenario.present)].mean(dim=1, keepdim=True)
        x_z[:, missing] = mean.expand(-1, len(missing), -1, -1)
    return x_z


def replace_present(
    g_out: torch.Tensor, x_real: torch.Tensor, scenario: Scenario
) -> torch.Tensor:
    """Build X_i: generator output with present channels overwritten by real."""
    if g_out.shape != x_real.shape:
        raise ShapeMismatch(f"{tuple(g_out.shape)} vs {tuple(x_real.shape)}")
    x_i = g_out.clone()
    present = list(scenario.present)
    x_i[:, present] = x_real[:, present]
    return x_i


def patch_targets(
    scenario: Scenario, batch_size: int, grid: tuple[int, int]
) -> tuple[torch.Tensor, torch.Tensor]:
    """(L_r, L_ar) patch-label grids of shape [B, C, gh, gw]."""
    c = scenario.n_channels
    l_r = torch.zeros(batch_size, c, *grid)
    l_r[:, list(scenario.present)] = 1.0
    l_ar = torch.ones(batch_size, c, *grid)
    return l_r, l_ar


@dataclass
class ConditioningTensors:
    x_z: torch.Tensor
    x_r: torch.Tensor
    x_i: torch.Tensor | None
    l_r: torch.Tensor
    l_ar: torch.Tensor
    scenario: Scenario


def build_conditioning(
    batch: SliceBatch,
    g_out: torch.Tensor | None = None,
    strategy: str = "zeros",
    rng: torch.Generator | None = None,
    patch_grid: tuple[int, int] = (16, 16),
    ic_enabled: bool = True,
) -> ConditioningTensors:
    x_r = batch.data
    x_z = impute(x_r, batch.scenario, strategy, rng)
    x_i = None
    if g_out is not None:
        if ic_enabled:
            x_i = replace_present(g_out, x_r, batch.scenario)
        else:
            x_i = g_out
    l_r, l_ar = patch_targets(batch.scenario, x_r.shape[0], patch_grid)
    return ConditioningTensors(
        x_z=x_z, x_r=x_r, x_i=x_i, l_r=l_r, l_ar=l_ar, scenario=batch.scenario
    )


@dataclass
class GeneratorLossParts:
    total: torch.Tensor
    l1_sel: torch.Tensor
    l2_adv: torch.Tensor


def selective_l1(
    g_out: torch.Tensor, x_r: torch.Tensor, missing: tuple[int, ...]
) -> torch.Tensor:
    """Sum over missing channels of the per-channel mean absolute error."""
    if not missing:
        raise EmptyMissingSet("selective L1 needs at least one missing channel")
    diffs = (g_out[:, list(missing)] - x_r[:, list(missing)]).abs()
    return diffs.mean(dim=(0, 2, 3)).sum()


def generator_loss(
    g_out: torch.Tensor,
    tensors: ConditioningTensors,
    d_scores: torch.Tensor,
    lam: float = 0.9,
    ic_enabled: bool = True,
) -> GeneratorLossParts:
    """lambda * selective L1 + (1 - lambda) * mean squared gap to all-real."""
    if ic_enabled:
        l1 = selective_l1(g_out, tensors.x_r, tensors.scenario.missing)
    else:
        l1 = selective_l1(g_out, tensors.x_r, tuple(range(g_out.shape[1])))
    if d_scores.shape != tensors.l_ar.shape:
        raise ShapeMismatch(
            f"d_scores {tuple(d_scores.shape)} vs L_ar {tuple(tensors.l_ar.shape)}"
        )
    l2 = ((d_scores - tensors.l_ar) ** 2).mean()
    total = lam * l1 + (1.0 - lam) * l2
    return GeneratorLossParts(total=total, l1_sel=l1, l2_adv=l2)


def discriminator_loss(
    d_real: torch.Tensor,
    d_fake: torch.Tensor,
    l_r: torch.Tensor,
    l_ar: torch.Tensor,
    scale: float = 0.5,
) -> torch.Tensor:
    """scale * (MSE(d_real, all-ones) + MSE(d_fake, per-sequence labels))."""
    if d_real.shape != l_ar.shape or d_fake.shape != l_r.shape:
        raise ShapeMismatch(
            f"scores {tuple(d_real.shape)}/{tuple(d_fake.shape)} vs targets "
            f"{tuple(l_ar.shape)}/{tuple(l_r.shape)}"
        )
    real_term = ((d_real - l_ar) ** 2).mean()
    fake_term = ((d_fake - l_r) ** 2).mean()
    return scale * (real_term + fake_term)
