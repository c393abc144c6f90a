"""Held-out evaluation: slice-wise synthesis, volume restacking, per-scenario
metric tables, and optional per-plane residual statistics.

Protocol: for each scenario, every test volume is conditioned (missing
channels imputed), synthesized slice-by-slice, restacked, and scored per
missing sequence. Ground truth and prediction are independently min-max
rescaled to [0, 1] per 3D volume per sequence before metrics; the comparison
mode against mean-normalized baselines can skip that rescale. A patient's
scenario score is the mean over that scenario's missing sequences; scenario
aggregates are mean and population std across patients; tier aggregates are
plain means over member scenario rows.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .conditioning import impute
from .errors import SeqSynthError
from .metrics import mse, psnr, renormalize_01, ssim, volume_ssim
from .scenario import DEFAULT_CHANNEL_NAMES, Scenario, difficulty_tier
from .stats import PlaneAnalysis, per_plane_error_analysis

METRIC_NAMES = ("mse", "psnr", "ssim")


@dataclass(frozen=True)
class MetricRow:
    scenario: str
    patient_id: str
    sequence: str
    mse: float
    psnr: float
    ssim: float


@dataclass(frozen=True)
class ScenarioAggregate:
    scenario: str
    tier: int
    n_patients: int
    mse_mean: float
    mse_std: float
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float


@dataclass(frozen=True)
class TierAggregate:
    tier: int
    n_scenarios: int
    mse_mean: float
    psnr_mean: float
    ssim_mean: float


@dataclass
class MetricsReport:
    rows: list[MetricRow]
    scenario_aggregates: list[ScenarioAggregate]
    tier_aggregates: list[TierAggregate]
    grand_mean: dict[str, float]

    def scenario_aggregate(self, scenario: str) -> ScenarioAggregate:
        for agg in self.scenario_aggregates:
            if agg.scenario == scenario:
                return agg
        raise KeyError(f"no aggregate for scenario {scenario}")

    def tier_aggregate(self, tier: int) -> TierAggregate:
        for agg in self.tier_aggregates:
            if agg.tier == tier:
                return agg
        raise KeyError(f"no aggregate for tier {tier}")

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(
                ["kind", "scenario", "tier", "patient_id", "sequence", "n",
                 "mse", "mse_std", "psnr", "psnr_std", "ssim", "ssim_std"]
            )
            for r in self.rows:
                w.writerow(
                    ["sample", r.scenario, "", r.patient_id, r.sequence, "",
                     f"{r.mse:.8g}", "", f"{r.psnr:.8g}", "", f"{r.ssim:.8g}", ""]
                )
            for a in self.scenario_aggregates:
                w.writerow(
                    ["scenario", a.scenario, a.tier, "", "", a.n_patients,
                     f"{a.mse_mean:.8g}", f"{a.mse_std:.8g}",
                     f"{a.psnr_mean:.8g}", f"{a.psnr_std:.8g}",
                     f"{a.ssim_mean:.8g}", f"{a.ssim_std:.8g}"]
                )
            for t in self.tier_aggregates:
                w.writerow(
                    ["tier", "", t.tier, "", "", t.n_scenarios,
                     f"{t.mse_mean:.8g}", "", f"{t.psnr_mean:.8g}", "",
                     f"{t.ssim_mean:.8g}", ""]
                )
            g = self.grand_mean
            w.writerow(
                ["grand", "", "", "", "", len(self.scenario_aggregates),
                 f"{g['mse']:.8g}", "", f"{g['psnr']:.8g}", "",
                 f"{g['ssim']:.8g}", ""]
            )

    def to_json(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {
            "rows": [asdict(r) for r in self.rows],
            "scenario_aggregates": [asdict(a) for a in self.scenario_aggregates],
            "tier_aggregates": [asdict(t) for t in self.tier_aggregates],
            "grand_mean": self.grand_mean,
        }
        path.write_text(json.dumps(doc, indent=2))


def synthesize_missing(
    generator: torch.nn.Module,
    volume: np.ndarray,
    scenario: Scenario,
    imputation: str = "zeros",
    rng: torch.Generator | None = None,
    batch_size: int = 8,
) -> np.ndarray:
    """Run the generator over every slice of a [D, C, H, W] volume.

    Returns a [D, C, H, W] array where missing channels hold the synthesized
    output and present channels are passed through from the input.
    """
    vol = torch.from_numpy(np.ascontiguousarray(volume, dtype=np.float32))
    if vol.ndim != 4:
        raise SeqSynthError(f"expected [D, C, H, W] volume, got shape {tuple(vol.shape)}")
    generator.eval()
    out = vol.clone()
    with torch.no_grad():
        for start in range(0, vol.shape[0], batch_size):
            x_r = vol[start : start + batch_size]
            x_z = impute(x_r, scenario, imputation, rng)
            g_out = generator(x_z)
            for ch in scenario.missing:
                out[start : start + batch_size, ch] = g_out[:, ch]
    return out.numpy()


def _volume_metrics(
    pred: np.ndarray, gt: np.ndarray, renormalize: bool
) -> tuple[float, float, float]:
    if renormalize:
        pred = renormalize_01(pred)
        gt = renormalize_01(gt)
        data_range = 1.0
    else:
        data_range = float(gt.max() - gt.min())
        if data_range <= 0:
            data_range = 1.0
    return (
        mse(pred, gt),
        psnr(pred, gt, data_range),
        volume_ssim(pred, gt, data_range),
    )


def evaluate_model(
    generator: torch.nn.Module,
    patients: list[tuple[str, np.ndarray]],
    scenarios: list[Scenario],
    channel_names: tuple[str, ...] = DEFAULT_CHANNEL_NAMES,
    renormalize: bool = True,
    imputation: str = "zeros",
    rng: torch.Generator | None = None,
) -> MetricsReport:
    """Score a generator on held-out patients across the given scenarios."""
    rows: list[MetricRow] = []
    patient_scores: dict[str, dict[str, list[float]]] = {}
    for scenario in scenarios:
        key = str(scenario)
        per_patient: dict[str, list[float]] = {m: [] for m in METRIC_NAMES}
        for pid, vol in patients:
            try:
                synth = synthesize_missing(generator, vol, scenario, imputation, rng)
                seq_scores = {m: [] for m in METRIC_NAMES}
                for ch in scenario.missing:
                    m_mse, m_psnr, m_ssim = _volume_metrics(
                        synth[:, ch], np.asarray(vol)[:, ch], renormalize
                    )
                    rows.append(
                        MetricRow(key, pid, channel_names[ch], m_mse, m_psnr, m_ssim)
                    )
                    seq_scores["mse"].append(m_mse)
                    seq_scores["psnr"].append(m_psnr)
                    seq_scores["ssim"].append(m_ssim)
            except SeqSynthError as e:
                raise type(e)(f"scenario {key}, patient {pid}: {e}") from e
            for m in METRIC_NAMES:
                per_patient[m].append(float(np.mean(seq_scores[m])))
        patient_scores[key] = per_patient

    scenario_aggs = []
    for scenario in scenarios:
        key = str(scenario)
        per_patient = patient_scores[key]
        n = len(per_patient["mse"])
        stats = {}
        for m in METRIC_NAMES:
            vals = np.asarray(per_patient[m], dtype=np.float64)
            stats[f"{m}_mean"] = float(vals.mean())
            stats[f"{m}_std"] = float(vals.std())  # population std
        scenario_aggs.append(
            ScenarioAggregate(
                scenario=key, tier=difficulty_tier(scenario), n_patients=n, **stats
            )
        )

    tier_aggs = []
    for tier in sorted({a.tier for a in scenario_aggs}):
        members = [a for a in scenario_aggs if a.tier == tier]
        tier_aggs.append(
            TierAggregate(
                tier=tier,
                n_scenarios=len(members),
                mse_mean=float(np.mean([a.mse_mean for a in members])),
                psnr_mean=float(np.mean([a.psnr_mean for a in members])),
                ssim_mean=float(np.mean([a.ssim_mean for a in members])),
            )
        )

    grand = {
        "mse": float(np.mean([a.mse_mean for a in scenario_aggs])),
        "psnr": float(np.mean([a.psnr_mean for a in scenario_aggs])),
        "ssim": float(np.mean([a.ssim_mean for a in scenario_aggs])),
    }
    return MetricsReport(rows, scenario_aggs, tier_aggs, grand)


def plane_analyses(
    generator: torch.nn.Module,
    patients: list[tuple[str, np.ndarray]],
    scenarios: list[Scenario],
    channel_names: tuple[str, ...] = DEFAULT_CHANNEL_NAMES,
    renormalize: bool = True,
    imputation: str = "zeros",
    rng: torch.Generator | None = None,
) -> list[tuple[str, str, str, PlaneAnalysis]]:
    """Per-plane residual tests for every scenario, patient, missing sequence."""
    out = []
    for scenario in scenarios:
        for pid, vol in patients:
            synth = synthesize_missing(generator, vol, scenario, imputation, rng)
            for ch in scenario.missing:
                pred = synth[:, ch]
                gt = np.asarray(vol)[:, ch]
                if renormalize:
                    pred = renormalize_01(pred)
                    gt = renormalize_01(gt)
                analysis = per_plane_error_analysis(pred, gt)
                out.append((str(scenario), pid, channel_names[ch], analysis))
    return out


def write_plane_csv(
    path: str | Path, analyses: list[tuple[str, str, str, PlaneAnalysis]]
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["scenario", "patient_id", "sequence", "comparison",
             "statistic", "p_value", "method", "degenerate"]
        )
        for scenario, pid, seq, analysis in analyses:
            for comparison, res in analysis.tests.items():
                w.writerow(
                    [scenario, pid, seq, comparison,
                     f"{res.statistic:.8g}", f"{res.p_value:.8g}",
                     res.method, int(res.degenerate)]
                )
