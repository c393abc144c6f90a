"""Training loop: alternating single generator/discriminator steps with the
curriculum-driven scenario sampler, loss logging, and checkpointing.

One scenario is drawn per minibatch and shared by every slice in it. Each step
runs exactly one Adam update on the generator followed by one on the
discriminator; the discriminator judges the detached generator output from the
same forward pass.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .conditioning import (
    ConditioningTensors,
    discriminator_loss,
    generator_loss,
    impute,
    patch_targets,
    replace_present,
    selective_l1,
)
from .data import SliceBatch
from .errors import CheckpointMismatch, NonFiniteLoss
from .networks import (
    DiscriminatorSpec,
    GeneratorSpec,
    PatchDiscriminator,
    UNetGenerator,
    init_weights,
)
from .scenario import (
    MODE_MIMO,
    MODE_MISO,
    CurriculumSchedule,
    Scenario,
    ScenarioSampler,
    difficulty_tier,
)

CHECKPOINT_SCHEMA_VERSION = 1

LOG_COLUMNS = ("epoch", "step", "scenario", "tier", "l1_sel", "l2_adv", "d_loss", "wall_time")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.9
    d_loss_scale: float = 0.5
    lr: float = 2e-4
    adam_betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 4
    epochs: int = 60
    ic_enabled: bool = True
    imputation: str = "zeros"
    schedule: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    mode: str = MODE_MIMO
    miso_target: int | None = None
    seed: int = 0
    checkpoint_every: int = 5

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lambda must be in (0, 1], got {self.lam}")
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("lr, batch_size, and epochs must be positive")
        if self.mode == MODE_MISO and self.miso_target is None:
            raise ValueError("MISO mode requires miso_target")
        if self.epochs != self.schedule.total_epochs:
            raise ValueError(
                f"epochs ({self.epochs}) must match schedule.total_epochs "
                f"({self.schedule.total_epochs})"
            )

    @classmethod
    def miso_defaults(cls, miso_target: int = 3, **overrides) -> "TrainConfig":
        """Target-fixed mode: 30 epochs, batch 2, uniform scenarios."""
        defaults = dict(
            batch_size=2,
            epochs=30,
            schedule=CurriculumSchedule(mode="RS", total_epochs=30),
            mode=MODE_MISO,
            miso_target=miso_target,
        )
        defaults.update(overrides)
        return cls(**defaults)

    def to_json(self) -> dict:
        return {
            "lam": self.lam,
            "d_loss_scale": self.d_loss_scale,
            "lr": self.lr,
            "adam_betas": list(self.adam_betas),
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "ic_enabled": self.ic_enabled,
            "imputation": self.imputation,
            "schedule": {
                "tier_epochs": self.schedule.tier_epochs,
                "uniform_after": self.schedule.uniform_after,
                "total_epochs": self.schedule.total_epochs,
                "mode": self.schedule.mode,
            },
            "mode": self.mode,
            "miso_target": self.miso_target,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        sched = d.pop("schedule")
        return cls(
            schedule=CurriculumSchedule(**sched),
            adam_betas=tuple(d.pop("adam_betas")),
            **d,
        )


@dataclass
class LossRecord:
    epoch: int
    step: int
    scenario: str
    tier: int
    l1_sel: float
    l2_adv: float
    d_loss: float
    wall_time: float

    def row(self) -> list:
        return [
            self.epoch,
            self.step,
            self.scenario,
            self.tier,
            f"{self.l1_sel:.8f}",
            f"{self.l2_adv:.8f}",
            f"{self.d_loss:.8f}",
            f"{self.wall_time:.4f}",
        ]


@dataclass
class TrainState:
    config: TrainConfig
    generator: UNetGenerator
    discriminator: PatchDiscriminator
    g_opt: torch.optim.Adam
    d_opt: torch.optim.Adam
    impute_rng: torch.Generator
    epoch: int = 0
    step: int = 0


def init_state(
    config: TrainConfig, g_spec: GeneratorSpec, d_spec: DiscriminatorSpec
) -> TrainState:
    torch.manual_seed(config.seed)
    init_rng = torch.Generator().manual_seed(config.seed)
    generator = init_weights(UNetGenerator(g_spec), rng=init_rng)
    discriminator = init_weights(PatchDiscriminator(d_spec), rng=init_rng)
    g_opt = torch.optim.Adam(
        generator.parameters(), lr=config.lr, betas=config.adam_betas
    )
    d_opt = torch.optim.Adam(
        discriminator.parameters(), lr=config.lr, betas=config.adam_betas
    )
    impute_rng = torch.Generator().manual_seed(config.seed + 1)
    return TrainState(config, generator, discriminator, g_opt, d_opt, impute_rng)


def train_step(state: TrainState, batch: SliceBatch) -> LossRecord:
    """One generator update, then one discriminator update."""
    t0 = time.perf_counter()
    cfg = state.config
    g, d = state.generator, state.discriminator
    g.train()
    d.train()

    x_r = batch.data
    x_z = impute(x_r, batch.scenario, cfg.imputation, state.impute_rng)
    g_out = g(x_z)
    x_i = replace_present(g_out, x_r, batch.scenario) if cfg.ic_enabled else g_out
    grid = d.patch_grid((x_r.shape[2], x_r.shape[3]))
    l_r, l_ar = patch_targets(batch.scenario, x_r.shape[0], grid)

    d_scores = d(x_i, x_r)
    tensors = ConditioningTensors(
        x_z=x_z, x_r=x_r, x_i=x_i, l_r=l_r, l_ar=l_ar, scenario=batch.scenario
    )
    g_parts = generator_loss(g_out, tensors, d_scores, cfg.lam, cfg.ic_enabled)
    state.g_opt.zero_grad()
    g_parts.total.backward()
    state.g_opt.step()

    x_i_const = x_i.detach()
    d_real = d(x_r, x_r)
    d_fake = d(x_r, x_i_const)
    d_l = discriminator_loss(d_real, d_fake, l_r, l_ar, cfg.d_loss_scale)
    state.d_opt.zero_grad()
    d_l.backward()
    state.d_opt.step()

    l1 = float(g_parts.l1_sel.detach())
    l2 = float(g_parts.l2_adv.detach())
    dl = float(d_l.detach())
    if not (np.isfinite(l1) and np.isfinite(l2) and np.isfinite(dl)):
        raise NonFiniteLoss(
            f"non-finite loss at epoch {state.epoch} step {state.step} "
            f"scenario {batch.scenario}",
            diagnostics={
                "epoch": state.epoch,
                "step": state.step,
                "scenario": str(batch.scenario),
                "patient_ids": batch.patient_ids,
                "slice_indices": batch.slice_indices,
                "l1_sel": l1,
                "l2_adv": l2,
                "d_loss": dl,
            },
        )
    rec = LossRecord(
        epoch=state.epoch,
        step=state.step,
        scenario=str(batch.scenario),
        tier=difficulty_tier(batch.scenario),
        l1_sel=l1,
        l2_adv=l2,
        d_loss=dl,
        wall_time=time.perf_counter() - t0,
    )
    state.step += 1
    return rec


@dataclass
class SlicePool:
    """Flattened training slices with provenance."""

    data: torch.Tensor  # [N, C, H, W]
    patient_ids: list[str]
    slice_indices: list[int]

    @classmethod
    def from_patients(cls, patients: list[tuple[str, np.ndarray]]) -> "SlicePool":
        arrays, pids, zs = [], [], []
        for pid, arr in patients:
            arrays.append(np.asarray(arr, dtype=np.float32))
            pids.extend([pid] * arr.shape[0])
            zs.extend(range(arr.shape[0]))
        return cls(
            data=torch.from_numpy(np.concatenate(arrays, axis=0)),
            patient_ids=pids,
            slice_indices=zs,
        )

    def __len__(self) -> int:
        return self.data.shape[0]

    def batch(self, idx: np.ndarray, scenario: Scenario) -> SliceBatch:
        sel = torch.from_numpy(idx)
        return SliceBatch(
            data=self.data[sel],
            scenario=scenario,
            patient_ids=[self.patient_ids[i] for i in idx],
            slice_indices=[self.slice_indices[i] for i in idx],
        )


def save_checkpoint(
    path: str | Path,
    state: TrainState,
    g_spec: GeneratorSpec,
    d_spec: DiscriminatorSpec,
    channel_names: tuple[str, ...],
    np_rng: np.random.Generator,
    preprocessing: dict | None = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "generator": state.generator.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "g_opt": state.g_opt.state_dict(),
        "d_opt": state.d_opt.state_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "torch_rng": torch.get_rng_state(),
        "impute_rng": state.impute_rng.get_state(),
        "np_rng": np_rng.bit_generator.state,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    meta = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "generator_spec": g_spec.to_json(),
        "discriminator_spec": d_spec.to_json(),
        "channel_names": list(channel_names),
        "epoch": state.epoch,
        "seed": state.config.seed,
        "train_config": state.config.to_json(),
        "preprocessing": preprocessing,
    }
    meta_path = path.with_suffix(".json")
    tmp = meta_path.with_name(meta_path.name + ".tmp")
    tmp.write_text(json.dumps(meta, indent=2))
    tmp.replace(meta_path)


def load_checkpoint_metadata(path: str | Path) -> dict:
    meta_path = Path(path).with_suffix(".json")
    if not meta_path.is_file():
        raise CheckpointMismatch(f"missing checkpoint metadata {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointMismatch(
            f"{meta_path}: schema version {meta.get('schema_version')} != "
            f"{CHECKPOINT_SCHEMA_VERSION}"
        )
    return meta


def load_generator(
    path: str | Path, expected_channels: tuple[str, ...] | None = None
) -> tuple[UNetGenerator, dict]:
    """Load a generator for inference; refuses incompatible metadata."""
    meta = load_checkpoint_metadata(path)
    if expected_channels is not None and tuple(meta["channel_names"]) != tuple(
        expected_channels
    ):
        raise CheckpointMismatch(
            f"checkpoint channels {meta['channel_names']} != expected "
            f"{list(expected_channels)}"
        )
    payload = torch.load(path, map_location="cpu", weights_only=True)
    g = UNetGenerator(GeneratorSpec.from_json(meta["generator_spec"]))
    g.load_state_dict(payload["generator"])
    g.eval()
    return g, meta


@dataclass
class FitResult:
    out_dir: Path
    final_checkpoint: Path
    best_checkpoint: Path | None
    log_path: Path
    records: list[LossRecord]


def fit(
    config: TrainConfig,
    g_spec: GeneratorSpec,
    d_spec: DiscriminatorSpec,
    train_patients: list[tuple[str, np.ndarray]],
    out_dir: str | Path,
    channel_names: tuple[str, ...],
    val_patients: list[tuple[str, np.ndarray]] | None = None,
    preprocessing: dict | None = None,
    resume_from: str | Path | None = None,
) -> FitResult:
    """Run the full epoch loop; writes checkpoints and a CSV loss log."""
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    c = g_spec.channels
    sampler = ScenarioSampler(
        config.schedule, c=c, mode=config.mode, miso_target=config.miso_target
    )
    pool = SlicePool.from_patients(train_patients)
    val_pool = SlicePool.from_patients(val_patients) if val_patients else None

    state = init_state(config, g_spec, d_spec)
    np_rng = np.random.default_rng(config.seed)
    start_epoch = 0
    if resume_from is not None:
        payload = torch.load(resume_from, map_location="cpu", weights_only=False)
        state.generator.load_state_dict(payload["generator"])
        state.discriminator.load_state_dict(payload["discriminator"])
        state.g_opt.load_state_dict(payload["g_opt"])
        state.d_opt.load_state_dict(payload["d_opt"])
        torch.set_rng_state(payload["torch_rng"])
        state.impute_rng.set_state(payload["impute_rng"])
        np_rng.bit_generator.state = payload["np_rng"]
        start_epoch = payload["epoch"]
        state.step = payload["step"]

    log_path = out_dir / "training_log.csv"
    log_mode = "a" if resume_from is not None and log_path.exists() else "w"
    records: list[LossRecord] = []
    best_val = float("inf")
    best_path: Path | None = None

    with open(log_path, log_mode, newline="") as log_file:
        writer = csv.writer(log_file)
        if log_mode == "w":
            writer.writerow(LOG_COLUMNS)
        for epoch in range(start_epoch, config.epochs):
            state.epoch = epoch
            perm = np_rng.permutation(len(pool))
            n_batches = max(len(pool) // config.batch_size, 1)
            for b in range(n_batches):
                idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
                if len(idx) == 0:
                    break
                scenario = sampler.sample(epoch, np_rng)
                rec = train_step(state, pool.batch(idx, scenario))
                records.append(rec)
                writer.writerow(rec.row())
            log_file.flush()

            state.epoch = epoch + 1
            if (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(
                    ckpt_dir / f"epoch_{epoch + 1:04d}.pt",
                    state, g_spec, d_spec, channel_names, np_rng, preprocessing,
                )
            if val_pool is not None:
                score = _validation_l1(state, val_pool, sampler)
                if score < best_val:
                    best_val = score
                    best_path = ckpt_dir / "best.pt"
                    save_checkpoint(
                        best_path, state, g_spec, d_spec, channel_names, np_rng,
                        preprocessing,
                    )

        final_path = ckpt_dir / "final.pt"
        save_checkpoint(
            final_path, state, g_spec, d_spec, channel_names, np_rng, preprocessing
        )
    return FitResult(
        out_dir=out_dir,
        final_checkpoint=final_path,
        best_checkpoint=best_path,
        log_path=log_path,
        records=records,
    )


def _validation_l1(state: TrainState, val_pool: SlicePool, sampler: ScenarioSampler) -> float:
    """Mean selective L1 over the validation pool, scenarios round-robin."""
    cfg = state.config
    g = state.generator
    g.eval()
    scenarios = sampler.all_scenarios
    totals = []
    with torch.no_grad():
        n = len(val_pool)
        for start in range(0, n - n % cfg.batch_size or n, cfg.batch_size):
            idx = np.arange(start, min(start + cfg.batch_size, n))
            scenario = scenarios[(start // cfg.batch_size) % len(scenarios)]
            batch = val_pool.batch(idx, scenario)
            x_z = impute(batch.data, scenario, cfg.imputation, state.impute_rng)
            g_out = g(x_z)
            totals.append(float(selective_l1(g_out, batch.data, scenario.missing)))
    g.train()
    return float(np.mean(totals)) if totals else float("inf")
