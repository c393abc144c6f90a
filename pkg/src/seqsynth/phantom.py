"""Deterministic synthetic multi-contrast dataset for desk-scale runs.

Each patient is a shared 3D tissue-label map (nested ellipses plus 0-2 lesion
blobs) rendered into C contrasts through a per-class intensity table, with
i.i.d. Gaussian noise inside the head and an exactly-zero background, like
brain-extracted scans. With zero noise every contrast is an exact lookup of
the tissue map, so the true cross-contrast mapping is known and synthesis
quality has a checkable upper bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import VolumeSet

# Rows: background, white-matter-like, grey-matter-like, lesion.
# Columns 0 and 2 are near-redundant contrasts; the lesion matches the
# white-matter intensity in those two columns, so it is visible only in
# contrasts 1 and 3.
DEFAULT_CONTRAST_TABLE = (
    (0.0, 0.0, 0.0, 0.0),
    (1.0, 0.45, 0.95, 0.55),
    (0.62, 0.85, 0.60, 0.80),
    (1.0, 1.35, 0.95, 1.50),
)


@dataclass(frozen=True)
class PhantomSpec:
    n_patients: int = 10
    image_size: int = 64
    depth: int = 10
    n_tissue_classes: int = 4
    contrast_table: tuple[tuple[float, ...], ...] = DEFAULT_CONTRAST_TABLE
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        table = np.asarray(self.contrast_table, dtype=np.float64)
        if table.shape[0] != self.n_tissue_classes:
            raise ValueError(
                f"contrast_table has {table.shape[0]} rows, expected "
                f"{self.n_tissue_classes}"
            )
        if len({tuple(row) for row in table.tolist()}) != table.shape[0]:
            raise ValueError("contrast_table rows must be pairwise distinct")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.depth < 8:
            raise ValueError("phantom volumes need depth >= 8 slices")

    @property
    def n_channels(self) -> int:
        return len(self.contrast_table[0])


def _ellipse_mask(size: int, cy: float, cx: float, ay: float, ax: float) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size]
    return ((y - cy) / ay) ** 2 + ((x - cx) / ax) ** 2 <= 1.0


def _tissue_map(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    size, depth = spec.image_size, spec.depth
    labels = np.zeros((depth, size, size), dtype=np.uint8)

    cy = size / 2 + rng.uniform(-0.02, 0.02) * size
    cx = size / 2 + rng.uniform(-0.02, 0.02) * size
    head_ay = rng.uniform(0.30, 0.38) * size
    head_ax = rng.uniform(0.34, 0.42) * size
    inner_scale = rng.uniform(0.52, 0.60)
    inner_dy = rng.uniform(-0.03, 0.03) * size
    inner_dx = rng.uniform(-0.03, 0.03) * size

    zc = (depth - 1) / 2
    half = depth / 1.8
    for z in range(depth):
        profile = np.sqrt(max(1.0 - ((z - zc) / half) ** 2, 0.0))
        scale = max(profile, 0.55)
        sl = labels[z]
        sl[_ellipse_mask(size, cy, cx, head_ay * scale, head_ax * scale)] = 1
        sl[
            _ellipse_mask(
                size,
                cy + inner_dy,
                cx + inner_dx,
                head_ay * scale * inner_scale,
                head_ax * scale * inner_scale,
            )
        ] = 2

    for _ in range(int(rng.integers(0, 3))):
        lz0 = int(rng.integers(0, depth - 2))
        lz1 = int(rng.integers(lz0 + 1, min(lz0 + depth // 2, depth)))
        lcy = cy + rng.uniform(-0.12, 0.12) * size
        lcx = cx + rng.uniform(-0.12, 0.12) * size
        lay = rng.uniform(0.04, 0.10) * size
        lax = rng.uniform(0.04, 0.10) * size
        blob = _ellipse_mask(size, lcy, lcx, lay, lax)
        for z in range(lz0, lz1 + 1):
            # lesions only replace brain tissue, never background
            labels[z][blob & (labels[z] > 0)] = 3
    return labels


def _render(
    labels: np.ndarray, spec: PhantomSpec, rng: np.random.Generator
) -> list[np.ndarray]:
    table = np.asarray(spec.contrast_table, dtype=np.float32)
    tissue = labels > 0
    out = []
    for ch in range(spec.n_channels):
        vol = table[labels, ch]
        if spec.noise_sigma > 0:
            # noise only inside the head: the volumes mimic brain-extracted
            # data whose background is exactly zero
            vol = vol + rng.normal(0.0, spec.noise_sigma, size=vol.shape) * tissue
        out.append(vol.astype(np.float32))
    return out


def generate_phantom_patient(
    spec: PhantomSpec, index: int
) -> tuple[VolumeSet, np.ndarray]:
    """One patient plus its tissue-label map, reproducible from (seed, index)."""
    child = np.random.SeedSequence(spec.seed).spawn(spec.n_patients)[index]
    rng = np.random.default_rng(child)
    labels = _tissue_map(spec, rng)
    volumes = _render(labels, spec, rng)
    vs = VolumeSet(
        patient_id=f"phantom_{index:03d}",
        sequences=volumes,
        spacing=(1.0, 1.0, 1.0),
    )
    return vs, labels


def generate_phantom_dataset(spec: PhantomSpec) -> list[VolumeSet]:
    """All patients; per-patient sub-seeds make parallel and serial agree."""
    return [generate_phantom_patient(spec, i)[0] for i in range(spec.n_patients)]


def generate_phantom_dataset_with_maps(
    spec: PhantomSpec,
) -> list[tuple[VolumeSet, np.ndarray]]:
    return [generate_phantom_patient(spec, i) for i in range(spec.n_patients)]
