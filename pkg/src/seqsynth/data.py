"""Volume ingestion, preprocessing, and the slice cache.

Pipeline per patient: load C co-registered NIfTI volumes, divide each sequence
by its whole-volume mean, crop to the dataset-wide foreground bounding box,
and bilinearly resize every axial slice to the network size. Preprocessed
slices are cached as one float32 .npy per patient plus a JSON sidecar with the
parameters and a checksum.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    BoxOutOfBounds,
    CorruptCache,
    DegenerateVolume,
    EmptyForeground,
    ShapeMismatch,
    VolumeIOError,
)
from .nifti import read_nifti
from .scenario import DEFAULT_CHANNEL_NAMES, Scenario

CACHE_SCHEMA_VERSION = 1

MEAN_EPS = 1e-8


@dataclass
class VolumeSet:
    """One patient's co-registered multi-sequence volumes plus metadata."""

    patient_id: str
    sequences: list[np.ndarray]  # C arrays, each [D, H, W] float32
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    per_sequence_mean: list[float] | None = None
    source_paths: list[str] | None = None

    @property
    def n_channels(self) -> int:
        return len(self.sequences)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.sequences[0].shape


@dataclass(frozen=True)
class BoundingBox3D:
    """Inclusive voxel index bounds per axis, (z, y, x) order."""

    mins: tuple[int, int, int]
    maxs: tuple[int, int, int]

    def __post_init__(self):
        if any(lo > hi for lo, hi in zip(self.mins, self.maxs)):
            raise ValueError(f"degenerate box {self.mins}..{self.maxs}")

    @property
    def size(self) -> tuple[int, int, int]:
        return tuple(hi - lo + 1 for lo, hi in zip(self.mins, self.maxs))

    def union(self, other: "BoundingBox3D") -> "BoundingBox3D":
        return BoundingBox3D(
            tuple(min(a, b) for a, b in zip(self.mins, other.mins)),
            tuple(max(a, b) for a, b in zip(self.maxs, other.maxs)),
        )


@dataclass
class SliceBatch:
    """A batch of C-channel slices sharing one scenario."""

    data: torch.Tensor  # [B, C, H, W] float32
    scenario: Scenario
    patient_ids: list[str]
    slice_indices: list[int]

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeMismatch(f"batch data must be [B,C,H,W], got {tuple(self.data.shape)}")
        if self.data.shape[1] != self.scenario.n_channels:
            raise ShapeMismatch(
                f"batch has {self.data.shape[1]} channels, scenario expects "
                f"{self.scenario.n_channels}"
            )


def load_volume_set(
    paths: list[str | Path],
    patient_id: str | None = None,
    channel_names: tuple[str, ...] = DEFAULT_CHANNEL_NAMES,
) -> VolumeSet:
    """Load one patient's C sequence files; raw intensities, no normalization."""
    if len(paths) != len(channel_names):
        raise VolumeIOError(
            f"expected {len(channel_names)} paths ({channel_names}), got {len(paths)}"
        )
    missing = [str(p) for p in paths if not Path(p).is_file()]
    if missing:
        raise VolumeIOError(f"missing sequence file(s): {', '.join(missing)}")

    sequences, spacings = [], []
    for p in paths:
        vol, spacing = read_nifti(p)
        sequences.append(vol)
        spacings.append(spacing)
    ref_shape = sequences[0].shape
    for name, seq in zip(channel_names, sequences):
        if seq.shape != ref_shape:
            raise ShapeMismatch(
                f"sequence {name} has shape {seq.shape}, expected {ref_shape}"
            )
    if patient_id is None:
        patient_id = Path(paths[0]).parent.name or Path(paths[0]).stem
    return VolumeSet(
        patient_id=patient_id,
        sequences=sequences,
        spacing=spacings[0],
        source_paths=[str(p) for p in paths],
    )


def mean_normalize(v: VolumeSet) -> VolumeSet:
    """Divide each sequence by its own whole-volume mean (background included)."""
    normalized, divisors = [], []
    for k, seq in enumerate(v.sequences):
        mean = float(seq.mean())
        if abs(mean) <= MEAN_EPS:
            raise DegenerateVolume(
                f"patient {v.patient_id} sequence {k}: |mean|={abs(mean):.3g} <= {MEAN_EPS}"
            )
        normalized.append((seq / np.float32(mean)).astype(np.float32))
        divisors.append(mean)
    return replace(v, sequences=normalized, per_sequence_mean=divisors)


def _volume_bbox(v: VolumeSet, threshold: float) -> BoundingBox3D | None:
    fg = np.zeros(v.shape, dtype=bool)
    for seq in v.sequences:
        fg |= seq > threshold
    if not fg.any():
        return None
    mins, maxs = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hit = np.where(fg.any(axis=other))[0]
        mins.append(int(hit[0]))
        maxs.append(int(hit[-1]))
    return BoundingBox3D(tuple(mins), tuple(maxs))


def compute_dataset_bbox(volumes: list[VolumeSet], threshold: float = 0.0) -> BoundingBox3D:
    """Union of per-patient foreground boxes; foreground = any sequence > threshold."""
    if not volumes:
        raise ValueError("empty volume list")
    box = None
    for v in volumes:
        b = _volume_bbox(v, threshold)
        if b is None:
            continue
        box = b if box is None else box.union(b)
    if box is None:
        raise EmptyForeground(f"no voxel above threshold {threshold} in any volume")
    return box


def resize_bilinear(slices: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of [..., H, W] slices using half-pixel-centered sampling."""
    arr = np.asarray(slices, dtype=np.float32)
    lead = arr.shape[:-2]
    t = torch.from_numpy(arr.reshape(-1, 1, *arr.shape[-2:]))
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return out.numpy().reshape(*lead, *size)


def crop_and_resize(
    v: VolumeSet, box: BoundingBox3D, size: tuple[int, int] = (256, 256)
) -> np.ndarray:
    """Crop to the box, then resize each axial slice; returns [D, C, H, W]."""
    if size[0] <= 0 or size[1] <= 0:
        raise ValueError(f"size must be positive, got {size}")
    shape = v.shape
    if any(m < 0 for m in box.mins) or any(hi >= s for hi, s in zip(box.maxs, shape)):
        raise BoxOutOfBounds(f"box {box.mins}..{box.maxs} exceeds volume shape {shape}")
    (z0, y0, x0), (z1, y1, x1) = box.mins, box.maxs
    cropped = np.stack(
        [seq[z0 : z1 + 1, y0 : y1 + 1, x0 : x1 + 1] for seq in v.sequences], axis=1
    )  # [D, C, h, w]
    return resize_bilinear(cropped, size).astype(np.float32)


@dataclass(frozen=True)
class PreprocessParams:
    """Everything needed to reproduce (or invert the crop of) preprocessing."""

    bbox: BoundingBox3D
    size: tuple[int, int]
    threshold: float
    channel_names: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "bbox_min": list(self.bbox.mins),
            "bbox_max": list(self.bbox.maxs),
            "size": list(self.size),
            "threshold": self.threshold,
            "channel_names": list(self.channel_names),
        }

    @classmethod
    def from_json(cls, d: dict) -> "PreprocessParams":
        return cls(
            bbox=BoundingBox3D(tuple(d["bbox_min"]), tuple(d["bbox_max"])),
            size=tuple(d["size"]),
            threshold=float(d["threshold"]),
            channel_names=tuple(d["channel_names"]),
        )


def preprocess_dataset(
    volumes: list[VolumeSet],
    size: tuple[int, int] = (256, 256),
    threshold: float = 0.0,
    channel_names: tuple[str, ...] = DEFAULT_CHANNEL_NAMES,
    workers: int = 1,
) -> tuple[list[tuple[VolumeSet, np.ndarray]], PreprocessParams]:
    """Normalize, crop, and resize every patient; patients are independent."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            normalized = list(pool.map(mean_normalize, volumes))
    else:
        normalized = [mean_normalize(v) for v in volumes]
    box = compute_dataset_bbox(normalized, threshold)
    params = PreprocessParams(
        bbox=box, size=size, threshold=threshold, channel_names=channel_names
    )

    def one(v: VolumeSet) -> tuple[VolumeSet, np.ndarray]:
        return v, crop_and_resize(v, box, size)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(one, normalized))
    else:
        out = [one(v) for v in normalized]
    return out, params


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_cache(
    cache_dir: str | Path,
    patient: VolumeSet,
    slices: np.ndarray,
    params: PreprocessParams,
) -> Path:
    """Write one patient's [D, C, H, W] slices + sidecar atomically."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(slices, dtype=np.float32)

    npy_path = cache_dir / f"{patient.patient_id}.npy"
    tmp = npy_path.with_name(npy_path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.save(fh, arr)
    tmp.replace(npy_path)

    sidecar = {
        "schema_version": CACHE_SCHEMA_VERSION,
        "patient_id": patient.patient_id,
        "shape": list(arr.shape),
        "spacing": list(patient.spacing),
        "per_sequence_mean": patient.per_sequence_mean,
        "source_paths": patient.source_paths,
        "preprocessing": params.to_json(),
        "sha256": _sha256(npy_path),
    }
    json_path = cache_dir / f"{patient.patient_id}.json"
    tmp = json_path.with_name(json_path.name + ".tmp")
    tmp.write_text(json.dumps(sidecar, indent=2))
    tmp.replace(json_path)
    return npy_path


def read_cache(
    cache_dir: str | Path,
    patient_id: str,
    channel_names: tuple[str, ...] | None = None,
) -> tuple[np.ndarray, dict]:
    """Read one patient's cached slices, validating sidecar and checksum."""
    cache_dir = Path(cache_dir)
    npy_path = cache_dir / f"{patient_id}.npy"
    json_path = cache_dir / f"{patient_id}.json"
    if not npy_path.is_file() or not json_path.is_file():
        raise CorruptCache(f"cache entry {patient_id} incomplete in {cache_dir}")
    try:
        sidecar = json.loads(json_path.read_text())
    except json.JSONDecodeError as e:
        raise CorruptCache(f"{json_path}: invalid JSON: {e}") from e

    if sidecar.get("schema_version") != CACHE_SCHEMA_VERSION:
        raise CorruptCache(
            f"{json_path}: schema version {sidecar.get('schema_version')} != "
            f"{CACHE_SCHEMA_VERSION}"
        )
    if _sha256(npy_path) != sidecar.get("sha256"):
        raise CorruptCache(f"{npy_path}: checksum mismatch")
    cached_names = tuple(sidecar.get("preprocessing", {}).get("channel_names", ()))
    if channel_names is not None and cached_names != tuple(channel_names):
        raise CorruptCache(
            f"{json_path}: cached channel order {cached_names} != runtime "
            f"{tuple(channel_names)}"
        )
    try:
        arr = np.load(npy_path)
    except (ValueError, OSError) as e:
        raise CorruptCache(f"{npy_path}: cannot load array: {e}") from e
    if list(arr.shape) != sidecar["shape"]:
        raise CorruptCache(f"{npy_path}: shape {arr.shape} != sidecar {sidecar['shape']}")
    return arr, sidecar


def list_cached_patients(cache_dir: str | Path) -> list[str]:
    cache_dir = Path(cache_dir)
    return sorted(
        p.stem for p in cache_dir.glob("*.json") if (cache_dir / f"{p.stem}.npy").is_file()
    )
