"""Exception hierarchy shared across the package."""


class SeqSynthError(Exception):
    """Base class for all package-specific errors."""


class InvalidScenario(SeqSynthError):
    """Scenario string is malformed or degenerate (all present / all missing)."""


class VolumeIOError(SeqSynthError):
    """A volume file is missing or unreadable."""


class ShapeMismatch(SeqSynthError):
    """Arrays that must share a shape do not."""


class DegenerateVolume(SeqSynthError):
    """Volume mean too close to zero for mean normalization."""


class EmptyForeground(SeqSynthError):
    """No voxel above the foreground threshold in the whole dataset."""


class BoxOutOfBounds(SeqSynthError):
    """Bounding box exceeds the volume extents."""


class CorruptCache(SeqSynthError):
    """Slice cache failed checksum, schema, or config validation."""


class ShapeError(SeqSynthError):
    """Network input violates a shape contract."""


class EmptyMissingSet(SeqSynthError):
    """Selective loss requested with no missing sequences."""


class NonFiniteLoss(SeqSynthError):
    """Training produced a NaN/Inf loss; carries diagnostic context."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConstantImage(SeqSynthError):
    """[0,1] re-normalization is undefined for a constant image."""


class DegenerateSample(SeqSynthError):
    """Statistical test input carries no usable signal (e.g. all-zero diffs)."""


class CheckpointMismatch(SeqSynthError):
    """Checkpoint metadata is incompatible with the requested configuration."""
