"""UNet generator and patch-grid discriminator.

The generator halves the spatial size at every encoder level down to a 1x1
bottleneck, then mirrors back up with skip connections; all kernels are 4x4
stride 2. The discriminator scores each input patch per sequence: a stack of
stride-2 blocks followed by a zero pad and a final stride-1 convolution, so a
256x256 pair maps to a [C, 16, 16] score grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ShapeError

FULL_WIDTHS = (64, 128, 256, 512, 512, 512, 512, 512)
PHANTOM_WIDTHS = (32, 64, 128, 256, 256, 256)


@dataclass(frozen=True)
class GeneratorSpec:
    channels: int = 4
    depth: int = 8
    widths: tuple[int, ...] = FULL_WIDTHS
    final_activation: str = "relu"  # "relu" for MIMO, "linear" for MISO
    dropout_p: float = 0.5

    def __post_init__(self):
        if len(self.widths) != self.depth:
            raise ValueError(f"need {self.depth} widths, got {len(self.widths)}")
        if self.final_activation not in ("relu", "linear"):
            raise ValueError(f"final_activation must be relu|linear, got {self.final_activation!r}")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")

    @property
    def input_size(self) -> int:
        return 2**self.depth

    def to_json(self) -> dict:
        return {
            "channels": self.channels,
            "depth": self.depth,
            "widths": list(self.widths),
            "final_activation": self.final_activation,
            "dropout_p": self.dropout_p,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GeneratorSpec":
        return cls(
            channels=d["channels"],
            depth=d["depth"],
            widths=tuple(d["widths"]),
            final_activation=d["final_activation"],
            dropout_p=d["dropout_p"],
        )


@dataclass(frozen=True)
class DiscriminatorSpec:
    channels: int = 4
    n_blocks: int = 4  # 4 = full, 2 = small MISO variant
    base_width: int = 64
    input_noise_sigma: float = 0.0

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.input_noise_sigma < 0:
            raise ValueError("input_noise_sigma must be >= 0")

    @property
    def block_widths(self) -> tuple[int, ...]:
        return tuple(min(self.base_width * 2**i, 512) for i in range(self.n_blocks))

    def to_json(self) -> dict:
        return {
            "channels": self.channels,
            "n_blocks": self.n_blocks,
            "base_width": self.base_width,
            "input_noise_sigma": self.input_noise_sigma,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DiscriminatorSpec":
        return cls(
            channels=d["channels"],
            n_blocks=d["n_blocks"],
            base_width=d["base_width"],
            input_noise_sigma=d["input_noise_sigma"],
        )


MISO_INPUT_NOISE_SIGMA = 0.05


def miso_discriminator_spec(channels: int = 4) -> DiscriminatorSpec:
    """The small single-target discriminator: fewer blocks, noisy inputs."""
    return DiscriminatorSpec(
        channels=channels,
        n_blocks=2,
        base_width=64,
        input_noise_sigma=MISO_INPUT_NOISE_SIGMA,
    )


def _batch_norm(width: int) -> nn.BatchNorm2d:
    # Generator norm layers use the statistics of the batch at hand, during
    # training and at inference alike. Zero-imputed channels shift feature
    # statistics per scenario, so aggregated running estimates fit none of
    # the scenarios. The discriminator keeps tracked running statistics; its
    # eval-mode output must stay local to each patch's receptive field.
    return nn.BatchNorm2d(width, track_running_stats=False)


class UNetDown(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, normalize: bool = True):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(in_ch, out_ch, 4, 2, 1, bias=not normalize)]
        if normalize:
            layers.append(_batch_norm(out_ch))
        layers.append(nn.LeakyReLU(0.2))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class UNetUp(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, dropout: float = 0.0):
        super().__init__()
        layers: list[nn.Module] = [
            nn.ConvTranspose2d(in_ch, out_ch, 4, 2, 1, bias=False),
            _batch_norm(out_ch),
            nn.ReLU(),
        ]
        if dropout > 0:
            layers.append(nn.Dropout(dropout))
        self.model = nn.Sequential(*layers)

    def forward(self, x, skip):
        return torch.cat((self.model(x), skip), dim=1)


class UNetGenerator(nn.Module):
    """Shape-preserving generator: [B, C, 2^depth, 2^depth] in and out."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.widths
        downs = [UNetDown(spec.channels, w[0], normalize=False)]
        for i in range(1, spec.depth):
            # innermost block sits at 1x1 where norm statistics are degenerate
            downs.append(UNetDown(w[i - 1], w[i], normalize=i < spec.depth - 1))
        self.downs = nn.ModuleList(downs)

        ups = [UNetUp(w[-1], w[-2], dropout=spec.dropout_p)]
        for i in range(spec.depth - 3, -1, -1):
            dropout = spec.dropout_p if len(ups) < 3 else 0.0
            ups.append(UNetUp(2 * w[i + 1], w[i], dropout=dropout))
        self.ups = nn.ModuleList(ups)

        head: list[nn.Module] = [
            nn.Upsample(scale_factor=2),
            nn.ZeroPad2d((1, 0, 1, 0)),
            nn.Conv2d(2 * w[0], spec.channels, 4, padding=1),
        ]
        if spec.final_activation == "relu":
            head.append(nn.ReLU())
        self.head = nn.Sequential(*head)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.channels:
            raise ShapeError(
                f"expected [B, {self.spec.channels}, H, W], got {tuple(x.shape)}"
            )
        size = self.spec.input_size
        if x.shape[2] != size or x.shape[3] != size:
            raise ShapeError(
                f"expected {size}x{size} input for depth {self.spec.depth}, "
                f"got {x.shape[2]}x{x.shape[3]}"
            )
        skips = []
        h = x
        for down in self.downs:
            h = down(h)
            skips.append(h)
        h = skips[-1]
        for i, up in enumerate(self.ups):
            h = up(h, skips[-2 - i])
        return self.head(h)

    @property
    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


class PatchDiscriminator(nn.Module):
    """Per-sequence patch scores for a concatenated (a, b) image pair.

    Emits raw scores (no sigmoid); both losses are least-squares. When
    input_noise_sigma > 0 and the module is in training mode, fresh Gaussian
    noise is added to both inputs before concatenation.
    """

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        widths = spec.block_widths
        layers: list[nn.Module] = []
        in_ch = 2 * spec.channels
        for i, width in enumerate(widths):
            layers.append(nn.Conv2d(in_ch, width, 4, 2, 1, bias=i == 0))
            if i > 0:
                layers.append(nn.BatchNorm2d(width))
            layers.append(nn.LeakyReLU(0.2))
            in_ch = width
        layers.append(nn.ZeroPad2d((1, 0, 1, 0)))
        layers.append(nn.Conv2d(in_ch, spec.channels, 4, padding=1, bias=False))
        self.model = nn.Sequential(*layers)

    def patch_grid(self, input_hw: tuple[int, int]) -> tuple[int, int]:
        down = 2**self.spec.n_blocks
        return (input_hw[0] // down, input_hw[1] // down)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"pair shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        if a.ndim != 4 or a.shape[1] != self.spec.channels:
            raise ShapeError(
                f"expected [B, {self.spec.channels}, H, W] inputs, got {tuple(a.shape)}"
            )
        if a.shape[2] % 2**self.spec.n_blocks or a.shape[3] % 2**self.spec.n_blocks:
            raise ShapeError(
                f"input {a.shape[2]}x{a.shape[3]} not divisible by "
                f"2^{self.spec.n_blocks}"
            )
        if self.training and self.spec.input_noise_sigma > 0:
            sigma = self.spec.input_noise_sigma
            a = a + sigma * torch.randn_like(a)
            b = b + sigma * torch.randn_like(b)
        return self.model(torch.cat((a, b), dim=1))

    @property
    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_generator(spec: GeneratorSpec) -> UNetGenerator:
    return UNetGenerator(spec)


def build_discriminator(spec: DiscriminatorSpec) -> PatchDiscriminator:
    return PatchDiscriminator(spec)


def init_weights(
    net: nn.Module, std: float = 0.02, rng: torch.Generator | None = None
) -> nn.Module:
    """Gaussian(0, std) conv weights, zero biases, Gaussian(1, std) norm scale."""
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.normal_(0.0, std, generator=rng)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.normal_(1.0, std, generator=rng)
                m.bias.zero_()
    return net
