"""Generator/discriminator contracts: shapes, activations, init, and the
discriminator's receptive field checked against an interval-arithmetic oracle.
"""

import numpy as np
import pytest
import torch

from seqsynth.errors import ShapeError
from seqsynth.networks import (
    PHANTOM_WIDTHS,
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    init_weights,
)

SMALL_G = GeneratorSpec(depth=5, widths=(8, 16, 32, 32, 32))
SMALL_D = DiscriminatorSpec(n_blocks=3, base_width=8)


def test_full_generator_shape_contract():
    g = build_generator(GeneratorSpec())
    x = torch.zeros(1, 4, 256, 256)
    with torch.no_grad():
        y = g(x)
    assert y.shape == (1, 4, 256, 256)


def test_full_discriminator_shape_contract():
    d = build_discriminator(DiscriminatorSpec())
    a = torch.zeros(1, 4, 256, 256)
    with torch.no_grad():
        s = d(a, a)
    assert s.shape == (1, 4, 16, 16)
    assert d.patch_grid((256, 256)) == (16, 16)


def test_phantom_generator_shape():
    g = build_generator(GeneratorSpec(depth=6, widths=PHANTOM_WIDTHS))
    with torch.no_grad():
        y = g(torch.zeros(2, 4, 64, 64))
    assert y.shape == (2, 4, 64, 64)


def test_mid_resolution_generator_shape():
    # depth 7 pairs with 128 px input; the bottleneck still reaches 1x1
    g = build_generator(GeneratorSpec(depth=7, widths=(8, 16, 32, 32, 32, 32, 32)))
    with torch.no_grad():
        y = g(torch.zeros(1, 4, 128, 128))
    assert y.shape == (1, 4, 128, 128)


def test_small_discriminator_grid():
    d = build_discriminator(DiscriminatorSpec(n_blocks=2, base_width=16))
    with torch.no_grad():
        s = d(torch.zeros(2, 4, 64, 64), torch.zeros(2, 4, 64, 64))
    assert s.shape == (2, 4, 16, 16)


def test_generator_rejects_wrong_size():
    g = build_generator(SMALL_G)
    with pytest.raises(ShapeError):
        g(torch.zeros(1, 4, 16, 16))
    with pytest.raises(ShapeError):
        g(torch.zeros(1, 3, 32, 32))
    with pytest.raises(ShapeError):
        g(torch.zeros(4, 32, 32))


def test_discriminator_rejects_mismatched_pair():
    d = build_discriminator(SMALL_D)
    with pytest.raises(ShapeError):
        d(torch.zeros(1, 4, 32, 32), torch.zeros(1, 4, 16, 16))
    with pytest.raises(ShapeError):
        d(torch.zeros(1, 3, 32, 32), torch.zeros(1, 3, 32, 32))


def test_spec_validation():
    with pytest.raises(ValueError):
        GeneratorSpec(depth=5, widths=(8, 16))  # widths/depth mismatch
    with pytest.raises(ValueError):
        GeneratorSpec(final_activation="tanh")
    with pytest.raises(ValueError):
        DiscriminatorSpec(input_noise_sigma=-1.0)


def test_spec_json_round_trip():
    g = GeneratorSpec(depth=6, widths=PHANTOM_WIDTHS, final_activation="linear")
    assert GeneratorSpec.from_json(g.to_json()) == g
    d = DiscriminatorSpec(n_blocks=2, input_noise_sigma=0.05)
    assert DiscriminatorSpec.from_json(d.to_json()) == d


def test_relu_head_clamps_negative():
    g = init_weights(build_generator(SMALL_G), rng=torch.Generator().manual_seed(0))
    g.eval()
    with torch.no_grad():
        y = g(torch.randn(2, 4, 32, 32, generator=torch.Generator().manual_seed(1)))
    assert float(y.min()) >= 0.0


def test_linear_head_can_go_negative():
    spec = GeneratorSpec(depth=5, widths=SMALL_G.widths, final_activation="linear")
    g = init_weights(build_generator(spec), rng=torch.Generator().manual_seed(0))
    g.eval()
    with torch.no_grad():
        y = g(torch.randn(8, 4, 32, 32, generator=torch.Generator().manual_seed(1)))
    assert float(y.min()) < 0.0


def test_dropout_active_in_train_only():
    spec = GeneratorSpec(depth=5, widths=SMALL_G.widths, dropout_p=0.5)
    g = init_weights(build_generator(spec), rng=torch.Generator().manual_seed(0))
    x = torch.randn(2, 4, 32, 32, generator=torch.Generator().manual_seed(2))
    g.train()
    torch.manual_seed(0)
    a = g(x)
    b = g(x)
    assert not torch.equal(a, b), "train-mode forwards should differ under dropout"
    g.eval()
    with torch.no_grad():
        c = g(x)
        d = g(x)
    torch.testing.assert_close(c, d)


def test_discriminator_input_noise_train_only():
    spec = DiscriminatorSpec(n_blocks=2, base_width=8, input_noise_sigma=0.1)
    d = init_weights(build_discriminator(spec), rng=torch.Generator().manual_seed(0))
    x = torch.randn(1, 4, 32, 32, generator=torch.Generator().manual_seed(3))
    d.train()
    torch.manual_seed(1)
    a = d(x, x)
    b = d(x, x)
    assert not torch.equal(a, b)
    d.eval()
    with torch.no_grad():
        c = d(x, x)
        e = d(x, x)
    torch.testing.assert_close(c, e)


def test_init_weights_statistics():
    g = build_generator(GeneratorSpec(depth=6, widths=PHANTOM_WIDTHS))
    init_weights(g, rng=torch.Generator().manual_seed(7))
    conv_w, bn_w = [], []
    for m in g.modules():
        if isinstance(m, (torch.nn.Conv2d, torch.nn.ConvTranspose2d)):
            conv_w.append(m.weight.detach().reshape(-1))
            if m.bias is not None:
                assert torch.all(m.bias == 0)
        elif isinstance(m, torch.nn.BatchNorm2d):
            bn_w.append(m.weight.detach().reshape(-1))
            assert torch.all(m.bias == 0)
    conv = torch.cat(conv_w)
    bn = torch.cat(bn_w)
    assert abs(float(conv.mean())) < 2e-3
    assert abs(float(conv.std()) - 0.02) < 2e-3
    assert abs(float(bn.mean()) - 1.0) < 5e-3


def test_init_weights_deterministic():
    def build():
        g = build_generator(SMALL_G)
        return init_weights(g, rng=torch.Generator().manual_seed(11))

    a, b = build(), build()
    for pa, pb in zip(a.parameters(), b.parameters()):
        torch.testing.assert_close(pa, pb, rtol=0, atol=0)


def test_parameter_counts():
    assert build_generator(GeneratorSpec()).n_parameters > 10_000_000
    small = build_generator(SMALL_G).n_parameters
    assert 0 < small < 2_000_000
    d_full = build_discriminator(DiscriminatorSpec()).n_parameters
    d_small = build_discriminator(DiscriminatorSpec(n_blocks=2)).n_parameters
    assert d_small < d_full


# ----------------------------------------------------- receptive field oracle

def conv_interval(a, b, kernel, stride, pad):
    """Input index interval feeding output indices [a, b] of a conv layer."""
    return a * stride - pad, b * stride - pad + kernel - 1


def discriminator_rf_interval(spec, out_idx, input_size):
    """Interval-composition oracle for one output pixel along one axis."""
    a = b = out_idx
    # final conv: kernel 4, stride 1, pad 1
    a, b = conv_interval(a, b, 4, 1, 1)
    # asymmetric zero pad adds 1 on the leading side
    a, b = a - 1, b - 1
    for _ in range(spec.n_blocks):
        a, b = conv_interval(a, b, 4, 2, 1)
    return max(a, 0), min(b, input_size - 1)


@pytest.mark.parametrize("out_idx", [0, 3, 7])
def test_receptive_field_matches_oracle(out_idx):
    spec = DiscriminatorSpec(n_blocks=2, base_width=8)
    d = init_weights(build_discriminator(spec), rng=torch.Generator().manual_seed(5))
    d.eval()
    size = 32
    x = torch.randn(1, 4, size, size, generator=torch.Generator().manual_seed(6))
    x.requires_grad_(True)
    y = d(x, torch.zeros_like(x))
    grid = y.shape[-1]
    assert out_idx < grid
    y[0, 0, out_idx, out_idx].backward()
    g = x.grad[0].abs().sum(dim=0)
    rows = torch.nonzero(g.sum(dim=1)).reshape(-1)
    cols = torch.nonzero(g.sum(dim=0)).reshape(-1)
    lo, hi = discriminator_rf_interval(spec, out_idx, size)
    assert int(rows.min()) >= lo and int(rows.max()) <= hi
    assert int(cols.min()) >= lo and int(cols.max()) <= hi
    # support should cover most of the predicted interval, not a sliver
    assert int(rows.max()) - int(rows.min()) + 1 >= (hi - lo + 1) // 2


def test_generator_output_depends_on_every_input_channel():
    g = init_weights(build_generator(SMALL_G), rng=torch.Generator().manual_seed(8))
    g.eval()
    x = torch.randn(1, 4, 32, 32, generator=torch.Generator().manual_seed(9))
    with torch.no_grad():
        base = g(x)
        for ch in range(4):
            bumped = x.clone()
            bumped[0, ch] += 0.5
            assert not torch.equal(g(bumped), base)


def test_single_target_discriminator_variant():
    from seqsynth.networks import MISO_INPUT_NOISE_SIGMA, miso_discriminator_spec

    small = miso_discriminator_spec()
    assert small.n_blocks == 2
    assert small.input_noise_sigma == MISO_INPUT_NOISE_SIGMA == 0.05
    n_small = sum(p.numel() for p in build_discriminator(small).parameters())
    n_full = sum(p.numel() for p in build_discriminator(DiscriminatorSpec()).parameters())
    assert n_small < n_full
