import numpy as np
import pytest
import torch
import torch.nn.functional as F

from gradcheck_util import RTOL, fd_check
from phytrack.tfe import (
    SIEBlock,
    SRMLayer,
    TextureFeatureExtractor,
    extract_features,
    srm_filter,
    srm_kernels,
)

# the three published 5x5 kernels, typed in independently of the package
PUBLISHED = np.array(
    [
        [[0, 0, 0, 0, 0], [0, -1, 2, -1, 0], [0, 2, -4, 2, 0], [0, -1, 2, -1, 0], [0, 0, 0, 0, 0]],
        [[-1, 2, -2, 2, -1], [2, -6, 8, -6, 2], [-2, 8, -12, 8, -2], [2, -6, 8, -6, 2], [-1, 2, -2, 2, -1]],
        [[-1, -1, -1, -1, -1], [-1, 0, 0, 0, -1], [-1, 0, 8, 0, -1], [-1, 0, 0, 0, -1], [-1, -1, -1, -1, -1]],
    ],
    dtype=np.float64,
)


def correlate_reference(img, kernel):
    """Explicit-loop same-size cross-correlation with replicate borders."""
    h, w = img.shape
    p = np.pad(img, 2, mode="edge")
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            out[y, x] = (p[y : y + 5, x : x + 5] * kernel).sum()
    return out


def test_residual_kernels_match_published_values():
    k = srm_kernels("paper", dtype=torch.float64).numpy()
    np.testing.assert_array_equal(k, PUBLISHED)
    assert k[0].sum() == 0 and k[1].sum() == 0 and k[2].sum() == -8


def test_classic_bank_is_edges_and_sharpen():
    k = srm_kernels("classic", dtype=torch.float64)
    assert k.shape == (3, 5, 5)
    # horizontal / vertical edge detectors are antisymmetric and transposes of each other
    torch.testing.assert_close(k[0].flip(0), -k[0])
    torch.testing.assert_close(k[1], k[0].T)
    assert k[2][2, 2] > 0 and k[2].sum() == 1
    with pytest.raises(ValueError):
        srm_kernels("bogus")


# dyadic constants keep every partial sum exact, so "exactly zero" is meaningful
@pytest.mark.parametrize("c", [1.0, 0.375, -2.5, 200.0])
def test_constant_image_interior_response(c):
    x = torch.full((1, 3, 12, 14), c, dtype=torch.float64)
    y = srm_filter(x, srm_kernels("paper", torch.float64))
    assert y.shape == (1, 9, 12, 14)
    inner = y[..., 2:-2, 2:-2]
    for ch in range(3):
        assert torch.all(inner[:, 3 * ch + 0] == 0)
        assert torch.all(inner[:, 3 * ch + 1] == 0)
        assert torch.allclose(inner[:, 3 * ch + 2], torch.full_like(inner[:, 0], -8 * c), atol=1e-12)


def test_constant_image_nondyadic_within_rounding():
    x = torch.full((1, 1, 9, 9), 0.37, dtype=torch.float64)
    inner = srm_filter(x, srm_kernels("paper", torch.float64))[..., 2:-2, 2:-2]
    assert inner[:, :2].abs().max() < 1e-13
    assert (inner[:, 2] + 8 * 0.37).abs().max() < 1e-13


def test_impulse_through_strong_edge_kernel():
    x = torch.zeros(1, 1, 9, 9, dtype=torch.float64)
    x[0, 0, 4, 4] = 1.0
    y = srm_filter(x, srm_kernels("paper", torch.float64))
    assert y[0, 1, 4, 4] == -12
    # symmetric kernel: impulse response reproduces the kernel itself
    np.testing.assert_array_equal(y[0, 1, 2:7, 2:7].numpy(), PUBLISHED[1])


def test_srm_filter_matches_loop_reference(rng):
    img = rng.normal(size=(2, 7, 9))
    y = srm_filter(torch.from_numpy(img)[None], srm_kernels("paper", torch.float64))[0].numpy()
    for c in range(2):
        for k in range(3):
            np.testing.assert_allclose(y[3 * c + k], correlate_reference(img[c], PUBLISHED[k]), atol=1e-10)


def test_srm_kernels_are_frozen_buffers():
    layer = SRMLayer("paper")
    assert list(layer.parameters()) == []
    assert "kernels" in dict(layer.named_buffers())


def test_sie_zero_input_zero_init_gives_zero():
    block = SIEBlock(8).eval()
    with torch.no_grad():
        for p in block.parameters():
            p.zero_()
    x = torch.zeros(1, 8, 10, 12)
    assert torch.equal(block(x), torch.zeros_like(x))


def test_sie_shape_contract():
    block = SIEBlock(16)
    assert block(torch.randn(2, 16, 32, 48)).shape == (2, 16, 32, 48)


def test_sie_equals_manual_composition():
    torch.manual_seed(3)
    block = SIEBlock(4).double().eval()
    with torch.no_grad():
        block.norm.running_mean.uniform_(-0.5, 0.5)
        block.norm.running_var.uniform_(0.5, 2.0)
        block.norm.weight.uniform_(0.5, 1.5)
        block.norm.bias.uniform_(-0.2, 0.2)
    x = torch.randn(1, 4, 6, 7, dtype=torch.float64)
    with torch.no_grad():
        got = block(x)
        conv = F.conv2d(x, block.conv.weight, padding=1)
        bn = block.norm
        normed = (conv - bn.running_mean.view(1, -1, 1, 1)) / torch.sqrt(bn.running_var.view(1, -1, 1, 1) + bn.eps)
        act = torch.clamp(normed * bn.weight.view(1, -1, 1, 1) + bn.bias.view(1, -1, 1, 1), min=0)
        resid = np.stack([correlate_reference(act[0, c].numpy(), PUBLISHED[k]) for c in range(4) for k in range(3)])
        comp = F.conv2d(torch.from_numpy(resid)[None], block.compress.weight, block.compress.bias)
        expected = x + comp
    torch.testing.assert_close(got, expected, rtol=1e-10, atol=1e-10)


def test_feature_map_shape_for_128x192():
    model = TextureFeatureExtractor().eval()
    with torch.no_grad():
        fm = extract_features(model, torch.rand(3, 128, 192), index=4)
    assert fm.data.shape == (1, 64, 32, 48)
    assert fm.stride == 4 and fm.source_frame == 4
    assert torch.isfinite(fm.data).all()


@pytest.mark.parametrize("hw", [(96, 160), (40, 56), (100, 130)])
def test_feature_map_shape_after_padding(hw):
    model = TextureFeatureExtractor(widths=(4, 4, 8, 8), out_channels=64).eval()
    h, w = hw
    with torch.no_grad():
        y = model(torch.rand(1, 3, h, w))
    ph, pw = h + (-h) % 16, w + (-w) % 16
    assert y.shape == (1, 64, ph // 4, pw // 4)


def test_extract_features_is_pure():
    model = TextureFeatureExtractor(widths=(4, 4, 8, 8), out_channels=8).eval()
    x = torch.rand(1, 3, 32, 48)
    with torch.no_grad():
        assert torch.equal(model(x), model(x.clone()))


def test_small_frames_rejected():
    model = TextureFeatureExtractor(widths=(4, 4, 8, 8), out_channels=8)
    with pytest.raises(ValueError, match="32x32"):
        model(torch.rand(1, 3, 24, 64))


def test_kernels_unchanged_by_training_step():
    model = TextureFeatureExtractor(widths=(4, 4, 8, 8), out_channels=8)
    before = [b.clone() for n, b in model.named_buffers() if n.endswith("kernels")]
    assert len(before) == 3
    opt = torch.optim.SGD(model.parameters(), lr=10.0)
    model(torch.rand(2, 3, 32, 32)).square().mean().backward()
    opt.step()
    after = [b for n, b in model.named_buffers() if n.endswith("kernels")]
    for a, b in zip(before, after):
        assert torch.equal(a, b)
    assert torch.equal(after[0], srm_kernels("paper"))


def test_extract_features_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = TextureFeatureExtractor(widths=(3, 4, 4, 4), out_channels=4).double().eval()
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    w = torch.randn(1, 4, 8, 8, dtype=torch.float64)
    params = [p for p in model.parameters() if p.requires_grad]

    def readout():
        return (extract_features(model, x).data * w).sum()

    worst, used = fd_check(readout, params, model=model)
    assert used >= 3 * len(params)
    assert worst < RTOL, worst
