import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck_util import RTOL, fd_check
from phytrack.ata import OffsetField
from phytrack.fmr import (
    Fuse,
    OffsetMemory,
    Propagator,
    flow_agnostic_offset,
    fuse,
    gate_previous_features,
    propagate,
    update_memory,
)


def field(x, y=None, shape=(1, 1)):
    tx = torch.full(shape, float(x), dtype=torch.float64)
    ty = torch.full(shape, float(x if y is None else y), dtype=torch.float64)
    return OffsetField(tx, ty)


# ---------------------------------------------------------------------------
# memory


def test_mean_of_two_and_four_is_three():
    mem = OffsetMemory()
    for v in (2, 4):
        mem = update_memory(mem, field(v))
    assert mem.count == 2
    assert float(mem.mean_ox) == 3.0 and float(mem.mean_oy) == 3.0


def test_sum_mode_two_and_four_is_six():
    mem = OffsetMemory(mode="sum")
    for v in (2, 4):
        mem = update_memory(mem, field(v))
    assert float(mem.mean_ox) == 6.0


@pytest.mark.parametrize("count", [1, 2, 7, 30])
def test_constant_offsets_leave_mean_constant(count):
    mem = OffsetMemory()
    for _ in range(count):
        mem = update_memory(mem, field(-3.25, 1.5))
    assert float(mem.mean_ox) == -3.25 and float(mem.mean_oy) == 1.5


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 50), seed=st.integers(0, 2**16))
def test_running_mean_equals_brute_force(n, seed):
    rng = np.random.default_rng(seed)
    seq = rng.normal(scale=10, size=(n, 2, 3, 4))
    mem = OffsetMemory()
    for o in seq:
        mem = update_memory(mem, OffsetField(torch.from_numpy(o[0]), torch.from_numpy(o[1])))
    np.testing.assert_allclose(mem.mean_ox.numpy(), seq[:, 0].mean(0), atol=1e-6, rtol=0)
    np.testing.assert_allclose(mem.mean_oy.numpy(), seq[:, 1].mean(0), atol=1e-6, rtol=0)
    assert mem.count == n


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 50), seed=st.integers(0, 2**16))
def test_sum_mode_equals_brute_force_sum(n, seed):
    rng = np.random.default_rng(seed)
    seq = rng.normal(size=(n, 3, 4))
    mem = OffsetMemory(mode="sum")
    for o in seq:
        mem = update_memory(mem, OffsetField(torch.from_numpy(o), torch.from_numpy(-o)))
    np.testing.assert_allclose(mem.mean_ox.numpy(), seq.sum(0), atol=1e-9, rtol=0)
    np.testing.assert_allclose(mem.mean_oy.numpy(), -seq.sum(0), atol=1e-9, rtol=0)


def test_update_does_not_mutate_and_detaches():
    o = OffsetField(torch.ones(2, 3, requires_grad=True), torch.ones(2, 3, requires_grad=True))
    mem0 = OffsetMemory()
    mem1 = update_memory(mem0, o)
    assert mem0.count == 0 and mem0.mean_ox is None
    assert not mem1.mean_ox.requires_grad


def test_memory_shape_mismatch_rejected():
    mem = update_memory(OffsetMemory(), field(1, shape=(2, 3)))
    with pytest.raises(ValueError, match="shape"):
        update_memory(mem, field(1, shape=(3, 2)))


def test_memory_reset_and_bad_mode():
    mem = update_memory(OffsetMemory(), field(1))
    mem.reset()
    assert mem.count == 0 and mem.mean_ox is None
    with pytest.raises(ValueError):
        OffsetMemory(mode="median")


# ---------------------------------------------------------------------------
# flow-agnostic offset


def test_flow_agnostic_examples():
    assert float(flow_agnostic_offset(field(5), field(3)).ox) == 7.0
    z = flow_agnostic_offset(field(2.5, -1), field(0))
    assert float(z.ox) == 5.0 and float(z.oy) == -2.0


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 20), seed=st.integers(0, 2**16))
def test_uniform_flow_is_a_fixed_point(n, seed):
    rng = np.random.default_rng(seed)
    o = OffsetField(torch.from_numpy(rng.normal(size=(3, 5))), torch.from_numpy(rng.normal(size=(3, 5))))
    mem = OffsetMemory()
    for _ in range(n):
        mem = update_memory(mem, o)
    omega = flow_agnostic_offset(o, mem.as_field())
    assert torch.equal(omega.ox, o.ox) and torch.equal(omega.oy, o.oy)


def test_sum_mode_ablation_formula():
    o1, o2 = field(1.5, -2.0, (2, 2)), field(0.25, 4.0, (2, 2))
    mem = update_memory(update_memory(OffsetMemory(mode="sum"), o1), o2)
    omega = flow_agnostic_offset(o2, mem.as_field())
    # 2 * O_t - (O_t + O_{t-1})
    assert torch.equal(omega.ox, 2 * o2.ox - (o2.ox + o1.ox))
    assert torch.equal(omega.oy, 2 * o2.oy - (o2.oy + o1.oy))


# ---------------------------------------------------------------------------
# gating


def test_gating_zero_heatmap_annihilates():
    w = torch.randn(2, 5, 4, 6)
    assert torch.equal(gate_previous_features(w, torch.zeros(2, 4, 6)), torch.zeros_like(w))


def test_gating_one_hot_selects():
    w = torch.randn(1, 5, 6, 8)
    p = torch.zeros(1, 6, 8)
    p[0, 3, 4] = 1.0
    h = gate_previous_features(w, p)
    mask = torch.zeros(6, 8, dtype=torch.bool)
    mask[3, 4] = True
    assert torch.equal(h[0, :, 3, 4], w[0, :, 3, 4])
    assert torch.all(h[0][:, ~mask] == 0)


def test_gating_matches_elementwise_loop(rng):
    w = rng.normal(size=(2, 3, 4, 5))
    p = rng.uniform(size=(2, 4, 5))
    h = gate_previous_features(torch.from_numpy(w), torch.from_numpy(p)).numpy()
    ref = np.zeros_like(w)
    for b in range(2):
        for c in range(3):
            for i in range(4):
                for j in range(5):
                    ref[b, c, i, j] = w[b, c, i, j] * p[b, i, j]
    np.testing.assert_array_equal(h, ref)


def test_gating_rejects_out_of_range_and_shape():
    w = torch.randn(1, 2, 3, 3)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        gate_previous_features(w, torch.full((1, 3, 3), 1.5))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        gate_previous_features(w, torch.full((1, 3, 3), -0.1))
    with pytest.raises(ValueError):
        gate_previous_features(w, torch.zeros(1, 3, 4))


# ---------------------------------------------------------------------------
# propagation


def test_zero_offset_identity_init_returns_input():
    prop = Propagator(6, 8).identity_init()
    h = torch.randn(2, 6, 5, 7)
    out = propagate(prop, h, OffsetField(torch.zeros(2, 5, 7), torch.zeros(2, 5, 7)))
    torch.testing.assert_close(out, h, atol=1e-6, rtol=0)


def test_integer_offset_shifts_one_cell():
    prop = Propagator(3, 8).identity_init().double()
    h = torch.randn(1, 3, 4, 6, dtype=torch.float64)
    omega = OffsetField(torch.full((1, 4, 6), 8.0, dtype=torch.float64), torch.zeros(1, 4, 6, dtype=torch.float64))
    out = propagate(prop, h, omega)
    torch.testing.assert_close(out[..., :-1], h[..., 1:], atol=1e-12, rtol=0)
    assert out[..., -1].abs().max() < 1e-12
    omega_y = OffsetField(torch.zeros(1, 4, 6, dtype=torch.float64), torch.full((1, 4, 6), -8.0, dtype=torch.float64))
    out = propagate(prop, h, omega_y)
    torch.testing.assert_close(out[..., 1:, :], h[..., :-1, :], atol=1e-12, rtol=0)
    assert out[..., 0, :].abs().max() < 1e-12


def test_propagation_is_linear_in_features():
    torch.manual_seed(0)
    prop = Propagator(4, 8).double()
    prop.conv.bias.data.zero_()  # affine only through the bias
    omega = OffsetField(torch.randn(1, 5, 6, dtype=torch.float64) * 6, torch.randn(1, 5, 6, dtype=torch.float64) * 6)
    h1, h2 = torch.randn(2, 1, 4, 5, 6, dtype=torch.float64)
    a, b = 0.7, -2.3
    with torch.no_grad():
        lhs = propagate(prop, a * h1 + b * h2, omega)
        rhs = a * propagate(prop, h1, omega) + b * propagate(prop, h2, omega)
    torch.testing.assert_close(lhs, rhs, atol=1e-12, rtol=0)


def test_propagation_gradient_wrt_offsets():
    torch.manual_seed(6)
    prop = Propagator(3, 8).double()
    h = torch.randn(1, 3, 4, 6, dtype=torch.float64, requires_grad=True)
    # fractional displacements keep every sample strictly inside a bilinear cell
    ox = (torch.rand(1, 4, 6, dtype=torch.float64) * 0.6 + 0.2 + torch.randint(-1, 2, (1, 4, 6))) * 8
    oy = (torch.rand(1, 4, 6, dtype=torch.float64) * 0.6 + 0.2 + torch.randint(-1, 2, (1, 4, 6))) * 8
    ox.requires_grad_()
    oy.requires_grad_()
    w = torch.randn(1, 3, 4, 6, dtype=torch.float64)

    def readout():
        return (propagate(prop, h, OffsetField(ox, oy)) * w).sum()

    worst, used = fd_check(readout, [ox, oy, h], entries=24)
    assert used == 72
    assert worst < RTOL, worst


# ---------------------------------------------------------------------------
# fusion


def test_fuse_passthrough_with_zero_propagated():
    module = Fuse(8, 6).passthrough_init()
    f = torch.randn(1, 8, 12, 16)
    out = fuse(module, f, torch.zeros(1, 6, 6, 8))
    torch.testing.assert_close(out, f, atol=1e-6, rtol=0)


def test_fuse_shape_and_purity():
    module = Fuse(64, 64)
    f, p = torch.randn(1, 64, 24, 40), torch.randn(1, 64, 12, 20)
    with torch.no_grad():
        a = fuse(module, f, p)
        b = fuse(module, f, p)
    assert a.shape == (1, 64, 24, 40)
    assert torch.equal(a, b)
