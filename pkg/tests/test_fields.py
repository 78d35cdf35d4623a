import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from rflscm.errors import ConfigError
from rflscm.fields import FREE_SPACE_RAW, FieldPair, VmField, em_from_raw, parameter_count, query
from rflscm.geometry import SceneBounds

BOUNDS = SceneBounds((0, 0, 0), (7, 7, 7), (8, 8, 8))


def _nodes(res, bounds):
    axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(bounds.min_corner, bounds.max_corner, res)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


def test_parameter_count_formula():
    f = VmField(3, (4, 5, 6), 7)
    assert parameter_count(f) == sum(p.numel() for p in f.parameters())
    assert parameter_count(f) == 3 * (4 + 5 + 6) + 3 * (30 + 24 + 20) + 21


def test_invalid_fields_rejected():
    with pytest.raises(ConfigError):
        VmField(0, (4, 4, 4), 1)
    with pytest.raises(ConfigError):
        VmField(1, (1, 4, 4), 1)


def test_node_queries_equal_dense_tensor():
    f = VmField(4, (8, 8, 8), 3, dtype=torch.float64).init_uniform(torch.Generator().manual_seed(0), 1.0)
    with torch.no_grad():
        vals = query(f, BOUNDS, _nodes(f.resolution, BOUNDS)).reshape(8, 8, 8, 3)
        assert torch.allclose(vals, f.to_dense(), atol=1e-12)


@given(st.floats(0, 7), st.floats(0, 7), st.floats(0, 7))
def test_queries_are_trilinear_in_each_factor(x, y, z):
    # a rank-1 field with linear factors reproduces a product of linear functions
    f = VmField(1, (8, 8, 8), 1, dtype=torch.float64)
    i = torch.arange(8, dtype=torch.float64)
    with torch.no_grad():
        f.vec_x[0] = i
        f.mat_yz[0] = (i[:, None] + 1) * (i[None, :] + 2)
        f.basis[0, 0] = 1.0
    got = float(query(f, BOUNDS, (x, y, z))[0].detach())
    # the bilinear interpolant of a product of linear functions is exact
    assert got == pytest.approx(x * (y + 1) * (z + 2), rel=1e-9, abs=1e-9)


def test_queries_clamp_outside_points():
    f = VmField(2, (8, 8, 8), 2, dtype=torch.float64).init_uniform(torch.Generator().manual_seed(1))
    inside = query(f, BOUNDS, (7, 0, 3.5))
    outside = query(f, BOUNDS, (9, -3, 3.5))
    assert torch.allclose(inside, outside)


def test_free_space_initialization():
    pair = FieldPair((8, 8, 8), 4, 4, 6, dtype=torch.float64).initialize(torch.Generator().manual_seed(0))
    raw = pair.g_delta(torch.as_tensor(_nodes((8, 8, 8), BOUNDS)), BOUNDS)
    assert torch.all((raw - FREE_SPACE_RAW).abs() < 0.2)
    mu, eps = em_from_raw(raw)
    assert torch.all((mu.real - 1) < 1e-3) and torch.all(mu.imag <= 0) and torch.all(eps.imag <= 0)


def test_em_from_raw_is_passive():
    mu, eps = em_from_raw(torch.randn(100, 4, dtype=torch.float64) * 10)
    assert torch.all(mu.real >= 1) and torch.all(eps.real >= 1)
    assert torch.all(mu.imag <= 0) and torch.all(eps.imag <= 0)
