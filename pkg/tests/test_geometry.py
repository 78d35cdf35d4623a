import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rflscm.errors import ConfigError
from rflscm.geometry import (AngularGrid, PointCloudConfig, PointCloudIndex, Ray, SceneBounds,
                             angles_from_direction, direction_from_angles, direction_of,
                             modulation_coefficient, nearest_bin, point_density, ray_to_boundary, read_xyz,
                             sample_ray, write_xyz)

BOUNDS = SceneBounds((0, 0, 0), (10, 20, 5), (5, 10, 4))


@given(st.floats(0.5, 179.5), st.floats(0.0, 359.9))
def test_angles_round_trip(tilt, az):
    t, a = angles_from_direction(direction_from_angles(tilt, az))
    assert t == pytest.approx(tilt, abs=1e-9)
    assert a == pytest.approx(az, abs=1e-8)


def test_direction_conventions():
    assert np.allclose(direction_from_angles(0, 0), [0, 0, 1])
    assert np.allclose(direction_from_angles(90, 90), [0, 1, 0])
    assert np.allclose(direction_from_angles(180, 0), [0, 0, -1], atol=1e-15)


def test_bins_are_tilt_major():
    g = AngularGrid(3, 4)
    assert g.index(2, 1) == 9
    assert g.split(9) == (2, 1)
    t, a = g.bin_angles()
    assert t[9] == pytest.approx(150.0) and a[9] == pytest.approx(135.0)


@given(st.integers(1, 6), st.integers(1, 8), st.data())
def test_bin_of_center_is_itself(nt, na, data):
    g = AngularGrid(nt, na, (30.0, 150.0), (-60.0, 60.0))
    n = data.draw(st.integers(0, g.size - 1))
    assert int(g.bin_of_direction(direction_of(g, n))) == n
    assert nearest_bin(g, direction_of(g, n)) == n


def test_bin_edges_and_outside():
    g = AngularGrid(2, 4, (90.0, 130.0), (-60.0, 60.0))
    assert int(g.bin_of_angles(130.0, 0.0)) // g.n_azimuth == 1  # closing edge in last bin
    assert int(g.bin_of_angles(80.0, 0.0)) == -1
    assert int(g.bin_of_angles(100.0, 90.0)) == -1
    assert int(g.bin_of_angles(100.0, 359.0)) == g.index(0, 1)  # wraps to -1 deg


def test_coarsen():
    g = AngularGrid(8, 16, (90, 138), (0, 360))
    c = g.coarsen(2)
    assert (c.n_tilt, c.n_azimuth) == (4, 8) and c.tilt_range == g.tilt_range
    with pytest.raises(ConfigError):
        AngularGrid(3, 4).coarsen(2)


def test_direction_of_range():
    with pytest.raises(IndexError):
        direction_of(AngularGrid(2, 2), 4)


def test_bounds_validation():
    with pytest.raises(ConfigError):
        SceneBounds((0, 0, 0), (0, 1, 1), (2, 2, 2))
    with pytest.raises(ConfigError):
        SceneBounds((0, 0, 0), (1, 1, 1), (1, 2, 2))


def test_ray_stays_inside():
    ray = ray_to_boundary(BOUNDS, (5, 10, 2.5), direction_from_angles(120, 30), 0.5)
    pts = sample_ray(ray)
    assert np.all(BOUNDS.contains(pts))
    nxt = pts[-1] + 0.5 * np.asarray(ray.direction)
    assert not BOUNDS.contains(nxt)


def test_ray_respects_max_q():
    ray = ray_to_boundary(BOUNDS, (5, 10, 2.5), (0, 1, 0), 0.1, max_q=7)
    assert ray.n_samples == 8 and ray.q_max == 7


def test_ray_origin_outside_rejected():
    with pytest.raises(ConfigError):
        ray_to_boundary(BOUNDS, (50, 0, 0), (1, 0, 0), 1.0)
    with pytest.raises(ConfigError):
        Ray((0, 0, 0), (1, 1, 0), 1.0, 3)


@given(st.integers(0, 300), st.floats(0.2, 3.0), st.floats(0.3, 2.0))
def test_point_counts_match_brute_force(n, radius, cell):
    rng = np.random.default_rng(n)
    pts = rng.uniform(-5, 5, size=(n, 3))
    q = rng.uniform(-6, 6, size=(20, 3))
    idx = PointCloudIndex(pts, cell)
    brute = (np.linalg.norm(q[:, None] - pts[None], axis=-1) <= radius).sum(axis=1) if n else np.zeros(20)
    assert np.array_equal(idx.count(q, radius), brute)


def test_point_density_single():
    idx = PointCloudIndex(np.array([[0, 0, 0], [1, 0, 0], [3, 0, 0]]), 1.0)
    assert point_density(idx, (0, 0, 0), 1.0) == 2
    with pytest.raises(ValueError):
        idx.count(np.zeros((1, 3)), 0.0)


def test_modulation_coefficient():
    cfg = PointCloudConfig(density_threshold=8, beta_pcd=0.05)
    assert modulation_coefficient(cfg, 9) == 1.0
    assert modulation_coefficient(cfg, 8) == pytest.approx(0.4)
    assert modulation_coefficient(cfg, 0) == 0.0
    with pytest.raises(ValueError):
        modulation_coefficient(cfg, -1)
    with pytest.raises(ConfigError):
        PointCloudConfig(beta_pcd=0.2)


def test_xyz_round_trip(tmp_path, rng):
    pts = rng.normal(size=(17, 3))
    write_xyz(tmp_path / "p.xyz", pts)
    assert np.array_equal(read_xyz(tmp_path / "p.xyz"), pts)
    (tmp_path / "bad.xyz").write_text("1 2\n")
    with pytest.raises(ConfigError):
        read_xyz(tmp_path / "bad.xyz")
