import math
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from rflscm.config import Box, load_config
from rflscm.errors import ConfigError
from rflscm.fdam import EmParams
from rflscm.geometry import AngularGrid, direction_from_angles
from rflscm.data import (ADJUSTED_CODEBOOK, TRAIN_CODEBOOK, PropagationPath, box_reflection_coefficient,
                         box_surface_points, generate_scene, geometric_paths, observations_from_records,
                         plant_aps, segment_hits_box, split_dataset, synthesize_measurements)

TINY = Path(__file__).resolve().parents[1] / "configs" / "tiny.ini"
BOX = Box("b", (0, 0, 0), (2, 2, 2), EmParams(1, 4))


@pytest.fixture(scope="module")
def tiny_syn():
    return synthesize_measurements(load_config(TINY))


def test_segment_box_slab_test():
    assert segment_hits_box((-1, 1, 1), (3, 1, 1), BOX)
    assert not segment_hits_box((-1, 3, 1), (3, 3, 1), BOX)
    assert not segment_hits_box((-1, 1, 1), (-0.5, 1, 1), BOX)
    assert not segment_hits_box((-1, 2, 1), (3, 2, 1), BOX)  # grazing a face is not blocking


def test_reflection_coefficient_of_box():
    # Z = 1/2 -> Gamma = -1/3
    assert box_reflection_coefficient(BOX) == pytest.approx(-1 / 3)


def test_los_path_gain_and_direction():
    paths = geometric_paths((0, 0, 10), (30, 40, 10), 0.1, [])
    assert len(paths) == 1 and paths[0].kind == "los"
    assert paths[0].length == pytest.approx(50.0)
    assert paths[0].gain == pytest.approx((0.1 / (4 * math.pi * 50)) ** 2)
    assert np.allclose(paths[0].direction, [0.6, 0.8, 0.0])


def test_image_method_reflection_off_wall():
    wall = Box("w", (10, -50, 0), (12, 50, 30), EmParams(1, 4))
    paths = geometric_paths((0, 0, 5), (0, 8, 5), 0.1, [wall])
    refl = [p for p in paths if p.kind.startswith("reflection")]
    assert len(refl) == 1
    # image of the UE across x = 10 is (20, 8, 5)
    assert refl[0].length == pytest.approx(math.hypot(20, 8))
    assert refl[0].gain == pytest.approx((1 / 9) * (0.1 / (4 * math.pi * math.hypot(20, 8))) ** 2)
    assert refl[0].direction[0] > 0


def test_blocking_removes_los():
    paths = geometric_paths((-5, 1, 1), (5, 1, 1), 0.1, [BOX], blocking=True)
    assert all(p.kind != "los" for p in paths)
    assert any(p.kind == "los" for p in geometric_paths((-5, 1, 1), (5, 1, 1), 0.1, [BOX], blocking=False))


def test_plant_aps_bins_strongest_paths():
    grid = AngularGrid(2, 4, (0.0, 180.0), (0.0, 360.0))
    mk = lambda t, a, g: PropagationPath(direction_from_angles(t, a), 1.0, g, "x")  # noqa: E731
    paths = [mk(45, 10, 1.0), mk(45, 20, 0.5), mk(135, 200, 0.25), mk(135, 300, 0.1)]
    x = plant_aps(paths, grid, max_paths=3)
    assert x[grid.index(0, 0)] == pytest.approx(1.5)  # same bin merges
    assert x[grid.index(1, 2)] == pytest.approx(0.25)
    assert np.count_nonzero(x) == 2
    restricted = AngularGrid(1, 1, (0.0, 90.0), (0.0, 90.0))
    assert plant_aps(paths, restricted, 1)[0] == pytest.approx(1.0)


def test_planted_bin_contains_direction():
    grid = AngularGrid(8, 16, (90.0, 138.0), (-60.0, 60.0))
    rng = np.random.default_rng(0)
    for _ in range(50):
        t, a = rng.uniform(91, 137), rng.uniform(-59, 59)
        x = plant_aps([PropagationPath(direction_from_angles(t, a), 1.0, 1.0, "los")], grid)
        it, ia = grid.split(int(np.argmax(x)))
        assert abs(grid.tilt_centers()[it] - t) <= grid.tilt_step / 2 + 1e-9
        assert abs(grid.azimuth_centers()[ia] - a) <= grid.azimuth_step / 2 + 1e-9


def test_surface_points_count(rng):
    pts = box_surface_points(Box("b", (0, 0, 0), (2, 3, 4)), 1.0, rng)
    assert len(pts) == 2 * (12 + 8 + 6)
    on_face = np.isclose(pts, 0) | np.isclose(pts, [2, 3, 4])
    assert np.all(on_face.any(axis=1))


def test_scene_is_deterministic_and_valid():
    cfg = load_config(TINY)
    a, b = generate_scene(cfg), generate_scene(cfg)
    assert np.array_equal(a.grid_positions, b.grid_positions) and np.array_equal(a.points, b.points)
    assert len(a.grid_ids) == cfg.scene.n_grids
    assert np.all(cfg.bounds.contains(a.grid_positions))
    c = generate_scene(cfg.with_seed(5))
    assert not np.array_equal(a.grid_positions, c.grid_positions)


def test_synthesis_records(tiny_syn):
    cfg = load_config(TINY)
    counts = Counter(r.codebook_id for r in tiny_syn.records)
    n_links = len(cfg.cells) * cfg.scene.n_grids
    assert counts[TRAIN_CODEBOOK] == counts[ADJUSTED_CODEBOOK] == n_links * cfg.synth.codebook_h
    assert all(r.rsrp_mw == 0 or r.rsrp_mw >= tiny_syn.r_th_mw for r in tiny_syn.records)
    for (key, gid), x in tiny_syn.truth_aps.items():
        assert np.count_nonzero(x) <= cfg.synth.max_paths


def test_mask_quantile_hides_requested_share():
    cfg = load_config(TINY)
    from dataclasses import replace

    syn = synthesize_measurements(replace(cfg, synth=replace(cfg.synth, mask_quantile=0.3)))
    base = synthesize_measurements(cfg)
    r1 = [r for r in syn.records if r.codebook_id == TRAIN_CODEBOOK]
    b1 = [r for r in base.records if r.codebook_id == TRAIN_CODEBOOK]
    reported_base = sum(r.reported for r in b1)
    hidden = reported_base - sum(r.reported for r in r1)
    assert hidden == pytest.approx(0.3 * reported_base, abs=2)


def test_observations_and_splits(tiny_syn):
    split = split_dataset(tiny_syn.records, "by-codebook", {"train_codebooks": (TRAIN_CODEBOOK,)})
    assert {r.codebook_id for r in split.train} == {TRAIN_CODEBOOK}
    assert {r.codebook_id for r in split.test} == {ADJUSTED_CODEBOOK}
    obs = observations_from_records(split.train, tiny_syn.cells, tiny_syn.sensing)
    assert len(obs) == 2 * 12 and all(o.codebook_id == TRAIN_CODEBOOK for o in obs)
    assert len({id(o.sensing) for o in obs}) == 2  # one shared matrix per cell

    frac = split_dataset(tiny_syn.records, "by-fraction", {"fraction": 0.25}, seed=3)
    units = lambda rs: {(r.cell_id, r.grid_id) for r in rs}  # noqa: E731
    assert not units(frac.train) & units(frac.test)
    assert len(units(frac.train)) == 6
    again = split_dataset(tiny_syn.records, "by-fraction", {"fraction": 0.25}, seed=3)
    assert [r.grid_id for r in again.train] == [r.grid_id for r in frac.train]


def test_frequency_split_counts():
    cfg = load_config(TINY)
    from dataclasses import replace

    cells = tuple(replace(c, wavelengths=(0.1428, 0.0857)) for c in cfg.cells)
    syn = synthesize_measurements(replace(cfg, cells=cells))
    recs = [r for r in syn.records if r.codebook_id == TRAIN_CODEBOOK]
    primary = min(r.freq_hz for r in recs)
    units = lambda rs: {(r.cell_id, r.grid_id) for r in rs if r.freq_hz == primary}  # noqa: E731
    with_other = split_dataset(recs, "by-frequency", {"p": 0.2, "include_other": True}, seed=0)
    alone = split_dataset(recs, "by-frequency", {"p": 0.2, "include_other": False}, seed=0)
    assert len(units(with_other.test)) == round(0.7 * 24)
    assert len(units(with_other.train)) == round(0.2 * 24)
    assert units(with_other.train) == units(alone.train) and units(with_other.test) == units(alone.test)
    assert any(r.freq_hz != primary for r in with_other.train)
    assert all(r.freq_hz == primary for r in alone.train)


def test_split_errors(tiny_syn):
    with pytest.raises(ConfigError):
        split_dataset([], "by-codebook")
    with pytest.raises(ConfigError):
        split_dataset(tiny_syn.records, "nope")
    with pytest.raises(ConfigError):
        split_dataset(tiny_syn.records, "by-frequency", {"p": 0.5, "test_fraction": 0.7})
