"""Synthetic scenes, measurement synthesis, dataset assembly and splits.

The default ``geometric-paths`` planting builds each ground-truth APS from
line-of-sight plus single-bounce box reflections (image method), which is
independent of the tensor/decoder model family. ``oracle-field`` renders
from a frozen random model instead and is an inverse crime by construction;
it exists for pipeline tests only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import Box, CellSpec, ExperimentConfig
from .errors import ConfigError
from .fdam import impedance
from .geometry import AngularGrid, PointCloudIndex, SceneBounds
from .renderer import Cell, ConstantGate, PointCloudGate, RfModel, build_bundle
from .sensing import (BeamCodebook, MeasurementRecord, build_sensing_matrix, dbm_to_mw, dft_codebook,
                      group_measurements)
from .trainer import Observation

TRAIN_CODEBOOK = "ssb"
ADJUSTED_CODEBOOK = "ssb_adj"


# ---------------------------------------------------------------- scene


@dataclass
class SyntheticScene:
    bounds: SceneBounds
    boxes: tuple[Box, ...]
    cells: tuple[CellSpec, ...]
    grid_ids: list[str]
    grid_positions: np.ndarray  # (G, 3)
    points: np.ndarray  # (P, 3) point cloud
    seed: int = 0


def box_surface_points(box: Box, density: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the six faces, ``round(area * density)`` per face."""
    lo, hi = np.array(box.min_corner), np.array(box.max_corner)
    out = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        area = (hi[u] - lo[u]) * (hi[v] - lo[v])
        n = int(round(area * density))
        for side in (lo[axis], hi[axis]):
            pts = np.empty((n, 3))
            pts[:, axis] = side
            pts[:, u] = rng.uniform(lo[u], hi[u], n)
            pts[:, v] = rng.uniform(lo[v], hi[v], n)
            out.append(pts)
    return np.concatenate(out) if out else np.zeros((0, 3))


def _inside_footprint(xy: np.ndarray, boxes, margin: float = 0.0) -> np.ndarray:
    inside = np.zeros(len(xy), dtype=bool)
    for b in boxes:
        inside |= ((xy[:, 0] >= b.min_corner[0] - margin) & (xy[:, 0] <= b.max_corner[0] + margin)
                   & (xy[:, 1] >= b.min_corner[1] - margin) & (xy[:, 1] <= b.max_corner[1] + margin))
    return inside


def _box_contains(box: Box, p, margin: float = 0.0) -> bool:
    p = np.asarray(p, float)
    return bool(np.all(p >= np.array(box.min_corner) - margin) and np.all(p <= np.array(box.max_corner) + margin))


def _random_boxes(cfg: ExperimentConfig, rng: np.random.Generator) -> list[Box]:
    s, lo, hi = cfg.scene, cfg.bounds.lo, cfg.bounds.hi
    boxes = []
    attempts = 0
    while len(boxes) < s.n_random_boxes:
        attempts += 1
        if attempts > 1000 * max(s.n_random_boxes, 1):
            raise ConfigError("could not place random boxes away from the base stations")
        w, d = rng.uniform(*s.random_box_size, 2)
        h = min(rng.uniform(*s.random_box_height), hi[2] - lo[2])
        x0 = rng.uniform(lo[0], hi[0] - w)
        y0 = rng.uniform(lo[1], hi[1] - d)
        b = Box(f"r{len(boxes)}", (x0, y0, lo[2]), (x0 + w, y0 + d, lo[2] + h))
        if any(_box_contains(b, c.position, margin=2.0) for c in cfg.cells):
            continue
        boxes.append(b)
    return boxes


def generate_scene(cfg: ExperimentConfig) -> SyntheticScene:
    """Boxes, grid lattice and point cloud, deterministic in ``cfg.scene.seed``."""
    s = cfg.scene
    boxes = list(cfg.boxes) + _random_boxes(cfg, np.random.default_rng([s.seed, 3]))
    lo, hi = cfg.bounds.lo, cfg.bounds.hi
    for b in boxes:
        if not (np.all(np.array(b.min_corner) >= lo) and np.all(np.array(b.max_corner) <= hi)):
            raise ConfigError(f"box {b.box_id} extends outside the scene bounds")
        for c in cfg.cells:
            if _box_contains(b, c.position):
                raise ConfigError(f"box {b.box_id} contains base station {c.cell_id}")

    rng = np.random.default_rng([s.seed, 1])
    pts = [box_surface_points(b, s.surface_points_per_m2, rng) for b in boxes]
    if s.ground_points_per_m2 > 0:
        area = (hi[0] - lo[0]) * (hi[1] - lo[1])
        n = int(round(area * s.ground_points_per_m2))
        g = np.column_stack([rng.uniform(lo[0], hi[0], n), rng.uniform(lo[1], hi[1], n), np.full(n, lo[2])])
        pts.append(g[~_inside_footprint(g[:, :2], boxes)])
    points = np.concatenate(pts) if pts else np.zeros((0, 3))

    x0, x1, y0, y1 = s.grid_region if s.grid_region is not None else (lo[0], hi[0], lo[1], hi[1])
    xs = np.arange(x0 + s.grid_spacing / 2, x1, s.grid_spacing)
    ys = np.arange(y0 + s.grid_spacing / 2, y1, s.grid_spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    cand = np.column_stack([gx.ravel(), gy.ravel()])
    cand = cand[~_inside_footprint(cand, boxes, margin=1.0)]
    near_bs = np.zeros(len(cand), dtype=bool)
    for c in cfg.cells:
        near_bs |= np.hypot(cand[:, 0] - c.position[0], cand[:, 1] - c.position[1]) < s.grid_spacing
    cand = cand[~near_bs]
    if len(cand) < s.n_grids:
        raise ConfigError(f"only {len(cand)} free grid positions for {s.n_grids} grids")
    pick = np.sort(np.random.default_rng([s.seed, 2]).choice(len(cand), s.n_grids, replace=False))
    grid_pos = np.column_stack([cand[pick], np.full(len(pick), lo[2] + s.grid_height)])
    ids = [f"g{i:04d}" for i in range(len(pick))]
    return SyntheticScene(cfg.bounds, tuple(boxes), cfg.cells, ids, grid_pos, points, s.seed)


# ---------------------------------------------------------------- geometric paths


@dataclass(frozen=True)
class PropagationPath:
    direction: np.ndarray  # departure direction at the BS
    length: float  # unfolded length (m)
    gain: float  # linear power gain
    kind: str  # "los" or "reflection:<box>"


def segment_hits_box(p, q, box: Box, eps: float = 1e-9) -> bool:
    """Slab test: does the open segment ``p -> q`` pass through the box interior?"""
    p, q = np.asarray(p, float), np.asarray(q, float)
    d = q - p
    t0, t1 = eps, 1.0 - eps
    for a in range(3):
        lo, hi = box.min_corner[a], box.max_corner[a]
        if abs(d[a]) < 1e-15:
            if p[a] <= lo or p[a] >= hi:
                return False
            continue
        ta, tb = (lo - p[a]) / d[a], (hi - p[a]) / d[a]
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
        if t0 >= t1:
            return False
    return True


def _blocked(p, q, boxes, skip=None) -> bool:
    return any(segment_hits_box(p, q, b) for b in boxes if b is not skip)


def box_reflection_coefficient(box: Box) -> complex:
    """Normal-incidence reflection from free space into the box material."""
    z = impedance(box.em)
    return (z - 1.0) / (z + 1.0)


def geometric_paths(bs, ue, wavelength: float, boxes, blocking: bool = True) -> list[PropagationPath]:
    """LOS and single-bounce specular reflections off box faces (image method).

    Power of a path of unfolded length ``L`` is ``(lambda / (4 pi L))^2``,
    times ``|Gamma|^2`` for a bounce.
    """
    bs, ue = np.asarray(bs, float), np.asarray(ue, float)
    out = []
    los = ue - bs
    d = float(np.linalg.norm(los))
    if d > 0 and not (blocking and _blocked(bs, ue, boxes)):
        out.append(PropagationPath(los / d, d, (wavelength / (4 * math.pi * d)) ** 2, "los"))
    for box in boxes:
        g2 = abs(box_reflection_coefficient(box)) ** 2
        lo, hi = np.array(box.min_corner), np.array(box.max_corner)
        for axis in range(3):
            for side, outward in ((lo[axis], -1.0), (hi[axis], 1.0)):
                # both endpoints strictly on the outer side of the face plane
                if (bs[axis] - side) * outward <= 0 or (ue[axis] - side) * outward <= 0:
                    continue
                image = ue.copy()
                image[axis] = 2 * side - ue[axis]
                t = (side - bs[axis]) / (image[axis] - bs[axis])
                x = bs + t * (image - bs)
                others = [a for a in range(3) if a != axis]
                if not all(lo[a] <= x[a] <= hi[a] for a in others):
                    continue
                if blocking and (_blocked(bs, x, boxes, skip=box) or _blocked(x, ue, boxes, skip=box)):
                    continue
                length = float(np.linalg.norm(image - bs))
                v = x - bs
                out.append(PropagationPath(v / np.linalg.norm(v), length,
                                           g2 * (wavelength / (4 * math.pi * length)) ** 2,
                                           f"reflection:{box.box_id}"))
    return out


def plant_aps(paths, grid: AngularGrid, max_paths: int = 3) -> np.ndarray:
    """Sparse APS: the strongest ``max_paths`` in-range paths binned and summed.

    Paths outside the grid's angular range are dropped before ranking.
    """
    x = np.zeros(grid.size)
    kept = []
    for p in paths:
        n = int(grid.bin_of_direction(p.direction))
        if n >= 0:
            kept.append((p.gain, n))
    kept.sort(key=lambda t: -t[0])
    for g, n in kept[:max_paths]:
        x[n] += g
    return x


# ---------------------------------------------------------------- cells and codebooks


def build_cells(cfg: ExperimentConfig) -> dict:
    """Every (cell, wavelength) combination keyed by :attr:`Cell.key`."""
    out = {}
    for c in cfg.cells:
        for lam in c.wavelengths:
            cell = Cell(c.cell_id, c.position, float(lam), c.grid or cfg.grid, c.array)
            out[cell.key] = cell
    return out


def make_codebooks(cfg: ExperimentConfig, spec: CellSpec) -> tuple[BeamCodebook, BeamCodebook]:
    """Round-1 DFT codebook and its adjusted round-2 counterpart."""
    s = cfg.synth
    first = dft_codebook(spec.array, TRAIN_CODEBOOK, s.codebook_h, s.codebook_v, v_targets=s.v_targets,
                         tx_power_dbm=s.tx_power_dbm)
    if s.adjust == "shift":
        second = dft_codebook(spec.array, ADJUSTED_CODEBOOK, s.codebook_h, s.codebook_v, u_shift=s.adjust_shift,
                              v_targets=s.adjust_v_targets or s.v_targets, tx_power_dbm=s.tx_power_dbm)
    else:
        second = dft_codebook(spec.array, ADJUSTED_CODEBOOK, s.codebook_h, s.codebook_v, v_targets=s.v_targets,
                              tx_power_dbm=s.tx_power_dbm, rotation_deg=s.adjust_rotation_deg)
    return first, second


def sensing_matrices(cfg: ExperimentConfig, cells: dict, codebooks: dict) -> dict:
    """``(cell key, codebook id) -> (M, N)`` array; each matrix built once."""
    specs = {c.cell_id: c for c in cfg.cells}
    out = {}
    for key, cell in cells.items():
        for cb in codebooks.values():
            A = build_sensing_matrix(specs[cell.cell_id].array, cb, cell.grid, cell.wavelength, cell.cell_id)
            out[(key, cb.codebook_id)] = A.entries
    return out


def make_gate(cfg: ExperimentConfig, points: np.ndarray):
    if not cfg.use_pointcloud:
        return ConstantGate(1.0)
    step = cfg.ray.resolve_step(cfg.bounds)
    return PointCloudGate(PointCloudIndex(points, cell_size=step), cfg.pointcloud)


# ---------------------------------------------------------------- synthesis


@dataclass
class SynthResult:
    scene: SyntheticScene
    cells: dict
    codebooks: dict  # id -> BeamCodebook
    sensing: dict  # (cell key, codebook id) -> (M, N)
    truth_aps: dict  # (cell key, grid id) -> (N,)
    records: list = field(default_factory=list)
    r_th_mw: float = 1e-12


def _oracle_aps(cfg, scene, cells) -> dict:
    # inverse-crime mode: APS rendered by a frozen random model
    model = RfModel.create(cfg.bounds, rank_delta=cfg.model.rank_delta, rank_radiance=cfg.model.rank_radiance,
                           feature_dim=cfg.model.feature_dim, decoder_cfg=cfg.model.decoder,
                           seed=10_007 + scene.seed, dtype=torch.float64)
    gate = make_gate(cfg, scene.points)
    out = {}
    with torch.no_grad():
        for key, cell in cells.items():
            bundle = build_bundle(cell, cell.grid, cfg.bounds, cfg.ray, gate)
            x = model.render_dense(cell, bundle, scene.grid_positions).numpy()
            for gid, row in zip(scene.grid_ids, x):
                out[(key, gid)] = row * 1e-9
    return out


def synthesize_measurements(cfg: ExperimentConfig, scene: SyntheticScene | None = None) -> SynthResult:
    """Plant APS per link, apply both codebook rounds and threshold masking."""
    scene = scene or generate_scene(cfg)
    s = cfg.synth
    cells = build_cells(cfg)
    specs = {c.cell_id: c for c in cfg.cells}
    cb_pairs = {cid: make_codebooks(cfg, spec) for cid, spec in specs.items()}
    # codebook weights do not depend on the cell, so one pair serves every cell
    codebooks = {cb.codebook_id: cb for cb in next(iter(cb_pairs.values()))}
    sensing = sensing_matrices(cfg, cells, codebooks)

    if s.planting == "geometric-paths":
        truth = {}
        for key, cell in cells.items():
            for gid, ue in zip(scene.grid_ids, scene.grid_positions):
                paths = geometric_paths(cell.position, ue, cell.wavelength, scene.boxes, s.blocking)
                truth[(key, gid)] = plant_aps(paths, cell.grid, s.max_paths)
    else:
        truth = _oracle_aps(cfg, scene, cells)

    r_th = dbm_to_mw(s.r_th_dbm)
    if s.mask_quantile > 0:
        powers = np.concatenate([sensing[(k, TRAIN_CODEBOOK)] @ truth[(k, g)]
                                 for k in cells for g in scene.grid_ids])
        powers = powers[powers >= r_th]
        if powers.size:
            r_th = max(r_th, float(np.quantile(powers, s.mask_quantile)))

    records = []
    for key, cell in cells.items():
        for gid, ue in zip(scene.grid_ids, scene.grid_positions):
            x = truth[(key, gid)]
            for cb in codebooks.values():
                r = sensing[(key, cb.codebook_id)] @ x
                for bid, v in zip(cb.beam_ids(), r):
                    records.append(MeasurementRecord(cell.cell_id, gid, tuple(ue), cell.freq_hz, bid,
                                                     float(v) if v >= r_th else 0.0))
    return SynthResult(scene, cells, codebooks, sensing, truth, records, r_th)


# ---------------------------------------------------------------- dataset assembly


def observations_from_records(records, cells: dict, sensing: dict) -> list[Observation]:
    """Group measurement records into per-link :class:`Observation` objects.

    ``sensing`` maps ``(cell key, codebook id)`` to a shared matrix; sharing
    the same array object across links lets the trainer normalize it once.
    """
    sizes: dict = {}
    for (_, cb), A in sensing.items():
        sizes.setdefault(cb, A.shape[0])
    out = []
    for gm in group_measurements(records, sizes):
        key = (gm.cell_id, round(gm.freq_hz, 3))
        if key not in cells:
            raise ConfigError(f"measurements reference unknown cell {gm.cell_id} at {gm.freq_hz} Hz")
        if (key, gm.codebook_id) not in sensing:
            raise ConfigError(f"no sensing matrix for cell {gm.cell_id}, codebook {gm.codebook_id}")
        out.append(Observation(cells[key], gm.grid_id, gm.position, sensing[(key, gm.codebook_id)], gm.rsrp_mw,
                               gm.codebook_id))
    return out


@dataclass
class DatasetSplit:
    train: list
    test: list
    unused: list = field(default_factory=list)
    mode: str = ""


def _unit(r) -> tuple:
    return (r.cell_id, round(r.freq_hz, 3), r.grid_id)


def split_dataset(records, mode: str = "by-codebook", params: dict | None = None, seed: int = 0) -> DatasetSplit:
    """Partition measurement records; links (cell, band, grid) are never split.

    Modes and ``params``:

    * ``by-codebook``: ``train_codebooks`` (default ``("ssb",)``) train, rest test;
    * ``by-fraction``: ``fraction`` of links train, rest test;
    * ``by-frequency``: ``test_fraction`` (0.7) of primary-band links form
      the test set, ``p`` of all primary-band links are drawn from the rest
      for training, plus every other-band record when ``include_other``.
      ``primary_freq_hz`` defaults to the lowest frequency present.
    """
    records = list(records)
    params = dict(params or {})
    if not records:
        raise ConfigError("cannot split an empty dataset")
    rng = np.random.default_rng([seed, 7])
    if mode == "by-codebook":
        train_cb = set(params.get("train_codebooks", (TRAIN_CODEBOOK,)))
        train = [r for r in records if r.codebook_id in train_cb]
        test = [r for r in records if r.codebook_id not in train_cb]
        unused = []
    elif mode == "by-fraction":
        frac = float(params.get("fraction", 0.5))
        if not 0.0 < frac <= 1.0:
            raise ConfigError("fraction must lie in (0, 1]")
        units = sorted({_unit(r) for r in records})
        order = rng.permutation(len(units))
        chosen = {units[i] for i in order[: int(round(frac * len(units)))]}
        train = [r for r in records if _unit(r) in chosen]
        test = [r for r in records if _unit(r) not in chosen]
        unused = []
        if frac == 1.0:
            return DatasetSplit(train, test, unused, mode)
    elif mode == "by-frequency":
        freqs = sorted({round(r.freq_hz, 3) for r in records})
        primary = round(float(params.get("primary_freq_hz") or freqs[0]), 3)
        if primary not in freqs:
            raise ConfigError(f"no records at the primary frequency {primary} Hz")
        p = float(params.get("p", 0.3))
        test_frac = float(params.get("test_fraction", 0.7))
        if not 0.0 < test_frac < 1.0 or not 0.0 < p <= 1.0 - test_frac + 1e-12:
            raise ConfigError("need 0 < test_fraction < 1 and 0 < p <= 1 - test_fraction")
        units = sorted({_unit(r) for r in records if round(r.freq_hz, 3) == primary})
        order = [units[i] for i in rng.permutation(len(units))]
        n_test = int(round(test_frac * len(units)))
        n_train = max(1, int(round(p * len(units))))
        test_u, train_u = set(order[:n_test]), set(order[n_test : n_test + n_train])
        other = bool(params.get("include_other", True))
        train, test, unused = [], [], []
        for r in records:
            if round(r.freq_hz, 3) != primary:
                (train if other else unused).append(r)
            elif _unit(r) in test_u:
                test.append(r)
            elif _unit(r) in train_u:
                train.append(r)
            else:
                unused.append(r)
    else:
        raise ConfigError(f"unknown split mode {mode!r}")
    if not train or not test:
        raise ConfigError(f"split {mode} produced an empty partition")
    return DatasetSplit(train, test, unused, mode)
