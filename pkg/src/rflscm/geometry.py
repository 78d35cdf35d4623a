"""Spatial and angular discretization.

Conventions used everywhere in the package:

* tilt is measured from zenith (0 deg points up, 90 deg is the horizon,
  180 deg points straight down);
* azimuth is measured counter-clockwise from +x in the horizontal plane;
* angular ranges are bin *edges*; bin centers sit in the middle of each bin;
* bins are numbered tilt-major: ``n = i_tilt * n_azimuth + i_azimuth``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError


def direction_from_angles(tilt_deg, azimuth_deg) -> np.ndarray:
    """Unit vector(s) for tilt/azimuth angles in degrees, shape ``(..., 3)``."""
    t = np.deg2rad(np.asarray(tilt_deg, dtype=float))
    a = np.deg2rad(np.asarray(azimuth_deg, dtype=float))
    st = np.sin(t)
    return np.stack([st * np.cos(a), st * np.sin(a), np.cos(t)], axis=-1)


def angles_from_direction(vec) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`direction_from_angles`; azimuth returned in [0, 360)."""
    v = np.asarray(vec, dtype=float)
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    tilt = np.rad2deg(np.arccos(np.clip(v[..., 2], -1.0, 1.0)))
    az = np.rad2deg(np.arctan2(v[..., 1], v[..., 0])) % 360.0
    return tilt, az


@dataclass(frozen=True)
class AngularGrid:
    """Uniform tilt x azimuth discretization of the direction sphere."""

    n_tilt: int
    n_azimuth: int
    tilt_range: tuple[float, float] = (0.0, 180.0)
    azimuth_range: tuple[float, float] = (0.0, 360.0)

    def __post_init__(self):
        if self.n_tilt < 1 or self.n_azimuth < 1:
            raise ConfigError("angular grid needs at least one bin per axis")
        t0, t1 = self.tilt_range
        a0, a1 = self.azimuth_range
        if not (0.0 <= t0 < t1 <= 180.0):
            raise ConfigError(f"bad tilt range {self.tilt_range}")
        if not (a1 > a0 and a1 - a0 <= 360.0):
            raise ConfigError(f"bad azimuth range {self.azimuth_range}")
        object.__setattr__(self, "tilt_range", (float(t0), float(t1)))
        object.__setattr__(self, "azimuth_range", (float(a0), float(a1)))

    @property
    def size(self) -> int:
        return self.n_tilt * self.n_azimuth

    @property
    def tilt_step(self) -> float:
        return (self.tilt_range[1] - self.tilt_range[0]) / self.n_tilt

    @property
    def azimuth_step(self) -> float:
        return (self.azimuth_range[1] - self.azimuth_range[0]) / self.n_azimuth

    @property
    def is_full_circle(self) -> bool:
        return math.isclose(self.azimuth_range[1] - self.azimuth_range[0], 360.0)

    def tilt_centers(self) -> np.ndarray:
        return self.tilt_range[0] + (np.arange(self.n_tilt) + 0.5) * self.tilt_step

    def azimuth_centers(self) -> np.ndarray:
        return self.azimuth_range[0] + (np.arange(self.n_azimuth) + 0.5) * self.azimuth_step

    def bin_angles(self) -> tuple[np.ndarray, np.ndarray]:
        """(tilt, azimuth) of every bin center, each of length N."""
        t, a = np.meshgrid(self.tilt_centers(), self.azimuth_centers(), indexing="ij")
        return t.ravel(), a.ravel()

    def directions(self) -> np.ndarray:
        """All N bin-center unit vectors, shape ``(N, 3)``."""
        return direction_from_angles(*self.bin_angles())

    def split(self, n: int) -> tuple[int, int]:
        return divmod(int(n), self.n_azimuth)

    def index(self, i_tilt: int, i_azimuth: int) -> int:
        return int(i_tilt) * self.n_azimuth + int(i_azimuth)

    def bin_of_angles(self, tilt_deg, azimuth_deg):
        """Bin containing the given angles, or -1 where outside the grid."""
        t = np.asarray(tilt_deg, dtype=float)
        a = np.asarray(azimuth_deg, dtype=float)
        a0 = self.azimuth_range[0]
        a = a0 + np.mod(a - a0, 360.0)
        it = np.floor((t - self.tilt_range[0]) / self.tilt_step).astype(int)
        ia = np.floor((a - a0) / self.azimuth_step).astype(int)
        # the closing tilt edge belongs to the last bin
        it = np.where(np.isclose(t, self.tilt_range[1]), self.n_tilt - 1, it)
        ok = (it >= 0) & (it < self.n_tilt) & (ia >= 0) & (ia < self.n_azimuth)
        return np.where(ok, it * self.n_azimuth + ia, -1)

    def bin_of_direction(self, vec):
        return self.bin_of_angles(*angles_from_direction(vec))

    def coarsen(self, factor: int) -> AngularGrid:
        """The grid with ``factor x factor`` blocks of bins merged."""
        if factor < 1 or self.n_tilt % factor or self.n_azimuth % factor:
            raise ConfigError(
                f"grid {self.n_tilt}x{self.n_azimuth} not divisible by factor {factor}"
            )
        return AngularGrid(
            self.n_tilt // factor, self.n_azimuth // factor, self.tilt_range, self.azimuth_range
        )


def direction_of(grid: AngularGrid, n: int) -> np.ndarray:
    """Unit vector of bin ``n``; raises IndexError outside ``[0, N)``."""
    if not 0 <= n < grid.size:
        raise IndexError(f"bin {n} outside [0, {grid.size})")
    i, j = grid.split(n)
    return direction_from_angles(grid.tilt_centers()[i], grid.azimuth_centers()[j])


def nearest_bin(grid: AngularGrid, vec) -> int:
    """Bin whose center direction has the largest cosine with ``vec``."""
    v = np.asarray(vec, dtype=float)
    return int(np.argmax(grid.directions() @ (v / np.linalg.norm(v))))


@dataclass(frozen=True)
class SceneBounds:
    """Axis-aligned scene box with an ``I x J x K`` voxel lattice."""

    min_corner: tuple[float, float, float]
    max_corner: tuple[float, float, float]
    resolution: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.min_corner)
        hi = tuple(float(v) for v in self.max_corner)
        res = tuple(int(v) for v in self.resolution)
        if len(lo) != 3 or len(hi) != 3 or len(res) != 3:
            raise ConfigError("scene bounds need three coordinates per corner")
        if not all(a < b for a, b in zip(lo, hi)):
            raise ConfigError(f"min corner {lo} not below max corner {hi}")
        if min(res) < 2:
            raise ConfigError(f"resolution {res} must be >= 2 on every axis")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)
        object.__setattr__(self, "resolution", res)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.min_corner)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.max_corner)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def default_step(self) -> float:
        """Ray step: largest extent divided by the finest voxel count."""
        return float(self.extent.max() / max(self.resolution))

    def normalize(self, p) -> np.ndarray:
        """Map positions into the unit cube (no clamping)."""
        return (np.asarray(p, dtype=float) - self.lo) / self.extent

    def contains(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.all((p >= self.lo) & (p <= self.hi), axis=-1)

    def exit_distance(self, origin, direction) -> float:
        """Distance along a ray from an interior origin to the box boundary."""
        o = np.asarray(origin, dtype=float)
        d = np.asarray(direction, dtype=float)
        if not self.contains(o):
            raise ConfigError(f"ray origin {o} lies outside the scene bounds")
        with np.errstate(divide="ignore", invalid="ignore"):
            t_hi = np.where(d > 0, (self.hi - o) / d, np.inf)
            t_lo = np.where(d < 0, (self.lo - o) / d, np.inf)
        return float(np.minimum(t_hi, t_lo).min())


@dataclass(frozen=True)
class Ray:
    origin: tuple[float, float, float]
    direction: tuple[float, float, float]
    step: float
    n_samples: int

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ConfigError("ray direction must be a unit vector")
        if self.step <= 0:
            raise ConfigError("ray step must be positive")
        if self.n_samples < 1:
            raise ConfigError("a ray holds at least one sample")

    @property
    def q_max(self) -> int:
        return self.n_samples - 1


def sample_ray(ray: Ray) -> np.ndarray:
    """Positions ``origin + q * step * direction`` for ``q = 0..Q``."""
    q = np.arange(ray.n_samples, dtype=float)[:, None]
    return np.asarray(ray.origin, dtype=float) + (q * ray.step) * np.asarray(ray.direction, dtype=float)


def ray_to_boundary(bounds: SceneBounds, origin, direction, step: float, max_q: int = 192) -> Ray:
    """Ray whose last sample is the final one still inside the scene box."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    t_exit = bounds.exit_distance(origin, d)
    q = min(int(max_q), int(math.floor(t_exit / step + 1e-9)))
    return Ray(tuple(np.asarray(origin, float)), tuple(d), float(step), q + 1)


@dataclass(frozen=True)
class PointCloudConfig:
    density_threshold: int = 8
    beta_pcd: float = 0.05

    def __post_init__(self):
        if self.density_threshold < 1:
            raise ConfigError("density threshold must be >= 1")
        if not 0.0 < self.beta_pcd <= 0.1:
            raise ConfigError("beta_pcd must lie in (0, 0.1]")


def modulation_coefficient(cfg: PointCloudConfig, density):
    """Gate in [0, 1]: one above the density threshold, ``beta * D`` below."""
    d = np.asarray(density, dtype=float)
    if np.any(d < 0):
        raise ValueError("density must be non-negative")
    phi = np.where(d > cfg.density_threshold, 1.0, np.clip(cfg.beta_pcd * d, 0.0, 1.0))
    return float(phi) if phi.ndim == 0 else phi


@dataclass(frozen=True, eq=False)
class PointCloudIndex:
    """Spatial hash over a static point cloud for exact radius counts.

    Points are bucketed into cubes of edge ``cell_size``. A query of radius
    ``r`` scans the ``(2k+1)^3`` buckets around the query, ``k = ceil(r / cell_size)``,
    then filters by true Euclidean distance, so counts are exact.
    """

    points: np.ndarray
    cell_size: float
    _codes: np.ndarray = field(init=False, repr=False)
    _starts: np.ndarray = field(init=False, repr=False)
    _counts: np.ndarray = field(init=False, repr=False)
    _sorted: np.ndarray = field(init=False, repr=False)
    _kmin: np.ndarray = field(init=False, repr=False)
    _kdim: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.cell_size <= 0:
            raise ConfigError("cell size must be positive")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if len(pts) == 0:
            empty = np.zeros(0, dtype=np.int64)
            for name in ("_codes", "_starts", "_counts"):
                object.__setattr__(self, name, empty)
            object.__setattr__(self, "_sorted", pts)
            object.__setattr__(self, "_kmin", np.zeros(3, dtype=np.int64))
            object.__setattr__(self, "_kdim", np.ones(3, dtype=np.int64))
            return
        keys = np.floor(pts / self.cell_size).astype(np.int64)
        kmin = keys.min(axis=0)
        kdim = keys.max(axis=0) - kmin + 1
        codes = self._encode(keys, kmin, kdim)
        order = np.argsort(codes, kind="stable")
        codes = codes[order]
        uniq, starts, counts = np.unique(codes, return_index=True, return_counts=True)
        object.__setattr__(self, "_codes", uniq)
        object.__setattr__(self, "_starts", starts)
        object.__setattr__(self, "_counts", counts)
        object.__setattr__(self, "_sorted", pts[order])
        object.__setattr__(self, "_kmin", kmin)
        object.__setattr__(self, "_kdim", kdim)

    @staticmethod
    def _encode(keys, kmin, kdim):
        k = keys - kmin
        return (k[..., 0] * kdim[1] + k[..., 1]) * kdim[2] + k[..., 2]

    def __len__(self) -> int:
        return len(self.points)

    def count(self, positions, radius: float, chunk: int = 4096) -> np.ndarray:
        """Number of stored points within ``radius`` of each query position."""
        if radius <= 0:
            raise ValueError("radius must be positive")
        q = np.asarray(positions, dtype=float).reshape(-1, 3)
        out = np.zeros(len(q), dtype=np.int64)
        if len(self.points) == 0 or len(q) == 0:
            return out
        rings = int(math.ceil(radius / self.cell_size))
        span = np.arange(-rings, rings + 1)
        offsets = np.stack(np.meshgrid(span, span, span, indexing="ij"), axis=-1).reshape(-1, 3)
        r2 = radius * radius
        for lo in range(0, len(q), chunk):
            qc = q[lo : lo + chunk]
            base = np.floor(qc / self.cell_size).astype(np.int64)
            nbr = base[:, None, :] + offsets[None, :, :]
            rel = nbr - self._kmin
            inside = np.all((rel >= 0) & (rel < self._kdim), axis=-1)
            codes = self._encode(nbr, self._kmin, self._kdim)
            pos = np.searchsorted(self._codes, codes)
            pos = np.clip(pos, 0, len(self._codes) - 1)
            hit = inside & (self._codes[pos] == codes)
            qi, oi = np.nonzero(hit)
            if len(qi) == 0:
                continue
            b = pos[qi, oi]
            counts = self._counts[b]
            starts = self._starts[b]
            owner = np.repeat(qi, counts)
            first = np.repeat(np.cumsum(counts) - counts, counts)
            idx = np.repeat(starts, counts) + (np.arange(counts.sum()) - first)
            diff = self._sorted[idx] - qc[owner]
            close = np.einsum("ij,ij->i", diff, diff) <= r2
            out[lo : lo + len(qc)] += np.bincount(owner[close], minlength=len(qc))
        return out


def point_density(index: PointCloudIndex, p, radius: float) -> int:
    """Exact count of points ``a`` with ``|a - p| <= radius``."""
    return int(index.count(np.asarray(p, dtype=float)[None, :], radius)[0])


def read_xyz(path) -> np.ndarray:
    """Load ``x y z`` lines (``#`` comments allowed) into an ``(P, 3)`` array."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ConfigError(f"point cloud line has {len(parts)} fields: {line!r}")
        rows.append([float(v) for v in parts])
    return np.array(rows, dtype=float).reshape(-1, 3)


def write_xyz(path, points) -> None:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("# x y z (meters)\n")
        for x, y, z in pts:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
