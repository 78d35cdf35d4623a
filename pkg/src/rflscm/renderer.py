"""Angular power spectrum rendering from the EM / radiance fields.

For a cell at ``p_BS`` and direction bin ``n`` the ray samples
``p_q = p_BS + q * dr * w_n``. Each voxel gets an attenuation ``delta_q`` from
its EM parameters and those of its neighbours, and a radiance ``R_q`` from the
decoder; both are gated by the point-cloud coefficient ``Phi``. The expected
signal is the coherent sum

    s_n = sum_q ( prod_{q' <= q} delta_q'^Phi_q' ) * Phi_q * R_q

and the APS entry is ``|s_n|^2``. Signals of different directions are never
summed together.

Rendering is organised around *requests* ``(pair, bin)``: attenuation
prefixes depend only on the cell and the bin and are computed once per call
for the distinct bins requested, then shared by every grid.
"""

from __future__ import annotations

import cmath
import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .decoder import DecoderConfig, RadianceDecoder
from .errors import ConfigError
from .fdam import fdam_log_t
from .fields import FieldPair, em_from_raw
from .geometry import (AngularGrid, PointCloudConfig, PointCloudIndex, SceneBounds,
                       modulation_coefficient, ray_to_boundary, sample_ray)

SPEED_OF_LIGHT = 299_792_458.0
# |delta| below this is floored before taking the complex power delta^Phi
DELTA_FLOOR = 1e-12
LOG_DELTA_FLOOR = math.log(DELTA_FLOOR)


@dataclass(frozen=True)
class Cell:
    """One BS sector on one carrier."""

    cell_id: str
    position: tuple[float, float, float]
    wavelength: float
    grid: AngularGrid
    array: object | None = None  # AntennaArray; kept untyped to avoid an import cycle

    def __post_init__(self):
        if self.wavelength <= 0:
            raise ConfigError("wavelength must be positive")
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))

    @property
    def freq_hz(self) -> float:
        return SPEED_OF_LIGHT / self.wavelength

    @property
    def key(self) -> tuple[str, float]:
        return (self.cell_id, round(self.freq_hz, 3))


def cell_key(cell_id: str, freq_hz: float) -> tuple[str, float]:
    return (cell_id, round(float(freq_hz), 3))


@dataclass(frozen=True)
class RayConfig:
    step: float | None = None  # defaults to SceneBounds.default_step()
    max_q: int = 192

    def resolve_step(self, bounds: SceneBounds) -> float:
        return float(self.step) if self.step is not None else bounds.default_step()


# ----------------------------------------------------------------- gates


class PointCloudGate:
    """``Phi`` from exact point densities within radius ``dr``."""

    def __init__(self, index: PointCloudIndex, cfg: PointCloudConfig = PointCloudConfig()):
        self.index, self.cfg = index, cfg

    def __call__(self, positions: np.ndarray, radius: float) -> np.ndarray:
        flat = positions.reshape(-1, 3)
        phi = modulation_coefficient(self.cfg, self.index.count(flat, radius))
        return np.asarray(phi, dtype=float).reshape(positions.shape[:-1])


class ConstantGate:
    """Uniform ``Phi``; ``ConstantGate(1.0)`` disables point-cloud regularization."""

    def __init__(self, value: float = 1.0):
        if not 0.0 <= value <= 1.0:
            raise ValueError("Phi must lie in [0, 1]")
        self.value = float(value)

    def __call__(self, positions: np.ndarray, radius: float) -> np.ndarray:
        return np.full(positions.shape[:-1], self.value)


# ----------------------------------------------------------------- scalar helpers


def modulate_radiance(radiance: complex, phi: float) -> complex:
    if not 0.0 <= phi <= 1.0:
        raise ValueError("Phi must lie in [0, 1]")
    return radiance * phi


def modulate_attenuation(delta: complex, phi: float) -> complex:
    """``delta ** Phi`` via the principal log, ``|delta|`` floored at ``DELTA_FLOOR``."""
    if not 0.0 <= phi <= 1.0:
        raise ValueError("Phi must lie in [0, 1]")
    if phi == 0.0:
        return 1 + 0j
    mag = max(abs(delta), DELTA_FLOOR)
    return cmath.exp(phi * complex(math.log(mag), cmath.phase(delta)))


def principal_log_t(log_delta: torch.Tensor) -> torch.Tensor:
    """Principal-branch ``log delta`` from any branch, real part floored.

    The imaginary part is wrapped into ``[-pi, pi)`` (gradient one almost
    everywhere) and the real part clamped at ``log(DELTA_FLOOR)``.
    """
    re = log_delta.real.clamp(min=LOG_DELTA_FLOOR)
    im = torch.remainder(log_delta.imag + math.pi, 2.0 * math.pi) - math.pi
    return torch.complex(re, im)


# ----------------------------------------------------------------- ray bundles


@dataclass(eq=False)
class RayBundle:
    """Precomputed sample positions and gates for every bin of one grid."""

    directions: np.ndarray  # (N, 3)
    positions: np.ndarray  # (N, Qm, 3), padded with the last valid sample
    valid: np.ndarray  # (N, Qm)
    phi: np.ndarray  # (N, Qm), zero where invalid
    step: float
    active_q: list = field(repr=False, default_factory=list)

    @property
    def n_bins(self) -> int:
        return len(self.directions)

    def active_counts(self) -> np.ndarray:
        return np.array([len(a) for a in self.active_q], dtype=np.int64)


def build_bundle(cell: Cell, grid: AngularGrid, bounds: SceneBounds, ray_cfg: RayConfig, gate) -> RayBundle:
    step = ray_cfg.resolve_step(bounds)
    dirs = grid.directions()
    rays = [ray_to_boundary(bounds, cell.position, d, step, ray_cfg.max_q) for d in dirs]
    qm = max(r.n_samples for r in rays)
    pos = np.zeros((len(rays), qm, 3))
    valid = np.zeros((len(rays), qm), dtype=bool)
    for i, r in enumerate(rays):
        pts = sample_ray(r)
        pos[i, : len(pts)] = pts
        pos[i, len(pts):] = pts[-1]
        valid[i, : len(pts)] = True
    phi = np.where(valid, gate(pos, step), 0.0)
    active = [np.nonzero(row > 0)[0] for row in phi]
    return RayBundle(dirs, pos, valid, phi, step, active)


# ----------------------------------------------------------------- model


@dataclass
class RenderStats:
    """Instrumentation: attenuation work and decoder evaluations."""

    attenuation_calls: int = 0
    attenuation_bins: int = 0
    attenuation_voxels: int = 0
    decoder_evals: int = 0


class RfModel(nn.Module):
    """Field pair plus radiance decoder over a fixed scene box."""

    def __init__(self, bounds: SceneBounds, fields: FieldPair, decoder: RadianceDecoder):
        super().__init__()
        self.bounds = bounds
        self.fields = fields
        self.decoder = decoder
        self.stats = RenderStats()

    @classmethod
    def create(cls, bounds: SceneBounds, *, rank_delta=8, rank_radiance=8, feature_dim=24,
               decoder_cfg: DecoderConfig = DecoderConfig(), seed: int = 0, dtype=torch.float32) -> RfModel:
        gen = torch.Generator().manual_seed(int(seed))
        fields = FieldPair(bounds.resolution, rank_delta, rank_radiance, feature_dim, dtype=dtype).initialize(gen)
        decoder = RadianceDecoder(feature_dim, decoder_cfg, dtype=dtype).initialize(gen)
        return cls(bounds, fields, decoder)

    @property
    def dtype(self):
        return self.fields.g_delta.basis.dtype

    def tensor_parameters(self):
        return list(self.fields.parameters())

    def decoder_parameters(self):
        return list(self.decoder.parameters())

    # -- attenuation ---------------------------------------------------

    def attenuation(self, bundle: RayBundle, bins: np.ndarray, wavelength: float):
        """Per-voxel gated attenuation ``delta^Phi`` and its inclusive prefix product.

        Returns ``(delta_tilde, prefix)``, both complex ``(len(bins), Qm)``;
        padded samples carry ``delta_tilde = 1``.
        """
        dt = self.dtype
        pos = torch.as_tensor(bundle.positions[bins], dtype=dt)
        valid = torch.as_tensor(bundle.valid[bins])
        phi = torch.as_tensor(bundle.phi[bins], dtype=dt)
        raw = self.fields.g_delta(pos.reshape(-1, 3), self.bounds).reshape(*pos.shape[:2], 4)
        mu, eps = em_from_raw(raw)
        one = torch.ones((), dtype=mu.dtype)
        mu = torch.where(valid, mu, one)
        eps = torch.where(valid, eps, one)
        pad = torch.ones((mu.shape[0], 1), dtype=mu.dtype)
        mu_prev, eps_prev = torch.cat([pad, mu[:, :-1]], 1), torch.cat([pad, eps[:, :-1]], 1)
        mu_next, eps_next = torch.cat([mu[:, 1:], pad], 1), torch.cat([eps[:, 1:], pad], 1)
        log_delta = principal_log_t(
            fdam_log_t(mu_prev, eps_prev, mu, eps, mu_next, eps_next, wavelength, bundle.step))
        log_tilde = torch.where(valid, phi * log_delta, torch.zeros((), dtype=log_delta.dtype))
        st = self.stats
        st.attenuation_calls += 1
        st.attenuation_bins += len(bins)
        st.attenuation_voxels += int(bundle.valid[bins].sum())
        return torch.exp(log_tilde), torch.exp(torch.cumsum(log_tilde, dim=1))

    # -- rendering -----------------------------------------------------

    def render_signals(self, cell: Cell, bundle: RayBundle, grid_pos, pair_idx, bin_idx) -> torch.Tensor:
        """Complex expected signal for each request ``(pair_idx[i], bin_idx[i])``.

        ``grid_pos`` holds the world-space centers of the grids referenced by
        ``pair_idx``. Returns a complex tensor of length ``len(bin_idx)``.
        """
        pair_idx = np.asarray(pair_idx, dtype=np.int64)
        bin_idx = np.asarray(bin_idx, dtype=np.int64)
        dt = self.dtype
        cdt = torch.complex128 if dt == torch.float64 else torch.complex64
        n_req = len(bin_idx)
        if n_req == 0:
            return torch.zeros(0, dtype=cdt)
        if bin_idx.min() < 0 or bin_idx.max() >= bundle.n_bins:
            raise IndexError("requested bin outside the angular grid")

        uniq, inv = np.unique(bin_idx, return_inverse=True)
        _, prefix = self.attenuation(bundle, uniq, cell.wavelength)

        # active voxels of the distinct bins, flattened
        counts = np.array([len(bundle.active_q[b]) for b in uniq], dtype=np.int64)
        if counts.sum() == 0:
            return torch.zeros(n_req, dtype=cdt)
        vox_u = np.repeat(np.arange(len(uniq)), counts)
        vox_q = np.concatenate([bundle.active_q[b] for b in uniq])
        offsets = np.concatenate([[0], np.cumsum(counts)])

        pos = torch.as_tensor(bundle.positions[uniq[vox_u], vox_q], dtype=dt)
        dirs = torch.as_tensor(bundle.directions[uniq[vox_u]], dtype=dt)
        feat = self.fields.g_radiance(pos, self.bounds)
        gp = torch.as_tensor(self.bounds.normalize(np.asarray(grid_pos, dtype=float).reshape(-1, 3)), dtype=dt)
        t_feat, t_dir, t_grid, t_lam = self.decoder.first_layer_terms(feat, dirs, gp, cell.wavelength)
        unary = t_feat + t_dir
        gate = prefix[vox_u, vox_q] * torch.as_tensor(bundle.phi[uniq[vox_u], vox_q], dtype=dt)

        # expand requests over their active voxels
        req_counts = counts[inv]
        rows = np.repeat(np.arange(n_req), req_counts)
        first = np.repeat(np.cumsum(req_counts) - req_counts, req_counts)
        vox = np.repeat(offsets[inv], req_counts) + (np.arange(req_counts.sum()) - first)
        rows_t, vox_t = torch.as_tensor(rows), torch.as_tensor(vox)
        pre = unary[vox_t] + t_grid[torch.as_tensor(pair_idx[rows])] + t_lam
        radiance = self.decoder.head(pre)
        self.stats.decoder_evals += len(vox)
        contrib = gate[vox_t] * radiance
        return torch.zeros(n_req, dtype=contrib.dtype).index_add(0, rows_t, contrib)

    def render_power(self, cell, bundle, grid_pos, pair_idx, bin_idx) -> torch.Tensor:
        s = self.render_signals(cell, bundle, grid_pos, pair_idx, bin_idx)
        return s.real**2 + s.imag**2

    def render_dense(self, cell, bundle, grid_pos, bins=None) -> torch.Tensor:
        """APS ``(n_grids, len(bins))`` for every grid against the same bins."""
        gp = np.asarray(grid_pos, dtype=float).reshape(-1, 3)
        bins = np.arange(bundle.n_bins) if bins is None else np.asarray(bins, dtype=np.int64)
        pair = np.repeat(np.arange(len(gp)), len(bins))
        b = np.tile(bins, len(gp))
        return self.render_power(cell, bundle, gp, pair, b).reshape(len(gp), len(bins))


# ----------------------------------------------------------------- public API


@dataclass(frozen=True)
class ApsVector:
    values: np.ndarray
    grid: AngularGrid

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.size,):
            raise ConfigError(f"APS has {v.size} entries, grid has {self.grid.size} bins")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ConfigError("APS entries must be finite and non-negative")
        object.__setattr__(self, "values", v)


@dataclass
class RenderContext:
    model: RfModel
    cell: Cell
    grid_pos: tuple[float, float, float]
    bundle: RayBundle

    @classmethod
    def build(cls, model: RfModel, cell: Cell, grid_pos, gate=None, ray_cfg: RayConfig = RayConfig(),
              grid: AngularGrid | None = None) -> RenderContext:
        bundle = build_bundle(cell, grid or cell.grid, model.bounds, ray_cfg, gate or ConstantGate(1.0))
        return cls(model, cell, tuple(grid_pos), bundle)

    @property
    def grid(self) -> AngularGrid:
        return self.cell.grid


def render_direction(ctx: RenderContext, n: int) -> tuple[complex, float]:
    """Expected signal and power along bin ``n``."""
    if not 0 <= n < ctx.bundle.n_bins:
        raise IndexError(f"bin {n} outside the angular grid")
    with torch.no_grad():
        s = ctx.model.render_signals(ctx.cell, ctx.bundle, [ctx.grid_pos], [0], [n])
    s = complex(s[0])
    return s, abs(s) ** 2


def render_aps(ctx: RenderContext, bins=None) -> ApsVector:
    """APS over the requested bins (all when ``bins`` is None); others are zero."""
    n = ctx.bundle.n_bins
    req = np.arange(n) if bins is None else np.unique(np.asarray(list(bins), dtype=np.int64))
    out = np.zeros(n)
    if len(req):
        with torch.no_grad():
            x = ctx.model.render_power(ctx.cell, ctx.bundle, [ctx.grid_pos], np.zeros(len(req), np.int64), req)
        out[req] = x.double().numpy()
    grid = AngularGrid(ctx.grid.n_tilt, ctx.grid.n_azimuth, ctx.grid.tilt_range, ctx.grid.azimuth_range) \
        if n == ctx.grid.size else _grid_of_size(ctx, n)
    return ApsVector(out, grid)


def _grid_of_size(ctx: RenderContext, n: int) -> AngularGrid:
    for f in range(1, min(ctx.grid.n_tilt, ctx.grid.n_azimuth) + 1):
        if ctx.grid.size == n * f * f:
            return ctx.grid.coarsen(f)
    raise ConfigError("bundle does not match the cell's angular grid")


APS_HEADER = ["bin_index", "tilt_deg", "azimuth_deg", "power_linear", "power_db"]


def write_aps_csv(path, aps: ApsVector) -> None:
    tilt, az = aps.grid.bin_angles()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(APS_HEADER)
        for n, (t, a, v) in enumerate(zip(tilt, az, aps.values)):
            w.writerow([n, repr(float(t)), repr(float(a)), repr(float(v)),
                        repr(10 * math.log10(v)) if v > 0 else ""])
