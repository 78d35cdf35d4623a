"""Vector-matrix (VM) factorized 4D fields over the scene voxel lattice.

A field of rank ``R`` and ``D`` channels stores, per rank component, one
vector along each axis and one matrix on the complementary plane, plus one
channel basis vector per spatial branch:

    G = sum_r  vX_r o MYZ_r o b1  +  vY_r o MXZ_r o b2  +  vZ_r o MXY_r o b3

Queries interpolate the vectors linearly and the matrices bilinearly, and
clamp positions to the scene box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError
from .geometry import SceneBounds

# (vector axis, plane axes) for the three spatial branches
BRANCHES = ((0, (1, 2)), (1, (0, 2)), (2, (0, 1)))


@dataclass
class QueryCounter:
    """Per-point tally of factors touched by queries (instrumentation)."""

    points: int = 0
    vector_factors: int = 0
    vector_taps: int = 0
    matrix_factors: int = 0
    matrix_taps: int = 0
    basis_vectors: int = 0


def _lerp_coords(u: torch.Tensor, size: int):
    """Lower lattice index and weight for continuous coordinates in [0, size-1]."""
    u = u.clamp(0.0, size - 1.0)
    i0 = torch.floor(u).clamp(max=size - 2).long()
    return i0, u - i0.to(u.dtype)


class VmField(nn.Module):
    """Trainable VM-decomposed tensor field of shape ``I x J x K x D``."""

    def __init__(self, rank: int, resolution, channels: int, dtype=torch.float32):
        super().__init__()
        res = tuple(int(v) for v in resolution)
        if rank < 1:
            raise ConfigError("rank must be >= 1")
        if channels < 1:
            raise ConfigError("a field needs at least one channel")
        if len(res) != 3 or min(res) < 2:
            raise ConfigError(f"resolution {res} must be three sizes >= 2")
        self.rank, self.resolution, self.channels = rank, res, channels
        I, J, K = res
        z = lambda *shape: nn.Parameter(torch.zeros(*shape, dtype=dtype))  # noqa: E731
        self.vec_x, self.vec_y, self.vec_z = z(rank, I), z(rank, J), z(rank, K)
        self.mat_yz, self.mat_xz, self.mat_xy = z(rank, J, K), z(rank, I, K), z(rank, I, J)
        self.basis = z(3, channels)
        self.counter: QueryCounter | None = None

    # declared order is also the checkpoint order
    FACTOR_NAMES = ("vec_x", "vec_y", "vec_z", "mat_yz", "mat_xz", "mat_xy", "basis")

    def factors(self):
        return [getattr(self, n) for n in self.FACTOR_NAMES]

    def vectors(self):
        return (self.vec_x, self.vec_y, self.vec_z)

    def matrices(self):
        return (self.mat_yz, self.mat_xz, self.mat_xy)

    def parameter_count(self) -> int:
        I, J, K = self.resolution
        R, D = self.rank, self.channels
        return R * (I + J + K) + R * (J * K + I * K + I * J) + 3 * D

    def init_uniform(self, generator: torch.Generator, scale: float | None = None):
        """Uniform ``[-s, s]`` factors with ``s = 0.1 / sqrt(R)`` by default."""
        s = 0.1 / math.sqrt(self.rank) if scale is None else scale
        with torch.no_grad():
            for p in self.factors():
                p.copy_((torch.rand(p.shape, generator=generator, dtype=torch.float64) * 2 - 1) * s)
        return self

    def to_index_coords(self, points: torch.Tensor, bounds: SceneBounds) -> torch.Tensor:
        lo = torch.as_tensor(bounds.lo, dtype=points.dtype)
        ext = torch.as_tensor(bounds.extent, dtype=points.dtype)
        size = torch.as_tensor([s - 1 for s in self.resolution], dtype=points.dtype)
        return (points - lo) / ext * size

    def branch_values(self, points: torch.Tensor, bounds: SceneBounds) -> torch.Tensor:
        """Scalar spatial part of each branch, shape ``(P, 3)``."""
        u = self.to_index_coords(points, bounds)
        out = []
        for (axis, (a, b)), vec, mat in zip(BRANCHES, self.vectors(), self.matrices()):
            i0, w = _lerp_coords(u[:, axis], self.resolution[axis])
            v = vec[:, i0] * (1 - w) + vec[:, i0 + 1] * w
            j0, wa = _lerp_coords(u[:, a], self.resolution[a])
            k0, wb = _lerp_coords(u[:, b], self.resolution[b])
            m = (
                mat[:, j0, k0] * ((1 - wa) * (1 - wb))
                + mat[:, j0 + 1, k0] * (wa * (1 - wb))
                + mat[:, j0, k0 + 1] * ((1 - wa) * wb)
                + mat[:, j0 + 1, k0 + 1] * (wa * wb)
            )
            out.append((v * m).sum(dim=0))
        if self.counter is not None:
            n = points.shape[0]
            c = self.counter
            c.points += n
            c.vector_factors += n * 3 * self.rank
            c.vector_taps += n * 3 * self.rank * 2
            c.matrix_factors += n * 3 * self.rank
            c.matrix_taps += n * 3 * self.rank * 4
            c.basis_vectors += n * 3
        return torch.stack(out, dim=1)

    def forward(self, points: torch.Tensor, bounds: SceneBounds) -> torch.Tensor:
        """Field value at world-space points ``(P, 3)``, returns ``(P, D)``."""
        return self.branch_values(points, bounds) @ self.basis

    def to_dense(self) -> torch.Tensor:
        """Materialize the full ``(I, J, K, D)`` tensor (small grids only)."""
        b1, b2, b3 = self.basis
        return (
            torch.einsum("ri,rjk,d->ijkd", self.vec_x, self.mat_yz, b1)
            + torch.einsum("rj,rik,d->ijkd", self.vec_y, self.mat_xz, b2)
            + torch.einsum("rk,rij,d->ijkd", self.vec_z, self.mat_xy, b3)
        )


def query(field: VmField, bounds: SceneBounds, p) -> torch.Tensor:
    """Single-point or batched field query; positions outside are clamped."""
    pts = torch.as_tensor(p, dtype=field.basis.dtype)
    single = pts.ndim == 1
    out = field(pts.reshape(-1, 3), bounds)
    return out[0] if single else out


def parameter_count(field: VmField) -> int:
    return field.parameter_count()


# raw channel value giving softplus ~ 3.4e-4, i.e. (mu, eps) ~ (1, 1)
FREE_SPACE_RAW = -8.0


class FieldPair(nn.Module):
    """EM-parameter field (4 channels) and latent radiance-feature field."""

    def __init__(self, resolution, rank_delta: int = 8, rank_radiance: int = 8, feature_dim: int = 24,
                 dtype=torch.float32):
        super().__init__()
        self.g_delta = VmField(rank_delta, resolution, 4, dtype=dtype)
        self.g_radiance = VmField(rank_radiance, resolution, feature_dim, dtype=dtype)

    @property
    def feature_dim(self) -> int:
        return self.g_radiance.channels

    def initialize(self, generator: torch.Generator):
        """Random factors, with the EM field starting close to free space.

        Rank component 0 of every branch of the EM field is a constant
        (vectors and matrices equal to one) and the basis vectors put
        ``FREE_SPACE_RAW / 3`` on every channel, so the raw query starts at
        ``FREE_SPACE_RAW`` plus the small contribution of the random ranks.
        """
        self.g_delta.init_uniform(generator)
        self.g_radiance.init_uniform(generator)
        with torch.no_grad():
            for vec in self.g_delta.vectors():
                vec[0].fill_(1.0)
            for mat in self.g_delta.matrices():
                mat[0].fill_(1.0)
            self.g_delta.basis.add_(FREE_SPACE_RAW / 3.0)
        return self


def em_from_raw(raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Map raw channels ``(a, b, c, d)`` to complex ``(mu, eps)``.

    ``mu = 1 + softplus(a) - j softplus(b)``, ``eps = 1 + softplus(c) - j softplus(d)``.
    """
    sp = F.softplus(raw)
    mu = torch.complex(1.0 + sp[..., 0], -sp[..., 1])
    eps = torch.complex(1.0 + sp[..., 2], -sp[..., 3])
    return mu, eps


def em_params_at(pair: FieldPair, bounds: SceneBounds, p):
    """Complex ``(mu, eps)`` tensors at one or many positions."""
    return em_from_raw(query(pair.g_delta, bounds, p))


def features_at(pair: FieldPair, bounds: SceneBounds, p) -> torch.Tensor:
    return query(pair.g_radiance, bounds, p)
