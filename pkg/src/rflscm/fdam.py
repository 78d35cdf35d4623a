"""Frequency-dependent voxel attenuation from complex EM parameters.

Phasors follow the ``exp(+j w t)`` convention, so lossy media carry
non-positive imaginary parts in both permeability and permittivity and the
propagation constant is taken on the branch with ``Im(sqrt(eps*mu)) <= 0``.

The tensor functions (suffix ``_t``) operate elementwise on complex torch
tensors and are differentiable; the :class:`EmParams` wrappers are the
scalar convenience API.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import NonconvergentEtalonError, SingularInterfaceError, SingularMediumError

# |Gamma_q Gamma_q+1 T^2| above this is treated as non-convergent
CONVERGENCE_LIMIT = 1.0 - 1e-6


@dataclass(frozen=True)
class EmParams:
    """Relative permeability ``mu`` and permittivity ``epsilon`` of a voxel."""

    mu: complex = 1 + 0j
    epsilon: complex = 1 + 0j

    def __post_init__(self):
        mu, eps = complex(self.mu), complex(self.epsilon)
        if mu.real < 1 or eps.real < 1:
            raise ValueError(f"real parts must be >= 1 (mu={mu}, eps={eps})")
        if mu.imag > 0 or eps.imag > 0:
            raise ValueError(f"imaginary parts must be <= 0 (mu={mu}, eps={eps})")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "epsilon", eps)


FREE_SPACE = EmParams(1 + 0j, 1 + 0j)


@dataclass(frozen=True)
class AttenuationSample:
    delta: complex


def _c(value) -> torch.Tensor:
    return torch.as_tensor(value, dtype=torch.complex128)


def impedance_t(mu: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Normalized characteristic impedance ``sqrt(mu / eps)`` (principal root)."""
    if bool((eps == 0).any()):
        raise SingularMediumError("permittivity is zero")
    return torch.sqrt(mu / eps)


def reflection_t(z_prev: torch.Tensor, z_curr: torch.Tensor) -> torch.Tensor:
    total = z_curr + z_prev
    if bool((total.abs() < 1e-12).any()):
        raise SingularInterfaceError("impedance sum vanishes at an interface")
    return (z_curr - z_prev) / total


def refractive_index_t(mu: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """``sqrt(eps * mu)`` on the branch with non-positive imaginary part."""
    n = torch.sqrt(eps * mu)
    return torch.where(n.imag > 0, -n, n)


def propagation_t(mu, eps, wavelength, thickness) -> torch.Tensor:
    """Internal propagation factor ``exp(-j 2pi/lambda sqrt(eps mu) d)``."""
    k = (2.0 * math.pi) * thickness / wavelength
    return torch.exp(-1j * k * refractive_index_t(mu, eps))


def etalon_terms(mu_prev, eps_prev, mu, eps, mu_next, eps_next, wavelength, thickness):
    """Entry reflection, exit reflection and propagation factor of a voxel."""
    z_prev = impedance_t(mu_prev, eps_prev)
    z = impedance_t(mu, eps)
    z_next = impedance_t(mu_next, eps_next)
    gamma_in = reflection_t(z_prev, z)
    gamma_out = reflection_t(z, z_next)
    t = propagation_t(mu, eps, wavelength, thickness)
    return gamma_in, gamma_out, t


def fdam_t(mu_prev, eps_prev, mu, eps, mu_next, eps_next, wavelength, thickness) -> torch.Tensor:
    """Closed-form expected attenuation of a voxel between two neighbours.

    ``delta = (1 - G_q) T / (1 + G_q G_q+1 T^2)`` where ``G_q`` is the
    reflection entering the voxel and ``G_q+1`` the one leaving it. Raises
    :class:`NonconvergentEtalonError` when the reflection series diverges.
    """
    g_in, g_out, t = etalon_terms(mu_prev, eps_prev, mu, eps, mu_next, eps_next, wavelength, thickness)
    loop = g_in * g_out * t * t
    worst = float(loop.detach().abs().max()) if loop.numel() else 0.0
    if worst >= CONVERGENCE_LIMIT:
        raise NonconvergentEtalonError(worst)
    return (1.0 - g_in) * t / (1.0 + loop)


def fdam_log_t(mu_prev, eps_prev, mu, eps, mu_next, eps_next, wavelength, thickness) -> torch.Tensor:
    """Principal-branch-free ``log delta`` computed term by term.

    Equal to ``log(fdam_t(...))`` up to multiples of ``2 pi j`` in the
    imaginary part. The propagation phase enters as ``-j k n d`` directly, so
    strongly absorbing voxels give large negative real parts instead of an
    underflowing ``delta`` and a non-finite gradient.
    """
    g_in, g_out, t = etalon_terms(mu_prev, eps_prev, mu, eps, mu_next, eps_next, wavelength, thickness)
    loop = g_in * g_out * t * t
    worst = float(loop.detach().abs().max()) if loop.numel() else 0.0
    if worst >= CONVERGENCE_LIMIT:
        raise NonconvergentEtalonError(worst)
    k = (2.0 * math.pi) * thickness / wavelength
    return torch.log(1.0 - g_in) - 1j * k * refractive_index_t(mu, eps) - torch.log(1.0 + loop)


def impedance(params: EmParams) -> complex:
    return complex(impedance_t(_c(params.mu), _c(params.epsilon)))


def reflection_coefficient(prev: EmParams, curr: EmParams) -> complex:
    """Normal-incidence reflection ``(Z_curr - Z_prev) / (Z_curr + Z_prev)``."""
    return complex(
        reflection_t(impedance_t(_c(prev.mu), _c(prev.epsilon)), impedance_t(_c(curr.mu), _c(curr.epsilon)))
    )


def propagation_factor(params: EmParams, wavelength: float, thickness: float) -> complex:
    if wavelength <= 0 or thickness <= 0:
        raise ValueError("wavelength and thickness must be positive")
    return complex(propagation_t(_c(params.mu), _c(params.epsilon), wavelength, thickness))


def fdam(prev: EmParams, curr: EmParams, nxt: EmParams, wavelength: float, thickness: float) -> AttenuationSample:
    if wavelength <= 0 or thickness <= 0:
        raise ValueError("wavelength and thickness must be positive")
    args = [_c(v) for v in (prev.mu, prev.epsilon, curr.mu, curr.epsilon, nxt.mu, nxt.epsilon)]
    return AttenuationSample(complex(fdam_t(*args, wavelength, thickness)))


def fdam_series_oracle(prev, curr, nxt, wavelength, thickness, n_terms: int):
    """Truncated multiple-reflection sum, evaluated term by term in numpy.

    Reference implementation for tests. Accepts :class:`EmParams` or
    ``(mu, eps)`` pairs of complex numpy arrays and sums
    ``(1 - G_q) T * sum_{k < n_terms} (-G_q G_q+1 T^2)^k`` with an explicit loop.
    """
    if n_terms < 1:
        raise ValueError("n_terms must be >= 1")

    def unpack(p):
        if isinstance(p, EmParams):
            return np.complex128(p.mu), np.complex128(p.epsilon)
        mu, eps = p
        return np.asarray(mu, dtype=np.complex128), np.asarray(eps, dtype=np.complex128)

    (mp, ep), (mc, ec), (mn, en) = unpack(prev), unpack(curr), unpack(nxt)
    zp, zc, zn = np.sqrt(mp / ep), np.sqrt(mc / ec), np.sqrt(mn / en)
    g_in = (zc - zp) / (zc + zp)
    g_out = (zn - zc) / (zn + zc)
    n = np.sqrt(ec * mc)
    n = np.where(n.imag > 0, -n, n)
    t = np.exp(-1j * 2.0 * np.pi / wavelength * n * thickness)
    ratio = -g_in * g_out * t * t
    term = (1.0 - g_in) * t
    total = np.zeros_like(term)
    for _ in range(n_terms):
        total = total + term
        term = term * ratio
    return complex(total) if np.ndim(total) == 0 else total
