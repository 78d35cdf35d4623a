"""Radiance decoder: latent voxel feature plus conditioning -> complex radiance."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError


@dataclass(frozen=True)
class DecoderConfig:
    hidden_width: int = 64
    n_layers: int = 2
    pe_frequencies: int = 4
    pe_wavelength: int = 2
    wavelength_ref: float = 0.1

    def __post_init__(self):
        if self.hidden_width < 8:
            raise ConfigError("hidden width must be >= 8")
        if self.n_layers < 1:
            raise ConfigError("need at least one hidden layer")
        if self.pe_frequencies < 0 or self.pe_wavelength < 0:
            raise ConfigError("positional-encoding octaves must be >= 0")
        if self.wavelength_ref <= 0 or self.wavelength_ref == 1.0:
            raise ConfigError("reference wavelength must be positive and != 1 m")


def positional_encode(x: torch.Tensor, n_freq: int) -> torch.Tensor:
    """``[x, sin(2^k pi x), cos(2^k pi x) for k < n_freq]`` along the last axis.

    Output width is ``dim * (1 + 2 * n_freq)``; the ordering is
    ``x, sin_0, cos_0, sin_1, cos_1, ...`` with each block ``dim`` wide.
    """
    if n_freq < 0:
        raise ValueError("n_freq must be >= 0")
    parts = [x]
    for k in range(n_freq):
        arg = (2.0**k * math.pi) * x
        parts += [torch.sin(arg), torch.cos(arg)]
    return torch.cat(parts, dim=-1)


def encoded_width(dim: int, n_freq: int) -> int:
    return dim * (1 + 2 * n_freq)


class RadianceDecoder(nn.Module):
    """ReLU MLP with a linear two-unit head read as ``(Re R, Im R)``.

    The first layer acts on the concatenation
    ``[feature, PE(direction), PE(grid position), PE(log-wavelength)]``.
    Its weight is kept as one matrix but applied blockwise in
    :meth:`first_layer_terms`, which lets the renderer evaluate each block
    once at its natural granularity (voxel, direction, grid, cell).
    """

    def __init__(self, feature_dim: int, cfg: DecoderConfig = DecoderConfig(), dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        self.feature_dim = feature_dim
        f = cfg.pe_frequencies
        self.widths = (
            feature_dim,
            encoded_width(3, f),
            encoded_width(3, f),
            encoded_width(1, cfg.pe_wavelength),
        )
        dims = [sum(self.widths)] + [cfg.hidden_width] * cfg.n_layers + [2]
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=dtype) for a, b in zip(dims[:-1], dims[1:])
        )

    @property
    def input_dim(self) -> int:
        return sum(self.widths)

    def initialize(self, generator: torch.Generator):
        """Uniform fan-in weights ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, zero biases."""
        with torch.no_grad():
            for layer in self.layers:
                bound = 1.0 / math.sqrt(layer.in_features)
                w = torch.rand(layer.weight.shape, generator=generator, dtype=torch.float64)
                layer.weight.copy_((2 * w - 1) * bound)
                layer.bias.zero_()
        return self

    def encode_wavelength(self, wavelength) -> torch.Tensor:
        lam = torch.as_tensor(wavelength, dtype=self.layers[0].weight.dtype).reshape(-1, 1)
        if bool((lam <= 0).any()):
            raise ValueError("wavelength must be positive")
        return positional_encode(torch.log(lam) / math.log(self.cfg.wavelength_ref), self.cfg.pe_wavelength)

    def first_layer_terms(self, feature, direction, grid_pos, wavelength):
        """Pre-activation contributions of each input block to layer one.

        Returns ``(feature_term, direction_term, grid_term, wavelength_term)``,
        each with the leading shape of its input and the bias folded into the
        wavelength term. Their broadcast sum equals ``layer1(concat(...))``.
        """
        w = self.layers[0].weight
        c = torch.cumsum(torch.tensor((0,) + self.widths), 0).tolist()
        f = self.cfg.pe_frequencies
        t_feat = feature @ w[:, c[0] : c[1]].T
        t_dir = positional_encode(direction, f) @ w[:, c[1] : c[2]].T
        t_grid = positional_encode(grid_pos, f) @ w[:, c[2] : c[3]].T
        t_lam = self.encode_wavelength(wavelength) @ w[:, c[3] : c[4]].T + self.layers[0].bias
        return t_feat, t_dir, t_grid, t_lam

    def head(self, pre_activation: torch.Tensor) -> torch.Tensor:
        """Run the network from the first pre-activation to a complex output."""
        h = torch.relu(pre_activation)
        for layer in self.layers[1:-1]:
            h = torch.relu(layer(h))
        out = self.layers[-1](h)
        return torch.complex(out[..., 0], out[..., 1])

    def forward(self, feature, direction, grid_pos, wavelength) -> torch.Tensor:
        """Complex radiance for broadcast-compatible batched inputs.

        ``grid_pos`` must already be normalized to the unit cube.
        """
        lam = self.encode_wavelength(wavelength)
        f = self.cfg.pe_frequencies
        x = [feature, positional_encode(direction, f), positional_encode(grid_pos, f)]
        shape = torch.broadcast_shapes(*(t.shape[:-1] for t in x))
        x = [t.expand(*shape, t.shape[-1]) for t in x]
        x.append(lam.reshape(*([1] * len(shape)), -1).expand(*shape, lam.shape[-1]))
        h = self.layers[0](torch.cat(x, dim=-1))
        return self.head(h)


def decode_radiance(decoder: RadianceDecoder, feature, direction, grid_pos, wavelength) -> complex:
    """Single-sample convenience wrapper around :class:`RadianceDecoder`."""
    dt = decoder.layers[0].weight.dtype
    out = decoder(
        torch.as_tensor(feature, dtype=dt).reshape(1, -1),
        torch.as_tensor(direction, dtype=dt).reshape(1, 3),
        torch.as_tensor(grid_pos, dtype=dt).reshape(1, 3),
        wavelength,
    )
    return complex(out[0].detach())
