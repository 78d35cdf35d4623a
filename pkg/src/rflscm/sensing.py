"""Beam sensing matrices, the linear RSRP forward map and measurement files."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .geometry import AngularGrid, direction_from_angles

DEFAULT_R_TH_MW = 1e-12  # -120 dBm


def mw_to_dbm(mw):
    x = np.asarray(mw, dtype=float)
    if np.any(x <= 0):
        raise ValueError("linear power must be positive to convert to dBm")
    out = 10.0 * np.log10(x)
    return float(out) if out.ndim == 0 else out


def dbm_to_mw(dbm):
    out = 10.0 ** (np.asarray(dbm, dtype=float) / 10.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class AntennaArray:
    """Uniform rectangular array of ``n_x * n_y`` elements.

    Orientation is given by the boresight azimuth, its downtilt below the
    horizon and a roll about boresight (all degrees). The element x-axis is
    horizontal (to the left of boresight before roll), the y-axis completes a
    right-handed frame with boresight and points up for zero downtilt.
    """

    n_x: int
    n_y: int
    element_spacing: float = 0.5
    azimuth_deg: float = 0.0
    downtilt_deg: float = 0.0
    roll_deg: float = 0.0

    def __post_init__(self):
        if self.n_x < 1 or self.n_y < 1:
            raise ConfigError("array needs at least one element per axis")
        if self.element_spacing <= 0:
            raise ConfigError("element spacing must be positive")

    @property
    def n_elements(self) -> int:
        return self.n_x * self.n_y

    def boresight(self) -> np.ndarray:
        return direction_from_angles(90.0 + self.downtilt_deg, self.azimuth_deg)

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        b = self.boresight()
        a = math.radians(self.azimuth_deg)
        ex = np.array([-math.sin(a), math.cos(a), 0.0])
        ey = np.cross(b, ex)
        r = math.radians(self.roll_deg)
        return math.cos(r) * ex + math.sin(r) * ey, -math.sin(r) * ex + math.cos(r) * ey

    def rotated(self, azimuth_deg: float) -> AntennaArray:
        """The same array physically turned about the vertical axis."""
        return AntennaArray(self.n_x, self.n_y, self.element_spacing,
                            self.azimuth_deg + azimuth_deg, self.downtilt_deg, self.roll_deg)

    def element_phase_offsets(self):
        """Element (x, y) index grids flattened row-major with x fastest."""
        y, x = np.meshgrid(np.arange(self.n_y), np.arange(self.n_x), indexing="ij")
        return x.ravel(), y.ravel()


def steering_vectors(array: AntennaArray, directions) -> np.ndarray:
    """Array response for unit directions ``(..., 3)``, returns ``(..., N_T)``.

    Element ``(x, y)`` has phase ``-2 pi * spacing * (x u + y v)`` where
    ``(u, v)`` are the direction's components on the element axes. The
    wavelength cancels because the spacing is expressed in wavelengths.
    """
    d = np.asarray(directions, dtype=float)
    ex, ey = array.axes()
    u, v = d @ ex, d @ ey
    xi, yi = array.element_phase_offsets()
    phase = -2.0 * np.pi * array.element_spacing * (u[..., None] * xi + v[..., None] * yi)
    return np.exp(1j * phase)


def steering_vector(array: AntennaArray, wavelength: float, direction) -> np.ndarray:
    if wavelength <= 0:
        raise ValueError("wavelength must be positive")
    return steering_vectors(array, direction)


@dataclass(frozen=True, eq=False)
class BeamCodebook:
    """``M`` complex weight matrices over the array plus the transmit power.

    ``weights`` has shape ``(M, n_y, n_x)`` so that flattening a beam gives
    the row-major, x-fastest element order.
    """

    codebook_id: str
    n_x: int
    n_y: int
    weights: np.ndarray
    tx_power_dbm: float = 30.0
    rotation_deg: float = 0.0
    unit_norm: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.complex128)
        if w.ndim == 2:
            w = w.reshape(-1, self.n_y, self.n_x)
        if w.ndim != 3 or w.shape[1:] != (self.n_y, self.n_x) or w.shape[0] < 1:
            raise ConfigError(f"weights shape {w.shape} does not match a {self.n_x}x{self.n_y} array")
        if not np.all(np.isfinite(w)):
            raise ConfigError("codebook weights must be finite")
        if self.unit_norm:
            norms = np.linalg.norm(w.reshape(len(w), -1), axis=1)
            if not np.allclose(norms, 1.0, atol=1e-9):
                raise ConfigError("unit-norm codebook has beams with norm != 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n_beams(self) -> int:
        return self.weights.shape[0]

    @property
    def tx_power_mw(self) -> float:
        return dbm_to_mw(self.tx_power_dbm)

    def flat(self) -> np.ndarray:
        return self.weights.reshape(self.n_beams, -1)

    def beam_ids(self) -> list[str]:
        return [f"{self.codebook_id}:{m}" for m in range(self.n_beams)]


def dft_codebook(array: AntennaArray, codebook_id: str, n_h: int, n_v: int, *, u_shift: float = 0.0,
                 v_targets=None, tx_power_dbm: float = 30.0, rotation_deg: float = 0.0) -> BeamCodebook:
    """Unit-norm beams steered on a grid of array-plane sines.

    Horizontal targets are ``u_k = (2k + 1 - n_h) / n_h + u_shift / n_h``
    spread across ``[-1, 1]``; vertical targets default to evenly spread
    values below boresight.
    """
    u = (2 * np.arange(n_h) + 1 - n_h) / n_h + u_shift / n_h
    v = np.asarray(v_targets if v_targets is not None else -(np.arange(n_v) + 0.5) / (2 * n_v), float)
    xi, yi = array.element_phase_offsets()
    beams = []
    for vv in v:
        for uu in u:
            phase = -2.0 * np.pi * array.element_spacing * (uu * xi + vv * yi)
            beams.append(np.exp(-1j * phase) / math.sqrt(array.n_elements))
    return BeamCodebook(codebook_id, array.n_x, array.n_y, np.array(beams), tx_power_dbm,
                        rotation_deg, unit_norm=True)


@dataclass(frozen=True, eq=False)
class SensingMatrix:
    entries: np.ndarray
    cell_id: str = ""
    wavelength: float = 0.0
    codebook_id: str = ""

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=float)
        if a.ndim != 2 or np.any(a < 0):
            raise ConfigError("sensing matrix must be a non-negative 2D array")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def shape(self):
        return self.entries.shape


def build_sensing_matrix(array: AntennaArray, codebook: BeamCodebook, grid: AngularGrid,
                         wavelength: float, cell_id: str = "") -> SensingMatrix:
    """``A[m, n] = P_t |<W_m, a(w_n)>|^2`` with the codebook's rotation applied."""
    if (codebook.n_x, codebook.n_y) != (array.n_x, array.n_y):
        raise ConfigError(
            f"codebook {codebook.codebook_id} is {codebook.n_x}x{codebook.n_y}, "
            f"array is {array.n_x}x{array.n_y}"
        )
    physical = array.rotated(codebook.rotation_deg) if codebook.rotation_deg else array
    a = steering_vector(physical, wavelength, grid.directions())  # (N, N_T)
    gain = codebook.flat() @ a.T  # (M, N)
    return SensingMatrix(codebook.tx_power_mw * np.abs(gain) ** 2, cell_id, wavelength, codebook.codebook_id)


def forward_rsrp(A: SensingMatrix | np.ndarray, x) -> np.ndarray:
    a = A.entries if isinstance(A, SensingMatrix) else np.asarray(A, dtype=float)
    x = np.asarray(x, dtype=float)
    if a.shape[1] != x.shape[-1]:
        raise ConfigError(f"sensing matrix has {a.shape[1]} columns, APS has {x.shape[-1]} bins")
    return x @ a.T


def apply_reporting_threshold(r, r_th: float) -> np.ndarray:
    """Zero out (mark unreported) every entry strictly below ``r_th``."""
    if r_th <= 0:
        raise ValueError("reporting threshold must be positive")
    r = np.asarray(r, dtype=float)
    return np.where(r < r_th, 0.0, r)


# ---------------------------------------------------------------- file formats

CODEBOOK_MAGIC = "# rflscm codebook v1"


def write_codebook(path, cb: BeamCodebook) -> None:
    lines = [
        CODEBOOK_MAGIC,
        f"id = {cb.codebook_id}",
        f"n_x = {cb.n_x}",
        f"n_y = {cb.n_y}",
        f"tx_power_dbm = {float(cb.tx_power_dbm)!r}",
        f"rotation_deg = {float(cb.rotation_deg)!r}",
        f"beams = {cb.n_beams}",
    ]
    for beam in cb.flat():
        lines.append(" ".join(f"{float(w.real)!r},{float(w.imag)!r}" for w in beam))
    Path(path).write_text("\n".join(lines) + "\n")


def read_codebook(path) -> BeamCodebook:
    """Parse the text codebook format written by :func:`write_codebook`.

    Header lines are ``key = value``; each following non-comment line is one
    beam of ``re,im`` tokens in row-major, x-fastest element order.
    """
    header: dict[str, str] = {}
    beams = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" in line and not beams:
            key, value = (s.strip() for s in line.split("=", 1))
            header[key] = value
            continue
        try:
            beams.append([complex(float(a), float(b)) for a, b in (tok.split(",") for tok in line.split())])
        except ValueError as exc:
            raise ConfigError(f"{path}: malformed beam row {line!r}") from exc
    try:
        n_x, n_y = int(header["n_x"]), int(header["n_y"])
        cb_id = header.get("id", Path(path).stem)
        power = float(header["tx_power_dbm"])
    except KeyError as exc:
        raise ConfigError(f"{path}: missing header key {exc}") from exc
    if "beams" in header and int(header["beams"]) != len(beams):
        raise ConfigError(f"{path}: header declares {header['beams']} beams, found {len(beams)}")
    if any(len(b) != n_x * n_y for b in beams):
        raise ConfigError(f"{path}: every beam needs {n_x * n_y} weights")
    return BeamCodebook(cb_id, n_x, n_y, np.array(beams), power, float(header.get("rotation_deg", 0.0)))


@dataclass(frozen=True)
class MeasurementRecord:
    cell_id: str
    grid_id: str
    position: tuple[float, float, float]
    freq_hz: float
    beam_id: str
    rsrp_mw: float = 0.0  # 0 means unreported

    def __post_init__(self):
        if self.freq_hz <= 0:
            raise ConfigError("frequency must be positive")
        if self.rsrp_mw < 0:
            raise ConfigError("RSRP cannot be negative")

    @property
    def reported(self) -> bool:
        return self.rsrp_mw > 0

    @property
    def codebook_id(self) -> str:
        return self.beam_id.rsplit(":", 1)[0]

    @property
    def beam_index(self) -> int:
        return int(self.beam_id.rsplit(":", 1)[1])


MEASUREMENT_HEADER = ["cell_id", "grid_id", "x", "y", "z", "freq_hz", "beam_id", "rsrp_dbm"]


def write_measurements(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MEASUREMENT_HEADER)
        for r in records:
            dbm = repr(float(mw_to_dbm(r.rsrp_mw))) if r.reported else ""
            w.writerow([r.cell_id, r.grid_id, *(repr(float(v)) for v in r.position),
                        repr(float(r.freq_hz)), r.beam_id, dbm])


def read_measurements(path) -> list[MeasurementRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MEASUREMENT_HEADER:
            raise ConfigError(f"{path}: expected header {','.join(MEASUREMENT_HEADER)}")
        for row in reader:
            dbm = row["rsrp_dbm"].strip()
            out.append(MeasurementRecord(
                row["cell_id"], row["grid_id"],
                (float(row["x"]), float(row["y"]), float(row["z"])),
                float(row["freq_hz"]), row["beam_id"],
                dbm_to_mw(float(dbm)) if dbm else 0.0,
            ))
    return out


@dataclass
class GridMeasurement:
    """All beams of one codebook observed at one (cell, frequency, grid)."""

    cell_id: str
    freq_hz: float
    grid_id: str
    position: np.ndarray
    codebook_id: str
    rsrp_mw: np.ndarray = field(repr=False)

    @property
    def key(self):
        return (self.cell_id, self.freq_hz, self.grid_id)


def group_measurements(records, codebook_sizes: dict[str, int] | None = None) -> list[GridMeasurement]:
    """Collect records into per-(cell, freq, grid, codebook) RSRP vectors.

    Beams absent from the records are treated as unreported (zero). Order
    follows first appearance, so grouping is deterministic.
    """
    groups: dict[tuple, dict] = {}
    for r in records:
        key = (r.cell_id, float(r.freq_hz), r.grid_id, r.codebook_id)
        g = groups.setdefault(key, {"pos": np.asarray(r.position, float), "beams": {}})
        g["beams"][r.beam_index] = r.rsrp_mw
    out = []
    for (cell, freq, grid, cb), g in groups.items():
        m = (codebook_sizes or {}).get(cb, max(g["beams"]) + 1)
        r = np.zeros(m)
        for i, v in g["beams"].items():
            if i >= m:
                raise ConfigError(f"beam {cb}:{i} outside codebook of {m} beams")
            r[i] = v
        out.append(GridMeasurement(cell, freq, grid, g["pos"], cb, r))
    return out
