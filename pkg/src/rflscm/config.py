"""Experiment configuration files (INI with sections).

Example::

    [scene]
    min_corner = -100, -100, 0
    max_corner = 100, 100, 40
    resolution = 32, 32, 8
    n_grids = 100

    [angular]
    n_tilt = 8
    n_azimuth = 16
    tilt_range = 90, 135
    azimuth_range = -60, 60

    [cell:c1]
    position = -90, 0, 25
    azimuth_deg = 0
    wavelengths = 0.1428

    [box:b1]
    min_corner = -20, 30, 0
    max_corner = 0, 50, 20
    epsilon = 5-0.5j

Every section other than ``scene``, ``angular`` and ``cell:*`` is optional.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .decoder import DecoderConfig
from .errors import ConfigError
from .fdam import EmParams
from .geometry import AngularGrid, PointCloudConfig, SceneBounds
from .renderer import RayConfig
from .sensing import AntennaArray
from .trainer import HiTamConfig, LossConfig, ModelConfig, TrainConfig
from .wnomp import WnompConfig


@dataclass(frozen=True)
class Box:
    """Axis-aligned building with homogeneous EM parameters."""

    box_id: str
    min_corner: tuple[float, float, float]
    max_corner: tuple[float, float, float]
    em: EmParams = EmParams(1 + 0j, 5 - 0.5j)

    def __post_init__(self):
        lo = tuple(float(v) for v in self.min_corner)
        hi = tuple(float(v) for v in self.max_corner)
        if len(lo) != 3 or len(hi) != 3 or not all(a < b for a, b in zip(lo, hi)):
            raise ConfigError(f"box {self.box_id}: min corner must be below max corner")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)


@dataclass(frozen=True)
class CellSpec:
    cell_id: str
    position: tuple[float, float, float]
    array: AntennaArray
    wavelengths: tuple[float, ...] = (0.1428,)
    grid: AngularGrid | None = None  # overrides the shared [angular] grid


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_grids: int = 100
    grid_spacing: float = 10.0
    grid_height: float = 1.5
    grid_region: tuple[float, float, float, float] | None = None  # x0, x1, y0, y1
    surface_points_per_m2: float = 0.5
    ground_points_per_m2: float = 0.0
    n_random_boxes: int = 0
    random_box_size: tuple[float, float] = (10.0, 30.0)
    random_box_height: tuple[float, float] = (10.0, 30.0)


@dataclass(frozen=True)
class SynthConfig:
    planting: str = "geometric-paths"  # or "oracle-field"
    max_paths: int = 3
    blocking: bool = True
    r_th_dbm: float = -120.0
    mask_quantile: float = 0.0  # raise r_th so this fraction of round-1 beams is unreported
    codebook_h: int = 8
    codebook_v: int = 1
    tx_power_dbm: float = 30.0
    adjust: str = "shift"  # "shift" or "rotation"
    adjust_shift: float = 0.5
    adjust_rotation_deg: float = 0.0
    v_targets: tuple[float, ...] | None = None
    adjust_v_targets: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.planting not in ("geometric-paths", "oracle-field"):
            raise ConfigError(f"unknown planting {self.planting!r}")
        if self.adjust not in ("shift", "rotation"):
            raise ConfigError(f"unknown codebook adjustment {self.adjust!r}")
        if self.max_paths < 1:
            raise ConfigError("max_paths must be >= 1")
        if not 0.0 <= self.mask_quantile < 1.0:
            raise ConfigError("mask_quantile must lie in [0, 1)")


@dataclass(frozen=True)
class SplitConfig:
    mode: str = "by-codebook"  # by-codebook | by-fraction | by-frequency
    train_codebooks: tuple[str, ...] = ("ssb",)
    fraction: float = 0.5
    primary_freq_hz: float | None = None
    test_fraction: float = 0.7
    include_other_bands: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    bounds: SceneBounds
    grid: AngularGrid
    cells: tuple[CellSpec, ...]
    boxes: tuple[Box, ...] = ()
    scene: SceneSpec = SceneSpec()
    synth: SynthConfig = SynthConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    hitam: HiTamConfig = HiTamConfig()
    loss: LossConfig = LossConfig()
    wnomp: WnompConfig = WnompConfig()
    pointcloud: PointCloudConfig = PointCloudConfig()
    use_pointcloud: bool = True
    ray: RayConfig = RayConfig()
    split: SplitConfig = SplitConfig()
    paths: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict, compare=False)

    def with_seed(self, seed: int) -> ExperimentConfig:
        return replace(self, scene=replace(self.scene, seed=seed), train=replace(self.train, seed=seed))

    def digest(self) -> str:
        blob = json.dumps(self.source, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------- parsing helpers


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(";", ",").split(",") if t.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _complex(text: str) -> complex:
    return complex(text.replace(" ", ""))


def _coerce(kind, text: str):
    # dataclass annotations are strings under postponed evaluation
    kind = str(kind)
    if kind.startswith("tuple[str"):
        return tuple(t.strip() for t in text.split(",") if t.strip())
    if kind.startswith("tuple"):
        return _floats(text)
    if kind.startswith("bool"):
        return _bool(text)
    if kind.startswith("int"):
        return int(text)
    if kind.startswith("float"):
        return None if text.strip().lower() == "none" else float(text)
    return text.strip()


def _section(cp, name: str, cls, base=None, rename: dict | None = None):
    """Build dataclass ``cls`` from ``[name]``, overriding the fields of ``base``."""
    base = base if base is not None else cls()
    if not cp.has_section(name):
        return base
    rename = rename or {}
    kinds = {f.name: f.type for f in fields(cls)}
    values = {}
    for key, text in cp.items(name):
        attr = rename.get(key, key)
        if attr not in kinds:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        try:
            values[attr] = _coerce(kinds[attr], text)
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key}: {exc}") from exc
    try:
        return replace(base, **values)
    except TypeError as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def _get(cp, section, key, conv=str, default=None):
    if not cp.has_option(section, key):
        if default is None:
            raise ConfigError(f"[{section}] missing key {key!r}")
        return default
    try:
        return conv(cp.get(section, key))
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def parse_config(text: str, origin: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        cp.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}") from exc
    for required in ("scene", "angular"):
        if not cp.has_section(required):
            raise ConfigError(f"{origin}: missing [{required}] section")

    bounds = SceneBounds(
        _get(cp, "scene", "min_corner", _floats),
        _get(cp, "scene", "max_corner", _floats),
        tuple(int(v) for v in _get(cp, "scene", "resolution", _floats)),
    )
    scene_keys = {"min_corner", "max_corner", "resolution"}
    cp_scene = configparser.ConfigParser(interpolation=None)
    cp_scene.add_section("scene")
    for k, v in cp.items("scene"):
        if k not in scene_keys:
            cp_scene.set("scene", k, v)
    scene = _section(cp_scene, "scene", SceneSpec)

    grid = AngularGrid(
        _get(cp, "angular", "n_tilt", int),
        _get(cp, "angular", "n_azimuth", int),
        _get(cp, "angular", "tilt_range", _floats, (0.0, 180.0)),
        _get(cp, "angular", "azimuth_range", _floats, (0.0, 360.0)),
    )

    cells = []
    for sec in cp.sections():
        if not sec.startswith("cell:"):
            continue
        array = AntennaArray(
            _get(cp, sec, "n_x", int, 8), _get(cp, sec, "n_y", int, 2),
            _get(cp, sec, "element_spacing", float, 0.5),
            _get(cp, sec, "azimuth_deg", float, 0.0), _get(cp, sec, "downtilt_deg", float, 0.0),
            _get(cp, sec, "roll_deg", float, 0.0),
        )
        pos = _get(cp, sec, "position", _floats)
        if len(pos) != 3:
            raise ConfigError(f"[{sec}] position needs three coordinates")
        if not bool(bounds.contains(pos)):
            raise ConfigError(f"[{sec}] position {pos} lies outside the scene")
        own_grid = None
        if cp.has_option(sec, "tilt_range") or cp.has_option(sec, "azimuth_range"):
            own_grid = AngularGrid(grid.n_tilt, grid.n_azimuth,
                                   _get(cp, sec, "tilt_range", _floats, grid.tilt_range),
                                   _get(cp, sec, "azimuth_range", _floats, grid.azimuth_range))
        cells.append(CellSpec(sec[5:], pos, array, _get(cp, sec, "wavelengths", _floats, (0.1428,)), own_grid))
    if not cells:
        raise ConfigError(f"{origin}: at least one [cell:*] section is required")

    boxes = []
    for sec in cp.sections():
        if sec.startswith("box:"):
            em = EmParams(_get(cp, sec, "mu", _complex, 1 + 0j), _get(cp, sec, "epsilon", _complex, 5 - 0.5j))
            boxes.append(Box(sec[4:], _get(cp, sec, "min_corner", _floats), _get(cp, sec, "max_corner", _floats), em))

    model = _section(cp, "model", ModelConfig, rename={})
    if cp.has_section("decoder"):
        model = replace(model, decoder=_section(cp, "decoder", DecoderConfig))
    hitam = _section(cp, "hitam", HiTamConfig)
    pc_enabled = _get(cp, "pointcloud", "enabled", _bool, True) if cp.has_section("pointcloud") else True
    cp_pc = configparser.ConfigParser(interpolation=None)
    cp_pc.add_section("pointcloud")
    if cp.has_section("pointcloud"):
        for k, v in cp.items("pointcloud"):
            if k != "enabled":
                cp_pc.set("pointcloud", k, v)
    ray = _section(cp, "ray", RayConfig)

    return ExperimentConfig(
        bounds=bounds, grid=grid, cells=tuple(cells), boxes=tuple(boxes), scene=scene,
        synth=_section(cp, "synth", SynthConfig),
        model=model,
        train=_section(cp, "train", TrainConfig),
        hitam=hitam,
        loss=_section(cp, "loss", LossConfig),
        wnomp=_section(cp, "wnomp", WnompConfig),
        pointcloud=_section(cp_pc, "pointcloud", PointCloudConfig),
        use_pointcloud=pc_enabled,
        ray=ray,
        split=_section(cp, "split", SplitConfig),
        paths=dict(cp.items("paths")) if cp.has_section("paths") else {},
        source={s: dict(cp.items(s)) for s in cp.sections()},
    )


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    return parse_config(p.read_text(), str(p))
