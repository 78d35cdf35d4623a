"""Experiment protocols: codebook / rotation adjustment, multi-band fusion, ablations.

Every arm of a protocol shares the scene, the data split and the training
seed; only the factor under test changes. Results are tidy rows
``protocol,arm,param,mae_db,wall_s``.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig
from .data import (ADJUSTED_CODEBOOK, TRAIN_CODEBOOK, SynthResult, make_gate, observations_from_records,
                   split_dataset, synthesize_measurements)
from .errors import ConfigError, RflscmError
from .evaluation import mae_report
from .geometry import AngularGrid
from .sensing import AntennaArray, BeamCodebook, build_sensing_matrix
from .trainer import ModelPair, PowerScale, RenderSetup, RfLscm, TrainResult, train
from .wnomp import wnomp_batch

log = logging.getLogger(__name__)

PROTOCOLS = ("codebook-adjust", "rotation-adjust", "multifreq-sweep", "ablation")
ABLATIONS = ("hitam", "alpha_p", "pointcloud")
METRICS_HEADER = ["protocol", "arm", "param", "mae_db", "wall_s"]


@dataclass(frozen=True)
class ProtocolSpec:
    protocol: str = "codebook-adjust"
    rotation_deg: float | None = None  # defaults to one azimuth bin
    fractions: tuple[float, ...] = (0.03, 0.10, 0.30)
    ablate: tuple[str, ...] = ("hitam",)
    alpha_p_grid: tuple[float, ...] = (0.0, 0.25, 0.5, 1.0)
    train_fraction: float = 1.0  # share of training links kept (point-cloud ablation uses 0.1)
    include_wnomp: bool = True

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        bad = [a for a in self.ablate if a not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablation flags {bad}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must lie in (0, 1]")
        if any(not 0.0 < p < 1.0 for p in self.fractions):
            raise ConfigError("fractions must lie in (0, 1)")


@dataclass
class MetricRow:
    protocol: str
    arm: str
    param: str
    mae_db: float
    wall_s: float


@dataclass
class ArmOutcome:
    model: RfLscm
    result: TrainResult
    mae_db: float
    predictions: list


# ---------------------------------------------------------------- shared steps


def build_model(cfg: ExperimentConfig, points, train_obs, r_th_mw: float) -> RfLscm:
    """Fresh coarse/refine pair with normalization fitted on ``train_obs``."""
    setup = RenderSetup(cfg.bounds, make_gate(cfg, points), cfg.ray)
    models = ModelPair.create(cfg.bounds, cfg.model, seed=cfg.train.seed, hitam=cfg.hitam.enabled)
    return RfLscm(models, setup, cfg.hitam, replace(cfg.loss, r_th_mw=r_th_mw), PowerScale.fit(train_obs))


def predict_observations(model: RfLscm, observations) -> list[np.ndarray]:
    """Predicted RSRP for each observation, batching links of one cell and matrix."""
    groups: dict = {}
    for i, o in enumerate(observations):
        groups.setdefault((o.cell.key, id(o.sensing)), []).append(i)
    out: list = [None] * len(observations)
    for idx in groups.values():
        first = observations[idx[0]]
        pos = np.stack([observations[i].position for i in idx])
        pred = model.predict_rsrp(first.cell, pos, first.sensing)
        for i, p in zip(idx, pred):
            out[i] = p
    return out


def evaluate_model(model: RfLscm, observations) -> float:
    return mae_report([o.rsrp for o in observations], predict_observations(model, observations)).per_beam


def fit_and_score(cfg: ExperimentConfig, syn: SynthResult, train_obs, test_obs, *, progress=None,
                  val_every: int = 0) -> ArmOutcome:
    model = build_model(cfg, syn.scene.points, train_obs, syn.r_th_mw)
    validation = (lambda m: evaluate_model(m, test_obs)) if val_every else None
    res = train(train_obs, model, replace(cfg.train, val_every=val_every), validation=validation, progress=progress)
    preds = predict_observations(model, test_obs)
    return ArmOutcome(model, res, mae_report([o.rsrp for o in test_obs], preds).per_beam, preds)


def wnomp_score(cfg: ExperimentConfig, train_obs, test_obs) -> tuple[float, list]:
    res = wnomp_batch(train_obs, test_obs, cfg.wnomp)
    return mae_report([o.rsrp for o in test_obs], res.predictions).per_beam, res.predictions


def subsample_links(observations, fraction: float, seed: int) -> list:
    """Keep ``fraction`` of the distinct (cell, band, grid) links, all codebooks of a kept link."""
    if fraction >= 1.0:
        return list(observations)
    links = sorted({(o.cell.key, o.grid_id) for o in observations})
    rng = np.random.default_rng([seed, 11])
    keep = {links[i] for i in rng.permutation(len(links))[: max(1, int(round(fraction * len(links))))]}
    return [o for o in observations if (o.cell.key, o.grid_id) in keep]


def rotation_column_shift(array: AntennaArray, codebook: BeamCodebook, grid: AngularGrid, wavelength: float,
                          rotation_deg: float, atol: float = 1e-9) -> bool:
    """Check that rotating the array by whole azimuth bins shifts the sensing columns.

    With ``s = rotation / azimuth_step`` the rotated matrix must satisfy
    ``A_rot[:, (t, a)] = A[:, (t, a - s)]`` wherever ``a - s`` is a valid bin
    (cyclically on a full circle).
    """
    s = rotation_deg / grid.azimuth_step
    if abs(s - round(s)) > 1e-9:
        raise ConfigError("rotation must be a whole number of azimuth bins")
    s = int(round(s))
    base = build_sensing_matrix(array, replace(codebook, rotation_deg=0.0), grid, wavelength).entries
    rot = build_sensing_matrix(array, replace(codebook, rotation_deg=rotation_deg), grid, wavelength).entries
    m = base.shape[0]
    b = base.reshape(m, grid.n_tilt, grid.n_azimuth)
    r = rot.reshape(m, grid.n_tilt, grid.n_azimuth)
    if grid.is_full_circle:
        return bool(np.allclose(r, np.roll(b, s, axis=2), rtol=1e-9, atol=atol * max(base.max(), 1.0)))
    if s >= 0:
        lhs, rhs = r[:, :, s:], b[:, :, : grid.n_azimuth - s]
    else:
        lhs, rhs = r[:, :, : grid.n_azimuth + s], b[:, :, -s:]
    return bool(np.allclose(lhs, rhs, rtol=1e-9, atol=atol * max(base.max(), 1.0)))


# ---------------------------------------------------------------- protocols


def _obs(records, syn):
    return observations_from_records(records, syn.cells, syn.sensing)


def _adjust_arms(name, cfg, syn, spec, rows, progress):
    split = split_dataset(syn.records, "by-codebook", {"train_codebooks": (TRAIN_CODEBOOK,)}, cfg.train.seed)
    train_obs = subsample_links(_obs(split.train, syn), spec.train_fraction, cfg.train.seed)
    test_obs = _obs(split.test, syn)
    t = time.perf_counter()
    arm = fit_and_score(cfg, syn, train_obs, test_obs, progress=progress)
    rows.append(MetricRow(name, "rflscm", "", arm.mae_db, time.perf_counter() - t))
    if spec.include_wnomp:
        t = time.perf_counter()
        mae, _ = wnomp_score(cfg, train_obs, test_obs)
        rows.append(MetricRow(name, "wnomp", "", mae, time.perf_counter() - t))


def run_protocol(spec: ProtocolSpec, cfg: ExperimentConfig, syn: SynthResult | None = None,
                 progress=None) -> list[MetricRow]:
    """Run every arm of ``spec`` and return its metric rows."""
    rows: list[MetricRow] = []
    try:
        if spec.protocol == "codebook-adjust":
            syn = syn or synthesize_measurements(cfg)
            _adjust_arms(spec.protocol, cfg, syn, spec, rows, progress)

        elif spec.protocol == "rotation-adjust":
            c0 = cfg.cells[0]
            grid = c0.grid or cfg.grid
            psi = spec.rotation_deg if spec.rotation_deg is not None else grid.azimuth_step
            cfg = replace(cfg, synth=replace(cfg.synth, adjust="rotation", adjust_rotation_deg=psi))
            syn = syn or synthesize_measurements(cfg)
            cb = syn.codebooks[ADJUSTED_CODEBOOK]
            if not rotation_column_shift(c0.array, cb, grid, c0.wavelengths[0], psi):
                raise RflscmError("rotated sensing matrix is not a column shift of the original")
            _adjust_arms(spec.protocol, cfg, syn, spec, rows, progress)

        elif spec.protocol == "multifreq-sweep":
            syn = syn or synthesize_measurements(cfg)
            round1 = [r for r in syn.records if r.codebook_id == TRAIN_CODEBOOK]
            if len({round(r.freq_hz, 3) for r in round1}) < 2:
                raise ConfigError("multifreq-sweep needs at least two wavelengths per cell")
            for p in spec.fractions:
                for arm, other in (("band1-only", False), ("band1+band2", True)):
                    split = split_dataset(round1, "by-frequency", {"p": p, "include_other": other}, cfg.train.seed)
                    t = time.perf_counter()
                    out = fit_and_score(cfg, syn, _obs(split.train, syn), _obs(split.test, syn), progress=progress)
                    rows.append(MetricRow(spec.protocol, arm, f"p={p:g}", out.mae_db, time.perf_counter() - t))

        else:  # ablation
            syn = syn or synthesize_measurements(cfg)
            split = split_dataset(syn.records, "by-codebook", {"train_codebooks": (TRAIN_CODEBOOK,)}, cfg.train.seed)
            train_obs = subsample_links(_obs(split.train, syn), spec.train_fraction, cfg.train.seed)
            test_obs = _obs(split.test, syn)
            arms = []
            if "hitam" in spec.ablate:
                arms += [("hitam", "on", cfg), ("hitam", "off", replace(cfg, hitam=replace(cfg.hitam, enabled=False)))]
            if "alpha_p" in spec.ablate:
                arms += [("alpha_p", f"{a:g}", replace(cfg, loss=replace(cfg.loss, alpha_p=a))) for a in spec.alpha_p_grid]
            if "pointcloud" in spec.ablate:
                arms += [("pointcloud", "on", replace(cfg, use_pointcloud=True)),
                         ("pointcloud", "off", replace(cfg, use_pointcloud=False))]
            for factor, value, arm_cfg in arms:
                t = time.perf_counter()
                out = fit_and_score(arm_cfg, syn, train_obs, test_obs, progress=progress)
                rows.append(MetricRow(spec.protocol, factor, value, out.mae_db, time.perf_counter() - t))
    except RflscmError as exc:
        done = ", ".join(f"{r.arm}/{r.param}" for r in rows) or "none"
        exc.args = (f"{spec.protocol}: {exc} (finished arms: {done})",)
        raise
    return rows


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r.protocol, r.arm, r.param, repr(float(r.mae_db)), f"{r.wall_s:.3f}"])
