"""Command-line entry point.

``rflscm <synth|train|predict|eval|baseline|protocol> --config FILE [--seed N] [--out DIR]``

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
``RFLSCM_THREADS`` caps the number of torch worker threads.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ExperimentConfig, load_config
from .data import (ADJUSTED_CODEBOOK, TRAIN_CODEBOOK, build_cells, generate_scene, observations_from_records,
                   split_dataset, synthesize_measurements)
from .errors import ConfigError, RflscmError
from .evaluation import evaluate_records, write_report
from .geometry import read_xyz, write_xyz
from .protocols import ProtocolSpec, build_model, predict_observations, run_protocol, write_metrics
from .sensing import (MeasurementRecord, build_sensing_matrix, read_codebook, read_measurements,
                      write_codebook, write_measurements)
from .trainer import load_checkpoint, save_checkpoint, train, write_trace
from .wnomp import wnomp_batch

log = logging.getLogger("rflscm")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _manifest(out: Path, command: str, cfg: ExperimentConfig, seed: int, extra: dict | None = None) -> None:
    doc = {
        "command": command,
        "config_sha256": cfg.digest(),
        "seed": seed,
        "versions": {"rflscm": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "torch": torch.__version__},
    }
    doc.update(extra or {})
    (out / f"manifest_{command}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _data_dir(cfg: ExperimentConfig, out: Path) -> Path:
    return Path(cfg.paths.get("data", out))


def _load_dataset(cfg: ExperimentConfig, data: Path):
    """Measurements, codebooks, cells and sensing matrices from a synth directory."""
    meas = data / cfg.paths.get("measurements", "measurements.csv")
    if not meas.is_file():
        raise UsageError(f"measurements file {meas} not found (run `rflscm synth` first)")
    records = read_measurements(meas)
    codebooks = {}
    for path in sorted(data.glob("codebook_*.txt")):
        cb = read_codebook(path)
        codebooks[cb.codebook_id] = cb
    if not codebooks:
        raise UsageError(f"no codebook_*.txt files in {data}")
    cells = build_cells(cfg)
    specs = {c.cell_id: c for c in cfg.cells}
    sensing = {}
    for key, cell in cells.items():
        for cb in codebooks.values():
            sensing[(key, cb.codebook_id)] = build_sensing_matrix(
                specs[cell.cell_id].array, cb, cell.grid, cell.wavelength, cell.cell_id).entries
    pc = data / cfg.paths.get("pointcloud", "pointcloud.xyz")
    points = read_xyz(pc) if pc.is_file() else np.zeros((0, 3))
    meta_path = data / "manifest_synth.json"
    r_th = cfg.loss.r_th_mw
    if meta_path.is_file():
        r_th = json.loads(meta_path.read_text()).get("r_th_mw", r_th)
    return records, codebooks, cells, sensing, points, r_th


def _split(cfg: ExperimentConfig, records, seed: int):
    s = cfg.split
    params = {"train_codebooks": s.train_codebooks, "fraction": s.fraction, "primary_freq_hz": s.primary_freq_hz,
              "test_fraction": s.test_fraction, "p": s.fraction, "include_other": s.include_other_bands}
    return split_dataset(records, s.mode, params, seed)


def _prediction_records(observations, preds, codebooks) -> list[MeasurementRecord]:
    out = []
    for o, p in zip(observations, preds):
        for bid, v in zip(codebooks[o.codebook_id].beam_ids(), p):
            out.append(MeasurementRecord(o.cell.cell_id, o.grid_id, tuple(o.position), o.cell.freq_hz, bid,
                                         float(v) if v > 0 else 0.0))
    return out


def _observations(records, cells, sensing):
    return observations_from_records(records, cells, sensing)


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: ExperimentConfig, out: Path, seed: int) -> dict:
    syn = synthesize_measurements(cfg, generate_scene(cfg))
    write_xyz(out / "pointcloud.xyz", syn.scene.points)
    write_measurements(out / "measurements.csv", syn.records)
    for cb in syn.codebooks.values():
        write_codebook(out / f"codebook_{cb.codebook_id}.txt", cb)
    info = {"r_th_mw": syn.r_th_mw, "n_records": len(syn.records), "n_grids": len(syn.scene.grid_ids),
            "planting": cfg.synth.planting, "inverse_crime": cfg.synth.planting == "oracle-field"}
    _manifest(out, "synth", cfg, seed, info)
    return info


def cmd_train(cfg: ExperimentConfig, out: Path, seed: int, resume: Path | None = None,
              stop_at: int | None = None) -> dict:
    records, codebooks, cells, sensing, points, r_th = _load_dataset(cfg, _data_dir(cfg, out))
    split = _split(cfg, records, seed)
    train_obs = _observations(split.train, cells, sensing)
    if resume is not None:
        if not resume.is_file():
            raise UsageError(f"checkpoint {resume} not found")
        setup = build_model(cfg, points, train_obs, r_th).setup
        model, meta, arrays = load_checkpoint(resume, setup, cfg.model)
        start = (int(meta["iteration"]), arrays)
    else:
        model, start = build_model(cfg, points, train_obs, r_th), None
    res = train(train_obs, model, cfg.train, resume=start, stop_at=stop_at,
                progress=lambda row: log.info("iter %d loss %.6g alpha %.3f", row["iter"], row["loss_total"],
                                              row["alpha"]))
    ckpt = out / "checkpoint.rflscm"
    save_checkpoint(ckpt, res, cfg.train)
    trace = out / "trace.csv"
    write_trace(trace, res.trace)
    info = {"iterations": res.iteration, "n_train_links": len(train_obs), "checkpoint_sha256": _file_digest(ckpt)}
    _manifest(out, "train", cfg, seed, info)
    return info


def cmd_predict(cfg: ExperimentConfig, out: Path, seed: int, checkpoint: Path | None,
                codebook: str | None) -> dict:
    ckpt = checkpoint or out / "checkpoint.rflscm"
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} not found")
    records, codebooks, cells, sensing, points, r_th = _load_dataset(cfg, _data_dir(cfg, out))
    cb_id = codebook or (ADJUSTED_CODEBOOK if ADJUSTED_CODEBOOK in codebooks else TRAIN_CODEBOOK)
    if cb_id not in codebooks:
        raise UsageError(f"unknown codebook {cb_id!r}; available: {sorted(codebooks)}")
    target = [r for r in records if r.codebook_id == cb_id]
    obs = _observations(target, cells, sensing)
    train_obs = _observations(_split(cfg, records, seed).train, cells, sensing)
    setup = build_model(cfg, points, train_obs, r_th).setup
    model, _, _ = load_checkpoint(ckpt, setup, cfg.model)
    preds = predict_observations(model, obs)
    path = out / f"predictions_{cb_id}.csv"
    write_measurements(path, _prediction_records(obs, preds, {cb_id: codebooks[cb_id]}))
    info = {"codebook": cb_id, "n_links": len(obs), "predictions": path.name}
    _manifest(out, "predict", cfg, seed, info)
    return info


def cmd_eval(cfg: ExperimentConfig, out: Path, seed: int, pred: Path | None, truth: Path | None) -> dict:
    data = _data_dir(cfg, out)
    truth = truth or data / cfg.paths.get("measurements", "measurements.csv")
    if pred is None:
        found = sorted(out.glob("predictions_*.csv"))
        if not found:
            raise UsageError(f"no predictions_*.csv in {out}; pass --pred")
        pred = found[0]
    for p in (truth, pred):
        if not p.is_file():
            raise UsageError(f"{p} not found")
    pred_records = read_measurements(pred)
    keys = {(r.cell_id, round(r.freq_hz, 3), r.grid_id, r.beam_id) for r in pred_records}
    cbs = {r.codebook_id for r in pred_records}
    truth_records = [r for r in read_measurements(truth) if r.codebook_id in cbs
                     and (r.cell_id, round(r.freq_hz, 3), r.grid_id, r.beam_id) in keys]
    report = evaluate_records(truth_records, pred_records)
    write_report(out / f"mae_{pred.stem}.csv", report)
    info = {"predictions": pred.name, **report.row()}
    _manifest(out, "eval", cfg, seed, info)
    print(f"MAE per beam {report.per_beam:.3f} dB, per grid {report.per_grid:.3f} dB "
          f"({report.n_grids} links, {report.n_beams} beams)")
    return info


def cmd_baseline(cfg: ExperimentConfig, out: Path, seed: int) -> dict:
    records, codebooks, cells, sensing, _, _ = _load_dataset(cfg, _data_dir(cfg, out))
    split = _split(cfg, records, seed)
    train_obs = _observations(split.train, cells, sensing)
    test_obs = _observations(split.test, cells, sensing)
    res = wnomp_batch(train_obs, test_obs, cfg.wnomp)
    path = out / "predictions_wnomp.csv"
    write_measurements(path, _prediction_records(test_obs, res.predictions, codebooks))
    report = evaluate_records([r for r in split.test], read_measurements(path))
    write_report(out / "mae_wnomp.csv", report)
    info = {"n_train_links": len(train_obs), "n_test_links": len(test_obs), **report.row()}
    _manifest(out, "baseline", cfg, seed, info)
    print(f"WNOMP MAE per beam {report.per_beam:.3f} dB, per grid {report.per_grid:.3f} dB")
    return info


def cmd_protocol(cfg: ExperimentConfig, out: Path, seed: int, spec: ProtocolSpec) -> dict:
    rows = run_protocol(spec, cfg)
    write_metrics(out / f"metrics_{spec.protocol}.csv", rows)
    for r in rows:
        print(f"{r.protocol},{r.arm},{r.param},{r.mae_db:.3f},{r.wall_s:.1f}")
    info = {"protocol": spec.protocol, "arms": len(rows)}
    _manifest(out, "protocol", cfg, seed, info)
    return info


# ---------------------------------------------------------------- entry point


def _protocol_spec(cfg: ExperimentConfig, name: str | None) -> ProtocolSpec:
    from .config import _coerce  # section parsing shares the same coercion rules
    src = dict(cfg.source.get("protocol", {}))
    if name:
        src["protocol"] = name
    kinds = {f: t for f, t in ProtocolSpec.__annotations__.items()}
    kw = {}
    for k, v in src.items():
        if k not in kinds:
            raise ConfigError(f"[protocol] unknown key {k!r}")
        kw[k] = _coerce(kinds[k], v)
    return ProtocolSpec(**kw)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rflscm", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=["synth", "train", "predict", "eval", "baseline", "protocol"])
    p.add_argument("--config", required=True, type=Path, help="experiment INI file")
    p.add_argument("--seed", type=int, default=None, help="overrides the scene and training seeds")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory (must exist)")
    p.add_argument("--checkpoint", type=Path, default=None, help="predict: checkpoint to load")
    p.add_argument("--resume", type=Path, default=None, help="train: continue from this checkpoint")
    p.add_argument("--stop-at", type=int, default=None,
                   help="train: stop after this many iterations (schedule still spans max_iters)")
    p.add_argument("--codebook", default=None, help="predict: codebook id to predict (default: adjusted)")
    p.add_argument("--pred", type=Path, default=None, help="eval: predictions CSV")
    p.add_argument("--truth", type=Path, default=None, help="eval: ground-truth measurements CSV")
    p.add_argument("--protocol", default=None, help="protocol: overrides [protocol] protocol")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get("RFLSCM_THREADS")
    try:
        if threads:
            n = int(threads)
            if n < 1:
                raise ValueError
            torch.set_num_threads(n)
    except ValueError:
        print(f"rflscm: RFLSCM_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if not args.out.is_dir():
            raise UsageError(f"output directory {args.out} does not exist")
        cfg = load_config(args.config)
        seed = cfg.train.seed if args.seed is None else args.seed
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.command == "synth":
            cmd_synth(cfg, args.out, seed)
        elif args.command == "train":
            cmd_train(cfg, args.out, seed, args.resume, args.stop_at)
        elif args.command == "predict":
            cmd_predict(cfg, args.out, seed, args.checkpoint, args.codebook)
        elif args.command == "eval":
            cmd_eval(cfg, args.out, seed, args.pred, args.truth)
        elif args.command == "baseline":
            cmd_baseline(cfg, args.out, seed)
        else:
            cmd_protocol(cfg, args.out, seed, _protocol_spec(cfg, args.protocol))
    except (UsageError, ConfigError) as exc:
        print(f"rflscm: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RflscmError, ArithmeticError, RuntimeError, OSError, ValueError) as exc:
        print(f"rflscm: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
