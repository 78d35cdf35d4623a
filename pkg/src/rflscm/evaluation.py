"""RSRP prediction error in dB."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .sensing import mw_to_dbm

PRED_FLOOR_MW = 1e-20


@dataclass
class MaeReport:
    """``per_grid``: mean over links of the summed absolute dB error.
    ``per_beam``: mean absolute dB error over all reported beams."""

    per_grid: float
    per_beam: float
    n_grids: int
    n_beams: int
    per_cell: dict = field(default_factory=dict)  # cell label -> MaeReport

    def row(self) -> dict:
        return {"mae_grid_db": self.per_grid, "mae_beam_db": self.per_beam,
                "n_grids": self.n_grids, "n_beams": self.n_beams}


def _summarize(errors: list[np.ndarray]) -> MaeReport:
    grids = [e for e in errors if e.size]
    total = sum(float(e.sum()) for e in grids)
    n_beams = sum(e.size for e in grids)
    return MaeReport(
        per_grid=total / len(grids) if grids else float("nan"),
        per_beam=total / n_beams if n_beams else float("nan"),
        n_grids=len(grids), n_beams=n_beams,
    )


def link_errors(truth, pred) -> np.ndarray:
    """Absolute dB errors over the beams reported in ``truth``."""
    truth, pred = np.asarray(truth, float), np.asarray(pred, float)
    if truth.shape != pred.shape:
        raise ConfigError(f"truth {truth.shape} and prediction {pred.shape} differ in shape")
    keep = truth > 0
    return np.abs(mw_to_dbm(truth[keep]) - mw_to_dbm(np.maximum(pred[keep], PRED_FLOOR_MW)))


def mae_report(truths, preds, labels=None) -> MaeReport:
    """Aggregate per-link RSRP vectors (linear mW) into an :class:`MaeReport`.

    Links whose truth has no reported beam do not count as grids.
    ``labels`` (e.g. cell ids) enables the per-cell breakdown.
    """
    truths, preds = list(truths), list(preds)
    if len(truths) != len(preds):
        raise ConfigError("truth and prediction lists differ in length")
    errs = [link_errors(t, p) for t, p in zip(truths, preds)]
    report = _summarize(errs)
    if labels is not None:
        by: dict = {}
        for lab, e in zip(labels, errs):
            by.setdefault(lab, []).append(e)
        report.per_cell = {lab: _summarize(v) for lab, v in sorted(by.items(), key=lambda kv: str(kv[0]))}
    return report


def mae_db(truths, preds) -> float:
    """Per-beam mean absolute dB error (the headline number used in acceptance)."""
    return mae_report(truths, preds).per_beam


def evaluate_records(truth_records, pred_records) -> MaeReport:
    """Key-based join of measurement records on (cell, freq, grid, beam).

    Every beam reported in the truth must be present in the predictions;
    row order in either file is irrelevant.
    """
    pred = {(r.cell_id, round(r.freq_hz, 3), r.grid_id, r.beam_id): r.rsrp_mw for r in pred_records}
    links: dict = {}
    for r in truth_records:
        if not r.reported:
            continue
        key = (r.cell_id, round(r.freq_hz, 3), r.grid_id, r.beam_id)
        if key not in pred:
            raise ConfigError(f"no prediction for {key}")
        t, p = links.setdefault((r.cell_id, key[1], r.grid_id), ([], []))
        t.append(r.rsrp_mw)
        p.append(pred[key])
    keys = sorted(links)
    return mae_report([np.array(links[k][0]) for k in keys], [np.array(links[k][1]) for k in keys],
                      labels=[k[0] for k in keys])


def write_report(path, report: MaeReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scope", "mae_grid_db", "mae_beam_db", "n_grids", "n_beams"])
        w.writerow(["all", repr(float(report.per_grid)), repr(float(report.per_beam)), report.n_grids, report.n_beams])
        for lab, r in report.per_cell.items():
            w.writerow([lab, repr(float(r.per_grid)), repr(float(r.per_beam)), r.n_grids, r.n_beams])
