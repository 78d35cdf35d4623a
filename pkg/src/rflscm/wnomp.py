"""Weighted non-negative orthogonal matching pursuit baseline.

Standard greedy NN-OMP with per-column weights (inverse column norms by
default). The active-set subproblem is a non-negative least squares solved
by projected gradient on unit-normalized columns, warm-started from the
previous iterate so the residual norm never increases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class WnompConfig:
    max_sparsity: int = 3
    residual_tol: float = 1e-10
    nnls_iters: int = 200
    column_weights: tuple | None = None

    def __post_init__(self):
        if self.max_sparsity < 1:
            raise ConfigError("max_sparsity must be >= 1")
        if self.residual_tol <= 0:
            raise ConfigError("residual_tol must be positive")
        if self.nnls_iters < 1:
            raise ConfigError("nnls_iters must be >= 1")


def _nnls_pg(B: np.ndarray, r: np.ndarray, x0: np.ndarray, iters: int) -> np.ndarray:
    # step 1/L with L the largest eigenvalue of B^T B: monotone in the objective
    G = B.T @ B
    L = np.linalg.eigvalsh(G)[-1]
    if L <= 0:
        return x0
    b = B.T @ r
    x = x0.copy()
    for _ in range(iters):
        x = np.maximum(x - (G @ x - b) / L, 0.0)
    return x


def wnomp_solve(A, r, cfg: WnompConfig = WnompConfig(), *, history: list | None = None) -> np.ndarray:
    """Recover a non-negative sparse APS from one RSRP vector.

    Parameters
    ----------
    A : (M, N) array or SensingMatrix
    r : (M,) measurements; exact zeros mark unreported beams and their rows are dropped.
    cfg : WnompConfig
    history : list, optional
        Receives the residual norm after every greedy iteration.

    Returns
    -------
    (N,) non-negative array with at most ``cfg.max_sparsity`` nonzeros.
    """
    A = np.asarray(getattr(A, "entries", A), dtype=float)
    r = np.asarray(r, dtype=float)
    if A.ndim != 2 or A.shape[0] != r.shape[0]:
        raise ConfigError(f"sensing matrix {A.shape} does not match {r.shape[0]} measurements")
    n = A.shape[1]
    x = np.zeros(n)
    keep = r != 0
    if not keep.any():
        return x
    A, r = A[keep], r[keep]
    norms = np.linalg.norm(A, axis=0)
    usable = norms > 1e-300 * max(norms.max(), 1e-300)
    if cfg.column_weights is not None:
        w = np.asarray(cfg.column_weights, dtype=float)
        if w.shape != (n,):
            raise ConfigError("column_weights must have one entry per bin")
    else:
        w = np.where(usable, 1.0 / np.where(usable, norms, 1.0), 0.0)
    U = A / np.where(usable, norms, 1.0)  # unit columns for the NNLS subproblem
    r_norm = np.linalg.norm(r)
    support: list[int] = []
    coef = np.zeros(0)
    resid = r.copy()
    while len(support) < cfg.max_sparsity:
        score = w * (A.T @ resid)
        score[~usable] = -np.inf
        score[support] = -np.inf
        j = int(np.argmax(score))
        if not score[j] > 0:
            break
        support.append(j)
        coef = _nnls_pg(U[:, support], r, np.append(coef, 0.0), cfg.nnls_iters)
        resid = r - U[:, support] @ coef
        if history is not None:
            history.append(float(np.linalg.norm(resid)))
        if np.linalg.norm(resid) <= cfg.residual_tol * r_norm:
            break
    if support:
        x[support] = coef / norms[support]
    return x


@dataclass
class WnompResult:
    aps: dict  # (cell key, grid id) -> (N,) APS
    predictions: list  # (M,) predicted RSRP per test observation, in input order


def wnomp_batch(train_obs, test_obs=(), cfg: WnompConfig = WnompConfig()) -> WnompResult:
    """Solve each training link independently, then predict every test link.

    Links are matched by ``(cell key, grid id)``; when a link has several
    training observations (e.g. two codebooks) their rows are stacked into one
    system. Test links with no training observation predict zero power.
    """
    stacks: dict = {}
    for o in train_obs:
        stacks.setdefault((o.cell.key, o.grid_id), []).append(o)
    aps = {}
    for key, obs in stacks.items():
        A = np.vstack([o.sensing for o in obs])
        r = np.concatenate([o.rsrp for o in obs])
        aps[key] = wnomp_solve(A, r, cfg)
    preds = []
    for o in test_obs:
        x = aps.get((o.cell.key, o.grid_id), np.zeros(o.sensing.shape[1]))
        preds.append(o.sensing @ x)
    return WnompResult(aps, preds)
