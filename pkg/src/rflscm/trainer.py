"""Losses, hierarchical coarse-to-fine angular modeling and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .checkpoint import load_container, save_container
from .decoder import DecoderConfig
from .errors import ConfigError, TrainingDivergedError
from .geometry import AngularGrid, SceneBounds
from .renderer import Cell, ConstantGate, RayBundle, RayConfig, RfModel, build_bundle

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- configs


@dataclass(frozen=True)
class LossConfig:
    beta_pen: float = 1e-4
    alpha_p: float = 0.5
    r_th_mw: float = 1e-12
    domain: str = "linear"  # "linear" or "log"
    log_floor: float = 1e-6  # relative to the normalized RSRP scale

    def __post_init__(self):
        if self.beta_pen < 0 or self.alpha_p < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.r_th_mw <= 0:
            raise ConfigError("reporting threshold must be positive")
        if self.domain not in ("linear", "log"):
            raise ConfigError(f"unknown loss domain {self.domain!r}")


@dataclass(frozen=True)
class HiTamConfig:
    beta_ang: int = 2
    k_coarse: int = 4
    coarse_pretrain_iters: int = 1000
    ramp: tuple[float, float] = (0.25, 0.75)
    enabled: bool = True

    def __post_init__(self):
        if self.enabled and self.beta_ang < 2:
            raise ConfigError("angular downsampling factor must be an integer > 1")
        if self.k_coarse < 1:
            raise ConfigError("K_C must be >= 1")
        if not 0.0 <= self.ramp[0] <= self.ramp[1] <= 1.0:
            raise ConfigError("ramp fractions must satisfy 0 <= start <= end <= 1")

    def check_grid(self, grid: AngularGrid) -> AngularGrid:
        """Validate against a fine grid and return the matching coarse grid."""
        coarse = grid.coarsen(self.beta_ang)
        if self.beta_ang**2 * self.k_coarse > grid.size:
            raise ConfigError("beta^2 * K_C exceeds the number of fine bins")
        if self.k_coarse > coarse.size:
            raise ConfigError("K_C exceeds the number of coarse bins")
        return coarse


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    lr_tensor: float = 0.01
    lr_decoder: float = 0.001
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_iters: int = 3000
    seed: int = 0
    val_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.lr_tensor <= 0 or self.lr_decoder <= 0:
            raise ConfigError("learning rates must be positive")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0")


@dataclass(frozen=True)
class ModelConfig:
    rank_delta: int = 8
    rank_radiance: int = 8
    feature_dim: int = 24
    decoder: DecoderConfig = DecoderConfig()
    dtype: str = "float32"

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


def curriculum_alpha(it: int, hitam: HiTamConfig, max_iters: int) -> float:
    """Weight of the refinement loss at iteration ``it``.

    Zero during coarse pretraining, then a linear ramp over the configured
    fraction of the joint phase, then one. Without HiTAM the refinement
    model is trained alone (always one).
    """
    if not hitam.enabled:
        return 1.0
    pre = hitam.coarse_pretrain_iters
    if it < pre:
        return 0.0
    joint = max(max_iters - pre, 1)
    start, end = hitam.ramp[0] * joint, hitam.ramp[1] * joint
    t = it - pre
    if t >= end:
        return 1.0
    if t < start:
        return 0.0
    return (t - start) / (end - start)


# ---------------------------------------------------------------- losses


def _as_array(v):
    return np.asarray(getattr(v, "entries", getattr(v, "values", v)), dtype=float)


def data_loss_t(r: torch.Tensor, pred: torch.Tensor, x: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Per-pair ``||r - A x||^2 + beta_pen ||x||_1`` over reported beams only."""
    reported = r > 0
    zero = torch.zeros((), dtype=pred.dtype)
    if cfg.domain == "linear":
        resid = torch.where(reported, r - pred, zero)
    else:
        safe_r = torch.where(reported, r, torch.ones((), dtype=r.dtype))
        resid = torch.where(reported, torch.log(safe_r) - torch.log(pred + cfg.log_floor), zero)
    return (resid**2).sum(-1) + cfg.beta_pen * x.abs().sum(-1)


def penalty_t(r: torch.Tensor, pred: torch.Tensor, r_th: float) -> torch.Tensor:
    """Per-pair one-sided penalty on unreported beams predicted above ``r_th``."""
    excess = torch.where(r == 0, torch.relu(pred - r_th), torch.zeros((), dtype=pred.dtype))
    return (excess**2).sum(-1)


def data_loss(r, A, x, cfg: LossConfig) -> float:
    a, xv, rv = _as_array(A), _as_array(x), _as_array(r)
    if a.shape != (rv.shape[-1], xv.shape[-1]):
        raise ConfigError(f"shapes r{rv.shape}, A{a.shape}, x{xv.shape} do not match")
    rt, xt = torch.as_tensor(rv), torch.as_tensor(xv)
    return float(data_loss_t(rt, torch.as_tensor(a) @ xt, xt, cfg))


def missing_penalty(r, A, x, cfg: LossConfig) -> float:
    a, xv, rv = _as_array(A), _as_array(x), _as_array(r)
    if a.shape != (rv.shape[-1], xv.shape[-1]):
        raise ConfigError(f"shapes r{rv.shape}, A{a.shape}, x{xv.shape} do not match")
    return float(penalty_t(torch.as_tensor(rv), torch.as_tensor(a @ xv), cfg.r_th_mw))


# ---------------------------------------------------------------- angular hierarchy


def select_top_bins(aps, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries, strongest first, ties by lower index."""
    v = _as_array(aps)
    if not 1 <= k <= v.size:
        raise ConfigError(f"k={k} outside [1, {v.size}]")
    return np.argsort(-v, kind="stable")[:k]


def block_members(fine: AngularGrid, beta: int) -> np.ndarray:
    """``(N_coarse, beta^2)`` fine bins covered by each coarse bin, ascending."""
    coarse = fine.coarsen(beta)
    ct, ca = np.divmod(np.arange(coarse.size), coarse.n_azimuth)
    dt, da = np.divmod(np.arange(beta * beta), beta)
    ft = ct[:, None] * beta + dt[None, :]
    fa = ca[:, None] * beta + da[None, :]
    return ft * fine.n_azimuth + fa


def refine_bin_set(coarse_bins, beta: int, fine_grid: AngularGrid) -> np.ndarray:
    """Union of the ``beta x beta`` fine blocks under the given coarse bins (sorted)."""
    members = block_members(fine_grid, beta)
    cb = np.asarray(list(coarse_bins), dtype=np.int64)
    if cb.size and (cb.min() < 0 or cb.max() >= len(members)):
        raise ConfigError("coarse bin outside the coarse grid")
    return np.unique(members[cb].ravel()) if cb.size else np.zeros(0, dtype=np.int64)


def coarse_sensing(A, fine_grid: AngularGrid, beta: int) -> np.ndarray:
    """Coarse-bin columns as the mean of the fine columns each block covers."""
    a = _as_array(A)
    return a[:, block_members(fine_grid, beta)].mean(axis=2)


# ---------------------------------------------------------------- data & setup


@dataclass(eq=False)
class Observation:
    """Measured beams of one (cell, grid) link under one sensing matrix."""

    cell: Cell
    grid_id: str
    position: np.ndarray
    sensing: np.ndarray  # (M, N) over the cell's fine grid, physical units
    rsrp: np.ndarray  # (M,) mW, zero = unreported
    codebook_id: str = ""

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.rsrp = np.asarray(self.rsrp, dtype=float)
        if self.sensing.shape != (len(self.rsrp), self.cell.grid.size):
            raise ConfigError(f"sensing matrix {self.sensing.shape} does not fit link {self.grid_id}")


@dataclass(frozen=True)
class PowerScale:
    """Constant factors mapping physical units to the normalized training units."""

    rsrp: float = 1.0
    gain: float = 1.0

    @classmethod
    def fit(cls, observations) -> PowerScale:
        r = max((float(o.rsrp.max()) for o in observations), default=0.0)
        a = max((float(o.sensing.max()) for o in observations), default=0.0)
        return cls(r if r > 0 else 1.0, a if a > 0 else 1.0)


class RenderSetup:
    """Scene box, point-cloud gate and ray settings, with cached ray bundles."""

    def __init__(self, bounds: SceneBounds, gate=None, ray_cfg: RayConfig = RayConfig()):
        self.bounds, self.gate, self.ray_cfg = bounds, gate or ConstantGate(1.0), ray_cfg
        self._bundles: dict = {}

    def bundle(self, cell: Cell, grid: AngularGrid) -> RayBundle:
        key = (cell.key, cell.position, grid)
        if key not in self._bundles:
            self._bundles[key] = build_bundle(cell, grid, self.bounds, self.ray_cfg, self.gate)
        return self._bundles[key]


@dataclass(eq=False)
class ModelPair:
    """Coarse and refinement models (coarse is ``None`` without HiTAM)."""

    coarse: RfModel | None
    refine: RfModel

    @classmethod
    def create(cls, bounds: SceneBounds, cfg: ModelConfig = ModelConfig(), seed: int = 0,
               hitam: bool = True) -> ModelPair:
        kw = dict(rank_delta=cfg.rank_delta, rank_radiance=cfg.rank_radiance, feature_dim=cfg.feature_dim,
                  decoder_cfg=cfg.decoder, dtype=cfg.torch_dtype)
        coarse = RfModel.create(bounds, seed=2 * seed, **kw) if hitam else None
        refine = RfModel.create(bounds, seed=2 * seed + 1, **kw)
        return cls(coarse, refine)

    def models(self):
        return [m for m in (self.coarse, self.refine) if m is not None]

    def named_parameters(self):
        for tag, m in (("coarse", self.coarse), ("refine", self.refine)):
            if m is not None:
                for name, p in m.named_parameters():
                    yield f"{tag}.{name}", p


@dataclass(eq=False)
class _Group:
    """Batch links sharing a cell and a sensing matrix."""

    cell: Cell
    a_fine: torch.Tensor  # (M, N) normalized
    a_coarse: torch.Tensor | None  # (M, Nc) normalized
    rsrp: torch.Tensor  # (k, M) normalized
    positions: np.ndarray  # (k, 3)


# ---------------------------------------------------------------- the model


class RfLscm:
    """Trained (or trainable) coarse/refine pair plus everything needed to predict."""

    def __init__(self, models: ModelPair, setup: RenderSetup, hitam: HiTamConfig = HiTamConfig(),
                 loss: LossConfig = LossConfig(), scale: PowerScale = PowerScale()):
        if hitam.enabled and models.coarse is None:
            raise ConfigError("HiTAM needs a coarse model")
        self.models, self.setup, self.hitam, self.loss, self.scale = models, setup, hitam, loss, scale
        self._coarse_a: dict = {}

    @property
    def dtype(self):
        return self.models.refine.dtype

    # -- normalized sensing --------------------------------------------

    def _norm_a(self, cell: Cell, a: np.ndarray):
        key = (id(a), cell.key)
        if key not in self._coarse_a:
            fine = torch.as_tensor(a / self.scale.gain, dtype=self.dtype)
            coarse = None
            if self.hitam.enabled:
                self.hitam.check_grid(cell.grid)
                coarse = torch.as_tensor(coarse_sensing(a, cell.grid, self.hitam.beta_ang) / self.scale.gain,
                                         dtype=self.dtype)
            self._coarse_a[key] = (a, fine, coarse)  # keep ``a`` alive so id() stays unique
        return self._coarse_a[key][1:]

    def groups(self, observations) -> list[_Group]:
        order: dict = {}
        for o in observations:
            order.setdefault((o.cell.key, id(o.sensing)), []).append(o)
        out = []
        for obs in order.values():
            cell = obs[0].cell
            fine, coarse = self._norm_a(cell, obs[0].sensing)
            r = torch.as_tensor(np.stack([o.rsrp for o in obs]) / self.scale.rsrp, dtype=self.dtype)
            out.append(_Group(cell, fine, coarse, r, np.stack([o.position for o in obs])))
        return out

    # -- rendering -----------------------------------------------------

    def coarse_aps(self, cell: Cell, positions) -> torch.Tensor:
        grid = self.hitam.check_grid(cell.grid)
        return self.models.coarse.render_dense(cell, self.setup.bundle(cell, grid), positions)

    def refine_bins(self, x_coarse: torch.Tensor, cell: Cell) -> np.ndarray:
        """Per-link fine bins ``(k, beta^2 K_C)`` under the top coarse bins."""
        members = block_members(cell.grid, self.hitam.beta_ang)
        xc = x_coarse.detach().double().numpy()
        top = np.argsort(-xc, axis=1, kind="stable")[:, : self.hitam.k_coarse]
        return np.sort(members[top].reshape(len(xc), -1), axis=1)

    def refine_aps(self, cell: Cell, positions, bins: np.ndarray) -> torch.Tensor:
        k, b = bins.shape
        pair = np.repeat(np.arange(k), b)
        x = self.models.refine.render_power(cell, self.setup.bundle(cell, cell.grid), positions, pair, bins.ravel())
        return x.reshape(k, b)

    def predict_aps(self, cell: Cell, positions) -> np.ndarray:
        """Fine-grid APS ``(k, N)`` in physical units (zero outside the refined set)."""
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        out = np.zeros((len(positions), cell.grid.size))
        with torch.no_grad():
            if self.hitam.enabled:
                bins = self.refine_bins(self.coarse_aps(cell, positions), cell)
                x = self.refine_aps(cell, positions, bins).double().numpy()
                np.put_along_axis(out, bins, x, axis=1)
            else:
                out[:] = self.models.refine.render_dense(
                    cell, self.setup.bundle(cell, cell.grid), positions).double().numpy()
        return out * (self.scale.rsrp / self.scale.gain)

    def predict_rsrp(self, cell: Cell, positions, sensing: np.ndarray) -> np.ndarray:
        """Per-beam RSRP (mW) under an arbitrary sensing matrix ``(M, N)``."""
        return self.predict_aps(cell, positions) @ np.asarray(sensing, dtype=float).T

    # -- losses --------------------------------------------------------

    def _stage_loss(self, g: _Group, pred, x):
        lc = self.loss
        r_th = lc.r_th_mw / self.scale.rsrp
        data = data_loss_t(g.rsrp, pred, x, lc).sum()
        pen = penalty_t(g.rsrp, pred, r_th).sum()
        return data + lc.alpha_p * pen, pen

    def joint_loss(self, observations, alpha: float):
        """``(1 - alpha) L1 + alpha L2`` over the given links.

        Returns ``(total, parts)`` where ``parts`` has float entries
        ``coarse``, ``refine`` and ``penalty`` (curriculum-weighted, before
        ``alpha_P``). A stage whose weight is zero is evaluated without
        gradient tracking so it leaves its model untouched.
        """
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError("curriculum weight must lie in [0, 1]")
        total = torch.zeros((), dtype=self.dtype)
        parts = {"coarse": 0.0, "refine": 0.0, "penalty": 0.0}
        for g in self.groups(observations):
            if self.hitam.enabled:
                with torch.set_grad_enabled(torch.is_grad_enabled() and alpha < 1.0):
                    x1 = self.coarse_aps(g.cell, g.positions)
                    l1, p1 = self._stage_loss(g, x1 @ g.a_coarse.T, x1)
                bins = self.refine_bins(x1, g.cell)
                with torch.set_grad_enabled(torch.is_grad_enabled() and alpha > 0.0):
                    x2 = self.refine_aps(g.cell, g.positions, bins)
                    pred2 = torch.einsum("kb,kbm->km", x2, g.a_fine.T[torch.as_tensor(bins)])
                    l2, p2 = self._stage_loss(g, pred2, x2)
                if alpha < 1.0:
                    total = total + (1.0 - alpha) * l1
                if alpha > 0.0:
                    total = total + alpha * l2
                parts["coarse"] += float(l1.detach())
                parts["penalty"] += float(((1.0 - alpha) * p1 + alpha * p2).detach())
            else:
                x2 = self.models.refine.render_dense(g.cell, self.setup.bundle(g.cell, g.cell.grid), g.positions)
                l2, p2 = self._stage_loss(g, x2 @ g.a_fine.T, x2)
                total = total + l2
                parts["penalty"] += float(p2.detach())
            parts["refine"] += float(l2.detach())
        return total, parts

    # -- persistence ---------------------------------------------------

    def state_arrays(self):
        return [(n, p.detach().cpu().numpy()) for n, p in self.models.named_parameters()]

    def metadata(self) -> dict:
        fields = {}
        for tag, m in (("coarse", self.models.coarse), ("refine", self.models.refine)):
            if m is None:
                continue
            for fname in ("g_delta", "g_radiance"):
                f = getattr(m.fields, fname)
                fields[f"{tag}.{fname}"] = {"rank": f.rank, "resolution": list(f.resolution), "channels": f.channels}
            fields[f"{tag}.decoder"] = asdict(m.decoder.cfg) | {"feature_dim": m.decoder.feature_dim}
        return {
            "fields": fields,
            "hitam": asdict(self.hitam),
            "loss": asdict(self.loss),
            "scale": asdict(self.scale),
            "dtype": str(self.dtype).replace("torch.", ""),
        }

    def load_state_arrays(self, arrays: dict):
        with torch.no_grad():
            for name, p in self.models.named_parameters():
                if name not in arrays:
                    raise ConfigError(f"checkpoint lacks parameter {name}")
                p.copy_(torch.as_tensor(arrays[name]))


# ---------------------------------------------------------------- training loop


TRACE_FIELDS = ["iter", "loss_total", "loss_coarse", "loss_refine", "penalty", "alpha", "val_mae_db"]


def make_optimizer(models: ModelPair, cfg: TrainConfig) -> torch.optim.Adam:
    """Adam with one group for tensor factors and one for the decoders."""
    tensors = [p for m in models.models() for p in m.tensor_parameters()]
    decoders = [p for m in models.models() for p in m.decoder_parameters()]
    return torch.optim.Adam(
        [{"params": tensors, "lr": cfg.lr_tensor}, {"params": decoders, "lr": cfg.lr_decoder}],
        betas=cfg.betas, eps=cfg.eps,
    )


@dataclass
class TrainResult:
    model: RfLscm
    optimizer: torch.optim.Adam
    trace: list = field(default_factory=list)
    iteration: int = 0


def _optimizer_arrays(opt: torch.optim.Adam, models: ModelPair):
    names = {id(p): n for n, p in models.named_parameters()}
    out = []
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            out += [(f"adam.{n}.exp_avg", st["exp_avg"].numpy()),
                    (f"adam.{n}.exp_avg_sq", st["exp_avg_sq"].numpy()),
                    (f"adam.{n}.step", np.array([float(st["step"])]))]
    return out


def _restore_optimizer(opt: torch.optim.Adam, models: ModelPair, arrays: dict):
    for n, p in models.named_parameters():
        if f"adam.{n}.step" in arrays:
            opt.state[p] = {
                "step": torch.tensor(float(arrays[f"adam.{n}.step"][0]), dtype=torch.float32),
                "exp_avg": torch.as_tensor(arrays[f"adam.{n}.exp_avg"]).to(p.dtype).clone(),
                "exp_avg_sq": torch.as_tensor(arrays[f"adam.{n}.exp_avg_sq"]).to(p.dtype).clone(),
            }


def save_checkpoint(path, result: TrainResult, train_cfg: TrainConfig | None = None) -> None:
    meta = result.model.metadata() | {"iteration": result.iteration}
    if train_cfg is not None:
        meta["train"] = asdict(train_cfg)
    save_container(path, meta, result.model.state_arrays() + _optimizer_arrays(result.optimizer, result.model.models))


def load_checkpoint(path, setup: RenderSetup, model_cfg: ModelConfig | None = None):
    """Rebuild an :class:`RfLscm` (and its optimizer state arrays) from disk.

    Returns ``(model, meta, arrays)``; pass ``arrays`` to :func:`train` via
    ``resume`` to continue optimization exactly where it stopped.
    """
    meta, arrays = load_container(path)
    f = meta["fields"]
    dec = dict(f["refine.decoder"])
    feature_dim = dec.pop("feature_dim")
    cfg = model_cfg or ModelConfig(
        rank_delta=f["refine.g_delta"]["rank"], rank_radiance=f["refine.g_radiance"]["rank"],
        feature_dim=feature_dim, decoder=DecoderConfig(**dec), dtype=meta.get("dtype", "float32"))
    hitam = HiTamConfig(**(meta["hitam"] | {"ramp": tuple(meta["hitam"]["ramp"])}))
    models = ModelPair.create(setup.bounds, cfg, hitam=hitam.enabled)
    model = RfLscm(models, setup, hitam, LossConfig(**meta["loss"]), PowerScale(**meta["scale"]))
    model.load_state_arrays(arrays)
    return model, meta, arrays


def train(observations, model: RfLscm, cfg: TrainConfig, *, validation=None, resume=None,
          progress=None, stop_at: int | None = None) -> TrainResult:
    """Optimize ``model`` on ``observations``.

    Each iteration draws a batch of links with a generator seeded by
    ``(seed, iteration)``, renders both stages, applies the curriculum
    weight and takes one Adam step. ``validation`` is an optional callable
    ``model -> MAE dB`` evaluated every ``cfg.val_every`` iterations.
    ``resume`` is ``(iteration, arrays)`` from a checkpoint. ``stop_at``
    ends the run early while the curriculum still spans ``cfg.max_iters``,
    so a stopped run resumed later matches an uninterrupted one bit for bit.
    """
    observations = list(observations)
    if not observations:
        raise ConfigError("training set is empty")
    opt = make_optimizer(model.models, cfg)
    start = 0
    if resume is not None:
        start, arrays = resume
        _restore_optimizer(opt, model.models, arrays)
    result = TrainResult(model, opt, [], start)
    n = len(observations)
    bs = min(cfg.batch_size, n)
    end = cfg.max_iters if stop_at is None else min(int(stop_at), cfg.max_iters)
    for it in range(start, end):
        alpha = curriculum_alpha(it, model.hitam, cfg.max_iters)
        rng = np.random.default_rng([cfg.seed, it])
        batch = [observations[i] for i in np.sort(rng.choice(n, size=bs, replace=False))]
        loss, parts = model.joint_loss(batch, alpha)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDivergedError(f"loss became {value} at iteration {it} (alpha={alpha:.3f}, parts={parts})")
        opt.zero_grad(set_to_none=True)
        if loss.requires_grad:
            loss.backward()
            opt.step()
        row = {"iter": it, "loss_total": value, "loss_coarse": parts["coarse"], "loss_refine": parts["refine"],
               "penalty": parts["penalty"], "alpha": alpha, "val_mae_db": None}
        if validation is not None and cfg.val_every and (it + 1) % cfg.val_every == 0:
            row["val_mae_db"] = float(validation(model))
        result.trace.append(row)
        result.iteration = it + 1
        if progress is not None:
            progress(row)
    return result


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for row in trace:
            w.writerow(["" if row[k] is None else repr(float(row[k])) if k != "iter" else str(row[k]) for k in TRACE_FIELDS])
