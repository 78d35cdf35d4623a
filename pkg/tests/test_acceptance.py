"""Acceptance criteria 1-12, each at its stated tolerance.

Every test records a PASS/FAIL verdict (printed again in the terminal
summary) and then asserts it. The end-to-end criteria are marked ``slow``.
"""

import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from acceptance_report import record
from gradcheck import fd_gradient_check
from rflscm.config import load_config
from rflscm.data import (TRAIN_CODEBOOK, observations_from_records, split_dataset, synthesize_measurements)
from rflscm.fdam import fdam_series_oracle, fdam_t
from rflscm.fields import VmField
from rflscm.geometry import AngularGrid, SceneBounds
from rflscm.protocols import (ProtocolSpec, build_model, fit_and_score, run_protocol,
                              subsample_links, wnomp_score)
from rflscm.renderer import ConstantGate
from rflscm.sensing import AntennaArray, BeamCodebook, build_sensing_matrix
from rflscm.trainer import RenderSetup, RfLscm, train
from test_sensing import enumerate_gain
from wnomp_oracle import support_recovery_trial

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _c(v):
    return torch.as_tensor(v, dtype=torch.complex128)


# ---------------------------------------------------------------- 1, 2: FDAM


def _passive_draws(rng, n):
    """Passive media over several decades: log-uniform real parts, loss tangents up to 1."""
    re = np.exp(rng.uniform(0.0, math.log(1e3), size=(n, 3, 2)))
    lossy = rng.random((n, 3, 2)) < 0.7
    im = np.where(lossy, -re * rng.uniform(0.0, 1.0, size=(n, 3, 2)), 0.0)
    media = re + 1j * im
    lam = np.exp(rng.uniform(math.log(0.01), math.log(1.0), n))
    d = np.exp(rng.uniform(math.log(1e-3), math.log(1.0), n))
    return media, lam, d


def _loop_gain(media, lam, d):
    z = np.sqrt(media[..., 0] / media[..., 1])
    g_in = (z[:, 1] - z[:, 0]) / (z[:, 1] + z[:, 0])
    g_out = (z[:, 2] - z[:, 1]) / (z[:, 2] + z[:, 1])
    n = np.sqrt(media[:, 1, 0] * media[:, 1, 1])
    n = np.where(n.imag > 0, -n, n)
    t = np.exp(-2j * np.pi / lam * n * d)
    return np.abs(g_in * g_out * t * t)


def test_c1_fdam_closed_form_matches_series():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    media, lam, d = np.empty((0, 3, 2), complex), np.empty(0), np.empty(0)
    while len(lam) < 10_000:
        m, l_, d_ = _passive_draws(rng, 20_000)
        keep = _loop_gain(m, l_, d_) <= 0.9
        media, lam, d = np.concatenate([media, m[keep]]), np.concatenate([lam, l_[keep]]), np.concatenate([d, d_[keep]])
    media, lam, d = media[:10_000], lam[:10_000], d[:10_000]
    closed = fdam_t(*(_c(media[:, j, k]) for j in range(3) for k in range(2)),
                    torch.as_tensor(lam), torch.as_tensor(d)).numpy()
    series = fdam_series_oracle((media[:, 0, 0], media[:, 0, 1]), (media[:, 1, 0], media[:, 1, 1]),
                                (media[:, 2, 0], media[:, 2, 1]), lam, d, 200)
    diff = np.abs(closed - series)
    # thick lossy slabs underflow to exactly zero in both forms
    rel = np.where(diff == 0, 0.0, diff / np.maximum(np.abs(closed), 1e-300))
    wall = time.perf_counter() - t0
    loop = _loop_gain(media, lam, d)
    ok = record(1, rel.max() < 1e-10 and wall < 5.0,
                f"max rel err {rel.max():.2e} (tol 1e-10) over 1e4 draws, {np.sum(rel >= 1e-10)} draws above "
                f"tol (all with |loop| >= {loop[rel >= 1e-10].min() if np.any(rel >= 1e-10) else 0:.3f}), "
                f"{wall:.1f} s (limit 5 s); residual after removing the truncation term |loop|^200: "
                f"{np.max(np.abs(rel - loop ** 200)):.1e}")
    assert ok


def test_c2_free_space_unitarity():
    rng = np.random.default_rng(7)
    lam = rng.uniform(1e-3, 10.0, 1000)
    d = rng.uniform(1e-3, 100.0, 1000)
    one = _c(np.ones(1000))
    delta = fdam_t(one, one, one, one, one, one, torch.as_tensor(lam), torch.as_tensor(d))
    err = float((delta.abs() - 1.0).abs().max())
    assert record(2, err <= 1e-12, f"max ||delta| - 1| = {err:.1e} over 1e3 (lambda, d)")


# ---------------------------------------------------------------- 3: gradients


def test_c3_gradient_suite():
    t0 = time.perf_counter()
    worst, n = fd_gradient_check(alpha=0.5)
    wall = time.perf_counter() - t0
    ok = record(3, worst < 1e-3 and wall < 120.0,
                f"max rel err {worst:.1e} over all {n} parameters, {wall:.0f} s (limit 120 s)")
    assert ok


# ---------------------------------------------------------------- 4: VM reconstruction


def _planted_tensor(seed):
    """Rank-4 VM tensor on an 8x8x8x3 grid, summed node by node in numpy."""
    rng = np.random.default_rng(seed)
    R, n, D = 4, 8, 3
    f = {name: rng.uniform(-1, 1, size) for name, size in
         (("vec_x", (R, n)), ("vec_y", (R, n)), ("vec_z", (R, n)),
          ("mat_yz", (R, n, n)), ("mat_xz", (R, n, n)), ("mat_xy", (R, n, n)), ("basis", (3, D)))}
    T = np.zeros((n, n, n, D))
    for r in range(R):
        T += np.einsum("i,jk,d->ijkd", f["vec_x"][r], f["mat_yz"][r], f["basis"][0])
        T += np.einsum("j,ik,d->ijkd", f["vec_y"][r], f["mat_xz"][r], f["basis"][1])
        T += np.einsum("k,ij,d->ijkd", f["vec_z"][r], f["mat_xy"][r], f["basis"][2])
    return f, T


def test_c4_vm_reconstruction():
    factors, T = _planted_tensor(0)
    bounds = SceneBounds((0.0, 0.0, 0.0), (7.0, 7.0, 7.0), (8, 8, 8))
    field = VmField(4, (8, 8, 8), 3, dtype=torch.float64)
    with torch.no_grad():
        for name, value in factors.items():
            getattr(field, name).copy_(torch.as_tensor(value))
    nodes = np.stack(np.meshgrid(*[np.arange(8.0)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    with torch.no_grad():
        at_nodes = field(torch.as_tensor(nodes), bounds).numpy().reshape(8, 8, 8, 3)
    direct = float(np.abs(at_nodes - T).max())

    # gradient fit; rank 16 > 4 gives the optimizer room to escape poor minima
    target = torch.as_tensor(T)
    fit = VmField(16, (8, 8, 8), 3, dtype=torch.float64).init_uniform(torch.Generator().manual_seed(100), scale=0.3)
    opt = torch.optim.Adam(fit.parameters(), lr=0.2)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, 2000)
    for _ in range(2000):
        opt.zero_grad()
        loss = ((fit.to_dense() - target) ** 2).mean()
        loss.backward()
        opt.step()
        sched.step()
    with torch.no_grad():
        mae = float((fit.to_dense() - target).abs().mean())
    ok = record(4, direct < 1e-6 and mae < 1e-3,
                f"direct assignment max err {direct:.1e} (tol 1e-6), Adam 2000 steps mean abs err {mae:.1e} (tol 1e-3)")
    assert ok


# ---------------------------------------------------------------- 5: sensing matrix


def test_c5_sensing_matrix_oracle():
    rng = np.random.default_rng(5)
    array = AntennaArray(4, 2, 0.5, azimuth_deg=-15.0, downtilt_deg=6.0)
    w = rng.normal(size=(8, 2, 4)) + 1j * rng.normal(size=(8, 2, 4))
    cb = BeamCodebook("acc", 4, 2, w, tx_power_dbm=20.0)
    grid = AngularGrid(3, 8, (80.0, 140.0), (-80.0, 80.0))
    lam = 0.1428
    A = build_sensing_matrix(array, cb, grid, lam).entries
    tilt, az = grid.bin_angles()
    ref = np.array([[enumerate_gain(array, w[m], lam, tilt[n], az[n], cb.tx_power_mw) for n in range(24)]
                    for m in range(8)])
    err = float(np.abs(A - ref).max() / max(1.0, ref.max()))
    assert record(5, A.shape == (8, 24) and err <= 1e-9, f"shape {A.shape}, max scaled err {err:.1e} (tol 1e-9)")


# ---------------------------------------------------------------- 6, 12: end to end


@pytest.fixture(scope="module")
def e2e():
    cfg = load_config(CONFIGS / "e2e.ini")
    syn = synthesize_measurements(cfg)
    split = split_dataset(syn.records, "by-codebook", {"train_codebooks": (TRAIN_CODEBOOK,)}, cfg.train.seed)
    train_obs = observations_from_records(split.train, syn.cells, syn.sensing)
    test_obs = observations_from_records(split.test, syn.cells, syn.sensing)
    return cfg, syn, train_obs, test_obs


@pytest.fixture(scope="module")
def e2e_run(e2e):
    cfg, syn, train_obs, test_obs = e2e
    t0 = time.perf_counter()
    out = fit_and_score(cfg, syn, train_obs, test_obs)
    return out, time.perf_counter() - t0


@pytest.mark.slow
def test_c6_end_to_end_beats_wnomp(e2e, e2e_run):
    cfg, syn, train_obs, test_obs = e2e
    out, wall = e2e_run
    n_paths = np.bincount([np.count_nonzero(v) for v in syn.truth_aps.values()])
    wnomp_mae, _ = wnomp_score(cfg, train_obs, test_obs)
    ok = out.mae_db <= wnomp_mae and out.mae_db <= 3.0 and wall < 1800
    record(6, ok, f"RF-LSCM {out.mae_db:.3f} dB vs WNOMP {wnomp_mae:.3f} dB (need <= WNOMP and <= 3 dB), "
                  f"paths/grid histogram {n_paths.tolist()}, {wall:.0f} s on {torch.get_num_threads()} thread(s)")
    assert ok


@pytest.mark.slow
def test_c12_determinism(e2e, e2e_run):
    cfg, syn, train_obs, test_obs = e2e
    first, _ = e2e_run
    second = fit_and_score(cfg, syn, train_obs, test_obs)
    same_trace = [repr(sorted(r.items())) for r in first.result.trace] == \
                 [repr(sorted(r.items())) for r in second.result.trace]
    same_mae = first.mae_db.hex() == second.mae_db.hex()
    ok = same_trace and same_mae
    record(12, ok, f"traces identical: {same_trace} ({len(first.result.trace)} rows), "
                   f"MAE {first.mae_db.hex()} vs {second.mae_db.hex()}")
    assert ok


# ---------------------------------------------------------------- 7: multi-frequency


@pytest.mark.slow
def test_c7_second_band_helps():
    base = load_config(CONFIGS / "e2e.ini")
    cfg = replace(base, cells=tuple(replace(c, wavelengths=(0.1428, 0.0857)) for c in base.cells))
    rows = run_protocol(ProtocolSpec("multifreq-sweep", fractions=(0.05,)), cfg)
    mae = {r.arm: r.mae_db for r in rows}
    ok = mae["band1+band2"] < mae["band1-only"]
    record(7, ok, f"band-1 test MAE at p=5%: band1-only {mae['band1-only']:.3f} dB, "
                  f"band1+band2 {mae['band1+band2']:.3f} dB (need strict decrease), "
                  f"{sum(r.wall_s for r in rows):.0f} s")
    assert ok


# ---------------------------------------------------------------- 8: missing-data penalty


@pytest.mark.slow
def test_c8_missing_data_penalty():
    base = load_config(CONFIGS / "e2e.ini")
    cfg = replace(base, synth=replace(base.synth, mask_quantile=0.3))
    syn = synthesize_measurements(cfg)
    rows = run_protocol(ProtocolSpec("ablation", ablate=("alpha_p",), alpha_p_grid=(0.0, 0.5)), cfg, syn)
    mae = {r.param: r.mae_db for r in rows}
    train_beams = [r for r in syn.records if r.codebook_id == TRAIN_CODEBOOK]
    masked = 1.0 - np.mean([r.reported for r in train_beams]) if train_beams else float("nan")
    ok = mae["0.5"] <= mae["0"]
    record(8, ok, f"alpha_P=0.5 {mae['0.5']:.3f} dB vs alpha_P=0 {mae['0']:.3f} dB "
                  f"({100 * masked:.0f}% of round-1 beams unreported)")
    assert ok


# ---------------------------------------------------------------- 9: HiTAM


@pytest.mark.slow
def test_c9_hitam_selection():
    cfg = load_config(CONFIGS / "hitam.ini")
    syn = synthesize_measurements(cfg)
    split = split_dataset(syn.records, "by-codebook", {"train_codebooks": (TRAIN_CODEBOOK,)}, 0)
    obs = observations_from_records(split.train, syn.cells, syn.sensing)
    single = [o for o in obs if np.count_nonzero(syn.truth_aps[(o.cell.key, o.grid_id)]) == 1]
    probe = single[0]
    planted = int(np.argmax(syn.truth_aps[(probe.cell.key, probe.grid_id)]))
    want = cfg.hitam.beta_ang ** 2 * cfg.hitam.k_coarse
    hits, sizes_ok = 0, True
    for seed in range(20):
        c = replace(cfg, train=replace(cfg.train, seed=seed, max_iters=cfg.hitam.coarse_pretrain_iters))
        model = build_model(c, syn.scene.points, obs, syn.r_th_mw)
        train(obs, model, c.train)
        with torch.no_grad():
            pos = np.stack([o.position for o in obs])
            bins = model.refine_bins(model.coarse_aps(probe.cell, pos), probe.cell)
        sizes_ok &= bins.shape[1] == want and all(len(set(row)) == want for row in bins)
        idx = next(i for i, o in enumerate(obs) if o is probe)
        hits += planted in bins[idx]
    ok = sizes_ok and hits >= 19
    record(9, ok, f"|Omega'| = {want} on every link: {sizes_ok}; planted bin kept in {hits}/20 runs (need >= 19)")
    assert ok


# ---------------------------------------------------------------- 10: point cloud


@pytest.mark.slow
def test_c10_point_cloud_regularization(e2e):
    cfg, syn, train_obs, test_obs = e2e
    few = subsample_links(train_obs, 0.1, cfg.train.seed)
    on = fit_and_score(replace(cfg, use_pointcloud=True), syn, few, test_obs)
    off = fit_and_score(replace(cfg, use_pointcloud=False), syn, few, test_obs)
    dark = RfLscm(on.model.models, RenderSetup(cfg.bounds, ConstantGate(0.0), cfg.ray), cfg.hitam,
                  on.model.loss, on.model.scale)
    aps = [dark.predict_aps(o.cell, o.position) for o in test_obs]
    zero = all(not np.any(a) for a in aps)
    ok = on.mae_db <= off.mae_db and zero
    record(10, ok, f"10% of links: point cloud on {on.mae_db:.3f} dB vs off {off.mae_db:.3f} dB; "
                   f"Phi = 0 gives all-zero APS: {zero}")
    assert ok


# ---------------------------------------------------------------- 11: WNOMP


def test_c11_wnomp_support_recovery():
    rng = np.random.default_rng(11)
    wnomp_ok = oracle_ok = 0
    for _ in range(100):
        truth, est, best = support_recovery_trial(rng, m=16, n=64, k=2)
        wnomp_ok += est == truth and est == best
        oracle_ok += best == truth
    ok = wnomp_ok >= 95 and oracle_ok == 100
    record(11, ok, f"WNOMP exact support {wnomp_ok}/100 (need >= 95), agreeing with exhaustive "
                   f"enumeration; enumeration recovers truth {oracle_ok}/100")
    assert ok
