"""Acceptance gate: one test per shipped guarantee, pass/fail apiece.

Fast numerics first (projection, attention, gradients, physics, band
extraction, tomography, metric oracles), then the training checks on a
fixed synthetic benchmark: an overfit smoke test, the spectral-band
ablation, the multi-view second stage, and byte-level determinism.
Each test prints one summary line with its measured figures (visible
under pytest -s); runtime bounds are asserted where the guarantee
includes one.
"""

import json
import os
import time

import numpy as np
import pytest
import torch

import thztomo.thz_signal as sig
import thztomo.tomo as tomo
from thztomo.cli import main as cli_main
from thztomo.metrics import fscore as metric_fscore
from thztomo.metrics import iou as metric_iou
from thztomo.metrics import psnr as metric_psnr
from thztomo.metrics import PointCloud, chamfer, volume_to_pointcloud
from thztomo.phantom import (
    AngleCfg,
    CorruptCfg,
    RenderCfg,
    build_dataset,
    make_phantom,
    project_thickness,
)
from thztomo.sarnet import (
    ConvBlock,
    ChannelAttention,
    MultiViewFusion,
    NetworkCfg,
    SARNet,
    SubspaceAttentionFusion,
    orth_project,
    safm_attention,
)
from thztomo.train import (
    TrainCfg,
    ViewStore,
    load_trained,
    mean_psnr,
    normalized_arrays,
    train_stage,
)

BENCH_SEED = 101
BENCH_OBJECTS = [
    {"id": "dumbbell", "shape": {"op": "union", "shapes": [
        {"primitive": "sphere", "center": [0.0, 5.5, 0.0], "radius": 4.5},
        {"primitive": "sphere", "center": [0.0, -5.5, 0.0], "radius": 4.5},
        {"primitive": "cylinder", "center": [0.0, 0.0, 0.0], "radius": 2.0,
         "height": 11.0, "axis": 1},
    ]}},
    {"id": "shell", "shape": {"op": "difference", "shapes": [
        {"primitive": "sphere", "radius": 8.0},
        {"primitive": "sphere", "radius": 5.5},
    ]}},
    {"id": "block", "shape": {"op": "difference", "shapes": [
        {"primitive": "box", "center": [0.5, -0.5, 0.0],
         "size": [14.0, 11.0, 8.0]},
        {"primitive": "cylinder", "center": [0.5, -0.5, 0.0], "radius": 2.5,
         "height": 30.0, "axis": 0},
    ]}},
]
BENCH_IDS = [o["id"] for o in BENCH_OBJECTS]


def rand(*shape, seed, lo=-1.0, hi=1.0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return lo + (hi - lo) * torch.rand(*shape, generator=g, dtype=dtype)


def fd_rel_err(fn, tensors, n_coords=4, seed=0, h=1e-5):
    """Worst relative error, autograd vs central differences.

    A fixed random projection of the output serves as the scalar loss;
    a few coordinates of every probed tensor are perturbed.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.requires_grad_(True)
    out = fn()
    proj = torch.from_numpy(rng.standard_normal(tuple(out.shape)))
    grads = torch.autograd.grad((out * proj).sum(), tensors)
    worst = 0.0
    for t, g in zip(tensors, grads):
        flat = t.detach().reshape(-1)
        gflat = g.reshape(-1)
        idx = rng.choice(flat.numel(), size=min(n_coords, flat.numel()),
                         replace=False)
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                hi_val = (fn() * proj).sum().item()
                flat[i] = orig - h
                lo_val = (fn() * proj).sum().item()
                flat[i] = orig
            fd = (hi_val - lo_val) / (2 * h)
            an = gflat[i].item()
            scale = max(abs(an), abs(fd))
            err = abs(an - fd) / scale if scale > 1e-7 else abs(an - fd)
            worst = max(worst, err)
    for t in tensors:
        t.requires_grad_(False)
    return worst


def dirichlet_sum(g, n_t, dt):
    """Closed form of sum_k exp(-2j pi g k dt) for k = 0..n_t-1."""
    r = np.exp(-2j * np.pi * g * dt)
    if abs(r - 1.0) < 1e-15:
        return complex(n_t)
    return (1.0 - r ** n_t) / (1.0 - r)


def test_c01_subspace_projection_idempotent():
    basis = rand(200, 256, 16, seed=11, dtype=torch.float32)
    x = rand(200, 256, 1, seed=12, dtype=torch.float32)
    t0 = time.perf_counter()
    px = orth_project(basis, x)
    ppx = orth_project(basis, px)
    pv = orth_project(basis, basis)
    elapsed = time.perf_counter() - t0
    idem = (ppx - px).abs().max().item()
    contain = (pv - basis).abs().max().item()
    assert idem < 1e-5
    assert contain < 1e-5
    assert elapsed < 1.0
    print(f"PASS 01 subspace projection: idempotence {idem:.2e}, "
          f"basis containment {contain:.2e}, {elapsed * 1e3:.0f} ms "
          f"for 200 cases")


def test_c02_attention_rows_normalized():
    scales = torch.logspace(-2, 2, 100, dtype=torch.float64).view(100, 1, 1)
    basis = rand(100, 256, 8, seed=21) * scales
    beta = safm_attention(basis)
    sums = beta.sum(-1)
    worst = (sums - 1.0).abs().max().item()
    assert worst < 1e-6
    zero = safm_attention(torch.zeros(1, 256, 4, dtype=torch.float64))
    uniform = torch.full((1, 256, 256), 1.0 / 256, dtype=torch.float64)
    assert torch.allclose(zero, uniform, atol=1e-12)
    assert (zero.sum(-1) - 1.0).abs().max().item() < 1e-6
    print(f"PASS 02 attention rows: worst row-sum error {worst:.2e} over "
          f"100 scaled bases, zero basis uniform to 1e-12")


def test_c03_gradients_match_finite_differences():
    # module construction draws parameters from torch's global stream;
    # pin it so the probed coordinates never depend on test ordering
    torch.manual_seed(303)
    t0 = time.perf_counter()
    errs = {}

    blk = ConvBlock(3, 5).double().eval()
    x = rand(2, 3, 16, 16, seed=31)
    errs["conv_block"] = fd_rel_err(
        lambda: blk(x), [x] + list(blk.parameters()), seed=32)

    safm = SubspaceAttentionFusion(8, 4, 6).double().eval()
    amp = rand(2, 3, 8, 8, seed=33, lo=0.0, hi=1.0)
    phase = rand(2, 3, 8, 8, seed=34)
    feat = rand(2, 8, 8, 8, seed=35)
    errs["safm"] = fd_rel_err(
        lambda: safm(amp, phase, feat),
        [amp, phase, feat] + list(safm.parameters()), seed=36)

    cam = ChannelAttention(4, groups=2).double().eval()
    a = rand(2, 4, 8, 8, seed=37)
    b = rand(2, 4, 8, 8, seed=38)
    errs["cam"] = fd_rel_err(
        lambda: cam(a, b), [a, b] + list(cam.parameters()), seed=39)

    fuse = MultiViewFusion(6).double().eval()
    f1 = rand(2, 6, 8, 8, seed=40)
    f2 = rand(2, 6, 8, 8, seed=41)
    f3 = rand(2, 6, 8, 8, seed=42)
    errs["multiview_fuse"] = fd_rel_err(
        lambda: fuse(f1, f2, f3), [f1, f2, f3] + list(fuse.parameters()),
        seed=43)

    net = SARNet(NetworkCfg.desk()).double().eval()
    tm = rand(1, 1, 16, 16, seed=44, lo=0.0, hi=1.0)
    amp12 = rand(1, 12, 16, 16, seed=45, lo=0.0, hi=1.0)
    ph12 = rand(1, 12, 16, 16, seed=46)
    params = [p for p in net.parameters()][::7]
    errs["desk_sarnet"] = fd_rel_err(
        lambda: net(tm, amp12, ph12)[0], [tm, amp12, ph12] + params,
        n_coords=3, seed=47)

    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    assert worst < 1e-3, errs
    assert elapsed < 300.0
    listing = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    print(f"PASS 03 gradients vs central differences: {listing} "
          f"({elapsed:.0f} s)")


def test_c04_measurement_physics():
    mat = sig.MaterialProfile.constant(1.6, 0.02, fresnel_t=1.0)
    ref = 1.3 - 0.7j
    out = sig.detected_spectrum(ref, mat, 0.0, 1.0)
    assert out == ref

    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10):
        n = rng.uniform(1.1, 2.2)
        f = rng.uniform(0.3, 3.0)
        d = rng.uniform(0.0, 4.0)
        case = sig.MaterialProfile.constant(n, 0.01)
        delta = 0.05 / f
        s1 = sig.detected_spectrum(1.0, case, d, f)
        s2 = sig.detected_spectrum(1.0, case, d + delta, f)
        slope = np.angle(s2 / s1) / delta
        expect = -n * 2.0 * np.pi * f / sig.C_MM_PS
        worst = max(worst, abs(slope - expect) / abs(expect))
    assert worst < 1e-9

    pulse = sig.ReferencePulse.default()
    lossy = sig.MaterialProfile.constant(1.5, 0.02)
    peaks = [sig.time_max(sig.simulate_trace(pulse, lossy, d))
             for d in (0.0, 0.5, 1.0, 2.0)]
    assert all(b < a for a, b in zip(peaks, peaks[1:]))
    print(f"PASS 04 physics: zero-thickness identity exact, phase slope "
          f"rel err {worst:.1e}, peak strictly decreasing "
          f"{[round(p, 4) for p in peaks]}")


def test_c05_band_extraction_closed_forms():
    n_t, dt = 1000, 0.1
    k = np.arange(n_t)

    on_grid = 0.52
    s = sig.extract_band(np.cos(2 * np.pi * on_grid * k * dt), on_grid, dt=dt)
    amp_err = abs(s.amplitude - 1.0)
    assert amp_err < 1e-6

    phase_err = 0.0
    for tau in (0.33, 1.7, -2.05):
        trace = np.cos(2 * np.pi * on_grid * (k * dt - tau))
        got = sig.extract_band(trace, on_grid, dt=dt).phase
        expect = sig.wrap_phase(-2 * np.pi * on_grid * tau)
        phase_err = max(phase_err, abs(got - expect))
    assert phase_err < 1e-6

    band_err = 0.0
    for f in sig.WATER_BANDS_THZ:
        trace = np.cos(2 * np.pi * f * k * dt)
        coef = n_t / 2.0 + dirichlet_sum(2 * f, n_t, dt) / 2.0
        got = sig.extract_band(trace, f, dt=dt)
        band_err = max(band_err, abs(got.amplitude - abs(coef) * 2.0 / n_t))
        band_err = max(band_err,
                       abs(sig.wrap_phase(got.phase - np.angle(coef))))
    assert band_err < 1e-6
    print(f"PASS 05 band extraction: on-grid amplitude err {amp_err:.1e}, "
          f"delay phase err {phase_err:.1e}, 12-band closed form err "
          f"{band_err:.1e}")


def test_c06_tomography_round_trip():
    t0 = time.perf_counter()
    n, radius = 128, 40
    c = (n - 1) / 2.0
    yy, xx = np.mgrid[0:n, 0:n]
    img = np.where((xx - c) ** 2 + (yy - c) ** 2 <= radius ** 2, 0.8, 0.0)
    interior = (xx - c) ** 2 + (yy - c) ** 2 <= (radius - 2.0) ** 2
    angles = np.linspace(0.0, 180.0, 60, endpoint=False)
    sino = tomo.forward_radon(img, angles)

    rec_fbp = tomo.fbp(sino)
    err_fbp = (np.sqrt(np.mean((rec_fbp - img)[interior] ** 2))
               / img[interior].mean())
    assert err_fbp < 0.05

    rec_sart = tomo.sart(sino, iters=20, relax=0.25)
    err_sart = (np.sqrt(np.mean((rec_sart - img)[interior] ** 2))
                / img[interior].mean())
    assert err_sart <= err_fbp

    ph = make_phantom({"primitive": "sphere", "radius": 10.0},
                      grid_size=96, voxel_size=0.5)
    views = np.stack([project_thickness(ph, th) for th in angles])
    volume = tomo.reconstruct_volume(views, angles, voxel_size=0.5)
    got = int(np.count_nonzero(volume.data > 0.5))
    want = int(np.count_nonzero(ph.grid > 0.5))
    assert abs(got - want) <= 0.10 * want
    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0
    print(f"PASS 06 tomography: FBP interior RMSE {err_fbp:.3f}, SART "
          f"{err_sart:.3f}, sphere occupancy {got}/{want} "
          f"({elapsed:.0f} s)")


def test_c10_metric_oracles():
    rng = np.random.default_rng(10)
    for case in range(100):
        side = int(rng.integers(2, 9))
        va = rng.random((side, side, side))
        vb = rng.random((side, side, side))
        thr = float(rng.uniform(0.2, 0.8))
        a_occ, b_occ = va > thr, vb > thr
        inter = int(np.count_nonzero(a_occ & b_occ))
        union = int(np.count_nonzero(a_occ | b_occ))
        want_iou = inter / union if union else 1.0
        assert metric_iou(va, vb, thr) == want_iou

        x = rng.random((side, side))
        y = rng.random((side, side))
        mse = float(np.mean((x - y) ** 2))
        assert abs(metric_psnr(x, y) - 10.0 * np.log10(1.0 / mse)) <= 1e-9

        na, nb = int(rng.integers(1, 201)), int(rng.integers(1, 201))
        pa = PointCloud(points=rng.normal(size=(na, 3)))
        pb = PointCloud(points=rng.normal(size=(nb, 3)))
        d2 = ((pa.points[:, None, :] - pb.points[None, :, :]) ** 2).sum(-1)
        ab, ba = d2.min(axis=1), d2.min(axis=0)
        want_ch = 0.5 * (ab.mean() + ba.mean())
        assert abs(chamfer(pa, pb) - want_ch) <= 1e-9 * max(want_ch, 1.0)

        tau = float(rng.uniform(0.05, 2.0))
        precision = float(np.mean(np.sqrt(ab) < tau))
        recall = float(np.mean(np.sqrt(ba) < tau))
        want_f = (2 * precision * recall / (precision + recall)
                  if precision + recall else 0.0)
        assert abs(metric_fscore(pa, pb, tau) - want_f) <= 1e-9

    cube = volume_to_pointcloud(np.ones((3, 3, 3)), 0.5, 1.0)
    assert cube.points.shape[0] == 26
    print("PASS 10 metric oracles: IoU exact, PSNR/F-score/Chamfer within "
          "1e-9 on 100 instances, 3-cube boundary has 26 points")


GEN_CFG_SMALL = {
    "seed": 17,
    "objects": [
        {"id": "ball", "shape": {"primitive": "sphere", "radius": 4.0}},
        {"id": "slab", "shape": {"primitive": "box",
                                 "size": [5.0, 6.0, 3.0]}},
    ],
    "angles": {"count": 3},
    "render": {"grid_size": 32, "voxel_mm": 0.5},
    "corrupt": {"k_blur": 1.0, "snr_db": 25.0},
}


def _tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


def test_c11_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("THZ_TOMO_DETERMINISTIC", "1")
    ds = str(tmp_path / "ds")
    gen_cfg = tmp_path / "gen.json"
    gen_cfg.write_text(json.dumps(dict(GEN_CFG_SMALL, out=ds)))
    assert cli_main(["gen-data", "--config", str(gen_cfg)]) == 0
    first = _tree_bytes(ds)
    assert cli_main(["gen-data", "--config", str(gen_cfg)]) == 0
    second = _tree_bytes(ds)
    assert sorted(first) == sorted(second)
    diffs = [rel for rel in first if first[rel] != second[rel]]
    assert diffs == []

    logs = []
    for run in ("a", "b"):
        out = str(tmp_path / f"tr_{run}")
        cfg = tmp_path / f"train_{run}.json"
        cfg.write_text(json.dumps({
            "out": out, "dataset": ds, "seed": 3,
            "train": {"epochs": 2, "batch_size": 2, "crop": None,
                      "val_views": 2}}))
        assert cli_main(["train", "--config", str(cfg)]) == 0
        with open(os.path.join(out, "log.ndjson"), "rb") as fh:
            logs.append(fh.read())
    assert logs[0] == logs[1]
    with open(str(tmp_path / "tr_a" / "ckpt_last.bin"), "rb") as fh:
        ck_a = fh.read()
    with open(str(tmp_path / "tr_b" / "ckpt_last.bin"), "rb") as fh:
        ck_b = fh.read()
    assert ck_a == ck_b
    print(f"PASS 11 determinism: dataset tree of {len(first)} files "
          f"byte-identical across reruns, training logs and checkpoints "
          f"byte-identical across runs")


def _holdout_psnr(dataset, ckpt, oid, zero_bands=False):
    model, _, _ = load_trained(ckpt)
    store = ViewStore(dataset, [oid])
    items = [(oid, k) for k in range(store.n_views(oid))]
    return mean_psnr(model, store, items, zero_bands=zero_bands)


def test_c07_overfit_smoke(tmp_path):
    t0 = time.perf_counter()
    ds = str(tmp_path / "ds8")
    build_dataset(BENCH_OBJECTS[:1], ds, seed=BENCH_SEED,
                  angles=AngleCfg(count=8),
                  render=RenderCfg(grid_size=48, voxel_mm=0.5),
                  corrupt=CorruptCfg(k_blur=5.0, snr_db=10.0))
    store = ViewStore(ds, ["dumbbell"])
    base = []
    for k in range(8):
        rec, meta = store.get("dumbbell", k)
        ex = normalized_arrays(rec, meta)
        base.append(metric_psnr(ex["gt"][0], ex["timemax"][0]))
    corrupted = float(np.mean(base))

    out = str(tmp_path / "overfit")
    cfg = TrainCfg(epochs=200, batch_size=4, crop=None, seed=70)
    train_stage(ds, out, NetworkCfg.desk(), cfg)
    restored = _holdout_psnr(ds, os.path.join(out, "ckpt_best.bin"),
                             "dumbbell")
    elapsed = time.perf_counter() - t0
    assert restored >= corrupted + 5.0, (restored, corrupted)
    assert elapsed < 1800.0
    print(f"PASS 07 overfit: restored {restored:.2f} dB vs corrupted input "
          f"{corrupted:.2f} dB (+{restored - corrupted:.2f}, need +5) in "
          f"{elapsed:.0f} s")


@pytest.fixture(scope="module")
def bench_dataset(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("bench") / "ds")
    build_dataset(BENCH_OBJECTS, root, seed=BENCH_SEED,
                  angles=AngleCfg(count=60),
                  render=RenderCfg(grid_size=48, voxel_mm=0.5),
                  corrupt=CorruptCfg(k_blur=5.0, snr_db=10.0))
    return root


@pytest.fixture(scope="module")
def benchmark_runs(bench_dataset, tmp_path_factory):
    """Leave-one-out training table: per fold, both stage-1 arms and
    the stage-2 refiner, scored on all 60 held-out views."""
    root = tmp_path_factory.mktemp("bench_runs")
    net = NetworkCfg.desk()
    table = {}
    for i, holdout in enumerate(BENCH_IDS):
        fold = {}
        for arm, zero in (("bands", False), ("zeroed", True)):
            out = str(root / f"f{i}_{arm}")
            cfg = TrainCfg(epochs=300, batch_size=4, crop=None, seed=40 + i,
                           views_per_epoch=36, val_views=12, zero_bands=zero)
            train_stage(bench_dataset, out, net, cfg, holdout=holdout)
            fold[arm] = _holdout_psnr(bench_dataset,
                                      os.path.join(out, "ckpt_best.bin"),
                                      holdout, zero_bands=zero)
        out2 = str(root / f"f{i}_mv")
        cfg2 = TrainCfg(epochs=200, batch_size=4, crop=None, seed=80 + i,
                        views_per_epoch=36, val_views=12, stage=2)
        train_stage(bench_dataset, out2, net, cfg2, holdout=holdout,
                    stage1_ckpt=str(root / f"f{i}_bands" / "ckpt_best.bin"))
        fold["multiview"] = _holdout_psnr(
            bench_dataset, os.path.join(out2, "ckpt_best.bin"), holdout)
        table[holdout] = fold
    return table


def test_c08_band_ablation(benchmark_runs):
    bands = np.mean([benchmark_runs[o]["bands"] for o in BENCH_IDS])
    zeroed = np.mean([benchmark_runs[o]["zeroed"] for o in BENCH_IDS])
    per_fold = ", ".join(
        f"{o} {benchmark_runs[o]['bands']:.2f}/{benchmark_runs[o]['zeroed']:.2f}"
        for o in BENCH_IDS)
    assert bands >= zeroed + 0.5, benchmark_runs
    print(f"PASS 08 band ablation: spectral {bands:.2f} dB vs zeroed "
          f"{zeroed:.2f} dB (+{bands - zeroed:.2f}, need +0.5); per fold "
          f"bands/zeroed: {per_fold}")


def test_c09_multiview_stage(benchmark_runs):
    s1 = np.mean([benchmark_runs[o]["bands"] for o in BENCH_IDS])
    s2 = np.mean([benchmark_runs[o]["multiview"] for o in BENCH_IDS])
    wins = sum(benchmark_runs[o]["multiview"] > benchmark_runs[o]["bands"]
               for o in BENCH_IDS)
    per_fold = ", ".join(
        f"{o} {benchmark_runs[o]['multiview']:.2f} vs "
        f"{benchmark_runs[o]['bands']:.2f}" for o in BENCH_IDS)
    assert s2 >= s1 - 0.1, benchmark_runs
    assert wins >= 2, benchmark_runs
    print(f"PASS 09 multi-view: stage-2 mean {s2:.2f} dB vs stage-1 "
          f"{s1:.2f} dB, wins {wins}/3; per fold: {per_fold}")
