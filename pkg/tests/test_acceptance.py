"""Acceptance criteria; each test prints one pass/fail line.

Run ``pytest tests/test_acceptance.py -v -s`` to see the lines inline; they
are also repeated in the terminal summary.
"""

import time

import numpy as np
import pytest
import torch
from scipy import stats

from conftest import record_criterion
from ffpverify.camera import pixel_ray
from ffpverify.network import FFPClassifier, FusedPyramidNet, grad_check, softmax
from ffpverify.patches import Homography, dlt_homography, occlusion_mask, warp_image
from ffpverify.pipeline import PipelineConfig, run_all
from ffpverify.render import face_mesh, raycast_depth_image, render_depth
from ffpverify.synth import SyntheticSceneSpec, write_dataset
from ffpverify.voting import ConfusionCounts, compute_metrics
from ffpverify import io
from ffpverify.corpus import depth_corpus
from scenes import camera, compare_with_oracle, random_mesh
from published_counts import ROWS
from test_patches import two_plane_scene


@pytest.fixture(autouse=True)
def _threads():
    n = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(n)


def test_criterion_1_published_metric_arithmetic():
    t0 = time.perf_counter()
    bad = []
    for dataset, mode, tp, fn, fp, tn, cp, cn in ROWS:
        m = compute_metrics(ConfusionCounts(tp, fn, fp, tn))
        if abs(m.C_P - cp) > 0.1 + 1e-9 or abs(m.C_N - cn) > 0.1 + 1e-9:
            bad.append(f"{dataset} {mode}: got {m.C_P}/{m.C_N}, printed {cp}/{cn}")
    dt = time.perf_counter() - t0
    ok = not bad and dt < 1.0
    detail = f"{len(ROWS) - len(bad)}/{len(ROWS)} rows within 0.1 pp in {dt * 1e3:.1f} ms"
    if bad:
        detail += "; mismatched: " + "; ".join(bad)
    record_criterion(1, ok, detail)
    assert ok, detail


def test_criterion_2_rasterizer_matches_ray_casting():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_err, mismatches, n_cmp = 0.0, 0, 0
    for k in range(20):
        w, h = (int(v) for v in rng.integers(64, 129, size=2))
        view = camera(w, h)
        mesh = random_mesh(rng, int(rng.integers(50, 1001)), view, scale=float(rng.uniform(0.05, 0.3)))
        assert len(mesh.triangles) <= 1000
        mm, err, n = compare_with_oracle(mesh, view, render_depth(mesh, view), raycast_depth_image(mesh, view))
        mismatches += mm
        worst_err = max(worst_err, err)
        n_cmp += n
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and worst_err <= 1e-3 and dt < 30.0
    detail = f"20 meshes, {mismatches} hit mismatches beyond 1 px, max depth err {worst_err:.2e} m over {n_cmp} px, {dt:.1f} s"
    record_criterion(2, ok, detail)
    assert ok, detail


def _plane_depths(view, planes):
    """Closed-form metric depth of axis-perpendicular half planes.

    ``planes`` is a list of ``(distance, x_max)``; a plane covers world
    x < x_max at eye depth ``distance`` in front of the identity camera.
    """
    cols, rows = np.meshgrid(np.arange(view.width) + 0.5, np.arange(view.height) + 0.5)
    _, d = pixel_ray(view, np.stack([cols, rows], axis=-1))
    x_over_z = d[..., 0] / -d[..., 2]
    out = np.full((view.height, view.width), np.nan)
    for dist, x_max in planes:
        cover = x_over_z * dist < x_max
        out = np.where(cover & ~(out < dist), dist, out)
    return out


def test_criterion_3_two_plane_occlusion():
    t0 = time.perf_counter()
    # rasterized scene with a 3 m gap: the foreground edge x = 0 lands on column W / 2
    view, face, mesh = two_plane_scene()
    expected = render_depth(face_mesh(face.vertices), view).metric()
    rendered = render_depth(mesh, view).metric()
    covered = np.isfinite(expected)
    mask = occlusion_mask(expected, rendered) & covered
    cols = np.arange(view.width)[None, :].repeat(view.height, 0)
    raster_exact = np.array_equal(mask, covered & (cols >= view.width // 2))

    # closed-form depths: a nearer plane exactly 2 m in front stays visible,
    # anything beyond 2 m hides the face
    expected_cf = np.full((view.height, view.width), 20.0)
    at_two = occlusion_mask(expected_cf, _plane_depths(view, [(18.0, 0.0), (20.0, np.inf)]))
    beyond = occlusion_mask(expected_cf, _plane_depths(view, [(18.0 - 1e-9, 0.0), (20.0, np.inf)]))
    left = cols < view.width // 2
    strict_ok = at_two.all() and np.array_equal(beyond, ~left)
    dt = time.perf_counter() - t0
    ok = raster_exact and strict_ok and dt < 1.0
    detail = f"raster mask exact={raster_exact}, strict 2.0 m behaviour={strict_ok}, {dt * 1e3:.0f} ms"
    record_criterion(3, ok, detail)
    assert ok, detail


def test_criterion_4_homography_and_rectification():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    resid = 0.0
    for _ in range(50):
        true = Homography(np.eye(3) + rng.normal(0, [[0.1, 0.1, 5], [0.1, 0.1, 5], [1e-4, 1e-4, 0]]))
        src = rng.uniform(0, 400, size=(int(rng.integers(4, 12)), 2))
        dst = true.apply(src)
        resid = max(resid, float(np.max(np.abs(dlt_homography(src, dst).apply(src) - dst))))

    ys, xs = np.mgrid[0:128, 0:128]
    images = {
        "gradient": 20.0 + 0.9 * xs + 0.6 * ys,
        "smooth": 127.5 + 100 * np.sin(xs / 9.0) * np.cos(ys / 13.0) + 0.2 * xs,
    }
    H = Homography([[0.95, 0.08, 6.0], [-0.05, 1.02, 4.0], [2e-4, 1e-4, 1.0]])
    inner = np.zeros((128, 128), bool)
    inner[2:-2, 2:-2] = True
    rt = 0.0
    coverage = 1.0
    for img in images.values():
        back = warp_image(warp_image(img, H, (150, 150)), H.inverse(), (128, 128))
        ok_px = inner & np.isfinite(back)
        coverage = min(coverage, ok_px.sum() / inner.sum())
        rt = max(rt, float(np.max(np.abs(back[ok_px] - img[ok_px]))))
    dt = time.perf_counter() - t0
    ok = resid < 1e-9 and rt < 2.0 and coverage > 0.9 and dt < 5.0
    detail = f"DLT residual {resid:.1e} px, round-trip max err {rt:.3f} levels on {coverage:.0%} of the interior, {dt:.2f} s"
    record_criterion(4, ok, detail)
    assert ok, detail


def test_criterion_5_ladder_gradients_softmax():
    t0 = time.perf_counter()
    net = FusedPyramidNet(4, width=1.0).eval()
    ladder_ok = True
    with torch.no_grad():
        for size in range(32, 225, 32):
            f = net.backbone(torch.zeros(1, 4, size, size))
            want = [(1, c, size // s, size // s) for c, s in ((64, 4), (128, 8), (256, 16), (512, 32))]
            ladder_ok &= [tuple(t.shape) for t in (f.C2, f.C3, f.C4, f.C5)] == want
            p = net.pyramid(f.C2, f.C3, f.C4, f.C5)
            ladder_ok &= [tuple(t.shape) for t in p] == [(1, 256, size // s, size // s) for s in (4, 8, 16, 32)]
            ladder_ok &= tuple(net.fusion.concat(p).shape) == (1, 1024, size // 4, size // 4)
            fused = net.fusion(p)
            ladder_ok &= tuple(fused.shape) == (1, 256, size // 4, size // 4)
            ladder_ok &= tuple(net.head(fused).shape) == (1, 3)

    torch.manual_seed(0)
    small = FusedPyramidNet(4, width=0.125)
    x = torch.randn(2, 4, 64, 64)
    errs = []
    for mode in (small.train, small.eval):
        mode()
        errs.append(grad_check(small, x, n_samples=4))
    gerr = max(errs)

    rng = np.random.default_rng(5)
    logits = np.concatenate([rng.normal(0, 1, (500, 3)), rng.normal(0, 300, (500, 3))])
    sm_err = float(np.max(np.abs(softmax(logits).sum(axis=1) - 1.0)))
    with torch.no_grad():
        probs = small.eval().double().predict_proba(x.double())
    sm_err = max(sm_err, float(torch.max(torch.abs(probs.sum(dim=1) - 1))))
    dt = time.perf_counter() - t0
    ok = ladder_ok and gerr < 1e-4 and sm_err < 1e-6 and dt < 120.0
    detail = f"ladder I=32..224 ok={ladder_ok}, grad rel err {gerr:.1e} (I=64, double), softmax row err {sm_err:.1e}, {dt:.1f} s"
    record_criterion(5, ok, detail)
    assert ok, detail


def test_criterion_6_depth_channel_learnability():
    t0 = time.perf_counter()
    X, y = depth_corpus(300, 32, seed=0)
    # accuracy is measured on an independent corpus, never seen during
    # training or during best-epoch selection
    Xh, yh = depth_corpus(200, 32, seed=10_000)
    depth_acc, color_acc = [], []
    for seed in range(5):
        depth_acc.append(FFPClassifier(use_depth=True, epochs=50, seed=seed).fit(X, y).score(Xh, yh))
        color_acc.append(FFPClassifier(use_depth=False, epochs=50, seed=seed).fit(X, y).score(Xh, yh))
    depth_acc, color_acc = np.array(depth_acc), np.array(color_acc)
    # seeds are paired: same initialization seed and split for both variants
    test = stats.ttest_rel(depth_acc, color_acc, alternative="greater")
    dt = time.perf_counter() - t0
    ok = depth_acc.min() >= 0.95 and depth_acc.mean() > color_acc.mean() and test.pvalue < 0.05 and dt < 900
    detail = (
        f"depth acc {np.round(depth_acc, 3).tolist()} (min {depth_acc.min():.3f}), "
        f"colour-only {np.round(color_acc, 3).tolist()}, gain {depth_acc.mean() - color_acc.mean():+.3f}, "
        f"paired t-test p={test.pvalue:.1e}, {dt:.0f} s"
    )
    record_criterion(6, ok, detail)
    assert ok, detail


def test_criterion_7_voting_soundness(tmp_path):
    t0 = time.perf_counter()
    write_dataset(tmp_path, SyntheticSceneSpec())
    cfg = PipelineConfig.load(tmp_path / "config.json", classifier="oracle")
    run_all(cfg)
    summ = io.read_json(cfg.out / "summary.json")
    dt = time.perf_counter() - t0
    full = summ["3d"]
    single_ok = all(summ[m]["C_P"] <= full["C_P"] for m in ("nadir", "oblique"))
    strictly_worse = [m for m in ("nadir", "oblique") if summ[m]["C_P"] < full["C_P"]]
    ok = full["C_P"] == 100.0 and full["FP"] <= 2 and single_ok and dt < 300
    detail = (
        f"3d C_P {full['C_P']} with {full['FP']} false alarms; "
        f"nadir C_P {summ['nadir']['C_P']}, oblique C_P {summ['oblique']['C_P']} "
        f"(strictly worse: {', '.join(strictly_worse) or 'none'}), {dt:.0f} s"
    )
    record_criterion(7, ok, detail)
    assert ok, detail


def test_criterion_8_determinism(tmp_path):
    t0 = time.perf_counter()
    outs = []
    for name in ("a", "b"):
        root = tmp_path / name
        write_dataset(root, SyntheticSceneSpec(seed=0))
        cfg = PipelineConfig.load(root / "config.json", classifier="ffp", seed=0)
        run_all(cfg)
        outs.append({k: (cfg.out / k).read_bytes() for k in ("report.txt", "model/weights.ffpw", "predictions.csv")})
    same = {k: outs[0][k] == outs[1][k] for k in outs[0]}
    dt = time.perf_counter() - t0
    ok = all(same.values())
    detail = ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()) + f", {dt:.0f} s"
    record_criterion(8, ok, detail)
    assert ok, detail
