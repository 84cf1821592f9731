"""Acceptance suite: every criterion at its stated tolerance, one line each.

The desk-scale end-to-end fixture trains the full pipeline once (proposal net,
pairwise pretraining, joint CRF stage, two refinement nets) on seeded synthetic
data and several criteria assert against its artifacts.
"""

import base64
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from geoseg import gridio, tensorcore as tc
from geoseg.cli import main as cli_main
from geoseg.crfnet import (CompatibilityMatrix, CrfConfig, generate_pretrain_set,
                           make_pairwise_net, mean_field_iterate,
                           brute_force_meanfield_oracle, pretrain_pairwise_net)
from geoseg.geodesic import (ImageGrid, ScribbleSet, dijkstra_geodesic_oracle,
                             geodesic_distance_map)
from geoseg.metrics import dice, mask_assd
from geoseg.netzoo import (NetworkConfig, build_pnet, build_rnet, dilation_schedule,
                           forward_segment, receptive_field)
from geoseg.pipeline import (TrainPlan, clicks_for_region, refine_once,
                             restore_snapshot, run_pnet, save_checkpoint,
                             simulate_interactions, synth_dataset, train_pnet,
                             train_rnet)
from geoseg.server import create_app
from geoseg.tensorcore import DiffTensor

from helpers import brute_force_assd, fd_gradcheck

GEODESIC_TOL = 1e-9
GEODESIC_TIME_S = 30.0
GRAD_TOL = 1e-4
GRAD_TIME_S = 120.0
MEANFIELD_TOL = 1e-9
NORMALIZATION_TOL = 1e-9
PAIRWISE_MSE_TOL = 1e-3
PAIRWISE_TIME_S = 300.0
E2E_MIN_DICE = 0.80
E2E_MIN_REFINE_GAIN = 0.02
E2E_TIME_S = 45 * 60.0
METRICS_TOL = 1e-9
SERVICE_MIN_DICE = 0.7


def report(name, detail):
    print(f"\nACCEPTANCE {name}: PASS ({detail})")


# ---------------------------------------------------------------------------
# geodesic oracle equivalence


def test_geodesic_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1234)
    worst = 0.0
    cases = 0
    for _ in range(170):
        H = int(rng.integers(4, 33))
        W = int(rng.integers(4, 33))
        channels = int(rng.integers(1, 3))
        img = ImageGrid(rng.random((channels, H, W)))
        seeds = {(int(rng.integers(0, H)), int(rng.integers(0, W)))
                 for _ in range(int(rng.integers(1, 5)))}
        lam = float(rng.choice([0.0, 0.0, 0.5]))
        fast = geodesic_distance_map(img, seeds, lambda_spatial=lam, mode="converged")
        oracle = dijkstra_geodesic_oracle(img, seeds, lambda_spatial=lam)
        worst = max(worst, float(np.abs(fast - oracle).max()))
        cases += 1
    for _ in range(40):
        img = ImageGrid(rng.random((1, 8, 8, 4)))
        seeds = {(int(rng.integers(0, 8)), int(rng.integers(0, 8)),
                  int(rng.integers(0, 4)))}
        fast = geodesic_distance_map(img, seeds, mode="converged")
        oracle = dijkstra_geodesic_oracle(img, seeds)
        worst = max(worst, float(np.abs(fast - oracle).max()))
        cases += 1
    elapsed = time.perf_counter() - t0
    assert cases >= 200
    assert worst < GEODESIC_TOL, f"worst oracle deviation {worst}"
    assert elapsed < GEODESIC_TIME_S, f"took {elapsed:.1f}s"
    report("geodesic-oracle", f"{cases} cases, max abs diff {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# closed-form schedules and the measured receptive field


def test_schedules_and_receptive_field():
    for d in (1, 2, 3):
        for i in range(1, 6):
            assert dilation_schedule(i, d) == d * 2 ** (i - 1)
        taus = (2, 2, 3, 3, 3)
        for i in range(1, 6):
            expected = 2 * sum(taus[j - 1] * dilation_schedule(j, d)
                               for j in range(1, i + 1)) + 1
            assert receptive_field(i, d) == expected
        assert [receptive_field(i, d) for i in range(1, 6)] == \
            [4 * d + 1, 12 * d + 1, 36 * d + 1, 84 * d + 1, 180 * d + 1]

    rng = np.random.default_rng(8)
    model = build_pnet(NetworkConfig(in_channels=1, width=8), rng)
    r5 = receptive_field(5, 1)
    size = r5 + 10
    x = DiffTensor(rng.normal(size=(1, size, size)))
    center = size // 2
    logits = model.logits(x)
    weight = np.zeros_like(logits.values)
    weight[0, center, center] = 1.0
    tc.backward(tc.sum_all(tc.mul(logits, DiffTensor(weight))))
    g = x.grad[0]
    half = r5 // 2
    window = g[center - half:center + half + 1, center - half:center + half + 1]
    outside = g.copy()
    outside[center - half:center + half + 1, center - half:center + half + 1] = 0.0
    assert np.all(outside == 0.0), "gradient leaked outside the R5 window"
    assert np.any(window != 0.0)
    report("schedules", f"q_i and R_i exact for d in 1..3; measured field within "
                        f"{r5}x{r5} and nonzero inside")


# ---------------------------------------------------------------------------
# gradient suite


def test_gradient_suite():
    t0 = time.perf_counter()
    worst = 0.0

    for seed in range(5):
        rng = np.random.default_rng(500 + seed)
        x = DiffTensor(rng.normal(size=(2, 5, 5)) + 0.05)
        kern = tc.make_kernel(2, 2, 1, 2, rng)
        k1 = tc.make_kernel(2, 2, 0, 1, rng)
        labels = rng.integers(0, 2, size=(5, 5))

        def op_loss():
            h = tc.dilated_conv2d(x, kern, activation="relu")
            h = tc.dilated_conv2d(h, k1)
            return tc.cross_entropy_loss(tc.softmax_channels(h), labels)

        worst = max(worst, fd_gradcheck(
            op_loss, [x, kern.weights, kern.bias, k1.weights, k1.bias]))

        xm = DiffTensor(rng.normal(size=(6, 3)))
        w = DiffTensor(rng.normal(size=(3, 4)))
        b = DiffTensor(rng.normal(size=4) * 0.1)

        def dense_loss():
            return tc.mse_loss(tc.dense(xm, w, b, activation="relu"), np.ones((6, 4)))

        worst = max(worst, fd_gradcheck(dense_loss, [xm, w, b]))

    # full proposal-net-mini + CRF composite; biases randomized so that no
    # pre-activation sits exactly on a relu kink (dead-channel degeneracy)
    rng = np.random.default_rng(915)
    cfg = NetworkConfig(in_channels=1, width=3,
                        crf=CrfConfig(patch_extents=(3, 3), iterations=2))
    model = build_pnet(cfg, rng)
    for name, p in model.parameters().items():
        if name.endswith(".bias"):
            p.values[...] = rng.normal(size=p.shape) * 0.1
    x = DiffTensor(rng.normal(size=(1, 6, 6)))
    feats = rng.random((1, 6, 6))
    labels = rng.integers(0, 2, size=(6, 6))

    def composite_loss():
        _, q = model.forward(x, features=feats)
        return tc.cross_entropy_loss(q, labels)

    params = list(model.parameters().values()) + [x]
    # entries below ~1e-7 sit under the float64 central-difference noise floor
    composite_worst = fd_gradcheck(composite_loss, params, min_grad=1e-7)
    worst = max(worst, composite_worst)
    elapsed = time.perf_counter() - t0
    assert worst < GRAD_TOL, f"worst relative error {worst}"
    assert elapsed < GRAD_TIME_S, f"took {elapsed:.1f}s"
    report("gradient-suite",
           f"ops + composite worst rel err {worst:.2e} "
           f"(composite {composite_worst:.2e}), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# mean-field correctness


def test_meanfield_correctness():
    rng = np.random.default_rng(31)
    worst = 0.0
    worst_norm = 0.0
    for case in range(30):
        logits = rng.normal(size=(2, 3, 3)) * 2
        feats = rng.random((1, 3, 3))
        net = make_pairwise_net(1, rng)
        mu = CompatibilityMatrix(tc.tensor(rng.normal(size=(2, 2))))
        cfg = CrfConfig(patch_extents=(3, 3), iterations=int(rng.integers(1, 5)))
        constraints = None
        if case % 3 == 0:
            constraints = ScribbleSet(foreground={(0, 0)}, background={(2, 2)})
        fast = mean_field_iterate(DiffTensor(logits), feats, net, mu, cfg, constraints)
        slow = brute_force_meanfield_oracle(logits, feats, net, mu.mu.values, cfg,
                                            constraints)
        worst = max(worst, float(np.abs(fast.values - slow).max()))
        worst_norm = max(worst_norm, float(np.abs(fast.values.sum(axis=0) - 1.0).max()))
        if constraints:
            assert fast.values[1, 0, 0] == 1.0 and fast.values[0, 0, 0] == 0.0
            assert fast.values[0, 2, 2] == 1.0 and fast.values[1, 2, 2] == 0.0

    # constraints exact at the network level
    rng2 = np.random.default_rng(32)
    rnet = build_rnet(NetworkConfig(in_channels=4, width=2, crf_variant="fu"), rng2)
    sc = ScribbleSet(foreground={(5, 5)}, background={(20, 30)})
    _, q, mask = forward_segment(rnet, DiffTensor(rng2.normal(size=(4, 40, 40))),
                                 features=rng2.random((1, 40, 40)), constraints=sc)
    assert q.values[1, 5, 5] == 1.0 and q.values[0, 20, 30] == 1.0
    assert mask[5, 5] == 1 and mask[20, 30] == 0

    assert worst < MEANFIELD_TOL
    assert worst_norm < NORMALIZATION_TOL
    report("mean-field", f"30 oracle cases max diff {worst:.2e}, "
                         f"normalization off by {worst_norm:.2e}, constraints exact")


# ---------------------------------------------------------------------------
# pairwise-net pretraining


def test_pairwise_pretraining():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    samples = generate_pretrain_set(1, 100_000, rng)
    net, rep = pretrain_pairwise_net(samples, rng=rng)
    elapsed = time.perf_counter() - t0
    assert rep["holdout_mse"] <= PAIRWISE_MSE_TOL, rep["holdout_mse"]
    assert elapsed < PAIRWISE_TIME_S, f"took {elapsed:.1f}s"
    report("pairwise-pretrain",
           f"held-out MSE {rep['holdout_mse']:.2e} on 10k split, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# metrics oracles and the interaction rule


def test_metrics_oracles():
    rng = np.random.default_rng(55)
    worst = 0.0
    checked = 0
    for _ in range(25):
        H = int(rng.integers(3, 33))
        W = int(rng.integers(3, 33))
        a = rng.random((H, W)) > rng.uniform(0.3, 0.7)
        b = rng.random((H, W)) > rng.uniform(0.3, 0.7)
        # dice against a direct count
        inter = int((a & b).sum())
        denom = int(a.sum()) + int(b.sum())
        expected_dice = 1.0 if denom == 0 else 2 * inter / denom
        assert abs(dice(a, b) - expected_dice) < METRICS_TOL
        expected_assd = brute_force_assd(a, b)
        got = mask_assd(a, b)
        if expected_assd is None:
            assert got is None
        else:
            worst = max(worst, abs(got - expected_assd))
            checked += 1
    assert worst < METRICS_TOL

    assert clicks_for_region(29) == 0
    assert clicks_for_region(30) == 1
    assert clicks_for_region(250) == 3
    rng2 = np.random.default_rng(56)
    gt = np.zeros((40, 40), int)
    gt[2:7, 2:8] = 1  # 30 pixels -> exactly 1 click
    sc = simulate_interactions(np.zeros_like(gt), gt, rng2)
    assert len(sc.foreground) == 1 and not sc.background
    report("metrics", f"{checked} assd oracle cases within {METRICS_TOL}, "
                      f"click thresholds 29->0, 30->1, 250->3 exact")


# ---------------------------------------------------------------------------
# desk-scale end-to-end


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    t0 = time.perf_counter()
    train = synth_dataset(101, 200, (64, 64))
    test = synth_dataset(202, 50, (64, 64))
    plan = TrainPlan()
    rng = np.random.default_rng(11)
    pnet, stats, history = train_pnet(train, plan, rng, val_samples=test[:10], width=8)

    mean, std = stats

    def eval_model(model, use_crf):
        scores = []
        for s in test:
            norm = ImageGrid((s.image.values - mean) / std)
            if use_crf:
                _, mask = run_pnet(model, norm, s.image.values)
            else:
                _, q = model.forward(DiffTensor(norm.values), use_crf=False)
                mask = np.argmax(q.values, axis=0)
            scores.append(dice(mask, s.ground_truth))
        return np.array(scores)

    plain = build_pnet(NetworkConfig(in_channels=1, width=8), np.random.default_rng(0))
    restore_snapshot(plain, history["stage1_snapshot"])
    dice_plain = eval_model(plain, use_crf=False)
    dice_crf = eval_model(pnet, use_crf=True)

    rnet_geo, _ = train_rnet(train, pnet, plan, np.random.default_rng(12), stats,
                             metric="geodesic", width=8)
    rnet_euc, _ = train_rnet(train, pnet, plan, np.random.default_rng(12), stats,
                             metric="euclidean", width=8)

    def eval_refined(rnet, metric):
        rngr = np.random.default_rng(77)
        return np.array([
            dice(refine_once(pnet, rnet, s, stats, rngr, metric=metric)["refined_mask"],
                 s.ground_truth)
            for s in test])

    dice_geo = eval_refined(rnet_geo, "geodesic")
    dice_euc = eval_refined(rnet_euc, "euclidean")

    model_dir = tmp_path_factory.mktemp("desk_models")
    save_checkpoint(model_dir / "pnet", pnet, "pnet", stats=stats, rng_seed=11)
    save_checkpoint(model_dir / "rnet", rnet_geo, "rnet", stats=stats, rng_seed=12)

    return {
        "elapsed": time.perf_counter() - t0,
        "stats": stats,
        "history": history,
        "test": test,
        "dice_plain": dice_plain,
        "dice_crf": dice_crf,
        "dice_geo": dice_geo,
        "dice_euc": dice_euc,
        "model_dir": model_dir,
    }


def test_e2e_proposal_dice(desk):
    mean_dice = desk["dice_crf"].mean()
    assert mean_dice >= E2E_MIN_DICE, f"proposal+crf test dice {mean_dice:.4f}"
    report("e2e-proposal-dice", f"test dice {mean_dice:.4f} >= {E2E_MIN_DICE}")


def test_e2e_refinement_gain(desk):
    gain = desk["dice_geo"].mean() - desk["dice_crf"].mean()
    assert gain >= E2E_MIN_REFINE_GAIN, f"refinement gain {100 * gain:.2f} points"
    report("e2e-refinement-gain",
           f"{desk['dice_crf'].mean():.4f} -> {desk['dice_geo'].mean():.4f} "
           f"(+{100 * gain:.2f} points >= 2)")


def test_e2e_geodesic_vs_euclidean(desk):
    geo = desk["dice_geo"].mean()
    euc = desk["dice_euc"].mean()
    assert geo >= euc, f"geodesic {geo:.4f} < euclidean {euc:.4f}"
    report("e2e-geodesic-vs-euclidean", f"geodesic {geo:.4f} >= euclidean {euc:.4f}")


def test_e2e_crf_vs_plain(desk):
    crf = desk["dice_crf"].mean()
    plain = desk["dice_plain"].mean()
    assert crf >= plain, f"crf {crf:.4f} < plain {plain:.4f}"
    report("e2e-crf-vs-plain", f"crf {crf:.4f} >= plain proposal {plain:.4f}")


def test_e2e_joint_stage_no_regression(desk):
    history = desk["history"]
    stage1_peak = max(d for _, d in history["stage1_val_dice"])
    stage3_floor = min(d for _, d in history["stage3_val_dice"])
    assert stage3_floor >= stage1_peak - 0.02, \
        f"joint stage fell to {stage3_floor:.4f} from peak {stage1_peak:.4f}"
    report("e2e-joint-stability",
           f"stage-3 val dice floor {stage3_floor:.4f} within 2 points of "
           f"stage-1 peak {stage1_peak:.4f}")


def test_e2e_runtime(desk):
    assert desk["elapsed"] <= E2E_TIME_S, f"end-to-end took {desk['elapsed']:.0f}s"
    report("e2e-runtime", f"{desk['elapsed'] / 60:.1f} min <= 45 min")


# ---------------------------------------------------------------------------
# service-level guarantees with the trained models


def test_service_guarantees(desk, tmp_path):
    # median-difficulty test image: typical behavior, not a cherry-picked best
    order = np.argsort(desk["dice_crf"])
    test_sample = desk["test"][int(order[len(order) // 2])]
    vals = test_sample.image.values

    store = tmp_path / "store"
    app = create_app(desk["model_dir"], store)
    with TestClient(app) as client:
        payload = {"image": {
            "f32_base64": base64.b64encode(
                np.ascontiguousarray(vals, dtype="<f4").tobytes()).decode(),
            "extents": list(vals.shape[1:]),
            "channels": 1,
        }}
        created = client.post("/sessions", json=payload).json()
        sid = created["session_id"]
        mask0 = gridio.read_mask_pgm(base64.b64decode(created["mask"]["pgm_base64"]))
        initial_dice = dice(mask0, test_sample.ground_truth)
        assert initial_dice >= SERVICE_MIN_DICE

        # randomized scribble sequences: every labeled pixel honored afterwards
        rng = np.random.default_rng(99)
        placed = {}
        for _ in range(3):
            items = []
            for _ in range(5):
                pix = (int(rng.integers(0, 64)), int(rng.integers(0, 64)))
                lab = int(test_sample.ground_truth[pix])
                placed[pix] = lab
                items.append({"pixel": list(pix), "label": lab})
            client.post(f"/sessions/{sid}/scribbles", json={"scribbles": items})
            body = client.post(f"/sessions/{sid}/refine", json={}).json()
            mask = gridio.read_mask_pgm(base64.b64decode(body["mask"]["pgm_base64"]))
            for pix, lab in placed.items():
                assert mask[pix] == lab, f"scribble at {pix} not honored"

    # restart: new app instance on the same store sees identical state
    app2 = create_app(desk["model_dir"], store)
    with TestClient(app2) as client2:
        got = client2.get(f"/sessions/{sid}")
        assert got.status_code == 200
        state = got.json()["session"]
        assert state["round"] == 3
        mask_after = gridio.read_mask_pgm(
            base64.b64decode(got.json()["mask"]["pgm_base64"]))
        for pix, lab in placed.items():
            assert mask_after[pix] == lab

    # CLI path produces byte-identical inference from the same f32 image
    from geoseg.geodesic import ImageGrid
    img_path = tmp_path / "img"
    f32_vals = np.ascontiguousarray(vals, dtype="<f4").astype(np.float64)
    gridio.write_f32(img_path, ImageGrid(f32_vals))
    mask_path = tmp_path / "cli_mask.pgm"
    rc = cli_main(["segment", "--image", str(img_path) + ".f32",
                   "--ckpt", str(desk["model_dir"] / "pnet"),
                   "--out-mask", str(mask_path)])
    assert rc == 0
    assert np.array_equal(gridio.read_mask_pgm(mask_path), mask0)
    report("service", f"initial dice {initial_dice:.4f} >= {SERVICE_MIN_DICE}; "
                      f"constraints honored over 3 randomized rounds; restart and "
                      f"CLI byte-identical")
