import base64
import io
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from geoseg import gridio
from geoseg.cli import main as cli_main
from geoseg.netzoo import NetworkConfig, build_pnet, build_rnet
from geoseg.pipeline import save_checkpoint, synth_dataset
from geoseg.server import create_app


@pytest.fixture(scope="module")
def model_dir(tmp_path_factory):
    """Small untrained checkpoints; enough to exercise the API mechanics."""
    root = tmp_path_factory.mktemp("models")
    rng = np.random.default_rng(0)
    pnet = build_pnet(NetworkConfig(in_channels=1, width=2), rng)
    rnet = build_rnet(NetworkConfig(in_channels=4, width=2, crf_variant="fu"), rng)
    save_checkpoint(root / "pnet", pnet, "pnet", stats=(0.45, 0.15))
    save_checkpoint(root / "rnet", rnet, "rnet", stats=(0.45, 0.15))
    return root


@pytest.fixture()
def client(model_dir, tmp_path):
    app = create_app(model_dir, tmp_path / "store")
    with TestClient(app, raise_server_exceptions=False) as c:
        c.store_dir = tmp_path / "store"
        c.model_dir = model_dir
        yield c


def pgm_payload(image2d):
    buf = io.BytesIO()
    arr = np.clip(np.rint(np.asarray(image2d) * 255), 0, 255).astype(np.uint8)
    buf.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
    buf.write(arr.tobytes())
    return {"pgm_base64": base64.b64encode(buf.getvalue()).decode()}


@pytest.fixture(scope="module")
def blob_image():
    return synth_dataset(5, 1, (48, 48))[0].image.values[0]


def make_session(client, blob_image):
    r = client.post("/sessions", json={"image": pgm_payload(blob_image)})
    assert r.status_code == 200, r.text
    return r.json()


def decode_mask(payload):
    return gridio.read_mask_pgm(base64.b64decode(payload["pgm_base64"]))


def test_create_session_and_get(client, blob_image):
    created = make_session(client, blob_image)
    assert created["round"] == 0
    mask = decode_mask(created["mask"])
    assert mask.shape == (48, 48)
    r = client.get(f"/sessions/{created['session_id']}")
    assert r.status_code == 200
    assert r.json()["session"]["round"] == 0
    assert np.array_equal(decode_mask(r.json()["mask"]), mask)


def test_same_image_twice_identical_masks(client, blob_image):
    a = make_session(client, blob_image)
    b = make_session(client, blob_image)
    assert np.array_equal(decode_mask(a["mask"]), decode_mask(b["mask"]))


def test_tiny_image_rejected(client):
    r = client.post("/sessions", json={"image": pgm_payload(np.zeros((8, 8)))})
    assert r.status_code == 400


def test_malformed_image_rejected(client):
    r = client.post("/sessions", json={"image": {"pgm_base64": "bm90IGEgcGdt"}})
    assert r.status_code == 400
    r = client.post("/sessions", json={"image": {}})
    assert r.status_code == 400


def test_missing_model_503(tmp_path, blob_image):
    app = create_app(tmp_path / "nothing", tmp_path / "store")
    with TestClient(app, raise_server_exceptions=False) as c:
        r = c.post("/sessions", json={"image": pgm_payload(blob_image)})
        assert r.status_code == 503


def test_unknown_session_404(client):
    assert client.get("/sessions/nope").status_code == 404
    assert client.post("/sessions/nope/scribbles", json={"scribbles": []}).status_code == 404
    assert client.post("/sessions/nope/refine", json={}).status_code == 404
    assert client.delete("/sessions/nope").status_code == 404


def test_scribble_accumulation_rules(client, blob_image):
    sid = make_session(client, blob_image)["session_id"]
    url = f"/sessions/{sid}/scribbles"

    r = client.post(url, json={"scribbles": []})
    assert r.json() == {"accepted": 0, "total": 0}

    items = [{"pixel": [5, 5], "label": 1}, {"pixel": [5, 5], "label": 1}]
    r = client.post(url, json={"scribbles": items})
    assert r.json() == {"accepted": 1, "total": 1}

    # relabeling the same pixel replaces the previous label
    r = client.post(url, json={"scribbles": [{"pixel": [5, 5], "label": 0}]})
    assert r.json() == {"accepted": 1, "total": 1}
    state = client.get(f"/sessions/{sid}").json()["session"]
    assert state["scribbles"] == [[[5, 5], 0]]

    r = client.post(url, json={"scribbles": [{"pixel": [99, 0], "label": 1}]})
    assert r.status_code == 400
    assert r.json()["detail"]["rejected_indices"] == [0]


def test_refine_flow_and_hard_constraints(client, blob_image):
    created = make_session(client, blob_image)
    sid = created["session_id"]

    r = client.post(f"/sessions/{sid}/refine", json={})
    assert r.json()["no_op"] is True and r.json()["round"] == 0

    mask0 = decode_mask(created["mask"])
    fg = [3, 3]
    bg = [40, 40]
    client.post(f"/sessions/{sid}/scribbles", json={"scribbles": [
        {"pixel": fg, "label": 1}, {"pixel": bg, "label": 0}]})
    r = client.post(f"/sessions/{sid}/refine", json={})
    body = r.json()
    assert body["no_op"] is False and body["round"] == 1
    mask1 = decode_mask(body["mask"])
    assert mask1[fg[0], fg[1]] == 1
    assert mask1[bg[0], bg[1]] == 0

    # refine again without new scribbles: no-op, state unchanged
    r = client.post(f"/sessions/{sid}/refine", json={})
    assert r.json()["no_op"] is True and r.json()["round"] == 1
    assert np.array_equal(decode_mask(client.get(f"/sessions/{sid}").json()["mask"]), mask1)


def test_scribbled_pixels_keep_labels_across_rounds(client, blob_image):
    sid = make_session(client, blob_image)["session_id"]
    rng = np.random.default_rng(1)
    placed = {}
    for round_i in range(3):
        items = []
        for _ in range(4):
            pix = (int(rng.integers(0, 48)), int(rng.integers(0, 48)))
            lab = int(rng.integers(0, 2))
            placed[pix] = lab
            items.append({"pixel": list(pix), "label": lab})
        client.post(f"/sessions/{sid}/scribbles", json={"scribbles": items})
        mask = decode_mask(client.post(f"/sessions/{sid}/refine", json={}).json()["mask"])
        for pix, lab in placed.items():
            assert mask[pix] == lab


def test_round_counter_and_export(client, blob_image):
    sid = make_session(client, blob_image)["session_id"]
    for i in range(2):
        client.post(f"/sessions/{sid}/scribbles", json={"scribbles": [
            {"pixel": [10 + i, 10], "label": 1}]})
        client.post(f"/sessions/{sid}/refine", json={})
    state = client.get(f"/sessions/{sid}").json()["session"]
    assert state["round"] == 2
    r = client.get(f"/sessions/{sid}/mask")
    assert r.status_code == 200
    exported = gridio.read_mask_pgm(r.content)
    assert np.array_equal(exported, decode_mask(client.get(f"/sessions/{sid}").json()["mask"]))


def test_session_survives_restart(model_dir, tmp_path, blob_image):
    store = tmp_path / "store"
    app1 = create_app(model_dir, store)
    with TestClient(app1) as c1:
        sid = make_session(c1, blob_image)["session_id"]
        c1.post(f"/sessions/{sid}/scribbles", json={"scribbles": [
            {"pixel": [7, 7], "label": 1}]})
        mask_before = decode_mask(c1.get(f"/sessions/{sid}").json()["mask"])

    app2 = create_app(model_dir, store)
    with TestClient(app2) as c2:
        r = c2.get(f"/sessions/{sid}")
        assert r.status_code == 200
        state = r.json()["session"]
        assert state["scribbles"] == [[[7, 7], 1]]
        assert np.array_equal(decode_mask(r.json()["mask"]), mask_before)
        refined = c2.post(f"/sessions/{sid}/refine", json={}).json()
        assert refined["round"] == 1


def test_delete_session(client, blob_image):
    sid = make_session(client, blob_image)["session_id"]
    assert client.delete(f"/sessions/{sid}").status_code == 200
    assert client.get(f"/sessions/{sid}").status_code == 404


def test_concurrent_sessions_isolated(client, blob_image):
    rng = np.random.default_rng(2)
    other_image = blob_image + rng.normal(0, 0.02, blob_image.shape)

    def steps(sid, pix):
        client.post(f"/sessions/{sid}/scribbles", json={"scribbles": [
            {"pixel": pix, "label": 1}]})
        return decode_mask(client.post(f"/sessions/{sid}/refine", json={}).json()["mask"])

    # serial reference
    sid_a = make_session(client, blob_image)["session_id"]
    ref_a = steps(sid_a, [4, 4])
    sid_b = make_session(client, other_image)["session_id"]
    ref_b = steps(sid_b, [30, 30])

    # interleaved
    a = make_session(client, blob_image)["session_id"]
    b = make_session(client, other_image)["session_id"]
    client.post(f"/sessions/{a}/scribbles", json={"scribbles": [{"pixel": [4, 4], "label": 1}]})
    client.post(f"/sessions/{b}/scribbles", json={"scribbles": [{"pixel": [30, 30], "label": 1}]})
    mask_b = decode_mask(client.post(f"/sessions/{b}/refine", json={}).json()["mask"])
    mask_a = decode_mask(client.post(f"/sessions/{a}/refine", json={}).json()["mask"])
    assert np.array_equal(mask_a, ref_a)
    assert np.array_equal(mask_b, ref_b)


def test_eval_endpoint(client, blob_image):
    created = make_session(client, blob_image)
    sid = created["session_id"]
    mask = decode_mask(created["mask"])
    buf = io.BytesIO()
    buf.write(f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode())
    buf.write((mask * 255).astype(np.uint8).tobytes())
    r = client.post(f"/sessions/{sid}/eval",
                    json={"mask_pgm_base64": base64.b64encode(buf.getvalue()).decode()})
    assert r.status_code == 200
    assert r.json()["dice"] == 1.0


# ---------------------------------------------------------------------------
# CLI


def test_cli_synth_deterministic(tmp_path):
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    for out in (out1, out2):
        rc = cli_main(["--seed", "7", "--out", str(out), "synth", "--count", "3",
                       "--extents", "48x48"])
        assert rc == 0
    for rel in ["manifest.json", "images/sample_0000.f32", "masks/sample_0000.pgm"]:
        assert (out1 / rel).read_bytes() == (out2 / rel).read_bytes()


def test_cli_unknown_flag_exits_2(capsys):
    assert cli_main(["synth", "--count", "1", "--bogus"]) == 2


def test_cli_missing_out_exits_2(tmp_path):
    assert cli_main(["synth", "--count", "1"]) == 2


def test_cli_eval_report(tmp_path, capsys):
    gt = tmp_path / "gt"
    pred = tmp_path / "pred"
    gt.mkdir()
    pred.mkdir()
    rng = np.random.default_rng(3)
    for i in range(3):
        m = (rng.random((20, 20)) > 0.5).astype(np.uint8)
        gridio.write_mask_pgm(gt / f"s{i}.pgm", m)
        flip = m.copy()
        flip[:2] = 0
        gridio.write_mask_pgm(pred / f"s{i}.pgm", flip)
    rc = cli_main(["--out", str(tmp_path / "rep"), "eval", "--gt", str(gt),
                   "--pred", str(pred)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "Dice(%)" in out
    report = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert "pred" in report["methods"]


def test_cli_matches_service_bit_exactly(tmp_path, model_dir, blob_image):
    # service path
    app = create_app(model_dir, tmp_path / "store")
    with TestClient(app) as client:
        created = make_session(client, blob_image)
        sid = created["session_id"]
        scribbles = [{"pixel": [3, 3], "label": 1}, {"pixel": [40, 40], "label": 0}]
        client.post(f"/sessions/{sid}/scribbles", json={"scribbles": scribbles})
        refined = client.post(f"/sessions/{sid}/refine", json={})
        service_mask0 = decode_mask(created["mask"])
        service_mask1 = decode_mask(refined.json()["mask"])
        state = client.get(f"/sessions/{sid}").json()["session"]
        seed = int(__import__("uuid").UUID(sid).int % (2 ** 32))

    # CLI path on the same inputs
    img_path = tmp_path / "img.pgm"
    arr = np.clip(np.rint(blob_image * 255), 0, 255).astype(np.uint8)
    gridio.write_pgm(img_path, arr)
    mask_path = tmp_path / "mask.pgm"
    prob_path = tmp_path / "prob"
    rc = cli_main(["segment", "--image", str(img_path),
                   "--ckpt", str(model_dir / "pnet"),
                   "--out-mask", str(mask_path), "--out-prob", str(prob_path)])
    assert rc == 0
    assert np.array_equal(gridio.read_mask_pgm(mask_path), service_mask0)

    scribble_path = tmp_path / "scribbles.json"
    scribble_path.write_text(json.dumps({"scribbles": scribbles}))
    refined_path = tmp_path / "refined.pgm"
    rc = cli_main(["--seed", str(seed), "refine", "--image", str(img_path),
                   "--init-prob", str(prob_path), "--scribbles", str(scribble_path),
                   "--ckpt", str(model_dir / "rnet"), "--out-mask", str(refined_path)])
    assert rc == 0
    assert np.array_equal(gridio.read_mask_pgm(refined_path), service_mask1)
