"""HTTP session service for the interactive refinement loop.

One session per image: the proposal net produces the initial mask, scribbles
accumulate across rounds, and each refine call re-encodes the interactions and
runs the refinement net with the scribbles enforced as hard constraints.
Sessions persist to disk as JSON + PGM and survive restarts.
"""

from __future__ import annotations

import base64
import json
import threading
import time
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from . import gridio
from .geodesic import ImageGrid, ScribbleSet
from .pipeline import load_checkpoint, rnet_encode, run_pnet, run_rnet

MIN_EXTENT = 32


class SessionStore:
    """Disk-backed sessions with an in-memory cache and per-session locks."""

    def __init__(self, store_dir):
        self.root = Path(store_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self._cache = {}
        self._locks = {}
        self._global = threading.Lock()

    def lock(self, session_id):
        with self._global:
            return self._locks.setdefault(session_id, threading.RLock())

    def path(self, session_id):
        return self.root / session_id

    def create(self, state, image: ImageGrid, prob, mask):
        sdir = self.path(state["id"])
        sdir.mkdir(parents=True, exist_ok=False)
        gridio.write_f32(sdir / "image", image)
        self._write_arrays(sdir, prob, mask)
        (sdir / "state.json").write_text(json.dumps(state, indent=1))
        self._cache[state["id"]] = state

    def _write_arrays(self, sdir, prob, mask):
        gridio.write_f32(sdir / "prob", ImageGrid(prob[None]))
        gridio.write_mask_pgm(sdir / "mask.pgm", mask)

    def update(self, state, prob=None, mask=None):
        sdir = self.path(state["id"])
        if prob is not None:
            self._write_arrays(sdir, prob, mask)
        (sdir / "state.json").write_text(json.dumps(state, indent=1))
        self._cache[state["id"]] = state

    def load(self, session_id):
        if session_id in self._cache:
            return self._cache[session_id]
        sfile = self.path(session_id) / "state.json"
        if not sfile.exists():
            return None
        state = json.loads(sfile.read_text())
        self._cache[session_id] = state
        return state

    def image(self, session_id) -> ImageGrid:
        return gridio.read_f32(self.path(session_id) / "image")

    def prob(self, session_id):
        return gridio.read_f32(self.path(session_id) / "prob").values[0]

    def mask(self, session_id):
        return gridio.read_mask_pgm(self.path(session_id) / "mask.pgm")

    def mask_bytes(self, session_id):
        return (self.path(session_id) / "mask.pgm").read_bytes()

    def delete(self, session_id):
        import shutil
        shutil.rmtree(self.path(session_id), ignore_errors=True)
        self._cache.pop(session_id, None)
        with self._global:
            self._locks.pop(session_id, None)

    def ids(self):
        return sorted(p.name for p in self.root.iterdir() if (p / "state.json").exists())


class ModelBundle:
    """Lazily loaded proposal/refinement checkpoints from a model directory."""

    def __init__(self, model_dir):
        self.root = Path(model_dir)
        self._loaded = {}

    def get(self, name):
        if name not in self._loaded:
            stem = self.root / name
            if not stem.with_suffix(".json").exists():
                raise FileNotFoundError(f"model checkpoint {stem}.json not found")
            self._loaded[name] = load_checkpoint(stem)
        return self._loaded[name]


def decode_image_payload(payload) -> ImageGrid:
    """Accept {'pgm_base64': ...} or {'f32_base64': ..., 'extents': [...],
    'channels': C, 'spacing': [...]}."""
    if not isinstance(payload, dict):
        raise ValueError("image payload must be an object")
    if "pgm_base64" in payload:
        vals, _ = gridio.read_pgm(base64.b64decode(payload["pgm_base64"]))
        return ImageGrid(vals[None])
    if "f32_base64" in payload:
        extents = tuple(int(e) for e in payload["extents"])
        channels = int(payload.get("channels", 1))
        raw = base64.b64decode(payload["f32_base64"])
        count = channels * int(np.prod(extents))
        if len(raw) != count * 4:
            raise ValueError(f"f32 payload has {len(raw)} bytes, expected {count * 4}")
        vals = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        spacing = payload.get("spacing")
        return ImageGrid(vals.reshape((channels,) + extents), spacing=spacing)
    raise ValueError("image payload needs pgm_base64 or f32_base64")


def encode_prob(prob) -> dict:
    return {"f32_base64": base64.b64encode(
        np.ascontiguousarray(prob, dtype="<f4").tobytes()).decode(),
        "extents": list(prob.shape)}


def encode_mask(mask) -> dict:
    import io
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode()
    return {"pgm_base64": base64.b64encode(header + arr.tobytes()).decode(),
            "extents": list(mask.shape)}


def scribbles_from_state(state) -> ScribbleSet:
    pixels = state["scribbles"]
    return ScribbleSet(
        foreground={tuple(p) for p, lab in pixels if lab == 1},
        background={tuple(p) for p, lab in pixels if lab == 0})


def create_app(model_dir, store_dir, ui_dir=None) -> FastAPI:
    app = FastAPI(title="geoseg session service")
    store = SessionStore(store_dir)
    models = ModelBundle(model_dir)

    def session_or_404(session_id):
        state = store.load(session_id)
        if state is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return state

    @app.exception_handler(ValueError)
    def value_error_handler(request: Request, exc: ValueError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.post("/sessions")
    def create_session(body: dict):
        try:
            image = decode_image_payload(body.get("image"))
        except (ValueError, KeyError) as e:
            raise HTTPException(status_code=400, detail=f"malformed image: {e}")
        if min(image.extents) < MIN_EXTENT:
            raise HTTPException(
                status_code=400,
                detail=f"image extents {image.extents} below minimum {MIN_EXTENT}")
        pnet_name = body.get("pnet_model", "pnet")
        rnet_name = body.get("rnet_model", "rnet")
        try:
            pnet, manifest = models.get(pnet_name)
        except FileNotFoundError as e:
            raise HTTPException(status_code=503, detail=str(e))
        stats = manifest["norm_stats"]
        norm = ImageGrid((image.values - stats["mean"]) / stats["std"], image.spacing)
        prob, mask = run_pnet(pnet, norm, image.values)
        state = {
            "id": str(uuid.uuid4()),
            "pnet_model": pnet_name,
            "rnet_model": rnet_name,
            "round": 0,
            "scribbles": [],
            "pending_scribbles": 0,
            "created_at": time.time(),
            "updated_at": time.time(),
            "extents": list(image.extents),
        }
        store.create(state, image, prob, mask)
        return {"session_id": state["id"], "round": 0,
                "mask": encode_mask(mask), "prob": encode_prob(prob)}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        state = session_or_404(session_id)
        with store.lock(session_id):
            mask = store.mask(session_id)
            prob = store.prob(session_id)
            return {"session": state, "mask": encode_mask(mask),
                    "prob": encode_prob(prob)}

    @app.post("/sessions/{session_id}/scribbles")
    def submit_scribbles(session_id: str, body: dict):
        state = session_or_404(session_id)
        items = body.get("scribbles", [])
        extents = state["extents"]
        bad = [i for i, it in enumerate(items)
               if not (0 <= int(it["pixel"][0]) < extents[0]
                       and 0 <= int(it["pixel"][1]) < extents[1])
               or int(it["label"]) not in (0, 1)]
        if bad:
            raise HTTPException(status_code=400,
                                detail={"rejected_indices": bad,
                                        "reason": "out-of-bounds pixel or bad label"})
        with store.lock(session_id):
            current = {tuple(p): lab for p, lab in state["scribbles"]}
            accepted = 0
            for it in items:
                pix = (int(it["pixel"][0]), int(it["pixel"][1]))
                lab = int(it["label"])
                if current.get(pix) != lab:
                    current[pix] = lab
                    accepted += 1
            state["scribbles"] = [[list(p), lab] for p, lab in sorted(current.items())]
            state["pending_scribbles"] += accepted
            state["updated_at"] = time.time()
            store.update(state)
        return {"accepted": accepted, "total": len(state["scribbles"])}

    @app.post("/sessions/{session_id}/refine")
    def refine(session_id: str, body: dict = None):
        state = session_or_404(session_id)
        with store.lock(session_id):
            if state["pending_scribbles"] == 0:
                return {"no_op": True, "round": state["round"],
                        "mask": encode_mask(store.mask(session_id))}
            try:
                rnet, rmanifest = models.get(state["rnet_model"])
                pnet, pmanifest = models.get(state["pnet_model"])
            except FileNotFoundError as e:
                raise HTTPException(status_code=503, detail=str(e))
            stats = rmanifest["norm_stats"] or pmanifest["norm_stats"]
            try:
                image = store.image(session_id)
                prob = store.prob(session_id)
                scribbles = scribbles_from_state(state)
                norm = ImageGrid((image.values - stats["mean"]) / stats["std"],
                                 image.spacing)
                seed = int(uuid.UUID(state["id"]).int % (2 ** 32))
                rng = np.random.default_rng(seed + state["round"])
                enc = rnet_encode(norm, prob, scribbles, "geodesic", rng)
                new_prob, new_mask = run_rnet(rnet, enc, image.values, scribbles)
            except HTTPException:
                raise
            except Exception as e:
                raise HTTPException(status_code=500,
                                    detail=f"refinement failed, session unchanged: {e}")
            state["round"] += 1
            state["pending_scribbles"] = 0
            state["updated_at"] = time.time()
            store.update(state, prob=new_prob, mask=new_mask)
            return {"no_op": False, "round": state["round"],
                    "mask": encode_mask(new_mask), "prob": encode_prob(new_prob)}

    @app.get("/sessions/{session_id}/mask")
    def export_mask(session_id: str):
        session_or_404(session_id)
        with store.lock(session_id):
            return Response(content=store.mask_bytes(session_id),
                            media_type="image/x-portable-graymap")

    @app.get("/sessions/{session_id}/image")
    def export_image(session_id: str):
        """Session image as 8-bit PGM (first channel), for viewer restore."""
        session_or_404(session_id)
        with store.lock(session_id):
            image = store.image(session_id)
        chan = image.values[0]
        lo, hi = float(chan.min()), float(chan.max())
        scaled = (chan - lo) / (hi - lo) if hi > lo else np.zeros_like(chan)
        arr = np.rint(scaled * 255).astype(np.uint8)
        header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode()
        return Response(content=header + arr.tobytes(),
                        media_type="image/x-portable-graymap")

    @app.delete("/sessions/{session_id}")
    def delete_session(session_id: str):
        session_or_404(session_id)
        with store.lock(session_id):
            store.delete(session_id)
        return {"deleted": session_id}

    @app.post("/sessions/{session_id}/eval")
    def eval_against_gt(session_id: str, body: dict):
        """Dice of the current mask against an uploaded ground-truth mask."""
        from .metrics import dice as dice_fn
        state = session_or_404(session_id)
        try:
            gt = gridio.read_mask_pgm(base64.b64decode(body["mask_pgm_base64"]))
        except Exception as e:
            raise HTTPException(status_code=400, detail=f"bad ground truth: {e}")
        if list(gt.shape) != state["extents"]:
            raise HTTPException(status_code=400, detail="ground-truth extents mismatch")
        with store.lock(session_id):
            return {"dice": dice_fn(store.mask(session_id), gt)}

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    return app
