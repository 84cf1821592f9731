"""Synthetic data, training schedules, interaction simulation, checkpoints.

Training follows a three-stage plan: the proposal net alone with cross-entropy,
then pairwise-net pretraining, then joint net + CRF fine-tuning at a much lower
rate. The refinement net is trained once, on interactions simulated against the
proposal net's own mistakes.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensorcore as tc
from .crfnet import (DEFAULT_PRETRAIN_SGD, PairwiseNet, generate_pretrain_set,
                     pretrain_pairwise_net)
from .geodesic import ImageGrid, ScribbleSet, encode_interactions
from .metrics import dice
from .netzoo import NetworkConfig, SegmentationModel, build_pnet, build_rnet
from .tensorcore import DiffTensor, SgdConfig

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good=None, iteration=None):
        super().__init__(message)
        self.last_good = last_good
        self.iteration = iteration


@dataclass
class Sample:
    image: ImageGrid
    ground_truth: np.ndarray
    id: str

    def __post_init__(self):
        self.ground_truth = (np.asarray(self.ground_truth) > 0).astype(np.uint8)
        if self.image.extents != self.ground_truth.shape:
            raise ValueError(f"image {self.image.extents} vs mask {self.ground_truth.shape}")


# ---------------------------------------------------------------------------
# synthetic blob images


def _low_freq_field(extents, rng, n_waves=4):
    H, W = extents
    yy, xx = np.meshgrid(np.linspace(0, 1, H), np.linspace(0, 1, W), indexing="ij")
    out = np.zeros(extents)
    for _ in range(n_waves):
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        py, px = rng.uniform(0, 2 * np.pi, size=2)
        out += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * fy * yy + py) \
            * np.sin(2 * np.pi * fx * xx + px)
    return out / n_waves


def _blob_mask(extents, rng):
    H, W = extents
    cy = rng.uniform(0.28, 0.72) * H
    cx = rng.uniform(0.28, 0.72) * W
    a = rng.uniform(0.12, 0.3) * H
    b = rng.uniform(0.12, 0.3) * W
    theta = rng.uniform(0, np.pi)
    n_harm = rng.integers(2, 6)
    amps = rng.uniform(0.0, 0.3, size=n_harm)
    phases = rng.uniform(0, 2 * np.pi, size=n_harm)
    yy, xx = np.meshgrid(np.arange(H) - cy, np.arange(W) - cx, indexing="ij")
    ry = yy * np.cos(theta) + xx * np.sin(theta)
    rx = -yy * np.sin(theta) + xx * np.cos(theta)
    radius = np.sqrt((ry / a) ** 2 + (rx / b) ** 2)
    phi = np.arctan2(rx / b, ry / a)
    wobble = np.ones(extents)
    for k, (amp, ph) in enumerate(zip(amps, phases), start=2):
        wobble += amp * np.cos(k * phi + ph)
    return radius < wobble


AREA_FRACTION_RANGE = (0.05, 0.5)


def synth_dataset(seed: int, count: int, extents=(64, 64)) -> list:
    """Reproducible blob images: 1-2 smooth blobs, contrast in [0.15, 0.4],
    additive noise sigma in [0.02, 0.1], multiplicative low-frequency bias."""
    extents = tuple(int(e) for e in extents)
    if count < 1:
        raise ValueError("count must be >= 1")
    if min(extents) < 32:
        raise ValueError(f"extents {extents} below the receptive-field minimum 32")
    rng = np.random.default_rng(seed)
    samples = []
    lo, hi = AREA_FRACTION_RANGE
    for i in range(count):
        for _attempt in range(200):
            mask = _blob_mask(extents, rng)
            if rng.random() < 0.4:
                mask = mask | _blob_mask(extents, rng)
            frac = mask.mean()
            if lo <= frac <= hi:
                break
        else:
            raise RuntimeError("blob generator failed to hit the area window")
        contrast = rng.uniform(0.15, 0.4)
        noise_sigma = rng.uniform(0.02, 0.1)
        base = rng.uniform(0.25, 0.45)
        bias = 1.0 + 0.8 * _low_freq_field(extents, rng)
        img = (base + contrast * mask) * bias
        img = img + rng.normal(0.0, noise_sigma, size=extents)
        samples.append(Sample(ImageGrid(img[None]), mask.astype(np.uint8), f"sample_{i:04d}"))
    return samples


# ---------------------------------------------------------------------------
# normalization and augmentation


def dataset_stats(samples) -> tuple:
    stacked = np.concatenate([s.image.values.ravel() for s in samples])
    mean = float(stacked.mean())
    std = float(stacked.std())
    if std == 0.0:
        raise ValueError("zero standard deviation over the training set")
    return mean, std


def normalize(samples, stats=None):
    """Shift/scale images by train-set statistics; masks are untouched.

    Pass the training set's stats when normalizing validation or test data.
    """
    if stats is None:
        stats = dataset_stats(samples)
    mean, std = stats
    out = [Sample(ImageGrid((s.image.values - mean) / std, s.image.spacing),
                  s.ground_truth, s.id) for s in samples]
    return out, stats


def apply_affine_aug(image_vals, mask, flip_h, flip_v, angle, zoom, cval=0.0):
    """Shared flip/rotate/zoom core; bilinear for the image, nearest for the mask."""
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]]) / zoom
    flip = np.diag([-1.0 if flip_v else 1.0, -1.0 if flip_h else 1.0])
    m = rot @ flip
    center = (np.array(mask.shape) - 1) / 2.0
    offset = center - m @ center
    out_img = np.stack([
        ndimage.affine_transform(ch, m, offset=offset, order=1, cval=cval,
                                 mode="constant")
        for ch in image_vals])
    out_mask = ndimage.affine_transform(mask, m, offset=offset, order=0, cval=0,
                                        mode="constant", output=np.uint8)
    return out_img, out_mask


def augment(sample: Sample, rng) -> Sample:
    """Random flip, rotation within +/- pi/8, zoom in [0.8, 1.25]."""
    flip_h = bool(rng.random() < 0.5)
    flip_v = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-np.pi / 8, np.pi / 8))
    zoom = float(rng.uniform(0.8, 1.25))
    img, mask = apply_affine_aug(sample.image.values, sample.ground_truth,
                                 flip_h, flip_v, angle, zoom)
    return Sample(ImageGrid(img, sample.image.spacing), mask, sample.id)


# ---------------------------------------------------------------------------
# training plans


@dataclass
class StagePlan:
    iters: int
    sgd: SgdConfig


@dataclass
class TrainPlan:
    """Three-stage schedule plus refinement-net stages.

    Iteration counts are desk-scale defaults sized for CPU minutes on the
    synthetic task; learning rates follow the published schedule (1e-3 for the
    net-only stages, 1e-6 for the joint net + CRF stages).
    """

    stage1: StagePlan = field(default_factory=lambda: StagePlan(
        4000, SgdConfig(learning_rate=1e-3)))
    stage2_samples: int = 100_000
    stage2_sgd: SgdConfig = field(default_factory=lambda: dataclasses.replace(
        DEFAULT_PRETRAIN_SGD))
    stage3: StagePlan = field(default_factory=lambda: StagePlan(
        1000, SgdConfig(learning_rate=1e-6)))
    rnet_stage1: StagePlan = field(default_factory=lambda: StagePlan(
        2500, SgdConfig(learning_rate=1e-3)))
    rnet_stage3: StagePlan = field(default_factory=lambda: StagePlan(
        700, SgdConfig(learning_rate=1e-6)))
    eval_every: int = 500
    augment: bool = True

    def __post_init__(self):
        for sp in (self.stage1, self.stage3, self.rnet_stage1, self.rnet_stage3):
            if sp.sgd.learning_rate <= 0:
                raise ValueError("stage learning rates must be positive")

    def scaled(self, factor: float) -> "TrainPlan":
        """Shrink all stage iteration counts (quick smoke runs)."""
        plan = dataclasses.replace(self)
        for name in ("stage1", "stage3", "rnet_stage1", "rnet_stage3"):
            sp = getattr(plan, name)
            setattr(plan, name, StagePlan(max(1, int(sp.iters * factor)), sp.sgd))
        plan.eval_every = max(1, int(self.eval_every * factor))
        return plan


def restore_snapshot(model: SegmentationModel, snapshot):
    """Copy a parameter snapshot (from a training history) into a model."""
    for name, values in snapshot.items():
        model.parameters()[name].values[...] = values


def _mean_dice(model: SegmentationModel, samples, use_crf, features_of=None):
    scores = []
    for s in samples:
        feats = features_of(s) if features_of else None
        _, q = model.forward(DiffTensor(s.image.values), features=feats, use_crf=use_crf)
        pred = np.argmax(q.values, axis=0)
        scores.append(dice(pred, s.ground_truth))
    return float(np.mean(scores))


def _snapshot(model: SegmentationModel):
    return {k: v.values.copy() for k, v in model.parameters().items()}


def _train_stage(model, samples, stage: StagePlan, rng, *, use_crf, stats,
                 val_samples, eval_every, history, tag, do_augment,
                 constraints_of=None, inputs_of=None, features_of=None):
    """Shared SGD loop over single-sample minibatches."""
    opt = tc.Sgd(model.parameters().values(), stage.sgd)
    mean, std = stats
    last_good = _snapshot(model)
    last_iter = 0
    for it in range(stage.iters):
        s = samples[int(rng.integers(len(samples)))]
        if do_augment:
            s = augment(s, rng)
        x = DiffTensor(s.image.values) if inputs_of is None else inputs_of(s)
        feats = features_of(s) if features_of else (
            s.image.values * std + mean if use_crf else None)
        constraints = constraints_of(s) if constraints_of else None
        _, q = model.forward(x, features=feats, constraints=constraints,
                             use_crf=use_crf)
        loss = tc.cross_entropy_loss(q, s.ground_truth)
        if not np.isfinite(loss.values):
            raise TrainingDiverged(f"{tag}: non-finite loss at iteration {it}",
                                   last_good=last_good, iteration=last_iter)
        model.zero_grad()
        tc.backward(loss)
        opt.step(it)
        history.setdefault(f"{tag}_loss", []).append(float(loss.values))
        if val_samples and ((it + 1) % eval_every == 0 or it + 1 == stage.iters):
            vd = _mean_dice(model, val_samples, use_crf=use_crf,
                            features_of=features_of or (
                                (lambda t: t.image.values * std + mean) if use_crf else None))
            history.setdefault(f"{tag}_val_dice", []).append((it + 1, vd))
            last_good = _snapshot(model)
            last_iter = it + 1
    return history


def train_pnet(samples, plan: TrainPlan, rng, val_samples=None,
               pairwise_net: PairwiseNet = None, width: int = 8,
               stats=None, pretrain_report=None):
    """Full proposal-net training; returns (model, stats, history).

    samples must be raw (unnormalized); normalization stats are computed here
    and stored with the checkpoint so inference can reproduce them.
    """
    if not samples:
        raise ValueError("empty training set")
    norm_train, stats = normalize(samples, stats)
    norm_val = normalize(val_samples, stats)[0] if val_samples else None

    cfg = NetworkConfig(in_channels=samples[0].image.channels, width=width)
    model = build_pnet(cfg, rng)
    history = {}

    _train_stage(model, norm_train, plan.stage1, rng, use_crf=False, stats=stats,
                 val_samples=norm_val, eval_every=plan.eval_every, history=history,
                 tag="stage1", do_augment=plan.augment)
    history["stage1_snapshot"] = _snapshot(model)

    if pairwise_net is None:
        pre_samples = generate_pretrain_set(cfg.in_channels, plan.stage2_samples, rng)
        pairwise_net, report = pretrain_pairwise_net(pre_samples, plan.stage2_sgd, rng)
        history["pairwise_holdout_mse"] = report["holdout_mse"]
        if pretrain_report is not None:
            pretrain_report.update(report)
    model.set_pairwise_net(pairwise_net)

    _train_stage(model, norm_train, plan.stage3, rng, use_crf=True, stats=stats,
                 val_samples=norm_val, eval_every=plan.eval_every, history=history,
                 tag="stage3", do_augment=plan.augment)
    return model, stats, history


# ---------------------------------------------------------------------------
# simulated interactions


def _disk_offsets(radius):
    offs = []
    r = int(math.ceil(radius))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy * dy + dx * dx <= radius * radius:
                offs.append((dy, dx))
    return offs


def clicks_for_region(region_size: int) -> int:
    """0 clicks below 30 pixels, otherwise ceil(size / 100)."""
    if region_size < 30:
        return 0
    return math.ceil(region_size / 100)


def simulate_interactions(pred_mask, gt_mask, rng, brush_radius: int = 0) -> ScribbleSet:
    """Sample corrective clicks on each mis-segmented connected component.

    Under-segmented regions (missed foreground) yield foreground clicks,
    over-segmented regions yield background clicks; components use
    4-connectivity. Clicks stay inside their component; a nonzero brush
    radius thickens each click within the component.
    """
    pred = np.asarray(pred_mask) > 0
    gt = np.asarray(gt_mask) > 0
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    fg, bg = set(), set()
    brush = _disk_offsets(brush_radius) if brush_radius > 0 else [(0, 0)]
    H, W = pred.shape
    for region, bucket in (((gt & ~pred), fg), ((pred & ~gt), bg)):
        labels, n_regions = ndimage.label(region, structure=FOUR_CONNECTED)
        for ri in range(1, n_regions + 1):
            ys, xs = np.nonzero(labels == ri)
            n = clicks_for_region(len(ys))
            if n == 0:
                continue
            picks = rng.choice(len(ys), size=n, replace=False)
            component = set(zip(ys.tolist(), xs.tolist()))
            for p in picks:
                y, x = int(ys[p]), int(xs[p])
                for dy, dx in brush:
                    pix = (y + dy, x + dx)
                    if 0 <= pix[0] < H and 0 <= pix[1] < W and pix in component:
                        bucket.add(pix)
    return ScribbleSet(foreground=fg, background=bg)


# ---------------------------------------------------------------------------
# refinement-net input encoding and training


def rnet_encode(norm_image: ImageGrid, initial_prob, scribbles: ScribbleSet,
                metric: str, rng) -> DiffTensor:
    """Interaction encoding with distance channels scaled by the image diagonal
    so they sit on the same order of magnitude as unit-variance image data."""
    enc = encode_interactions(norm_image, initial_prob, scribbles, metric, rng)
    enc.values[-2:] /= norm_image.diagonal()
    return enc


def run_pnet(model, norm_image: ImageGrid, raw_image_vals) -> tuple:
    """Proposal inference: returns (fg probability map, mask)."""
    _, q = model.forward(DiffTensor(norm_image.values), features=raw_image_vals)
    return q.values[1], np.argmax(q.values, axis=0).astype(np.uint8)


def run_rnet(model, encoded: DiffTensor, raw_image_vals, scribbles: ScribbleSet) -> tuple:
    """Refinement inference with scribbles as hard constraints."""
    _, q = model.forward(encoded, features=raw_image_vals, constraints=scribbles)
    return q.values[1], np.argmax(q.values, axis=0).astype(np.uint8)


def prepare_refinement_set(pnet, samples, stats, rng, metric="geodesic"):
    """Run the proposal net on each sample, simulate corrective interactions,
    and encode refinement inputs. Interactions are simulated once."""
    mean, std = stats
    prepared = []
    for s in samples:
        norm = ImageGrid((s.image.values - mean) / std, s.image.spacing)
        prob, pred = run_pnet(pnet, norm, s.image.values)
        scribbles = simulate_interactions(pred, s.ground_truth, rng)
        enc = rnet_encode(norm, prob, scribbles, metric, rng)
        prepared.append({"sample": s, "encoded": enc.values, "scribbles": scribbles,
                         "pnet_mask": pred})
    return prepared


def train_rnet(samples, pnet, plan: TrainPlan, rng, stats,
               pairwise_net: PairwiseNet = None, metric: str = "geodesic",
               width: int = 8):
    """Refinement-net training on simulated interactions; returns (model, history)."""
    if not samples:
        raise ValueError("empty training set")
    prepared = prepare_refinement_set(pnet, samples, stats, rng, metric)
    in_channels = samples[0].image.channels + 3
    cfg = NetworkConfig(in_channels=in_channels, width=width, crf_variant="fu")
    model = build_rnet(cfg, rng, pairwise_net=pairwise_net)
    if pairwise_net is None and pnet.pairwise is not None:
        model.set_pairwise_net(PairwiseNet(*[tc.tensor(p.values.copy())
                                             for p in pnet.pairwise.parameters().values()]))
    history = {}

    wrapped = [Sample(ImageGrid(p["encoded"]), p["sample"].ground_truth,
                      p["sample"].id) for p in prepared]
    by_id = {p["sample"].id: p for p in prepared}
    mean, std = stats

    def inputs_of(s):
        return DiffTensor(s.image.values)

    def features_of(s):
        return s.image.values[:1] * std + mean

    def constraints_of(s):
        return by_id[s.id]["scribbles"]

    _train_stage(model, wrapped, plan.rnet_stage1, rng, use_crf=False, stats=stats,
                 val_samples=None, eval_every=plan.eval_every, history=history,
                 tag="rnet_stage1", do_augment=False, inputs_of=inputs_of)
    _train_stage(model, wrapped, plan.rnet_stage3, rng, use_crf=True, stats=stats,
                 val_samples=None, eval_every=plan.eval_every, history=history,
                 tag="rnet_stage3", do_augment=False, inputs_of=inputs_of,
                 features_of=features_of, constraints_of=constraints_of)
    return model, history


def refine_once(pnet, rnet, sample: Sample, stats, rng, metric="geodesic"):
    """One simulated correction round on a sample; returns masks and scribbles."""
    mean, std = stats
    norm = ImageGrid((sample.image.values - mean) / std, sample.image.spacing)
    prob, pred = run_pnet(pnet, norm, sample.image.values)
    scribbles = simulate_interactions(pred, sample.ground_truth, rng)
    if scribbles.is_empty():
        return {"pnet_mask": pred, "refined_mask": pred, "scribbles": scribbles}
    enc = rnet_encode(norm, prob, scribbles, metric, rng)
    _, refined = run_rnet(rnet, enc, sample.image.values, scribbles)
    return {"pnet_mask": pred, "refined_mask": refined, "scribbles": scribbles}


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_VERSION = 1


def save_checkpoint(path_stem, model_or_net, kind: str, stats=None, iteration=0,
                    rng_seed=None, history=None):
    """Write <stem>.json manifest + <stem>.bin float32 parameter blob."""
    stem = Path(path_stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    if kind in ("pnet", "rnet"):
        params = model_or_net.parameters()
        topology = model_or_net.cfg.to_dict()
    elif kind == "pairwise":
        params = model_or_net.parameters()
        topology = {"feature_dim": model_or_net.feature_dim}
    else:
        raise ValueError(f"unknown checkpoint kind {kind!r}")

    tensors = []
    offset = 0
    blobs = []
    for name, p in params.items():
        n = int(np.prod(p.shape)) if p.shape else 1
        tensors.append({"name": name, "shape": list(p.shape), "offset": offset})
        blobs.append(np.ascontiguousarray(p.values, dtype="<f4").tobytes())
        offset += n
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "topology": topology,
        "iteration": int(iteration),
        "rng_seed": rng_seed,
        "metric_history": history or {},
        "norm_stats": None if stats is None else {"mean": stats[0], "std": stats[1]},
        "tensors": tensors,
        "param_count": offset,
    }
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    stem.with_suffix(".bin").write_bytes(b"".join(blobs))
    return stem


class CheckpointError(ValueError):
    pass


def load_checkpoint(path_stem):
    """Rebuild a model (or pairwise net) from manifest + blob.

    Returns (object, manifest). The manifest is validated before the blob is
    touched; a wrong blob length or unknown version is rejected.
    """
    stem = Path(path_stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unknown checkpoint version {manifest.get('format_version')}")
    blob = stem.with_suffix(".bin").read_bytes()
    if len(blob) != manifest["param_count"] * 4:
        raise CheckpointError(
            f"parameter blob is {len(blob)} bytes, manifest declares "
            f"{manifest['param_count'] * 4}")
    flat = np.frombuffer(blob, dtype="<f4").astype(np.float64)

    kind = manifest["kind"]
    rng = np.random.default_rng(0)
    if kind == "pnet":
        obj = build_pnet(NetworkConfig.from_dict(manifest["topology"]), rng)
        params = obj.parameters()
    elif kind == "rnet":
        obj = build_rnet(NetworkConfig.from_dict(manifest["topology"]), rng)
        params = obj.parameters()
    elif kind == "pairwise":
        from .crfnet import make_pairwise_net
        obj = make_pairwise_net(manifest["topology"]["feature_dim"], rng)
        params = obj.parameters()
    else:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")

    declared = {t["name"]: t for t in manifest["tensors"]}
    if set(declared) != set(params):
        raise CheckpointError("manifest tensor names do not match topology")
    for name, p in params.items():
        t = declared[name]
        if tuple(t["shape"]) != p.shape:
            raise CheckpointError(f"tensor {name} shape mismatch")
        n = int(np.prod(p.shape)) if p.shape else 1
        p.values[...] = flat[t["offset"]:t["offset"] + n].reshape(p.shape)
    return obj, manifest


# ---------------------------------------------------------------------------
# dataset directory layout


def save_dataset(samples, out_dir, seed=None):
    """images/*.f32(+json sidecar), masks/*.pgm, manifest.json."""
    from . import gridio
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    ids = []
    for s in samples:
        gridio.write_f32(out / "images" / s.id, s.image)
        gridio.write_mask_pgm(out / "masks" / f"{s.id}.pgm", s.ground_truth)
        ids.append(s.id)
    manifest = {"format_version": 1, "seed": seed, "count": len(samples),
                "extents": list(samples[0].image.extents), "ids": ids}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(data_dir):
    from . import gridio
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    samples = []
    for sid in manifest["ids"]:
        img = gridio.read_f32(root / "images" / sid)
        mask = gridio.read_mask_pgm(root / "masks" / f"{sid}.pgm")
        samples.append(Sample(img, mask, sid))
    return samples, manifest
