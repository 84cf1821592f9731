"""Command-line entry points mirroring the HTTP service's inference paths."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class CliError(Exception):
    """Validation problem; exits with status 2."""


def _load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file {p} not found")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CliError(f"config file {p} is not valid JSON: {e}")


def _plan_from_config(cfg: dict):
    from .pipeline import StagePlan, TrainPlan
    plan = TrainPlan()
    for stage in ("stage1", "stage3", "rnet_stage1", "rnet_stage3"):
        spec = cfg.get(stage)
        if not spec:
            continue
        current: StagePlan = getattr(plan, stage)
        sgd = dataclasses.replace(current.sgd)
        for k in ("learning_rate", "momentum", "weight_decay",
                  "lr_halving_period_iters", "minibatch"):
            if k in spec:
                setattr(sgd, k, spec[k])
        setattr(plan, stage, StagePlan(int(spec.get("iters", current.iters)), sgd))
    if "stage2_samples" in cfg:
        plan.stage2_samples = int(cfg["stage2_samples"])
    if "eval_every" in cfg:
        plan.eval_every = int(cfg["eval_every"])
    if "augment" in cfg:
        plan.augment = bool(cfg["augment"])
    if "width" in cfg:
        plan_width = int(cfg["width"])
        return plan, plan_width
    return plan, 8


def cmd_synth(args, cfg):
    from .pipeline import save_dataset, synth_dataset
    if args.out is None:
        raise CliError("synth needs --out")
    extents = tuple(int(v) for v in args.extents.split("x"))
    samples = synth_dataset(args.seed, args.count, extents)
    save_dataset(samples, args.out, seed=args.seed)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_pretrain_pairwise(args, cfg):
    from .crfnet import generate_pretrain_set, pretrain_pairwise_net
    from .pipeline import save_checkpoint
    if args.out is None:
        raise CliError("pretrain-pairwise needs --out")
    rng = np.random.default_rng(args.seed)
    samples = generate_pretrain_set(args.feature_dim, args.samples, rng)
    net, report = pretrain_pairwise_net(samples, rng=rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "pairwise", net, "pairwise", iteration=report["iterations"],
                    rng_seed=args.seed, history={"holdout_mse": report["holdout_mse"]})
    print(f"pairwise net pretrained: holdout MSE {report['holdout_mse']:.3e}")
    return EXIT_OK


def cmd_train_pnet(args, cfg):
    from .pipeline import load_dataset, save_checkpoint, train_pnet
    if args.out is None:
        raise CliError("train-pnet needs --out")
    samples, _ = load_dataset(args.data)
    val = load_dataset(args.val)[0] if args.val else None
    plan, width = _plan_from_config(cfg)
    rng = np.random.default_rng(args.seed)
    model, stats, history = train_pnet(samples, plan, rng, val_samples=val, width=width)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "pnet", model, "pnet", stats=stats,
                    iteration=plan.stage1.iters + plan.stage3.iters,
                    rng_seed=args.seed, history={
                        k: v for k, v in history.items() if "val_dice" in k or "mse" in k})
    print(f"pnet checkpoint written to {out / 'pnet'}")
    return EXIT_OK


def cmd_train_rnet(args, cfg):
    from .pipeline import load_checkpoint, load_dataset, save_checkpoint, train_rnet
    if args.out is None:
        raise CliError("train-rnet needs --out")
    samples, _ = load_dataset(args.data)
    pnet, manifest = load_checkpoint(args.pnet)
    stats = (manifest["norm_stats"]["mean"], manifest["norm_stats"]["std"])
    plan, width = _plan_from_config(cfg)
    rng = np.random.default_rng(args.seed)
    model, history = train_rnet(samples, pnet, plan, rng, stats, metric=args.metric,
                                width=width)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = "rnet" if args.metric == "geodesic" else f"rnet_{args.metric}"
    save_checkpoint(out / name, model, "rnet", stats=stats,
                    iteration=plan.rnet_stage1.iters + plan.rnet_stage3.iters,
                    rng_seed=args.seed)
    print(f"rnet checkpoint written to {out / name}")
    return EXIT_OK


def cmd_segment(args, cfg):
    from . import gridio
    from .geodesic import ImageGrid
    from .pipeline import load_checkpoint, run_pnet
    pnet, manifest = load_checkpoint(args.ckpt)
    image = gridio.load_image_any(args.image)
    if min(image.extents) < 32:
        raise CliError(f"image extents {image.extents} below the minimum 32")
    stats = manifest["norm_stats"]
    norm = ImageGrid((image.values - stats["mean"]) / stats["std"], image.spacing)
    prob, mask = run_pnet(pnet, norm, image.values)
    gridio.write_mask_pgm(args.out_mask, mask)
    if args.out_prob:
        gridio.write_f32(args.out_prob, ImageGrid(prob[None]))
    print(f"mask written to {args.out_mask}")
    return EXIT_OK


def _read_scribbles(path):
    from .geodesic import ScribbleSet
    data = json.loads(Path(path).read_text())
    items = data["scribbles"] if isinstance(data, dict) else data
    fg = {tuple(it["pixel"]) for it in items if int(it["label"]) == 1}
    bg = {tuple(it["pixel"]) for it in items if int(it["label"]) == 0}
    return ScribbleSet(foreground=fg, background=bg)


def cmd_refine(args, cfg):
    from . import gridio
    from .geodesic import ImageGrid
    from .pipeline import load_checkpoint, rnet_encode, run_rnet
    rnet, manifest = load_checkpoint(args.ckpt)
    image = gridio.load_image_any(args.image)
    prob = gridio.read_f32(args.init_prob).values[0]
    scribbles = _read_scribbles(args.scribbles)
    scribbles.check_bounds(image.extents)
    stats = manifest["norm_stats"]
    norm = ImageGrid((image.values - stats["mean"]) / stats["std"], image.spacing)
    rng = np.random.default_rng(args.seed)
    enc = rnet_encode(norm, prob, scribbles, args.metric, rng)
    new_prob, mask = run_rnet(rnet, enc, image.values, scribbles)
    gridio.write_mask_pgm(args.out_mask, mask)
    if args.out_prob:
        gridio.write_f32(args.out_prob, ImageGrid(new_prob[None]))
    print(f"refined mask written to {args.out_mask}")
    return EXIT_OK


def cmd_eval(args, cfg):
    from . import gridio
    from .metrics import EvalReport, mask_assd, dice
    gt_dir = Path(args.gt)
    report = EvalReport()
    names = []
    for pred_dir in args.pred:
        pd = Path(pred_dir)
        dices, assds = [], []
        for mask_file in sorted(gt_dir.glob("*.pgm")):
            pred_file = pd / mask_file.name
            if not pred_file.exists():
                raise CliError(f"missing prediction {pred_file}")
            gt = gridio.read_mask_pgm(mask_file)
            pred = gridio.read_mask_pgm(pred_file)
            dices.append(dice(pred, gt))
            assds.append(mask_assd(pred, gt))
        if not dices:
            raise CliError(f"no *.pgm masks under {gt_dir}")
        report.add_method(pd.name, dices, assds)
        names.append(pd.name)
    if len(names) == 2:
        report.compare(names[0], names[1])
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "report.json").write_text(report.to_json())
    print(report.table())
    return EXIT_OK


def cmd_serve(args, cfg):
    import uvicorn
    from .server import create_app
    model_dir = args.models or os.environ.get("GEOSEG_MODEL_DIR")
    store_dir = args.store or os.environ.get("GEOSEG_STORE_DIR")
    port = args.port or int(os.environ.get("GEOSEG_PORT", "8570"))
    if not model_dir or not store_dir:
        raise CliError("serve needs --models and --store (or GEOSEG_MODEL_DIR / "
                       "GEOSEG_STORE_DIR)")
    app = create_app(model_dir, store_dir, ui_dir=args.ui)
    uvicorn.run(app, host=args.host, port=port)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="geoseg",
                                description="Interactive segmentation toolkit")
    p.add_argument("--seed", type=int, default=0, help="global RNG seed")
    p.add_argument("--config", default=None, help="JSON config overriding plan defaults")
    p.add_argument("--out", default=None, help="output directory")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--extents", default="64x64")

    s = sub.add_parser("pretrain-pairwise", help="pretrain the pairwise potential net")
    s.add_argument("--samples", type=int, default=100_000)
    s.add_argument("--feature-dim", type=int, default=1)

    s = sub.add_parser("train-pnet", help="train the proposal network")
    s.add_argument("--data", required=True)
    s.add_argument("--val", default=None)

    s = sub.add_parser("train-rnet", help="train the refinement network")
    s.add_argument("--data", required=True)
    s.add_argument("--pnet", required=True)
    s.add_argument("--metric", choices=("geodesic", "euclidean"), default="geodesic")

    s = sub.add_parser("segment", help="run the proposal network on one image")
    s.add_argument("--image", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out-mask", required=True)
    s.add_argument("--out-prob", default=None)

    s = sub.add_parser("refine", help="refine a segmentation with scribbles")
    s.add_argument("--image", required=True)
    s.add_argument("--init-prob", required=True)
    s.add_argument("--scribbles", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--metric", choices=("geodesic", "euclidean"), default="geodesic")
    s.add_argument("--out-mask", required=True)
    s.add_argument("--out-prob", default=None)

    s = sub.add_parser("eval", help="compare predicted masks to ground truth")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", nargs="+", required=True)

    s = sub.add_parser("serve", help="run the HTTP session service")
    s.add_argument("--models", default=None)
    s.add_argument("--store", default=None)
    s.add_argument("--port", type=int, default=None)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--ui", default=None, help="static frontend directory to mount")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "pretrain-pairwise": cmd_pretrain_pairwise,
    "train-pnet": cmd_train_pnet,
    "train-rnet": cmd_train_rnet,
    "segment": cmd_segment,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        cfg = _load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
