"""Desk-scale end-to-end calibration run; mirrors the acceptance fixture.

Usage: python3 scripts/calibrate_e2e.py [stage1 stage3 rnet_stage1 rnet_stage3]
"""

import logging
import sys
import time
import warnings

import numpy as np

warnings.filterwarnings("ignore")
logging.disable(logging.WARNING)

from geoseg import tensorcore as tc
from geoseg.metrics import dice
from geoseg.netzoo import NetworkConfig, build_pnet
from geoseg.pipeline import (StagePlan, TrainPlan, normalize, refine_once,
                             restore_snapshot, run_pnet, synth_dataset, train_pnet,
                             train_rnet)
from geoseg.geodesic import ImageGrid


def stage(iters, lr, **kw):
    return StagePlan(iters, tc.SgdConfig(learning_rate=lr, **kw))


def main():
    t0 = time.time()

    def lap(msg):
        print(f"[{(time.time() - t0) / 60:6.1f} min] {msg}", flush=True)

    s1, s3, r1, r3 = (int(a) for a in sys.argv[1:5]) if len(sys.argv) > 4 else (3500, 1000, 2500, 700)
    train = synth_dataset(101, 200, (64, 64))
    test = synth_dataset(202, 50, (64, 64))
    val = test[:10]
    lap("data ready")

    plan = TrainPlan(stage1=stage(s1, 1e-3), stage3=stage(s3, 1e-6),
                     rnet_stage1=stage(r1, 1e-3), rnet_stage3=stage(r3, 1e-6),
                     eval_every=500)
    rng = np.random.default_rng(11)
    pnet, stats, history = train_pnet(train, plan, rng, val_samples=val, width=8)
    lap(f"pnet trained; stage1 val dice {history['stage1_val_dice']}")
    lap(f"stage3 val dice {history['stage3_val_dice']}  pairwise mse {history['pairwise_holdout_mse']:.2e}")

    mean, std = stats

    def eval_pnet(model, use_crf):
        scores = []
        for s in test:
            norm = ImageGrid((s.image.values - mean) / std)
            if use_crf:
                prob, mask = run_pnet(model, norm, s.image.values)
            else:
                _, q = model.forward(tc.DiffTensor(norm.values), use_crf=False)
                mask = np.argmax(q.values, axis=0)
            scores.append(dice(mask, s.ground_truth))
        return np.array(scores)

    plain = build_pnet(NetworkConfig(in_channels=1, width=8), np.random.default_rng(0))
    restore_snapshot(plain, history["stage1_snapshot"])
    dice_plain = eval_pnet(plain, use_crf=False)
    dice_crf = eval_pnet(pnet, use_crf=True)
    lap(f"test dice: plain pnet {dice_plain.mean():.4f}  pnet+crf {dice_crf.mean():.4f}")

    rnet_geo, _ = train_rnet(train, pnet, plan, np.random.default_rng(12), stats,
                             metric="geodesic", width=8)
    lap("rnet geodesic trained")
    rnet_euc, _ = train_rnet(train, pnet, plan, np.random.default_rng(12), stats,
                             metric="euclidean", width=8)
    lap("rnet euclidean trained")

    def eval_refined(rnet, metric, seed):
        rngr = np.random.default_rng(seed)
        scores = []
        for s in test:
            out = refine_once(pnet, rnet, s, stats, rngr, metric=metric)
            scores.append(dice(out["refined_mask"], s.ground_truth))
        return np.array(scores)

    dice_geo = eval_refined(rnet_geo, "geodesic", 77)
    dice_euc = eval_refined(rnet_euc, "euclidean", 77)
    lap(f"refined dice: geo {dice_geo.mean():.4f}  euc {dice_euc.mean():.4f}")
    print()
    print(f"RESULT pnet_crf={dice_crf.mean():.4f} plain={dice_plain.mean():.4f} "
          f"geo={dice_geo.mean():.4f} euc={dice_euc.mean():.4f}")
    print(f"RESULT crf_minus_plain={100 * (dice_crf.mean() - dice_plain.mean()):+.2f} points")
    print(f"RESULT refine_gain={100 * (dice_geo.mean() - dice_crf.mean()):+.2f} points")
    print(f"RESULT geo_minus_euc={100 * (dice_geo.mean() - dice_euc.mean()):+.2f} points")
    print(f"RESULT total_minutes={(time.time() - t0) / 60:.1f}")


if __name__ == "__main__":
    main()
