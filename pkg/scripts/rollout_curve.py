"""Per-step rollout PSNR of a trained checkpoint over held-out sequences.

    python3 scripts/rollout_curve.py runs/full/model.nfck data/ --steps 15
"""

import argparse

import numpy as np

from vidpred.checkpoint import load_checkpoint
from vidpred.cli import model_from_checkpoint, read_dataset
from vidpred.metrics import psnr, ssim
from vidpred.predictor import rollout


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("ckpt")
    ap.add_argument("data")
    ap.add_argument("--steps", type=int, default=15)
    args = ap.parse_args()

    model, cfg = model_from_checkpoint(load_checkpoint(args.ckpt))
    _, val, _ = read_dataset(args.data)
    d = model.delta
    if val.shape[1] < d + args.steps:
        raise SystemExit(f"sequences have {val.shape[1]} frames, need {d + args.steps}")
    preds = rollout(model, val[:, :d], args.steps)
    truth = val[:, d : d + args.steps]
    print("step,psnr,ssim,last_frame_psnr")
    for s in range(args.steps):
        p = np.mean([psnr(a, b) for a, b in zip(preds[:, s], truth[:, s])])
        q = np.mean([ssim(a, b, window=cfg.eval.ssim_window) for a, b in zip(preds[:, s], truth[:, s])])
        # holding the last seed frame is the rollout analogue of copy-last
        c = np.mean([psnr(a, b) for a, b in zip(val[:, d - 1], truth[:, s])])
        print(f"{s + 1},{p:.3f},{q:.4f},{c:.3f}")


if __name__ == "__main__":
    main()
