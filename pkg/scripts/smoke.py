"""Seeded learning smoke run: train the full model, compare against copy-last-frame.

    python3 scripts/smoke.py --seeds 5 --epochs 30
"""

import argparse
import time

from vidpred.config import RunConfig, replace
from vidpred.data import gen_dataset, make_windows
from vidpred.predictor import build_model
from vidpred.training import fit, score


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--base", action="store_true", help="also train the stream-free baseline")
    args = ap.parse_args()

    variants = [("full", {})]
    if args.base:
        variants.append(("base", {"use_gcpn": False, "use_lfmn": False}))
    print("seed,variant,seconds,first_loss,last_loss,val_psnr,val_ssim,last_frame_psnr")
    for seed in range(args.seeds):
        for name, model in variants:
            cfg = replace(RunConfig(), model=model, training={"seed": seed, "epochs": args.epochs}, data={"seed": seed})
            seqs = gen_dataset(cfg.data)
            train = make_windows(seqs[: cfg.data.sequences], cfg.model.delta)
            val = make_windows(seqs[cfg.data.sequences :], cfg.model.delta)
            t = time.perf_counter()
            _, hist = fit(build_model(cfg.model, 1, seed=seed), train, cfg, val)
            copy_psnr, _ = score(val.last, val.targets)
            print(
                f"{seed},{name},{time.perf_counter() - t:.1f},{hist[0].train_loss:.5f},{hist[-1].train_loss:.5f},"
                f"{hist[-1].val_psnr:.3f},{hist[-1].val_ssim:.4f},{copy_psnr:.3f}",
                flush=True,
            )


if __name__ == "__main__":
    main()
