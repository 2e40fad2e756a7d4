"""Command-line entry point: ``vidpred {gen,train,eval,rollout,gradcheck,ablate}``.

Exit codes: 0 success, 1 config error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, from_text, load, replace, to_text
from .data import gen_dataset, make_windows
from .errors import ConfigError, FrameIOError, NumericError
from .gcpn import init_gcpn, propagate
from .lfmn import address_memory, generate_filters, init_filter_generator, init_memory, read_memory
from .metrics import mse, psnr, ssim
from .pixmap import load_frames, save_frames
from .predictor import PredictorModel, build_model, dynamic_filter, predict_next, rollout
from .training import (
    LOG_HEADER,
    EpochRecord,
    TrainingAborted,
    fit,
    gradient_loss,
    predict_windows,
    reconstruction_loss,
    restore,
    total_loss,
)

log = logging.getLogger("vidpred")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4
MANIFEST = "manifest.json"


# -- dataset directories ---------------------------------------------------


def write_dataset(out: Path, cfg: RunConfig) -> dict:
    d = cfg.data
    seqs = gen_dataset(d)
    names = [f"seq_{i:05d}" for i in range(len(seqs))]
    for name, frames in zip(names, seqs):
        save_frames(out / name, frames)
    manifest = {
        "train": names[: d.sequences],
        "val": names[d.sequences :],
        "length": d.length,
        "seed": d.seed,
        "config": to_text(cfg),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(root: str | Path) -> tuple[np.ndarray, np.ndarray, dict]:
    """(train, val, manifest); val may have zero sequences."""
    root = Path(root)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except OSError as exc:
        raise FrameIOError(f"cannot read {root / MANIFEST}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise FrameIOError(f"malformed manifest {root / MANIFEST}: {exc}") from None

    def stack(names):
        if not names:
            return None
        return np.stack([load_frames(root / n) for n in names])

    train, val = stack(manifest.get("train", [])), stack(manifest.get("val", []))
    if train is None:
        raise FrameIOError(f"{root / MANIFEST} lists no training sequences")
    if val is None:
        val = train[:0]
    return train, val, manifest


def dataset_for(cfg: RunConfig, data: str | None) -> tuple[np.ndarray, np.ndarray]:
    if data is not None:
        train, val, _ = read_dataset(data)
        return train, val
    seqs = gen_dataset(cfg.data)
    return seqs[: cfg.data.sequences], seqs[cfg.data.sequences :]


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[PredictorModel, RunConfig]:
    cfg = from_text(ckpt.config)
    conv0 = ckpt.params["encoder.conv0.weight"]
    model = build_model(cfg.model, conv0.shape[1] // cfg.model.delta, seed=cfg.training.seed)
    restore(model, ckpt)
    return model, cfg


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


# -- commands --------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = load(args.config)
    data = {}
    if args.sequences is not None:
        data["sequences"] = args.sequences
    if args.val_sequences is not None:
        data["val_sequences"] = args.val_sequences
    if args.length is not None:
        data["length"] = args.length
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = replace(cfg, data=data)
    out = Path(args.out)
    manifest = write_dataset(out, cfg)
    print(f"wrote {len(manifest['train'])} train + {len(manifest['val'])} val sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load(args.config)
    training = {}
    if args.seed is not None:
        training["seed"] = args.seed
    if args.epochs is not None:
        training["epochs"] = args.epochs
    cfg = replace(cfg, training=training)
    train, val = dataset_for(cfg, args.data)
    delta = cfg.model.delta
    train_w = make_windows(train, delta)
    val_w = make_windows(val, delta) if len(val) else None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path, log_path = out / "model.nfck", out / "log.csv"
    (out / "config.ini").write_text(to_text(cfg))
    resume = load_checkpoint(args.resume) if args.resume else None

    model = build_model(cfg.model, train.shape[-1], seed=cfg.training.seed)

    def on_epoch(rec, ckpt):
        # keep the latest state on disk so an abort leaves a usable checkpoint
        save_checkpoint(ckpt_path, ckpt)
        write_csv(log_path, list(LOG_HEADER), [r.row() for r in ckpt_history(ckpt)])

    try:
        ckpt, history = fit(model, train_w, cfg, val_w, resume=resume, on_epoch=on_epoch)
    except TrainingAborted as exc:
        save_checkpoint(ckpt_path, exc.checkpoint)
        raise
    save_checkpoint(ckpt_path, ckpt)
    write_csv(log_path, list(LOG_HEADER), [r.row() for r in history])
    if history:
        last = history[-1]
        print(
            f"trained {len(history)} epochs: loss {history[0].train_loss:.5f} -> {last.train_loss:.5f},"
            f" val psnr {last.val_psnr:.3f} ssim {last.val_ssim:.4f}"
        )
    print(f"checkpoint {ckpt_path}, log {log_path}")
    return EXIT_OK


def ckpt_history(ckpt: Checkpoint):
    return [EpochRecord(*r) for r in ckpt.history]


EVAL_HEADER = ["sequence", "frames", "psnr", "ssim", "mse", "last_psnr", "last_ssim", "last_mse"]


def evaluate_sequences(model, cfg: RunConfig, seqs: np.ndarray, self_eval: bool = False) -> list[list]:
    """Per-sequence next-frame means for the model and the copy-last-frame baseline."""
    e = cfg.eval
    rows = []
    for i, seq in enumerate(seqs):
        ws = make_windows(seq[None], cfg.model.delta)
        preds = ws.targets if self_eval else predict_windows(model, ws.windows)
        scores = []
        for guess in (preds, ws.last):
            p = [psnr(a, b, cap=e.psnr_cap) for a, b in zip(guess, ws.targets)]
            s = [ssim(a, b, window=e.ssim_window) for a, b in zip(guess, ws.targets)]
            m = [mse(a / 2.0, b / 2.0) for a, b in zip(guess, ws.targets)]
            scores += [np.mean(p), np.mean(s), np.mean(m)]
        rows.append([i, len(ws), *scores])
    return rows


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model, cfg = model_from_checkpoint(ckpt)
    train, val, _ = read_dataset(args.data)
    seqs = {"val": val, "train": train, "all": np.concatenate([train, val])}[args.split]
    if not len(seqs):
        raise FrameIOError(f"{args.data} has no {args.split} sequences")
    rows = evaluate_sequences(model, cfg, seqs, self_eval=args.self_eval)
    write_csv(Path(args.report), EVAL_HEADER, rows)
    arr = np.array([r[2:] for r in rows], dtype=float)
    means = arr.mean(axis=0)
    print(f"model     psnr {means[0]:.3f} ssim {means[1]:.4f} mse {means[2]:.6f}")
    print(f"copy-last psnr {means[3]:.3f} ssim {means[4]:.4f} mse {means[5]:.6f}")
    return EXIT_OK


ROLLOUT_HEADER = ["step", "psnr", "ssim", "mse"]


def cmd_rollout(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model, cfg = model_from_checkpoint(ckpt)
    frames = load_frames(args.seed_frames)
    context = model.delta if args.context is None else args.context
    if not 1 <= context <= len(frames):
        raise ConfigError(f"--context must be in [1, {len(frames)}], got {context}")
    steps = cfg.eval.rollout_steps if args.steps is None else args.steps
    if steps < 1:
        raise ConfigError("--steps must be >= 1")
    preds = rollout(model, frames[:context], steps)
    truth = frames[context : context + steps]

    out = Path(args.out)
    save_frames(out / "frames", preds)
    rows = []
    for i, p in enumerate(preds):
        if i < len(truth):
            t = truth[i]
            rows.append([i + 1, psnr(p, t, cap=cfg.eval.psnr_cap), ssim(p, t, window=cfg.eval.ssim_window), mse(p / 2.0, t / 2.0)])
        else:
            rows.append([i + 1, "", "", ""])
    write_csv(out / "rollout.csv", ROLLOUT_HEADER, rows)
    print(f"wrote {steps} predicted frames to {out / 'frames'} ({len(truth)} with ground truth)")
    return EXIT_OK


# -- gradient check --------------------------------------------------------


def gradcheck_report(cfg: RunConfig, seed: int = 0, max_coords: int = 24) -> list[tuple[str, float]]:
    """Max relative finite-difference error per component op and per parameter group of the full loss."""
    ad.set_default_dtype("float64")
    m = cfg.model
    rng = np.random.default_rng(seed)
    c, k = m.features, m.kernel_size
    fdc = ad.finite_diff_check

    def leaf(*shape, scale=1.0):
        return ad.Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

    results = []
    x = leaf(2, 5, 5, 3)
    w = leaf(4, 3, 3, 3)
    results.append(("conv2d", max(fdc(lambda _: ad.tsum(ad.conv2d(x, w, 2, 1) ** 2), t) for t in (x, w))))
    xt = leaf(2, 3, 3, 4)
    wt = leaf(4, 2, 3, 3)
    results.append(
        ("conv_transpose2d", max(fdc(lambda _: ad.tsum(ad.conv_transpose2d(xt, wt) ** 2), t) for t in (xt, wt)))
    )
    z = leaf(3, 3, c)
    mem = init_memory(max(m.memory_items, 1), c, rng)
    results.append(
        (
            "address_read_memory",
            max(fdc(lambda _: ad.tsum(read_memory(address_memory(z, mem), mem) ** 2), t) for t in (z, mem.items)),
        )
    )
    gen = init_filter_generator(c, k, rng, m.depthwise_filters, 1.0)
    mh = leaf(3, 3, c)
    results.append(
        (
            "generate_filters",
            max(fdc(lambda _: ad.tsum(generate_filters(mh, gen) ** 2), t, max_coords=max_coords) for t in (mh, gen.weights)),
        )
    )
    zb = leaf(3, 3, 2)
    filt = leaf(3, 3, 2, 2, 3, 3)
    results.append(("dynamic_filter", max(fdc(lambda _: ad.tsum(dynamic_filter(zb, filt) ** 2), t) for t in (zb, filt))))
    gp = init_gcpn(3, m.gcpn_steps, rng, out_std=1.0)
    zg = leaf(4, 4, 3)
    results.append(
        ("propagate", max(fdc(lambda _: ad.tsum(propagate(zg, gp) ** 2), t) for t in (zg, *gp.tensors().values())))
    )
    p, tg = leaf(5, 5, 2), rng.normal(size=(5, 5, 2))
    results.append(("reconstruction_loss", fdc(lambda _: reconstruction_loss(p, tg), p)))
    results.append(("gradient_loss", fdc(lambda _: gradient_loss(p, tg), p)))

    # the whole next-frame loss, one entry per parameter group
    d = cfg.data
    model = build_model(m, d.channels, seed=seed)
    seq = rng.uniform(-0.9, 0.9, size=(m.delta + 1, d.height, d.width, d.channels))

    def loss_fn(_):
        return total_loss(predict_next(model, seq[: m.delta]), seq[m.delta], cfg.training.lambda_g)

    params = model.named_parameters()
    for group, names in model.parameter_groups().items():
        err = max(fdc(loss_fn, params[n], max_coords=max_coords, seed=seed) for n in names)
        results.append((f"total_loss[{group}]", err))
    return results


def cmd_gradcheck(args) -> int:
    cfg = load(args.config)
    if args.inject_fault:
        with ad.corrupted_backward():
            results = gradcheck_report(cfg, args.seed, args.max_coords)
    else:
        results = gradcheck_report(cfg, args.seed, args.max_coords)
    failed = 0
    for name, err in results:
        ok = err < GRADCHECK_TOL
        failed += not ok
        print(f"{name:28s} {err:.3e}  {'PASS' if ok else 'FAIL'}")
    worst = max(e for _, e in results)
    print(f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:g}): {'PASS' if not failed else 'FAIL'}")
    return EXIT_OK if not failed else EXIT_NUMERIC


# -- ablation --------------------------------------------------------------


def ablation_variants(memory_sizes=(0, 2, 4, 8)) -> list[tuple[str, dict]]:
    variants = [
        ("base", {"use_gcpn": False, "use_lfmn": False}),
        ("+lfmn", {"use_gcpn": False, "use_lfmn": True}),
        ("+gcpn", {"use_gcpn": True, "use_lfmn": False}),
        ("full", {"use_gcpn": True, "use_lfmn": True}),
    ]
    variants += [(f"N={n}", {"use_gcpn": True, "use_lfmn": True, "memory_items": n}) for n in memory_sizes]
    return variants


def _effective(model_cfg) -> tuple:
    # two variants that build the same network share one training run
    return (
        model_cfg.use_gcpn,
        model_cfg.lfmn_active,
        model_cfg.memory_items if model_cfg.lfmn_active else 0,
    )


def run_ablation(cfg: RunConfig, train: np.ndarray, val: np.ndarray, seeds: int, variants=None) -> list[list]:
    variants = variants or ablation_variants()
    delta = cfg.model.delta
    train_w, val_w = make_windows(train, delta), make_windows(val, delta)
    rows, cache = [], {}
    for seed in range(seeds):
        for name, changes in variants:
            vcfg = replace(cfg, model=changes, training={"seed": seed})
            key = (_effective(vcfg.model), seed)
            if key not in cache:
                model = build_model(vcfg.model, train.shape[-1], seed=seed)
                _, history = fit(model, train_w, vcfg, val_w)
                last = history[-1] if history else None
                cache[key] = (last.val_psnr, last.val_ssim) if last else (math.nan, math.nan)
                log.info("ablation %s seed %d: psnr %.3f", name, seed, cache[key][0])
            rows.append([name, seed, *cache[key]])
    return rows


def summarize(rows: list[list]) -> list[list]:
    out = []
    for name in dict.fromkeys(r[0] for r in rows):
        vals = np.array([r[2:] for r in rows if r[0] == name], dtype=float)
        sd = vals.std(axis=0, ddof=1) if len(vals) > 1 else np.zeros(2)
        mean = vals.mean(axis=0)
        out.append([name, len(vals), mean[0], sd[0], mean[1], sd[1]])
    return out


def cmd_ablate(args) -> int:
    cfg = load(args.config)
    if args.epochs is not None:
        cfg = replace(cfg, training={"epochs": args.epochs})
    train, val = dataset_for(cfg, args.data)
    if not len(val):
        raise ConfigError("ablation needs held-out sequences (data.val_sequences > 0)")
    rows = run_ablation(cfg, train, val, args.seeds)
    out = Path(args.out)
    write_csv(out / "ablation_runs.csv", ["variant", "seed", "val_psnr", "val_ssim"], rows)
    summary = summarize(rows)
    write_csv(out / "ablation_summary.csv", ["variant", "seeds", "psnr_mean", "psnr_sd", "ssim_mean", "ssim_sd"], summary)
    for name, n, pm, ps, sm, ss in summary:
        print(f"{name:6s} psnr {pm:.3f} +- {ps:.3f}  ssim {sm:.4f} +- {ss:.4f}  ({n} seeds)")
    by = {(r[0], r[1]): r[2] for r in rows}
    wins = sum(by[("full", s)] >= by[("base", s)] for s in range(args.seeds))
    print(f"full >= base in {wins} of {args.seeds} seeds")
    return EXIT_OK


# -- wiring ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vidpred", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a moving-shapes dataset as pixmap directories")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", type=int, help="training sequences")
    p.add_argument("--val-sequences", type=int, help="held-out sequences")
    p.add_argument("--length", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="fit a model; writes model.nfck and log.csv under --out")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset directory from `gen`; generated in memory if omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-sequence next-frame metrics with copy-last baseline")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    p.add_argument("--self-eval", action="store_true", help="score targets against themselves")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", help="recursively predict frames from seed frames")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed-frames", required=True, help="directory of frame_%%05d pixmaps")
    p.add_argument("--context", type=int, help="seed frames to condition on (default: window length)")
    p.add_argument("--steps", type=int, help="frames to predict (default: eval.rollout_steps)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("gradcheck", help="finite-difference check of every component and the full loss")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-coords", type=int, default=24, help="sampled coordinates per large tensor")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train the stream variants and memory sweep over K seeds")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FrameIOError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
