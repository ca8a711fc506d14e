"""Command-line surface: gen | train | eval | viz | bench.

Every command is seeded and reproducible; identical inputs and seed
give byte-identical artifacts. Commands that write artifacts also
write a run_manifest.json holding sha256 hashes of inputs and outputs
(the manifest's own timestamp is informational and never hashed).

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric
failure. The VOLPROB_SEED environment variable overrides any seed
from flags or config files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import fields

import numpy as np

from . import autodiff as ad
from . import metrics as mt
from .autodiff import Tensor
from .data import (SPLIT_FRACTIONS, SYNTH_GRID, load_dataset, read_case,
                   save_dataset, split_dataset, synth_generate)
from .errors import DataFormatError, NumericError, UsageError
from .networks import (DeterministicUNet3D, ModelConfig, build_model,
                       load_checkpoint, mean_prediction, uncertainty_map)
from .training import (TrainConfig, fit, parse_kv_text,
                       train_config_from_strings, write_report)

DEFAULT_N_SAMPLES = 16


def _resolve_seed(seed: int) -> int:
    env = os.environ.get("VOLPROB_SEED")
    if env is None:
        return seed
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"VOLPROB_SEED must be an integer, got {env!r}") from None


def _hash_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_manifest(out_dir, command: str, seed: int,
                        inputs: dict, outputs: dict, extra: dict | None = None) -> None:
    manifest = {"command": command,
                "seed": seed,
                "inputs": {name: _hash_file(p) for name, p in sorted(inputs.items())},
                "outputs": {name: _hash_file(p) for name, p in sorted(outputs.items())},
                "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())}
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "run_manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------

def cmd_gen(args) -> int:
    seed = _resolve_seed(args.seed)
    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
    try:
        grid = tuple(int(g) for g in args.grid.split(","))
    except ValueError:
        raise UsageError(f"--grid expects integers, got {args.grid!r}") from None
    if len(grid) != 3:
        raise UsageError(f"--grid expects three comma-separated extents, got {args.grid!r}")
    cases, records = synth_generate(args.n_cases, grid=grid, seed=seed,
                                    p_miss=args.p_miss)
    split = split_dataset(cases, fractions=SPLIT_FRACTIONS, seed=seed)
    save_dataset(out, cases, records, split)
    outputs = {"manifest.jsonl": os.path.join(out, "manifest.jsonl"),
               "split.json": os.path.join(out, "split.json")}
    for case in cases:
        rel = os.path.join("cases", case.case_id + ".vu3d")
        outputs[rel] = os.path.join(out, rel)
    _write_run_manifest(out, "gen", seed, {}, outputs,
                        {"n_cases": args.n_cases, "grid": list(grid),
                         "p_miss": args.p_miss})
    print(f"wrote {len(cases)} cases to {out} "
          f"(train {len(split.train)} / val {len(split.val)} / test {len(split.test)})")
    return 0


# ---------------------------------------------------------------------
# train
# ---------------------------------------------------------------------

_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"variant"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def cmd_train(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        kv = parse_kv_text(fh.read())
    variant = kv.pop("variant", None)
    data_dir = kv.pop("data", None)
    if variant is None or data_dir is None:
        raise UsageError("training config must set variant=... and data=...")
    model_kv = {}
    train_kv = {}
    for key, value in kv.items():
        if key in _MODEL_KEYS:
            model_kv[key] = int(value)
        elif key in _TRAIN_KEYS:
            train_kv[key] = value
        else:
            raise UsageError(f"unknown training config key {key!r}; valid: "
                             f"{', '.join(sorted(_MODEL_KEYS | _TRAIN_KEYS))}"
                             " plus variant, data")
    model_cfg = ModelConfig(variant=variant, **model_kv)
    train_cfg = train_config_from_strings(train_kv)
    train_cfg.seed = _resolve_seed(train_cfg.seed)

    train_cases, _ = load_dataset(data_dir, "train")
    val_cases, _ = load_dataset(data_dir, "val")
    model = build_model(model_cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.pun3")
    report = fit(model, train_cases, val_cases, train_cfg, checkpoint_path=ckpt_path)
    report_path = os.path.join(args.out, "report.jsonl")
    write_report(report_path, report)
    _write_run_manifest(args.out, "train", train_cfg.seed,
                        {"config": args.config,
                         "dataset": os.path.join(data_dir, "manifest.jsonl")},
                        {"checkpoint.pun3": ckpt_path, "report.jsonl": report_path},
                        {"variant": variant, "epochs": train_cfg.max_epochs})
    last = report[-1] if report else None
    print(f"trained {variant} for {len(report)} epochs -> {ckpt_path}")
    if last is not None:
        print(f"final val_loss {last['val_loss']:.4f} (train {last['train_loss']:.4f})")
    return 0


# ---------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------

def cmd_eval(args) -> int:
    seed = _resolve_seed(args.seed)
    if args.n_samples % 4 != 0:
        raise UsageError(f"--n-samples must be a multiple of 4 for the matched-IoU "
                         f"duplication rule, got {args.n_samples}")
    if args.threads < 1:
        raise UsageError(f"--threads must be >= 1, got {args.threads}")
    model = load_checkpoint(args.checkpoint)
    cases, _ = load_dataset(args.data, args.split)
    if not cases:
        raise UsageError(f"split {args.split!r} of {args.data} is empty")
    os.makedirs(args.out, exist_ok=True)

    def score(item):
        i, case = item
        # per-case seed is positional, so the report is identical
        # for any worker count
        pred = model.predict_n(case.volume, n=args.n_samples, seed=seed + i)
        pair = mt.MaskSetPair(gt=list(case.annotations), pred=list(pred.masks))
        return mt.case_record(case.case_id, mt.eval_case(pair))

    # the outer guard keeps the grad flag constant while workers nest
    # their own no_grad blocks in any order
    with ad.no_grad():
        if args.threads == 1:
            records = [score(item) for item in enumerate(cases)]
        else:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=args.threads) as pool:
                records = list(pool.map(score, enumerate(cases)))
    jsonl_path = os.path.join(args.out, "report.jsonl")
    csv_path = os.path.join(args.out, "report.csv")
    mt.write_metrics_jsonl(records, jsonl_path)
    mt.write_metrics_csv(records, csv_path)
    _write_run_manifest(args.out, "eval", seed,
                        {"checkpoint": args.checkpoint},
                        {"report.jsonl": jsonl_path, "report.csv": csv_path},
                        {"split": args.split, "n_samples": args.n_samples,
                         "threads": args.threads})
    summary = mt.summarize(records)
    print(f"evaluated {summary['n_cases']} cases from split {args.split}")
    for key in ("mean_ged3d", "mean_iou3d", "mean_ged2d", "mean_iou2d"):
        value = summary[key]
        print(f"{key}: " + ("n/a" if value is None else f"{value:.4f}"))
    return 0


# ---------------------------------------------------------------------
# viz
# ---------------------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5), maxval 255."""
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 2:
        raise UsageError(f"PGM image must be 2D, got shape {img.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _quantize(x: np.ndarray) -> np.ndarray:
    # values in [0,1] -> 0..255, half up
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _scale_by_max(x: np.ndarray, peak: float) -> np.ndarray:
    if peak <= 0.0:
        return np.zeros(x.shape, dtype=np.uint8)
    return _quantize(x / peak)


def cmd_viz(args) -> int:
    seed = _resolve_seed(args.seed)
    if args.n_samples < 2:
        raise UsageError("--n-samples must be >= 2 so a spread is defined")
    model = load_checkpoint(args.checkpoint)
    case = read_case(args.case)
    pred = model.predict_n(case.volume, n=args.n_samples, seed=seed)
    gt = np.stack([m.astype(np.float64) for m in case.annotations])
    mu_gt = gt.mean(axis=0)
    sigma_gt = gt.std(axis=0)
    mu_pred = pred.activations.mean(axis=0)
    sigma_pred = uncertainty_map(pred)
    # heat maps share one scale: the volume-wide maximum deviation
    gt_peak = float(sigma_gt.max())
    pred_peak = float(sigma_pred.max())
    os.makedirs(args.out, exist_ok=True)
    outputs = {}
    for z in range(case.volume.grid[0]):
        for tag, img in (("mu_gt", _quantize(mu_gt[z])),
                         ("sigma_gt", _scale_by_max(sigma_gt[z], gt_peak)),
                         ("mu_pred", _quantize(mu_pred[z])),
                         ("sigma_pred", _scale_by_max(sigma_pred[z], pred_peak))):
            name = f"slice{z:03d}_{tag}.pgm"
            path = os.path.join(args.out, name)
            write_pgm(path, img)
            outputs[name] = path
    _write_run_manifest(args.out, "viz", seed,
                        {"checkpoint": args.checkpoint, "case": args.case},
                        outputs, {"n_samples": args.n_samples})
    print(f"wrote {len(outputs)} slice images to {args.out}")
    return 0


# ---------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------

def _bench_model(model, case, n_samples: int, repeats: int) -> dict:
    """Median per-operation wall times; one warm-up round is discarded.

    The per-sample leg is amortized over as many passes as predict_n
    makes, so both sides of the decomposition are measured at the same
    cache warmth and the estimate does not hinge on one timer read.
    """
    from .kernels import BACKEND

    def sample_once(features, dist, rng):
        # one complete draw: latent sample, combination head, activation
        if isinstance(model, DeterministicUNet3D):
            return ad._sigmoid_np(model.head_forward(features).data[0])
        eps = rng.standard_normal(model.config.latent_dim)
        z = dist.mean.data + np.exp(0.5 * dist.log_var.data) * eps
        return ad._sigmoid_np(model.fcomb_forward(features, Tensor(z)).data[0])

    n_eff = 1 if isinstance(model, DeterministicUNet3D) else n_samples
    fwd_times, samp_times, tot_times = [], [], []
    with ad.no_grad():
        for rep in range(repeats + 1):
            rng = np.random.default_rng(rep)
            t0 = time.perf_counter()
            features = model.unet_forward(case.volume)
            dist = None
            if not isinstance(model, DeterministicUNet3D):
                dist = model.prior_forward(case.volume)
            t1 = time.perf_counter()
            for _ in range(n_eff):
                sample_once(features, dist, rng)
            t2 = time.perf_counter()
            model.predict_n(case.volume, n=n_samples, seed=rep)
            t3 = time.perf_counter()
            if rep == 0:
                continue
            fwd_times.append(t1 - t0)
            samp_times.append((t2 - t1) / n_eff)
            tot_times.append(t3 - t2)
    forward = float(np.median(fwd_times))
    sample = float(np.median(samp_times))
    total = float(np.median(tot_times))
    composed = forward + n_eff * sample
    return {"backend": BACKEND, "n_samples": n_samples, "repeats": repeats,
            "forward_ms": 1e3 * forward, "sample_fcomb_ms": 1e3 * sample,
            "total_ms": 1e3 * total, "composed_ms": 1e3 * composed,
            "total_vs_composed": total / composed if composed > 0 else float("nan")}


def cmd_bench(args) -> int:
    if args.repeats < 3:
        raise UsageError(f"--repeats must be >= 3, got {args.repeats}")
    model = load_checkpoint(args.checkpoint)
    case = read_case(args.case)
    result = _bench_model(model, case, args.n_samples, args.repeats)
    rows = [("U-Net + prior forward", result["forward_ms"]),
            ("single sample + f-comb", result["sample_fcomb_ms"]),
            (f"total ({args.n_samples} samples)", result["total_ms"]),
            ("composed forward + n*sample", result["composed_ms"])]
    width = max(len(r[0]) for r in rows)
    print(f"kernel backend: {result['backend']}")
    for label, ms in rows:
        print(f"{label:<{width}}  {ms:10.2f} ms")
    print(f"total / composed = {result['total_vs_composed']:.3f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(result, fh, sort_keys=True, indent=1)
            fh.write("\n")
        print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volprob",
        description="probabilistic 3D segmentation: data generation, training, "
                    "evaluation, visualization, benchmarking")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic two-mode dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n-cases", type=int, default=200)
    p.add_argument("--grid", default=",".join(str(g) for g in SYNTH_GRID),
                   help="comma-separated extents, default %(default)s")
    p.add_argument("--p-miss", type=float, default=0.08)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true",
                   help="allow writing into a non-empty directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model variant on a dataset")
    p.add_argument("--config", required=True,
                   help="key=value file: variant, data, plus model/training keys")
    p.add_argument("--out", required=True, help="output directory for checkpoint/report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="sample a checkpoint over a split and score it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--n-samples", type=int, default=DEFAULT_N_SAMPLES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1,
                   help="worker pool size; reports are identical for any value")
    p.add_argument("--out", required=True, help="output directory for reports")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="export per-slice mean/spread heat maps as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--case", required=True, help="a .vu3d case file")
    p.add_argument("--n-samples", type=int, default=DEFAULT_N_SAMPLES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("bench", help="time forward pass vs per-sample cost")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--case", required=True, help="a .vu3d case file")
    p.add_argument("--n-samples", type=int, default=DEFAULT_N_SAMPLES)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default=None, help="optional JSON output path")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
