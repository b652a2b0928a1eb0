"""Command-line entry point: train / infer / eval / erf / bench / params.

A single JSON config file drives runs; flags override config scalars.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, tensor as T
from .blocks import (
    ModelConfig,
    count_params,
    echosr_config,
    echosr_forward,
    echosr_lite_config,
    init_params,
    mrfe_forward,
)
from .data import DataError, ImageBuffer, bicubic_resize, load_png, save_png
from .metrics import psnr_y, ssim_y
from .tensor import Tensor
from .trainer import (
    CheckpointError,
    TrainingAbort,
    TrainRunConfig,
    checkpoint_from_training,
    config_from_dict,
    config_to_dict,
    load_checkpoint,
    params_from_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    pass


_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainRunConfig)} | {"data_dir"}
_EVAL_KEYS = {"hr_dir", "lr_dir", "scale", "crop_border"}


def load_run_config(path) -> dict:
    """Parse the run config JSON, rejecting unknown keys at every level."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    unknown = set(raw) - {"model", "train", "eval"}
    if unknown:
        raise UsageError(f"unknown top-level config keys: {sorted(unknown)}")
    model_cfg = raw.get("model", {})
    try:
        model = config_from_dict(model_cfg)
    except (CheckpointError, T.ConfigError) as exc:
        raise UsageError(str(exc)) from None
    train_cfg = raw.get("train", {})
    unknown = set(train_cfg) - _TRAIN_KEYS
    if unknown:
        raise UsageError(f"unknown train config keys: {sorted(unknown)}")
    eval_cfg = raw.get("eval", {})
    unknown = set(eval_cfg) - _EVAL_KEYS
    if unknown:
        raise UsageError(f"unknown eval config keys: {sorted(unknown)}")
    return {"model": model, "train": train_cfg, "eval": eval_cfg}


def _preset_config(name: str, scale: int) -> ModelConfig:
    if name == "echosr":
        return echosr_config(scale)
    if name == "echosr-lite":
        return echosr_lite_config(scale)
    raise UsageError(f"unknown preset {name!r} (expected echosr or echosr-lite)")


def _model_config(args) -> ModelConfig:
    if getattr(args, "config", None):
        return load_run_config(args.config)["model"]
    if getattr(args, "preset", None):
        return _preset_config(args.preset, args.scale)
    raise UsageError("either --config or --preset is required")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg_file = load_run_config(args.config)
    model, tc = cfg_file["model"], dict(cfg_file["train"])
    if args.iter_scale is not None:
        tc["iter_scale"] = args.iter_scale
    if args.iters is not None:
        tc["iters"] = args.iters
    data_dir = tc.pop("data_dir", None)
    if not data_dir:
        raise UsageError("train config must set train.data_dir")
    run = TrainRunConfig(**tc)
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(model, data_dir, run, resume=resume)
    print(f"trained to {result.checkpoint_path} (metrics in {result.metrics_path})")
    return EXIT_OK


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    params = params_from_checkpoint(ckpt)
    img = load_png(args.input)
    with T.no_grad():
        sr = echosr_forward(img.to_tensor(), params, ckpt.config, mode="eval")
    save_png(ImageBuffer.from_tensor(sr), args.output)
    print(f"wrote {args.output} ({sr.data.shape[3]}x{sr.data.shape[2]})")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    params = params_from_checkpoint(ckpt)
    cfg = ckpt.config
    hr_dir = Path(args.hr_dir)
    hr_paths = sorted(hr_dir.glob("*.png"))
    if not hr_paths:
        raise DataError(f"no PNG images found in {hr_dir}")
    crop = args.crop_border if args.crop_border is not None else cfg.scale
    rows = []
    for path in hr_paths:
        hr = load_png(path)
        h = (hr.height // cfg.scale) * cfg.scale
        w = (hr.width // cfg.scale) * cfg.scale
        hr_arr = hr.pixels[:h, :w].astype(np.float64) / 255.0
        if args.lr_dir:
            lr = load_png(Path(args.lr_dir) / path.name)
        else:
            lr = bicubic_resize(
                ImageBuffer.from_array(hr.pixels[:h, :w]), w // cfg.scale, h // cfg.scale
            )
        with T.no_grad():
            sr = echosr_forward(lr.to_tensor(), params, cfg, mode="eval")
        sr_arr = np.clip(sr.data[0], 0.0, 1.0)
        gt_arr = hr_arr.transpose(2, 0, 1)
        rows.append(
            {
                "image": path.name,
                "psnr": psnr_y(sr_arr, gt_arr, crop_border=crop),
                "ssim": ssim_y(sr_arr, gt_arr, crop_border=crop),
            }
        )
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    mean_ssim = float(np.mean([r["ssim"] for r in rows]))
    if args.json:
        print(json.dumps({"images": rows, "mean_psnr": mean_psnr, "mean_ssim": mean_ssim}))
    else:
        for r in rows:
            print(f"{r['image']:30s}  PSNR {r['psnr']:8.4f}  SSIM {r['ssim']:.4f}")
        print(f"{'mean':30s}  PSNR {mean_psnr:8.4f}  SSIM {mean_ssim:.4f}")
    return EXIT_OK


def _erf_model(args):
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        return params_from_checkpoint(ckpt), ckpt.config
    cfg = _model_config(args)
    return init_params(cfg, args.seed), cfg


def cmd_erf(args) -> int:
    params, cfg = _erf_model(args)
    rng = np.random.default_rng(args.seed)
    out_prefix = Path(args.out)
    written = []
    if args.block == "full":

        def forward(x):
            return echosr_forward(x, params, cfg, mode="train")

        erf = analysis.erf_map(forward, 3, args.size, args.samples, rng, context="full model")
        table = analysis.area_ratio(erf)
        written += analysis.save_erf(erf, table, out_prefix)
    elif args.block == "mrfe":
        prefix = "group0.chb0.mrfe"
        for branch, k in enumerate(cfg.mrfe_kernels):

            def forward(x, branch=branch):
                out = mrfe_forward(x, params, cfg, prefix)
                cb = cfg.mrfe_branch_channels
                return T.pick(out, (slice(None), slice(branch * cb, (branch + 1) * cb)))

            erf = analysis.erf_map(
                forward, cfg.channels, args.size, args.samples, rng, context=f"mrfe branch k={k or 'id'}"
            )
            table = analysis.area_ratio(erf)
            written += analysis.save_erf(erf, table, out_prefix.with_name(f"{out_prefix.name}_k{k}"))
    elif args.block == "cofb":
        if args.compare:
            rows = []
            for kernels in (tuple(cfg.cofb_kernels), tuple(reversed(cfg.cofb_kernels))):
                report = analysis.cofb_erf_experiment(kernels, seed=args.seed, input_size=args.size)
                rows.append(
                    {
                        "kernels": list(kernels),
                        "before": report.before.as_dict(),
                        "after": report.after.as_dict(),
                        "relative_change": {str(k): v for k, v in report.change.items()},
                    }
                )
            out_path = out_prefix.with_suffix(".json")
            out_path.parent.mkdir(parents=True, exist_ok=True)
            out_path.write_text(json.dumps({"cofb_compare": rows}, indent=2))
            written.append(out_path)
        else:

            def forward(x):
                from .blocks import cofb_forward

                return cofb_forward(x, params, cfg, "group0.cofb")

            erf = analysis.erf_map(forward, cfg.channels, args.size, args.samples, rng, context="cofb")
            table = analysis.area_ratio(erf)
            written += analysis.save_erf(erf, table, out_prefix)
    else:
        raise UsageError(f"unknown --block {args.block!r}")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.size < 1:
        raise UsageError("--size must be positive")
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        params, cfg = params_from_checkpoint(ckpt), ckpt.config
    else:
        cfg = _model_config(args)
        params = init_params(cfg, args.seed)
    # bench drives the eval path; seed running stats if the model is untrained
    for stats in params.bn_stats.values():
        if not stats.initialized():
            stats.mean = np.zeros(cfg.channels, dtype=np.float32)
            stats.var = np.ones(cfg.channels, dtype=np.float32)

    def forward(x):
        return echosr_forward(x, params, cfg, mode="eval")

    result = analysis.bench(forward, args.size, repeats=args.repeats)
    if args.json:
        print(json.dumps(result))
    else:
        print(
            f"mean {result['mean_latency'] * 1e3:.2f} ms   p95 {result['p95'] * 1e3:.2f} ms   "
            f"peak {result['peak_bytes'] / 1e6:.1f} MB"
        )
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = _model_config(args)
    report = analysis.param_report(cfg)
    total = count_params(cfg)
    if args.json:
        print(json.dumps({"per_module": report, "total": total}))
    else:
        for name, count in report.items():
            print(f"{name:12s} {count:10d}")
        print(f"{'total':12s} {total:10d}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="echosr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--iter-scale", type=float, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="super-resolve one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM over a directory of HR images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--hr-dir", required=True)
    p.add_argument("--lr-dir", default=None)
    p.add_argument("--crop-border", type=int, default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("erf", help="effective receptive field maps and tables")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--random-init", action="store_true")
    p.add_argument("--config", default=None)
    p.add_argument("--preset", default="echosr")
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--block", choices=("full", "mrfe", "cofb"), default="full")
    p.add_argument("--compare", action="store_true")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_erf)

    p = sub.add_parser("bench", help="forward-pass latency and memory")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--preset", default="echosr")
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--repeats", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("params", help="parameter count report")
    p.add_argument("--config", default=None)
    p.add_argument("--preset", default=None)
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_params)

    return parser


def main(argv=None) -> int:
    threads = os.environ.get("ECHOSR_THREADS")
    if threads is not None:
        # caps the data-pipeline prefetch concurrency; compute is single-threaded
        os.environ["ECHOSR_PREFETCH"] = str(max(0, int(threads) - 1))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, DataError, TrainingAbort, T.ConfigError, T.ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
