"""Command-line front end.

Subcommands: ``train`` (one run, full artifact set), ``compare`` (one run
per norm scheme, side-by-side table), ``diagnose`` (structure checks on a
checkpoint), ``quant-eval`` (PSNR under a quantization policy), and
``multirun`` (seed sweep with aggregate statistics).

Configuration is a flat ``section.key = value`` namespace, read from an
optional file and overridden by repeated ``--set key=value`` flags.  Run
identifiers hash the resolved configuration, so identical settings land in
the same output directory and reproduce identical artifacts.

Exit codes: 0 success, 2 configuration problem, 3 training diverged.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .data import make_dataset, psnr, ssim, task_scale
from .diagnostics import check_homothety, write_trace
from .model import (
    ModelConfig,
    RestorationModel,
    export_rpe,
    load_checkpoint,
    save_checkpoint,
)
from .norms import NORM_KINDS, normalize
from .quantize import QuantPolicy, infer_quantized
from .tensor import Tensor
from .train import TrainConfig, aggregate_reports, evaluate, make_report, train


class ConfigError(Exception):
    """Raised for unknown keys, malformed values, or inconsistent settings."""


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(","))


def _parse_float_pair(text: str) -> tuple[float, float]:
    parts = tuple(float(part) for part in text.split(","))
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated floats, got {text!r}")
    return parts


def _parse_norm_kind(text: str) -> str:
    if text not in NORM_KINDS:
        raise ValueError(f"unknown norm kind {text!r}; choose from {', '.join(NORM_KINDS)}")
    return text


DEFAULTS: dict[str, tuple[str, object]] = {
    "model.embed_dim": ("16", int),
    "model.depths": ("2,2", _parse_int_tuple),
    "model.heads": ("2,2", _parse_int_tuple),
    "model.window": ("4", int),
    "model.mlp_ratio": ("2.0", float),
    "model.scale": ("0", int),  # 0 = follow the task
    "model.rpe": ("true", _parse_bool),
    "norm.kind": ("LN", _parse_norm_kind),
    "norm.epsilon": ("1e-6", float),
    "train.iters": ("3000", int),
    "train.lr": ("2e-4", float),
    "train.betas": ("0.9,0.99", _parse_float_pair),
    "train.batch": ("4", int),
    "train.patch": ("32", int),
    "train.seed": ("0", int),
    "train.grad_clip": ("inf", float),
    "train.kld_weight": ("0.0", float),
    "train.milestones": ("2500", _parse_int_tuple),
    "train.gamma": ("0.5", float),
    "train.trace_every": ("50", int),
    "data.task": ("sr2", str),
    "data.images": ("8", int),
    "data.eval_images": ("4", int),
    "data.size": ("96", int),
    "data.seed": ("7777", int),
}


def read_config_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def merge_config(file_path=None, overrides=()) -> dict[str, str]:
    """Defaults, then the file, then --set flags; returns raw strings."""
    merged = {key: default for key, (default, _) in DEFAULTS.items()}
    if file_path is not None:
        for key, value in read_config_file(file_path).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = value.strip()
    return merged


def resolve_config(strings: dict[str, str]) -> dict:
    """Parse raw strings into typed values and cross-check them."""
    typed: dict = {}
    for key, (_, parse) in DEFAULTS.items():
        try:
            typed[key] = parse(strings[key])
        except (ValueError, TypeError) as err:
            raise ConfigError(f"bad value for {key}: {err}") from None

    task = typed["data.task"]
    try:
        needed_scale = task_scale(task)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    if typed["model.scale"] == 0:
        typed["model.scale"] = needed_scale
    elif typed["model.scale"] != needed_scale:
        raise ConfigError(
            f"model.scale {typed['model.scale']} conflicts with task {task!r} "
            f"(needs {needed_scale})"
        )

    window = typed["model.window"]
    lq_size = typed["data.size"] // needed_scale
    if typed["data.size"] % needed_scale:
        raise ConfigError(f"data.size {typed['data.size']} not divisible by scale {needed_scale}")
    if typed["train.patch"] > lq_size:
        raise ConfigError(
            f"train.patch {typed['train.patch']} exceeds the degraded image size {lq_size}"
        )
    if typed["train.patch"] % window or lq_size % window:
        raise ConfigError(
            f"train.patch {typed['train.patch']} and degraded size {lq_size} "
            f"must both be divisible by model.window {window}"
        )
    for key in ("data.images", "data.eval_images"):
        if typed[key] < 1:
            raise ConfigError(f"{key} must be positive")
    return typed


def run_identifier(strings: dict[str, str]) -> str:
    canonical = "\n".join(f"{k}={strings[k]}" for k in sorted(strings))
    digest = hashlib.sha256(canonical.encode()).hexdigest()[:8]
    resolved = resolve_config(strings)
    return f"{resolved['data.task']}-{resolved['norm.kind']}-s{resolved['train.seed']}-{digest}"


def build_model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        embed_dim=cfg["model.embed_dim"],
        depths=cfg["model.depths"],
        heads=cfg["model.heads"],
        window=cfg["model.window"],
        mlp_ratio=cfg["model.mlp_ratio"],
        scale=cfg["model.scale"],
        norm_kind=cfg["norm.kind"],
        norm_eps=cfg["norm.epsilon"],
        rpe=cfg["model.rpe"],
    )


def build_train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        iters=cfg["train.iters"],
        lr=cfg["train.lr"],
        betas=cfg["train.betas"],
        batch=cfg["train.batch"],
        patch=cfg["train.patch"],
        seed=cfg["train.seed"],
        grad_clip=cfg["train.grad_clip"],
        kld_weight=cfg["train.kld_weight"],
        milestones=cfg["train.milestones"],
        gamma=cfg["train.gamma"],
        trace_every=cfg["train.trace_every"],
    )


def build_datasets(cfg: dict):
    train_pairs = make_dataset(
        cfg["data.task"], cfg["data.images"], cfg["data.size"], cfg["data.seed"]
    )
    eval_pairs = make_dataset(
        cfg["data.task"], cfg["data.eval_images"], cfg["data.size"], cfg["data.seed"] + 1
    )
    return train_pairs, eval_pairs


def run_training(strings: dict[str, str], out_root) -> tuple[dict, str, Path]:
    """Train one configuration and write the full artifact set.

    Returns (report, status, run directory).
    """
    cfg = resolve_config(strings)
    run_id = run_identifier(strings)
    run_dir = Path(out_root) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)

    try:
        model_cfg = build_model_config(cfg)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    model = RestorationModel(model_cfg, seed=cfg["train.seed"])
    train_pairs, eval_pairs = build_datasets(cfg)
    result = train(model, train_pairs, build_train_config(cfg), run_id=run_id)

    if result.status == "ok":
        stats = evaluate(model, eval_pairs)
        report = make_report(run_id, cfg["data.task"], stats, result.trace)
    else:
        sqmeans = [r.value for r in result.trace if r.metric == "sqmean"]
        entropies = [r.value for r in result.trace if r.metric == "entropy"]
        report = {
            "run_id": run_id,
            "task": cfg["data.task"],
            "psnr": None,
            "ssim": None,
            "max_sqmean": max(sqmeans) if sqmeans else None,
            "min_entropy": min(entropies) if entropies else None,
            "nonfinite_count": None,
        }
    report["status"] = result.status

    save_checkpoint(model, run_dir / "checkpoint.irln")
    write_trace(run_dir / "trace.csv", result.trace)
    with open(run_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest = {
        "run_id": run_id,
        "status": result.status,
        "created": datetime.now(timezone.utc).isoformat(),
        "config": dict(sorted(strings.items())),
    }
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if cfg["model.rpe"]:
        export_rpe(model, run_dir / "rpe")
    return report, result.status, run_dir


def _load_trained(strings: dict[str, str], checkpoint) -> tuple[RestorationModel, dict]:
    cfg = resolve_config(strings)
    try:
        model = RestorationModel(build_model_config(cfg), seed=cfg["train.seed"])
        load_checkpoint(model, checkpoint)
    except (ValueError, OSError) as err:
        raise ConfigError(f"cannot load checkpoint: {err}") from None
    return model, cfg


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_train(args) -> int:
    strings = merge_config(args.config, args.set)
    report, status, run_dir = run_training(strings, args.out)
    print(f"run {report['run_id']}: status={status}", end="")
    if status == "ok":
        print(f" psnr={report['psnr']:.3f} ssim={report['ssim']:.4f}")
    else:
        print()
    print(f"artifacts in {run_dir}")
    return 0 if status == "ok" else 3


def cmd_compare(args) -> int:
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    for kind in kinds:
        if kind not in NORM_KINDS:
            raise ConfigError(f"unknown norm kind {kind!r}")
    rows = []
    for kind in kinds:
        strings = merge_config(args.config, list(args.set) + [f"norm.kind={kind}"])
        report, status, _ = run_training(strings, args.out)
        rows.append((kind, status, report))

    header = f"{'kind':<12} {'status':<9} {'psnr':>8} {'ssim':>7} {'max_sqmean':>12} {'min_entropy':>12}"
    print(header)
    print("-" * len(header))
    for kind, status, report in rows:
        if status == "ok":
            print(
                f"{kind:<12} {status:<9} {report['psnr']:>8.3f} {report['ssim']:>7.4f} "
                f"{report['max_sqmean']:>12.4g} {report['min_entropy']:>12.4g}"
            )
        else:
            print(f"{kind:<12} {status:<9} {'-':>8} {'-':>7} {'-':>12} {'-':>12}")
    summary = {kind: report for kind, _, report in rows}
    out_path = Path(args.out) / "compare.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"table written to {out_path}")
    return 0


def cmd_diagnose(args) -> int:
    strings = merge_config(args.config, args.set)
    model, cfg = _load_trained(strings, args.checkpoint)
    eval_pairs = make_dataset(cfg["data.task"], 1, cfg["data.size"], cfg["data.seed"] + 1)
    _, lq = eval_pairs[0]

    trace = []
    _, block_outputs = model.forward(
        Tensor(lq[None]), mode="eval", trace=trace, run_id="diagnose", iteration=0
    )
    print(f"norm kind: {cfg['norm.kind']}")
    for index, blk in enumerate(model.blocks):
        sq = next(r.value for r in trace if r.layer_index == index and r.metric == "sqmean")
        ent = next(r.value for r in trace if r.layer_index == index and r.metric == "entropy")
        tokens = block_outputs[index].data[0]
        out = normalize(blk.norm1, Tensor(tokens), mode="eval")
        if isinstance(out.rescale, float):
            verdict = "identity map (no statistics)"
        else:
            try:
                result = check_homothety(tokens, out.y.data)
                verdict = (
                    f"fits={result.fits} a_hat={result.a_hat:.6g} "
                    f"residual={result.max_residual:.3g}"
                )
            except ValueError:
                verdict = "degenerate input"
        print(f"block {index}: sqmean={sq:.6g} entropy={ent:.6g} norm-map: {verdict}")
    return 0


def cmd_quant_eval(args) -> int:
    strings = merge_config(args.config, args.set)
    model, cfg = _load_trained(strings, args.checkpoint)
    bits = None if args.bits == "none" else int(args.bits)
    try:
        policy = QuantPolicy(bits, args.features)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    _, eval_pairs = build_datasets(cfg)

    psnr_values, ssim_values, bad_total = [], [], 0
    baseline = []
    for hq, lq in eval_pairs:
        restored, bad = infer_quantized(model, policy, lq)
        clipped = np.clip(np.asarray(restored, dtype=np.float64), 0.0, 1.0)
        psnr_values.append(psnr(clipped, hq))
        ssim_values.append(ssim(clipped, hq))
        bad_total += bad
        plain, _ = infer_quantized(model, QuantPolicy(None, "f32"), lq)
        baseline.append(psnr(np.clip(np.asarray(plain, dtype=np.float64), 0.0, 1.0), hq))

    summary = {
        "bits": args.bits,
        "features": args.features,
        "psnr": float(np.mean(psnr_values)),
        "ssim": float(np.mean(ssim_values)),
        "psnr_f32": float(np.mean(baseline)),
        "nonfinite_count": bad_total,
    }
    summary["psnr_drop"] = summary["psnr_f32"] - summary["psnr"]
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _multirun_job(payload) -> tuple[int, dict, str]:
    strings, out_root = payload
    report, status, _ = run_training(strings, out_root)
    return resolve_config(strings)["train.seed"], report, status


def cmd_multirun(args) -> int:
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")

    jobs = []
    for seed in seeds:
        strings = merge_config(args.config, list(args.set) + [f"train.seed={seed}"])
        resolve_config(strings)  # surface config errors before any training
        jobs.append((strings, args.out))

    workers = int(os.environ.get("IRNORM_THREADS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_multirun_job, jobs))
    else:
        outcomes = [_multirun_job(job) for job in jobs]

    reports = [report for _, report, status in outcomes if status == "ok"]
    aggregate = aggregate_reports(reports) if reports else None
    payload = {
        "seeds": seeds,
        "reports": [report for _, report, _ in outcomes],
        "aggregate": aggregate,
    }
    out_path = Path(args.out) / "multirun.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

    for seed, report, status in outcomes:
        line = f"seed {seed}: status={status}"
        if status == "ok":
            line += f" psnr={report['psnr']:.3f}"
        print(line)
    if aggregate is not None:
        print(
            f"aggregate over {aggregate['runs']} runs: "
            f"psnr {aggregate['psnr_mean']:.3f} +/- {aggregate['psnr_std']:.3f}"
        )
    print(f"summary written to {out_path}")
    return 0 if reports else 3


# ----------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="flat 'key = value' config file")
    common.add_argument(
        "--set",
        metavar="KEY=VALUE",
        action="append",
        default=[],
        help="override one config entry (repeatable)",
    )
    common.add_argument("--out", metavar="DIR", default="runs", help="artifact root directory")

    parser = argparse.ArgumentParser(
        prog="irnorm",
        description="Train and probe small window-attention restoration models "
        "under different normalization schemes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train one model and write artifacts")

    compare = sub.add_parser("compare", parents=[common], help="train once per norm scheme")
    compare.add_argument("--kinds", default="LN,iLN", help="comma-separated norm kinds")

    diagnose = sub.add_parser("diagnose", parents=[common], help="structure checks on a checkpoint")
    diagnose.add_argument("--checkpoint", required=True, metavar="FILE")

    quant = sub.add_parser("quant-eval", parents=[common], help="evaluate under quantization")
    quant.add_argument("--checkpoint", required=True, metavar="FILE")
    quant.add_argument("--bits", default="none", choices=["none", "8", "4"])
    quant.add_argument("--features", default="f32", choices=["f32", "f16"])

    multirun = sub.add_parser("multirun", parents=[common], help="seed sweep with aggregates")
    multirun.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    return parser


_COMMANDS = {
    "train": cmd_train,
    "compare": cmd_compare,
    "diagnose": cmd_diagnose,
    "quant-eval": cmd_quant_eval,
    "multirun": cmd_multirun,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
