"""Training loop: Adam with stepped learning-rate decay, L1 objective with
an optional per-block distribution penalty, gradient clipping, and the
per-run report used by the comparison drivers.

Every source of randomness is keyed off the config seed plus the step and
batch-slot indices, so identical configs replay bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import psnr, sample_patch, ssim
from .diagnostics import TraceRecord
from .tensor import (
    Tensor,
    absolute,
    add,
    count_nonfinite,
    log,
    mean_axes,
    mul,
    reduce_stats,
    sub,
    sum_axes,
)

ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    iters: int = 3000
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.99)
    batch: int = 4
    patch: int = 32
    seed: int = 0
    grad_clip: float = math.inf
    kld_weight: float = 0.0
    milestones: tuple[int, ...] = (2500,)
    gamma: float = 0.5
    trace_every: int = 50

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.iters < 0 or self.batch < 1 or self.patch < 1:
            raise ValueError("iters must be >= 0; batch and patch must be positive")
        if self.trace_every < 1:
            raise ValueError("trace_every must be positive")
        if not 0.0 <= self.betas[0] < 1.0 or not 0.0 <= self.betas[1] < 1.0:
            raise ValueError("betas must lie in [0, 1)")


def lr_at(step: int, base: float, milestones, gamma: float) -> float:
    """Stepped decay: the rate halves (by ``gamma``) at every milestone."""
    passed = sum(1 for m in milestones if m <= step)
    return base * gamma**passed


class AdamState:
    """First/second moment accumulators, keyed by parameter name."""

    def __init__(self) -> None:
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, betas=(0.9, 0.99)) -> None:
    """One bias-corrected Adam update, applied in place to each leaf."""
    state.step += 1
    b1, b2 = betas
    t = state.step
    for name in sorted(params):
        leaf = params[name]
        if leaf.grad is None:
            continue
        g = leaf.grad
        m = state.m.get(name)
        v = state.v.get(name)
        with np.errstate(over="ignore", invalid="ignore"):
            m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
            v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
            state.m[name] = m
            state.v[name] = v
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            leaf.data -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    with np.errstate(over="ignore"):
        for name in sorted(params):
            g = params[name].grad
            if g is not None:
                total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_grads(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most ``max_norm``."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        ratio = max_norm / norm
        for leaf in params.values():
            if leaf.grad is not None:
                leaf.grad *= ratio
    return norm


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    return mean_axes(absolute(sub(pred, target)))


def kld_penalty(block_outputs) -> Tensor:
    """Mean over blocks of 0.5 * (var + mean^2 - 1 - ln var).

    Zero exactly when a block's features are standard-normal distributed;
    grows as their scale drifts, which is what the penalty is for.
    """
    terms = None
    for x in block_outputs:
        mu, var = reduce_stats(x)
        term = sub(add(var, mul(mu, mu)), add(1.0, log(var)))
        term = mul(sum_axes(term), 0.5)
        terms = term if terms is None else add(terms, term)
    return mul(terms, 1.0 / len(block_outputs))


def sample_batch(pairs, cfg: TrainConfig, step: int):
    """Deterministic batch for one step: (hq [B,3,...], lq [B,3,...])."""
    hq_stack, lq_stack = [], []
    for slot in range(cfg.batch):
        pick_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, step, slot, 0]))
        hq, lq = pairs[int(pick_rng.integers(0, len(pairs)))]
        hq_patch, lq_patch = sample_patch(
            hq, lq, cfg.patch, np.random.SeedSequence([cfg.seed, step, slot, 1])
        )
        hq_stack.append(hq_patch)
        lq_stack.append(lq_patch)
    return np.stack(hq_stack), np.stack(lq_stack)


@dataclass
class TrainResult:
    status: str
    losses: list[float] = field(default_factory=list)
    trace: list[TraceRecord] = field(default_factory=list)


def train(model, pairs, cfg: TrainConfig, run_id: str = "run") -> TrainResult:
    """Optimize the model in place; aborts with status "diverged" on a
    non-finite loss instead of raising."""
    state = AdamState()
    trace: list[TraceRecord] = []
    losses: list[float] = []
    status = "ok"

    for step in range(cfg.iters):
        lr = lr_at(step, cfg.lr, cfg.milestones, cfg.gamma)
        hq_batch, lq_batch = sample_batch(pairs, cfg, step)
        x = Tensor(lq_batch)
        target = Tensor(hq_batch)
        sink = trace if step % cfg.trace_every == 0 else None
        out, blocks = model.forward(x, mode="train", trace=sink, run_id=run_id, iteration=step)

        loss = l1_loss(out, target)
        if cfg.kld_weight != 0.0:
            loss = add(loss, mul(kld_penalty(blocks), cfg.kld_weight))
        value = float(loss.data)
        losses.append(value)
        if not math.isfinite(value):
            status = "diverged"
            break

        model.zero_grads()
        loss.backward()
        if math.isfinite(cfg.grad_clip):
            clip_grads(model.params(), cfg.grad_clip)
        adam_step(model.params(), state, lr, cfg.betas)

    if not any(r.metric == "sqmean" for r in trace):
        # zero-iteration runs still need feature statistics in the report
        hq_batch, lq_batch = sample_batch(pairs, cfg, cfg.iters)
        model.forward(
            Tensor(lq_batch), mode="train", trace=trace, run_id=run_id, iteration=cfg.iters
        )
    return TrainResult(status, losses, trace)


def evaluate(model, pairs) -> dict:
    """Mean PSNR/SSIM over held-out pairs, with non-finite accounting.

    Inputs are fed at the model's own precision; outputs are clamped to the
    unit range before scoring, as for on-screen display.
    """
    precision = model.shallow_w.precision
    psnr_values, ssim_values = [], []
    with count_nonfinite() as counter:
        for hq, lq in pairs:
            x = Tensor(lq[None], precision=precision)
            out, _ = model.forward(x, mode="eval")
            sr = np.clip(np.asarray(out.data[0], dtype=np.float64), 0.0, 1.0)
            psnr_values.append(psnr(sr, hq))
            ssim_values.append(ssim(sr, hq))
    return {
        "psnr": float(np.mean(psnr_values)),
        "ssim": float(np.mean(ssim_values)),
        "nonfinite_count": counter.count,
    }


def make_report(run_id: str, task: str, eval_stats: dict, trace) -> dict:
    sqmeans = [r.value for r in trace if r.metric == "sqmean"]
    entropies = [r.value for r in trace if r.metric == "entropy"]
    return {
        "run_id": run_id,
        "task": task,
        "psnr": eval_stats["psnr"],
        "ssim": eval_stats["ssim"],
        "max_sqmean": max(sqmeans) if sqmeans else float("nan"),
        "min_entropy": min(entropies) if entropies else float("nan"),
        "nonfinite_count": eval_stats["nonfinite_count"],
    }


_AGGREGATE_FIELDS = ("psnr", "ssim", "max_sqmean", "min_entropy")


def aggregate_reports(reports) -> dict:
    """Population mean/std per metric across a family of runs."""
    if not reports:
        raise ValueError("nothing to aggregate")
    out: dict = {"runs": len(reports)}
    for name in _AGGREGATE_FIELDS:
        values = np.array([r[name] for r in reports], dtype=np.float64)
        out[f"{name}_mean"] = float(values.mean())
        out[f"{name}_std"] = float(values.std(ddof=0))
    out["nonfinite_total"] = int(sum(r["nonfinite_count"] for r in reports))
    return out
