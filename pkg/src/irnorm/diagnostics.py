"""Structural probes for feature maps and the training-trace record format.

These are observers: nothing here touches autodiff state, so enabling them
never perturbs a run.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor

TRACE_HEADER = ("run_id", "iteration", "layer_index", "metric", "value")


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x)


@dataclass
class HomothetyVerdict:
    """Outcome of fitting a single scale factor to all pairwise differences."""

    fits: bool
    a_hat: float
    max_residual: float


def check_homothety(x, y, tol: float = 1e-3, floor: float = 1e-12) -> HomothetyVerdict:
    """Test whether the map x -> y rescales every token difference equally.

    Fits the least-squares scale ``a_hat`` over all pairwise token differences
    (y_i - y_j) ~ a * (x_i - x_j), then reports the worst relative residual
    ||dy - a_hat dx|| / max(||dx||, floor).  ``fits`` requires the residual to
    stay within ``tol`` and the scale to be positive.

    Inputs are token maps of shape [L, C]; memory is O(L^2 C), intended for
    diagnostic extents.
    """
    xv = np.asarray(_as_array(x), dtype=np.float64)
    yv = np.asarray(_as_array(y), dtype=np.float64)
    if xv.shape != yv.shape or xv.ndim != 2:
        raise ValueError(f"need two [L,C] maps of one shape, got {xv.shape} and {yv.shape}")
    tokens = xv.shape[0]
    if tokens < 2:
        raise ValueError("need at least two tokens to compare differences")
    if np.all(xv == xv[0]):
        raise ValueError("degenerate input: all tokens identical")

    # Least squares over all pairs reduces to centered Frobenius inner products.
    xc = xv - xv.mean(axis=0)
    yc = yv - yv.mean(axis=0)
    a_hat = float((yc * xc).sum() / (xc * xc).sum())

    dx = xv[:, None, :] - xv[None, :, :]
    dy = yv[:, None, :] - yv[None, :, :]
    resid = np.sqrt(((dy - a_hat * dx) ** 2).sum(axis=-1))
    norms = np.maximum(np.sqrt((dx ** 2).sum(axis=-1)), floor)
    iu = np.triu_indices(tokens, k=1)
    max_residual = float((resid[iu] / norms[iu]).max())
    return HomothetyVerdict(fits=bool(max_residual <= tol and a_hat > 0.0), a_hat=a_hat, max_residual=max_residual)


def channel_entropy(x, eps: float = 1e-12) -> float:
    """Entropy of the softmax over per-channel mean absolute activations.

    ``x`` is a channel-first activation tensor ([C, H, W] or any [C, ...]).
    Low entropy means the activation mass has concentrated on few channels.
    Summations run in a canonical (sorted) order so the result is exactly
    invariant under channel permutation.
    """
    xv = _as_array(x)
    if xv.ndim < 2:
        raise ValueError("need a channel-first map with at least one trailing axis")
    mag = np.abs(xv).reshape(xv.shape[0], -1).mean(axis=1)
    shifted = mag - mag.max()
    e = np.exp(shifted)
    p = e / np.sort(e).sum()
    terms = p * np.log(p + eps)
    return float(-np.sort(terms).sum())


def feature_sqmean(x) -> float:
    """Mean squared feature value, the magnitude statistic traced per block."""
    xv = _as_array(x)
    return float(np.mean(np.square(xv)))


def bias_alignment(beta, channel_mag) -> float:
    """Pearson correlation between |beta| and per-channel feature magnitudes."""
    b = np.abs(np.asarray(_as_array(beta), dtype=np.float64)).reshape(-1)
    m = np.asarray(_as_array(channel_mag), dtype=np.float64).reshape(-1)
    if b.shape != m.shape:
        raise ValueError(f"length mismatch: {b.shape} vs {m.shape}")
    if b.size < 2:
        raise ValueError("need at least two channels")
    bc = b - b.mean()
    mc = m - m.mean()
    denom = np.sqrt((bc ** 2).sum() * (mc ** 2).sum())
    if denom == 0.0:
        raise ValueError("undefined correlation: zero variance input")
    return float((bc * mc).sum() / denom)


@dataclass
class TraceRecord:
    """One scalar observation of one layer at one training iteration."""

    run_id: str
    iteration: int
    layer_index: int
    metric: str
    value: float


def write_trace(path, records: list[TraceRecord]) -> None:
    """Write trace records as CSV with a fixed header and 17-digit floats."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for r in records:
            writer.writerow([r.run_id, r.iteration, r.layer_index, r.metric, f"{r.value:.17g}"])


def read_trace(path) -> list[TraceRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TRACE_HEADER:
            raise ValueError(f"bad trace header in {Path(path).name}: {header!r}")
        return [
            TraceRecord(row[0], int(row[1]), int(row[2]), row[3], float(row[4]))
            for row in reader
        ]
