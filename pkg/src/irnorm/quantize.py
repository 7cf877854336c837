"""Post-training weight quantization and reduced-precision inference.

Weights are quantized per tensor with a symmetric linear map: the scale is
max|w| / (2^(bits-1) - 1), codes are round-to-nearest-even and clipped to
the signed range.  Only matrix/filter weights (names ending ".weight") are
touched; biases, norm parameters and attention bias tables stay exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import RestorationModel, model_forward
from .tensor import Precision, Tensor, count_nonfinite

WEIGHT_BIT_CHOICES = (8, 4)
FEATURE_MODES = ("f32", "f16")


@dataclass(frozen=True)
class QuantPolicy:
    """What to compress: weight bit-width (None = keep exact) and the
    floating-point format features are computed in."""

    weight_bits: int | None = None
    feature_mode: str = "f32"

    def __post_init__(self):
        if self.weight_bits is not None and self.weight_bits not in WEIGHT_BIT_CHOICES:
            raise ValueError(
                f"weight_bits must be one of {WEIGHT_BIT_CHOICES} or None, got {self.weight_bits}"
            )
        if self.feature_mode not in FEATURE_MODES:
            raise ValueError(f"feature_mode must be one of {FEATURE_MODES}, got {self.feature_mode!r}")

    @property
    def feature_precision(self) -> Precision:
        return Precision.F32 if self.feature_mode == "f32" else Precision.F16


def quantize_array(w: np.ndarray, bits: int) -> tuple[np.ndarray, float]:
    """Symmetric per-tensor quantization; returns (dequantized copy, scale).

    An all-zero tensor has no scale to speak of and passes through with
    scale 0.  Reconstruction error is bounded by half a step everywhere.
    """
    if bits not in WEIGHT_BIT_CHOICES:
        raise ValueError(f"bits must be one of {WEIGHT_BIT_CHOICES}, got {bits}")
    w = np.asarray(w, dtype=np.float64)
    qmax = 2 ** (bits - 1) - 1
    peak = float(np.abs(w).max())
    if peak == 0.0:
        return w.copy(), 0.0
    scale = peak / qmax
    codes = np.clip(np.rint(w / scale), -qmax, qmax)
    return scale * codes, scale


def quantize_model_weights(model: RestorationModel, bits: int):
    """Copy of the model with every ".weight" tensor quantized.

    Returns (model copy, {name: scale}); the source model is untouched.
    """
    clone = model.cast(Precision.F64)
    scales: dict[str, float] = {}
    for name, leaf in clone.params().items():
        if name.endswith(".weight"):
            replaced, scale = quantize_array(leaf.data, bits)
            leaf.data[...] = replaced
            scales[name] = scale
    return clone, scales


def infer_quantized(model: RestorationModel, policy: QuantPolicy, lr_image) -> tuple[np.ndarray, int]:
    """Run one image through the model under a quantization policy.

    The identity policy (no weight compression, f32 features) is exactly the
    plain float32 forward pass.  Returns the restored image and the number
    of non-finite op outputs met along the way.
    """
    work = model
    if policy.weight_bits is not None:
        work, _ = quantize_model_weights(model, policy.weight_bits)
    precision = policy.feature_precision
    casted = work.cast(precision)
    x = Tensor(np.asarray(lr_image, dtype=np.float64), precision=precision)
    with count_nonfinite() as counter:
        out = model_forward(casted, x)
    return out, counter.count
