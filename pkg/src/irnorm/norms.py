"""Normalization schemes for token feature maps, plus the residual combiner.

Feature maps are token tensors shaped ``[L, C]`` or ``[B, L, C]`` (tokens x
channels, optionally batched).  The schemes differ only in which extent the
statistics are pooled over:

* ``LN``          -- one (mu, sigma^2) per token, over channels.
* ``LNStar``      -- one (mu, sigma^2) per image, over the whole token-channel
                     extent.  The pre-affine map is a homothety on tokens.
* ``iLN``         -- LNStar inside the block, with the residual branch scaled
                     back up by sqrt(sigma^2 + eps) (see ``block_combine``).
* ``RMSNorm``     -- per-token root-mean-square rescale, no centering, gamma only.
* ``InstanceNorm``-- per-channel stats over the tokens of each image.
* ``BatchNorm``   -- per-channel stats over batch and tokens; running stats
                     for eval mode.
* ``ReZero``      -- no normalization; residual branch scaled by a learned
                     scalar initialized at zero.
* ``LayerScale``  -- per-token LN inside the block plus a learned per-channel
                     diagonal (init 1e-5) on the residual branch.
* ``NoneNorm``    -- plain unnormalized residual block.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import (
    Precision,
    Tensor,
    add,
    cast_precision,
    div,
    mean_axes,
    mul,
    reduce_stats,
    sqrt,
    sub,
)

NORM_KINDS = (
    "LN",
    "LNStar",
    "iLN",
    "RMSNorm",
    "InstanceNorm",
    "BatchNorm",
    "ReZero",
    "LayerScale",
    "NoneNorm",
)

# Kinds whose normalize() applies the full gamma/beta affine pair.
_AFFINE = {"LN", "LNStar", "iLN", "InstanceNorm", "BatchNorm", "LayerScale"}

LAYERSCALE_INIT = 1e-5


class NormSpec:
    """Configuration plus learnable state for one normalization site.

    Parameters are autodiff leaves; the optimizer updates them in place
    between steps.  BatchNorm additionally carries non-learnable running
    statistics (float64 numpy arrays), initialized at the first train batch.
    """

    def __init__(
        self,
        kind: str,
        channels: int,
        epsilon: float = 1e-6,
        momentum: float = 0.1,
        precision: Precision = Precision.F64,
    ):
        if kind not in NORM_KINDS:
            raise ValueError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")
        if channels < 1:
            raise ValueError("channels must be positive")
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.kind = kind
        self.channels = channels
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)
        self.precision = precision

        self.gamma: Tensor | None = None
        self.beta: Tensor | None = None
        self.layerscale_diag: Tensor | None = None
        self.rezero_scalar: Tensor | None = None
        self.running_mean: np.ndarray | None = None
        self.running_var: np.ndarray | None = None

        if kind in _AFFINE:
            self.gamma = Tensor(np.ones(channels), precision, requires_grad=True)
            self.beta = Tensor(np.zeros(channels), precision, requires_grad=True)
        elif kind == "RMSNorm":
            self.gamma = Tensor(np.ones(channels), precision, requires_grad=True)
        if kind == "LayerScale":
            self.layerscale_diag = Tensor(
                np.full(channels, LAYERSCALE_INIT), precision, requires_grad=True
            )
        if kind == "ReZero":
            self.rezero_scalar = Tensor(np.zeros(()), precision, requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.gamma is not None:
            out["gamma"] = self.gamma
        if self.beta is not None:
            out["beta"] = self.beta
        if self.layerscale_diag is not None:
            out["layerscale_diag"] = self.layerscale_diag
        if self.rezero_scalar is not None:
            out["rezero_scalar"] = self.rezero_scalar
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        if self.running_mean is not None:
            out["running_mean"] = self.running_mean
            out["running_var"] = self.running_var
        return out

    def cast(self, precision: Precision) -> "NormSpec":
        """Detached copy with parameters rounded to ``precision``."""
        clone = NormSpec(self.kind, self.channels, self.epsilon, self.momentum, precision)
        for name, leaf in self.params().items():
            source = getattr(self, name)
            casted = cast_precision(source, precision)
            casted.requires_grad = False
            setattr(clone, name, casted)
        if self.running_mean is not None:
            clone.running_mean = self.running_mean.copy()
            clone.running_var = self.running_var.copy()
        return clone


@dataclass
class NormOutput:
    """normalize() result: the output plus the statistics that produced it.

    ``rescale`` is sqrt(sigma^2 + eps) -- the factor the pre-affine map divided
    by, and the factor the iLN block multiplies the branch output back with.
    For kinds without statistics (ReZero, NoneNorm) mu/sigma2 are None and
    rescale is 1.
    """

    y: Tensor
    mu: Tensor | None
    sigma2: Tensor | None
    rescale: Tensor | float


def _stat_axes(kind: str, ndim: int) -> tuple[int, ...]:
    if ndim == 2:  # [L, C]
        return {
            "LN": (1,),
            "RMSNorm": (1,),
            "LayerScale": (1,),
            "LNStar": (0, 1),
            "iLN": (0, 1),
            "InstanceNorm": (0,),
            "BatchNorm": (0,),
        }[kind]
    if ndim == 3:  # [B, L, C]
        return {
            "LN": (2,),
            "RMSNorm": (2,),
            "LayerScale": (2,),
            "LNStar": (1, 2),
            "iLN": (1, 2),
            "InstanceNorm": (1,),
            "BatchNorm": (0, 1),
        }[kind]
    raise ValueError(f"expected a [L,C] or [B,L,C] feature map, got rank {ndim}")


def _param_for(spec: NormSpec, name: str, precision: Precision) -> Tensor:
    leaf = getattr(spec, name)
    if leaf.precision is precision:
        return leaf
    return cast_precision(leaf, precision)


def normalize(spec: NormSpec, x: Tensor, mode: str = "train") -> NormOutput:
    """Apply the normalization stage of ``spec`` to a feature map.

    Gradients flow through the statistics.  In eval mode BatchNorm uses its
    running statistics and raises if none were ever accumulated.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    kind = spec.kind
    if x.ndim not in (2, 3):
        raise ValueError(f"expected a [L,C] or [B,L,C] feature map, got rank {x.ndim}")
    if x.shape[-1] != spec.channels:
        raise ValueError(f"feature map has {x.shape[-1]} channels, spec expects {spec.channels}")

    if kind in ("ReZero", "NoneNorm"):
        return NormOutput(y=x, mu=None, sigma2=None, rescale=1.0)

    if kind == "RMSNorm":
        axes = _stat_axes(kind, x.ndim)
        meansq = mean_axes(mul(x, x), axes, keepdims=True)
        rescale = sqrt(add(meansq, spec.epsilon))
        y = mul(div(x, rescale), _param_for(spec, "gamma", x.precision))
        return NormOutput(y=y, mu=None, sigma2=meansq, rescale=rescale)

    if kind == "BatchNorm" and mode == "eval":
        if spec.running_mean is None:
            raise ValueError("BatchNorm evaluated before any training batch accumulated running stats")
        shape = (1, spec.channels) if x.ndim == 2 else (1, 1, spec.channels)
        mu = Tensor(spec.running_mean.reshape(shape), precision=x.precision)
        sigma2 = Tensor(spec.running_var.reshape(shape), precision=x.precision)
    else:
        axes = _stat_axes(kind, x.ndim)
        mu, sigma2 = reduce_stats(x, axes)
        if kind == "BatchNorm":
            batch_mean = np.asarray(mu.data, dtype=np.float64).reshape(spec.channels)
            batch_var = np.asarray(sigma2.data, dtype=np.float64).reshape(spec.channels)
            if spec.running_mean is None:
                spec.running_mean = batch_mean.copy()
                spec.running_var = batch_var.copy()
            else:
                m = spec.momentum
                spec.running_mean = (1.0 - m) * spec.running_mean + m * batch_mean
                spec.running_var = (1.0 - m) * spec.running_var + m * batch_var

    rescale = sqrt(add(sigma2, spec.epsilon))
    normalized = div(sub(x, mu), rescale)
    y = add(
        mul(normalized, _param_for(spec, "gamma", x.precision)),
        _param_for(spec, "beta", x.precision),
    )
    return NormOutput(y=y, mu=mu, sigma2=sigma2, rescale=rescale)


def block_combine(
    spec: NormSpec,
    x: Tensor,
    f: Callable[[Tensor], Tensor],
    mode: str = "train",
) -> Tensor:
    """Wrap a sub-layer ``f`` (attention or FFN) in a pre-norm residual block.

    The combination rule is what distinguishes the schemes:

    * iLN:        x + sqrt(sigma^2 + eps) * f(LNStar(x))
    * LayerScale: x + diag * f(LN(x))
    * ReZero:     x + alpha * f(x)
    * NoneNorm:   x + f(x)
    * otherwise:  x + f(normalize(x))
    """
    kind = spec.kind
    if kind == "iLN":
        out = normalize(spec, x, mode)
        return add(x, mul(out.rescale, f(out.y)))
    if kind == "LayerScale":
        out = normalize(spec, x, mode)
        return add(x, mul(_param_for(spec, "layerscale_diag", x.precision), f(out.y)))
    if kind == "ReZero":
        return add(x, mul(_param_for(spec, "rezero_scalar", x.precision), f(x)))
    if kind == "NoneNorm":
        return add(x, f(x))
    out = normalize(spec, x, mode)
    return add(x, f(out.y))
