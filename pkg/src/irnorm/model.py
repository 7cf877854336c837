"""Window-attention restoration model: shallow conv embed, pre-norm residual
blocks (window attention + FFN, each wrapped by the configured norm scheme),
a body conv with global residual, and a pixel-shuffle or conv head.

Windows are non-overlapping (no shifting) with a learned relative position
bias per head.  Weights are float64 leaves by default; ``cast`` produces a
detached copy at another precision for inference studies.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diagnostics import TraceRecord, channel_entropy, feature_sqmean
from .norms import NormSpec, block_combine
from .tensor import (
    Precision,
    Tensor,
    add,
    cast_precision,
    conv3x3,
    gather_rows,
    gelu,
    matmul,
    mul,
    narrow,
    reshape,
    softmax_lastdim,
    transpose,
)

CHECKPOINT_MAGIC = b"IRLN"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
TRUNC_STD = 0.02


@dataclass
class ModelConfig:
    """Architecture knobs for the toy restoration backbone."""

    embed_dim: int = 16
    depths: tuple[int, ...] = (2, 2)
    heads: tuple[int, ...] = (2, 2)
    window: int = 4
    mlp_ratio: float = 2.0
    scale: int = 2
    norm_kind: str = "LN"
    norm_eps: float = 1e-6
    rpe: bool = True

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.heads = tuple(int(h) for h in self.heads)
        if len(self.depths) != len(self.heads):
            raise ValueError("depths and heads must list the same number of groups")
        if any(d < 1 for d in self.depths) or any(h < 1 for h in self.heads):
            raise ValueError("depths and heads entries must be positive")
        if any(self.embed_dim % h for h in self.heads):
            raise ValueError("embed_dim must be divisible by every head count")
        if self.scale not in (1, 2, 4):
            raise ValueError("scale must be 1, 2 or 4")
        if self.window < 1:
            raise ValueError("window must be positive")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")

    @property
    def block_heads(self) -> list[int]:
        """Head count for each block, groups flattened in order."""
        out: list[int] = []
        for depth, heads in zip(self.depths, self.heads):
            out.extend([heads] * depth)
        return out

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


def trunc_normal(rng: np.random.Generator, shape, std: float = TRUNC_STD) -> np.ndarray:
    """Normal(0, std) redrawn until every sample lies within two deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def relative_position_index(window: int) -> np.ndarray:
    """Flat [T*T] lookup into the (2W-1)^2 relative-offset table, T = W^2."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]  # [2, T, T]
    rel = rel.transpose(1, 2, 0).copy()
    rel[:, :, 0] += window - 1
    rel[:, :, 1] += window - 1
    rel[:, :, 0] *= 2 * window - 1
    return rel.sum(-1).reshape(-1)


class Block:
    """One pre-norm residual pair: window attention, then the FFN."""

    def __init__(self, cfg: ModelConfig, heads: int, rng: np.random.Generator):
        c = cfg.embed_dim
        hidden = cfg.hidden_dim
        self.heads = heads
        self.window = cfg.window
        self.rpe = cfg.rpe
        prec = Precision.F64

        def leaf(arr):
            t = Tensor(arr, prec, requires_grad=True)
            return t

        self.qkv_w = leaf(trunc_normal(rng, (c, 3 * c)))
        self.qkv_b = leaf(np.zeros(3 * c))
        self.proj_w = leaf(trunc_normal(rng, (c, c)))
        self.proj_b = leaf(np.zeros(c))
        self.fc1_w = leaf(trunc_normal(rng, (c, hidden)))
        self.fc1_b = leaf(np.zeros(hidden))
        self.fc2_w = leaf(trunc_normal(rng, (hidden, c)))
        self.fc2_b = leaf(np.zeros(c))
        self.rpe_table = (
            leaf(np.zeros(((2 * cfg.window - 1) ** 2, heads))) if cfg.rpe else None
        )
        self.rpe_index = relative_position_index(cfg.window) if cfg.rpe else None
        self.norm1 = NormSpec(cfg.norm_kind, c, cfg.norm_eps)
        self.norm2 = NormSpec(cfg.norm_kind, c, cfg.norm_eps)

    def params(self) -> dict[str, Tensor]:
        out = {
            "attn.qkv.weight": self.qkv_w,
            "attn.qkv.bias": self.qkv_b,
            "attn.proj.weight": self.proj_w,
            "attn.proj.bias": self.proj_b,
            "ffn.fc1.weight": self.fc1_w,
            "ffn.fc1.bias": self.fc1_b,
            "ffn.fc2.weight": self.fc2_w,
            "ffn.fc2.bias": self.fc2_b,
        }
        if self.rpe_table is not None:
            out["attn.rpe"] = self.rpe_table
        for name, leaf in self.norm1.params().items():
            out[f"norm1.{name}"] = leaf
        for name, leaf in self.norm2.params().items():
            out[f"norm2.{name}"] = leaf
        return out

    def _attention(self, x: Tensor, h: int, w: int) -> Tensor:
        """Window attention over a [B, L, C] map with spatial extent h x w."""
        batch, length, c = x.shape
        win = self.window
        nh, nw = h // win, w // win
        t = win * win
        hd = c // self.heads

        # partition into non-overlapping windows: [B*nW, T, C]
        xw = reshape(x, (batch, nh, win, nw, win, c))
        xw = transpose(xw, (0, 1, 3, 2, 4, 5))
        xw = reshape(xw, (batch * nh * nw, t, c))

        qkv = add(matmul(xw, self.qkv_w), self.qkv_b)
        parts = []
        for s in range(3):
            part = narrow(qkv, 2, s * c, c)
            part = reshape(part, (batch * nh * nw, t, self.heads, hd))
            parts.append(transpose(part, (0, 2, 1, 3)))
        q, k, v = parts

        logits = mul(matmul(q, transpose(k, (0, 1, 3, 2))), float(hd) ** -0.5)
        if self.rpe_table is not None:
            bias = gather_rows(self.rpe_table, self.rpe_index)  # [T*T, heads]
            bias = transpose(reshape(bias, (t, t, self.heads)), (2, 0, 1))
            logits = add(logits, bias)
        attn = softmax_lastdim(logits)
        out = matmul(attn, v)
        out = reshape(transpose(out, (0, 2, 1, 3)), (batch * nh * nw, t, c))
        out = add(matmul(out, self.proj_w), self.proj_b)

        # merge windows back to [B, L, C]
        out = reshape(out, (batch, nh, nw, win, win, c))
        out = transpose(out, (0, 1, 3, 2, 4, 5))
        return reshape(out, (batch, length, c))

    def _ffn(self, x: Tensor) -> Tensor:
        hid = gelu(add(matmul(x, self.fc1_w), self.fc1_b))
        return add(matmul(hid, self.fc2_w), self.fc2_b)

    def forward(self, x: Tensor, h: int, w: int, mode: str) -> Tensor:
        x = block_combine(self.norm1, x, lambda u: self._attention(u, h, w), mode)
        x = block_combine(self.norm2, x, self._ffn, mode)
        return x


class RestorationModel:
    """The full network; owns all parameter leaves."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1C0DE]))
        c = cfg.embed_dim

        def leaf(arr):
            return Tensor(arr, Precision.F64, requires_grad=True)

        self.shallow_w = leaf(trunc_normal(rng, (c, 3, 3, 3)))
        self.shallow_b = leaf(np.zeros(c))
        self.blocks = [Block(cfg, heads, rng) for heads in cfg.block_heads]
        self.body_w = leaf(trunc_normal(rng, (c, c, 3, 3)))
        self.body_b = leaf(np.zeros(c))
        if cfg.scale > 1:
            out_ch = 3 * cfg.scale * cfg.scale
            self.head_w = leaf(trunc_normal(rng, (out_ch, c, 3, 3)))
            self.head_b = leaf(np.zeros(out_ch))
        else:
            self.head_w = leaf(trunc_normal(rng, (3, c, 3, 3)))
            self.head_b = leaf(np.zeros(3))

    # ------------------------------------------------------------------
    # parameter registry
    # ------------------------------------------------------------------
    def params(self) -> dict[str, Tensor]:
        out = {
            "shallow.weight": self.shallow_w,
            "shallow.bias": self.shallow_b,
            "body_conv.weight": self.body_w,
            "body_conv.bias": self.body_b,
            "head.weight": self.head_w,
            "head.bias": self.head_b,
        }
        for i, blk in enumerate(self.blocks):
            for name, leaf in blk.params().items():
                out[f"body.{i}.{name}"] = leaf
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, blk in enumerate(self.blocks):
            for which, spec in (("norm1", blk.norm1), ("norm2", blk.norm2)):
                for name, arr in spec.buffers().items():
                    out[f"body.{i}.{which}.{name}"] = arr
        return out

    def zero_grads(self) -> None:
        for leaf in self.params().values():
            leaf.grad = None

    def cast(self, precision: Precision) -> "RestorationModel":
        """Detached copy of the model with every parameter rounded."""
        clone = RestorationModel.__new__(RestorationModel)
        clone.cfg = self.cfg
        for attr in ("shallow_w", "shallow_b", "body_w", "body_b", "head_w", "head_b"):
            casted = cast_precision(getattr(self, attr), precision)
            setattr(clone, attr, casted)
        clone.blocks = []
        for blk in self.blocks:
            twin = Block.__new__(Block)
            twin.heads = blk.heads
            twin.window = blk.window
            twin.rpe = blk.rpe
            for attr in ("qkv_w", "qkv_b", "proj_w", "proj_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b"):
                setattr(twin, attr, cast_precision(getattr(blk, attr), precision))
            twin.rpe_table = cast_precision(blk.rpe_table, precision) if blk.rpe_table is not None else None
            twin.rpe_index = blk.rpe_index
            twin.norm1 = blk.norm1.cast(precision)
            twin.norm2 = blk.norm2.cast(precision)
            clone.blocks.append(twin)
        return clone

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------
    def _check_spatial(self, h: int, w: int) -> None:
        if h % self.cfg.window or w % self.cfg.window:
            raise ValueError(
                f"spatial extent {h}x{w} not divisible by window {self.cfg.window}"
            )

    def forward(
        self,
        x: Tensor,
        mode: str = "eval",
        trace: list[TraceRecord] | None = None,
        run_id: str = "",
        iteration: int = 0,
    ) -> tuple[Tensor, list[Tensor]]:
        """Run a [B, 3, h, w] batch; returns (restored batch, block outputs)."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected a [B,3,h,w] batch, got {x.shape}")
        batch, _, h, w = x.shape
        self._check_spatial(h, w)
        c = self.cfg.embed_dim

        shallow = conv3x3(x, self.shallow_w, self.shallow_b)
        tokens = transpose(reshape(shallow, (batch, c, h * w)), (0, 2, 1))

        block_outputs: list[Tensor] = []
        for index, blk in enumerate(self.blocks):
            tokens = blk.forward(tokens, h, w, mode)
            block_outputs.append(tokens)
            if trace is not None:
                feats = tokens.data
                trace.append(
                    TraceRecord(run_id, iteration, index, "sqmean", feature_sqmean(feats))
                )
                chan_first = feats.reshape(-1, c).T  # [C, B*L]
                trace.append(
                    TraceRecord(run_id, iteration, index, "entropy", channel_entropy(chan_first))
                )

        body = reshape(transpose(tokens, (0, 2, 1)), (batch, c, h, w))
        body = conv3x3(body, self.body_w, self.body_b)
        feats = add(body, shallow)

        out = conv3x3(feats, self.head_w, self.head_b)
        if self.cfg.scale > 1:
            out = pixel_shuffle(out, self.cfg.scale)
        return out, block_outputs


def pixel_shuffle(x: Tensor, factor: int) -> Tensor:
    """[B, C*r^2, H, W] -> [B, C, H*r, W*r] subpixel rearrangement."""
    batch, channels, h, w = x.shape
    if channels % (factor * factor):
        raise ValueError(f"{channels} channels not divisible by {factor}^2")
    c_out = channels // (factor * factor)
    t = reshape(x, (batch, c_out, factor, factor, h, w))
    t = transpose(t, (0, 1, 4, 2, 5, 3))
    return reshape(t, (batch, c_out, h * factor, w * factor))


def model_forward(model: RestorationModel, lr_image, mode: str = "eval") -> np.ndarray:
    """Single-image convenience wrapper; [3, h, w] in, [3, s*h, s*w] out."""
    arr = lr_image.data if isinstance(lr_image, Tensor) else np.asarray(lr_image, dtype=np.float64)
    precision = lr_image.precision if isinstance(lr_image, Tensor) else Precision.F64
    x = Tensor(arr[None], precision=precision)
    out, _ = model.forward(x, mode=mode)
    return out.data[0]


# ----------------------------------------------------------------------
# checkpoint format
# ----------------------------------------------------------------------

def _state_arrays(model: RestorationModel) -> dict[str, np.ndarray]:
    state = {name: leaf.data for name, leaf in model.params().items()}
    state.update(model.buffers())
    return state


def save_checkpoint(model: RestorationModel, path) -> None:
    """Binary little-endian dump of all parameters and buffers."""
    state = _state_arrays(model)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(state)))
        for name in sorted(state):
            arr = state[name]
            code = 0 if arr.dtype == np.float64 else 1
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        state: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            code, rank = struct.unpack("<BB", fh.read(2))
            if code not in _DTYPE_CODES:
                raise ValueError(f"unknown dtype code {code} for tensor {name!r}")
            shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
            dtype = _DTYPE_CODES[code]
            raw = fh.read(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize)
            state[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        return state


def load_checkpoint(model: RestorationModel, path) -> None:
    """Load a checkpoint into a model of matching architecture (in place)."""
    state = read_checkpoint(path)
    params = model.params()
    missing = sorted(set(params) - set(state))
    if missing:
        raise ValueError(f"checkpoint is missing tensors: {missing[:4]}...")
    buffer_names = set()
    for i, blk in enumerate(model.blocks):
        for which in ("norm1", "norm2"):
            buffer_names.add(f"body.{i}.{which}.running_mean")
            buffer_names.add(f"body.{i}.{which}.running_var")
    unknown = sorted(set(state) - set(params) - buffer_names)
    if unknown:
        raise ValueError(f"checkpoint has unknown tensors: {unknown[:4]}...")
    for name, leaf in params.items():
        arr = state[name]
        if arr.shape != leaf.data.shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {leaf.data.shape}")
        leaf.data[...] = arr
    for i, blk in enumerate(model.blocks):
        for which, spec in (("norm1", blk.norm1), ("norm2", blk.norm2)):
            key = f"body.{i}.{which}.running_mean"
            if key in state:
                spec.running_mean = np.asarray(state[key], dtype=np.float64).copy()
                spec.running_var = np.asarray(state[f"body.{i}.{which}.running_var"], dtype=np.float64).copy()


# ----------------------------------------------------------------------
# relative-position-bias export
# ----------------------------------------------------------------------

def export_rpe(model: RestorationModel, out_dir) -> list[Path]:
    """Write each head's bias grid as an 8-bit PGM plus a raw CSV per block.

    Grids are min-max normalized to [0, 255]; a constant grid maps to the
    mid-gray 128.  The CSV keeps raw values at 17 significant digits.
    """
    if not model.cfg.rpe:
        raise ValueError("model has no relative position bias to export")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    side = 2 * model.cfg.window - 1
    written: list[Path] = []
    for i, blk in enumerate(model.blocks):
        table = blk.rpe_table.data
        csv_path = out_dir / f"block{i}.csv"
        with open(csv_path, "w", newline="") as fh:
            fh.write("head,row,col,value\n")
            for head in range(blk.heads):
                grid = table[:, head].reshape(side, side)
                for r in range(side):
                    for c in range(side):
                        fh.write(f"{head},{r},{c},{grid[r, c]:.17g}\n")
        written.append(csv_path)
        for head in range(blk.heads):
            grid = table[:, head].reshape(side, side).astype(np.float64)
            lo, hi = float(grid.min()), float(grid.max())
            with np.errstate(over="ignore", invalid="ignore"):
                span = hi - lo
                if span == 0.0:
                    pixels = np.full(grid.shape, 128, dtype=np.int64)
                else:
                    # diverged tables can hold huge or non-finite entries;
                    # pin those to the ends of the gray ramp
                    scaled = (grid - lo) / span * 255.0
                    scaled = np.nan_to_num(scaled, nan=128.0, posinf=255.0, neginf=0.0)
                    pixels = np.rint(np.clip(scaled, 0.0, 255.0)).astype(np.int64)
            pgm_path = out_dir / f"block{i}_head{head}.pgm"
            with open(pgm_path, "w") as fh:
                fh.write(f"P2\n{side} {side}\n255\n")
                for row in pixels:
                    fh.write(" ".join(str(int(v)) for v in row) + "\n")
            written.append(pgm_path)
    return written
