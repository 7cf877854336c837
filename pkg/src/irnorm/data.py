"""Image pipeline: antialiased bicubic downsampling, Gaussian noise,
PSNR/SSIM, aligned patch sampling, and a deterministic synthetic corpus.

Images are float arrays shaped [3, H, W] with values nominally in [0, 1]
(noisy inputs may leave the range; nothing clamps until PNG export).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

TASKS = {
    "sr2": ("sr", 2),
    "sr4": ("sr", 4),
    "dn15": ("dn", 15.0),
    "dn25": ("dn", 25.0),
}


def _task_entry(task: str):
    try:
        return TASKS[task]
    except KeyError:
        raise ValueError(f"unknown task {task!r}; expected one of {sorted(TASKS)}") from None


def task_scale(task: str) -> int:
    """Upscaling factor the restoration model needs for a task."""
    kind, level = _task_entry(task)
    return int(level) if kind == "sr" else 1


# ----------------------------------------------------------------------
# bicubic downsampling (Keys kernel a = -0.5, antialiased)
# ----------------------------------------------------------------------

def _cubic(x: np.ndarray) -> np.ndarray:
    x = np.abs(x)
    x2 = x * x
    x3 = x2 * x
    near = 1.5 * x3 - 2.5 * x2 + 1.0
    far = -0.5 * x3 + 2.5 * x2 - 4.0 * x + 2.0
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def _contributions(n_in: int, factor: int):
    """Per-output-pixel source indices and weights for one axis.

    The kernel is stretched by the scale factor so it low-passes before
    resampling; out-of-range taps are clipped to the border (replication).
    Each weight row is normalized to unit sum.
    """
    n_out = n_in // factor
    width = 4.0 * factor
    u = (np.arange(n_out, dtype=np.float64) + 0.5) * factor - 0.5
    left = np.floor(u - width / 2.0).astype(np.int64) + 1
    taps = int(np.ceil(width)) + 2
    raw_index = left[:, None] + np.arange(taps)[None, :]
    weights = _cubic((u[:, None] - raw_index) / factor) / factor
    weights = weights / weights.sum(axis=1, keepdims=True)
    index = np.clip(raw_index, 0, n_in - 1)
    return index, weights


def bicubic_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Shrink [C, H, W] (or [H, W]) by an integer factor along both axes."""
    if factor not in (2, 4):
        raise ValueError(f"factor must be 2 or 4, got {factor}")
    arr = np.asarray(img, dtype=np.float64)
    flat = arr.ndim == 2
    if flat:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected [C,H,W] or [H,W], got shape {arr.shape}")
    _, h, w = arr.shape
    if h % factor or w % factor:
        raise ValueError(f"extent {h}x{w} not divisible by factor {factor}")

    index, weights = _contributions(h, factor)
    arr = np.einsum("cokw,ok->cow", arr[:, index, :], weights)
    index, weights = _contributions(w, factor)
    arr = np.einsum("chok,ok->cho", arr[:, :, index], weights)
    return arr[0] if flat else arr


# ----------------------------------------------------------------------
# degradation and metrics
# ----------------------------------------------------------------------

def add_gaussian_noise(img: np.ndarray, sigma: float, seed) -> np.ndarray:
    """Additive N(0, (sigma/255)^2) noise; the result is left unclamped."""
    arr = np.asarray(img, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return arr + rng.normal(0.0, sigma / 255.0, size=arr.shape)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


def _ssim_kernel() -> np.ndarray:
    offsets = np.arange(_SSIM_WINDOW, dtype=np.float64) - (_SSIM_WINDOW - 1) / 2.0
    k = np.exp(-(offsets**2) / (2.0 * _SSIM_SIGMA**2))
    return k / k.sum()


def _valid_filter(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = sliding_window_view(plane, kernel.size, axis=0)
    out = np.tensordot(out, kernel, axes=([2], [0]))
    out = sliding_window_view(out, kernel.size, axis=1)
    return np.tensordot(out, kernel, axes=([2], [0]))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity with the standard Gaussian window.

    Channels are scored independently and averaged; the window runs in
    valid mode so borders narrower than 11 pixels are rejected.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError(f"expected [C,H,W] or [H,W], got shape {a.shape}")
    if min(a.shape[1:]) < _SSIM_WINDOW:
        raise ValueError("image smaller than the 11x11 comparison window")

    kernel = _ssim_kernel()
    c1 = 0.01**2
    c2 = 0.03**2
    scores = []
    for x, y in zip(a, b):
        mu_x = _valid_filter(x, kernel)
        mu_y = _valid_filter(y, kernel)
        var_x = _valid_filter(x * x, kernel) - mu_x * mu_x
        var_y = _valid_filter(y * y, kernel) - mu_y * mu_y
        cov = _valid_filter(x * y, kernel) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


# ----------------------------------------------------------------------
# patch sampling
# ----------------------------------------------------------------------

def sample_patch(hq: np.ndarray, lq: np.ndarray, patch: int, seed):
    """Draw one aligned, augmented training pair.

    The crop position is chosen on the low-quality grid and scaled up for
    the target; both sides then get the same horizontal flip and quarter
    rotation.  Returns (hq_patch, lq_patch).
    """
    hq = np.asarray(hq, dtype=np.float64)
    lq = np.asarray(lq, dtype=np.float64)
    scale = hq.shape[1] // lq.shape[1]
    if hq.shape[1] != lq.shape[1] * scale or hq.shape[2] != lq.shape[2] * scale:
        raise ValueError(f"incompatible pair shapes {hq.shape} / {lq.shape}")
    if patch > min(lq.shape[1:]):
        raise ValueError(f"patch {patch} exceeds image extent {lq.shape[1:]}")

    rng = np.random.default_rng(seed)
    i = int(rng.integers(0, lq.shape[1] - patch + 1))
    j = int(rng.integers(0, lq.shape[2] - patch + 1))
    flip = bool(rng.integers(0, 2))
    quarter = int(rng.integers(0, 4))

    lq_patch = lq[:, i : i + patch, j : j + patch]
    hq_patch = hq[:, i * scale : (i + patch) * scale, j * scale : (j + patch) * scale]
    if flip:
        lq_patch = lq_patch[:, :, ::-1]
        hq_patch = hq_patch[:, :, ::-1]
    lq_patch = np.rot90(lq_patch, quarter, axes=(1, 2))
    hq_patch = np.rot90(hq_patch, quarter, axes=(1, 2))
    return np.ascontiguousarray(hq_patch), np.ascontiguousarray(lq_patch)


# ----------------------------------------------------------------------
# synthetic corpus
# ----------------------------------------------------------------------

def synthesize_image(seed, size: int) -> np.ndarray:
    """Deterministic [3, size, size] test card in [0, 1].

    A mix of low-frequency color gratings and a couple of soft oriented
    edges, min-max normalized over the whole image so channels keep their
    relative structure.
    """
    rng = np.random.default_rng(seed)
    axis = np.arange(size, dtype=np.float64) / size
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    img = np.zeros((3, size, size))

    for _ in range(6):
        fx, fy = rng.uniform(0.5, 4.0, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amplitude = rng.uniform(0.3, 1.0)
        mix = rng.uniform(0.0, 1.0, size=3)
        wave = amplitude * np.cos(2.0 * np.pi * (fx * xx + fy * yy) + phase)
        img += mix[:, None, None] * wave

    for _ in range(2):
        theta = rng.uniform(0.0, 2.0 * np.pi)
        offset = rng.uniform(0.25, 0.75)
        sharpness = rng.uniform(8.0, 30.0)
        edge = np.tanh((np.cos(theta) * xx + np.sin(theta) * yy - offset) * sharpness)
        mix = rng.uniform(0.0, 0.6, size=3)
        img += mix[:, None, None] * edge

    lo, hi = img.min(), img.max()
    if hi - lo < 1e-12:
        return np.full_like(img, 0.5)
    return (img - lo) / (hi - lo)


def make_dataset(task: str, count: int, size: int, seed: int):
    """List of (hq, lq) pairs for a task, fully determined by the seed."""
    kind, level = _task_entry(task)
    if kind == "sr" and size % int(level):
        raise ValueError(f"size {size} not divisible by scale {int(level)}")
    pairs = []
    for index in range(count):
        hq = synthesize_image(np.random.SeedSequence([seed, index, 0]), size)
        if kind == "sr":
            lq = bicubic_downsample(hq, int(level))
        else:
            lq = add_gaussian_noise(hq, level, np.random.SeedSequence([seed, index, 1]))
        pairs.append((hq, lq))
    return pairs


# ----------------------------------------------------------------------
# PNG I/O
# ----------------------------------------------------------------------

def save_image(img: np.ndarray, path) -> None:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected [3,H,W], got shape {arr.shape}")
    pixels = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as handle:
        pixels = np.asarray(handle.convert("RGB"), dtype=np.float64)
    return pixels.transpose(2, 0, 1) / 255.0
