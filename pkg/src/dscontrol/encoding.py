"""Blurred-colormap intensity encoding of feature windows."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .scenarios import FEATURES_PER_GEN
from .sim import FEATURES

KERNEL_SIZES = (1, 3, 5, 7, 9)
ANGLE_CLAMP_DEG = 1e4


def angle_rows(n_rows: int = 270) -> np.ndarray:
    """Row indices carrying rotor angles or angle differences."""
    d = FEATURES.index("delta")
    rows = []
    for g in range(n_rows // FEATURES_PER_GEN):
        base = g * FEATURES_PER_GEN
        rows += [base + d, base + 9 + d] + list(range(base + 18, base + 27))
    return np.array(rows, dtype=int)


def clamp_angles(matrix: np.ndarray) -> np.ndarray:
    m = np.array(matrix, dtype=float, copy=True)
    if m.shape[-2] % FEATURES_PER_GEN == 0:
        rows = angle_rows(m.shape[-2])
        m[..., rows, :] = np.clip(m[..., rows, :], -ANGLE_CLAMP_DEG, ANGLE_CLAMP_DEG)
    return m


@dataclass(frozen=True)
class NormStats:
    row_min: np.ndarray
    row_max: np.ndarray

    @classmethod
    def fit(cls, matrices) -> "NormStats":
        """Per-row extremes over a training split of (rows, cols) matrices."""
        arr = clamp_angles(np.asarray(matrices, dtype=float))
        if arr.ndim == 2:
            arr = arr[None]
        return cls(arr.min(axis=(0, 2)), arr.max(axis=(0, 2)))


def build_intensity_map(window, stats: NormStats) -> np.ndarray:
    """Per-row min-max scaling into [0, 1]; zero-range rows map to 0.5."""
    m = clamp_angles(getattr(window, "matrix", window))
    lo = stats.row_min[:, None]
    span = (stats.row_max - stats.row_min)[:, None]
    flat = span <= 0
    out = np.where(flat, 0.5, (m - lo) / np.where(flat, 1.0, span))
    return np.clip(out, 0.0, 1.0)


def gaussian_kernel(size: int) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"blur size must be odd and positive, got {size}")
    if size == 1:
        return np.ones(1)
    sigma = size / 3.0
    x = np.arange(size) - size // 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def blur(m: np.ndarray, size: int) -> np.ndarray:
    """Separable Gaussian blur (sigma = size / 3) with reflected borders."""
    g = gaussian_kernel(size)
    m = np.asarray(m, dtype=float)
    if size == 1:
        return m.copy()
    out = ndimage.correlate1d(m, g, axis=-2, mode="reflect")
    return ndimage.correlate1d(out, g, axis=-1, mode="reflect")


@dataclass
class FeatureVolume:
    data: np.ndarray  # (5, rows, cols)
    tis: int = 0
    dr_label: int = -1
    r_hat: float = 0.0
    meta: dict = field(default_factory=dict)


def stack_channels(intensity: np.ndarray, sizes=KERNEL_SIZES) -> np.ndarray:
    return np.stack([blur(intensity, s) for s in sizes])


def build_volume(window, stats: NormStats) -> FeatureVolume:
    data = stack_channels(build_intensity_map(window, stats))
    sc = getattr(window, "scenario", None)
    meta = {}
    if sc is not None:
        meta = dict(uid=sc.uid, line=sc.line, location=sc.location, duration=sc.duration, k=sc.k)
    return FeatureVolume(data=data, tis=int(getattr(window, "tis", 0)),
                         r_hat=float(getattr(window, "r_hat", 0.0)), meta=meta)


def encode_matrices(matrices, stats: NormStats, dtype=np.float32) -> np.ndarray:
    """Vectorized volume build for a stack of windows -> (n, 5, rows, cols)."""
    out = []
    for m in matrices:
        out.append(stack_channels(build_intensity_map(m, stats)).astype(dtype))
    return np.stack(out) if out else np.zeros((0, len(KERNEL_SIZES), 0, 0), dtype=dtype)


def save_png(intensity: np.ndarray, path) -> None:
    """Grayscale rendering of one intensity map."""
    import io

    from PIL import Image

    from .io import atomic_write

    img = np.round(np.clip(intensity, 0, 1) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(img, mode="L").save(buf, format="PNG", optimize=False)
    atomic_write(path, buf.getvalue())
