"""PSNR and SSIM for blocks, slices and volumes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ShapeMismatchError

K1 = 0.01
K2 = 0.03


def _arrays(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b, data_range: float = 1.0) -> float:
    """Mean squared difference after dividing both inputs by ``data_range``."""
    a, b = _arrays(a, b)
    d = (a - b) / data_range
    return float(np.mean(d * d))


def psnr(a, b, data_range: float = 1.0) -> float:
    """10·log10(L² / MSE) in dB; ``inf`` for identical inputs."""
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    m = mse(a, b, data_range)
    if m == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / m)


def _ssim_formula(mx, my, vx, vy, cxy, c1, c2):
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(a, b, mode: str = "windowed", window: int = 7, k1: float = K1, k2: float = K2,
         data_range: float = 1.0) -> float:
    """Structural similarity of two equally shaped arrays (2D or 3D).

    ``global`` computes one set of statistics over all voxels.  ``windowed``
    evaluates the index in every fully contained ``window``^ndim cube
    (uniform weights, population moments) and returns the mean.
    """
    a, b = _arrays(a, b)
    a = a / data_range
    b = b / data_range
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2
    if mode == "global":
        mx, my = a.mean(), b.mean()
        vx = np.mean((a - mx) ** 2)
        vy = np.mean((b - my) ** 2)
        cxy = np.mean((a - mx) * (b - my))
        return float(_ssim_formula(mx, my, vx, vy, cxy, c1, c2))
    if mode != "windowed":
        raise ValueError(f"unknown ssim mode {mode!r}")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    if window > min(a.shape):
        raise ShapeMismatchError(f"window {window} exceeds smallest extent {min(a.shape)}")
    r = window // 2
    valid = tuple(slice(r, s - r) for s in a.shape)

    def local_mean(x):
        return uniform_filter(x, size=window, mode="constant")[valid]

    mx, my = local_mean(a), local_mean(b)
    vx = local_mean(a * a) - mx * mx
    vy = local_mean(b * b) - my * my
    cxy = local_mean(a * b) - mx * my
    return float(np.mean(_ssim_formula(mx, my, vx, vy, cxy, c1, c2)))


@dataclass
class QualityReport:
    psnr_db: float  # mean over non-identical slices; inf if every slice is identical
    ssim: float  # mean over slices
    data_range: float
    volume_psnr: float
    volume_ssim: float
    identical_slices: int = 0
    per_slice: List[Tuple[int, float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        def enc(x):
            return "inf" if math.isinf(x) else x

        return {
            "psnr_db": enc(self.psnr_db),
            "ssim": self.ssim,
            "data_range": self.data_range,
            "volume_psnr": enc(self.volume_psnr),
            "volume_ssim": self.volume_ssim,
            "identical_slices": self.identical_slices,
            "per_slice": {
                "index": [i for i, _, _ in self.per_slice],
                "psnr": [enc(p) for _, p, _ in self.per_slice],
                "ssim": [s for _, _, s in self.per_slice],
            },
        }

    def write(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    def table(self) -> str:
        def fmt(x):
            return "inf" if math.isinf(x) else f"{x:.4f}"

        lines = [
            f"{'slice':>6} {'PSNR (dB)':>12} {'SSIM':>8}",
            *(f"{i:>6} {fmt(p):>12} {s:>8.4f}" for i, p, s in self.per_slice),
            "-" * 28,
            f"{'mean':>6} {fmt(self.psnr_db):>12} {self.ssim:>8.4f}",
            f"{'volume':>6} {fmt(self.volume_psnr):>12} {self.volume_ssim:>8.4f}",
            f"identical slices: {self.identical_slices}  data range: {self.data_range:g}",
        ]
        return "\n".join(lines)


def evaluate_pair(real, generated, data_range: Optional[float] = None, mode: str = "windowed",
                  window: int = 7) -> QualityReport:
    """Per-axial-slice PSNR/SSIM, their means, and whole-volume metrics.

    ``data_range`` defaults to the dynamic range of ``real``.  Slices smaller
    than the window fall back to global SSIM.
    """
    r, g = _arrays(real, generated)
    if r.ndim != 3:
        raise ShapeMismatchError("evaluate_pair expects 3D volumes")
    if data_range is None:
        data_range = float(r.max() - r.min()) or 1.0
    per_slice = []
    for z in range(r.shape[0]):
        slice_mode = mode if mode == "global" or min(r.shape[1:]) >= window else "global"
        p = psnr(r[z], g[z], data_range)
        s = ssim(r[z], g[z], slice_mode, window, data_range=data_range)
        per_slice.append((z, p, s))
    finite = [p for _, p, _ in per_slice if not math.isinf(p)]
    vol_mode = mode if mode == "global" or min(r.shape) >= window else "global"
    return QualityReport(
        psnr_db=float(np.mean(finite)) if finite else math.inf,
        ssim=float(np.mean([s for _, _, s in per_slice])),
        data_range=data_range,
        volume_psnr=psnr(r, g, data_range),
        volume_ssim=ssim(r, g, vol_mode, window, data_range=data_range),
        identical_slices=len(per_slice) - len(finite),
        per_slice=per_slice,
    )
