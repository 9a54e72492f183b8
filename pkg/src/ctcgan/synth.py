"""Procedural CT-like phantoms used in place of clinical scans."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .volume import Volume

AIR, LUNG, SOFT, BONE = 0, 1, 2, 3
CLASS_NAMES = ("air", "lung", "soft", "bone")

# (center, half width) in synthetic HU
DEFAULT_BANDS = {
    "air": (-1000.0, 24.0),
    "lung": (-700.0, 100.0),
    "soft": (40.0, 60.0),
    "bone": (700.0, 300.0),
}


@dataclass
class PhantomSpec:
    dims: Tuple[int, int, int] = (32, 32, 32)  # (nx, ny, nz)
    seed: int = 0
    organs: int = 3
    lungs: int = 2
    bones: int = 2
    bands: Dict[str, Tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_BANDS))
    texture: float = 0.6  # smooth-noise amplitude as a fraction of each band's half width
    texture_sigma: float = 1.0

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 16:
            raise ConfigError(f"phantom dims must be >= 16 each, got {self.dims}")
        if min(self.organs, self.lungs, self.bones) < 0:
            raise ConfigError("structure counts must be non-negative")
        lows = [self.bands[n][0] - self.bands[n][1] for n in CLASS_NAMES]
        highs = [self.bands[n][0] + self.bands[n][1] for n in CLASS_NAMES]
        if any(highs[i] >= lows[i + 1] for i in range(3)):
            raise ConfigError("tissue bands must be ordered air < lung < soft < bone without overlap")
        if not 0 <= self.texture <= 1:
            raise ConfigError("texture must lie in [0, 1]")

    def band(self, cls: int) -> Tuple[float, float]:
        c, w = self.bands[CLASS_NAMES[cls]]
        return c - w, c + w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["bands"] = {k: list(v) for k, v in self.bands.items()}
        return d


def _ellipsoid(grid, center, radii, rot) -> np.ndarray:
    zz, yy, xx = grid
    p = np.stack([xx - center[0], yy - center[1], zz - center[2]], axis=-1) @ rot
    return np.sum((p / radii) ** 2, axis=-1) <= 1.0


def _rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def _texture(rng, shape, sigma) -> np.ndarray:
    t = gaussian_filter(rng.normal(size=shape), sigma)
    return t / (t.std() or 1.0)


def generate_phantom_with_labels(spec: PhantomSpec) -> Tuple[Volume, np.ndarray]:
    """Phantom volume plus its per-voxel tissue class map."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    nx, ny, nz = spec.dims
    grid = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    size = np.array([nx, ny, nz], dtype=float)
    labels = np.full((nz, ny, nx), AIR, dtype=np.int8)
    offsets = np.zeros((nz, ny, nx))

    any_structure = spec.organs + spec.lungs + spec.bones > 0
    if any_structure:
        body = _ellipsoid(grid, size / 2 - 0.5, size * np.array([0.44, 0.40, 0.6]), np.eye(3))
        labels[body] = SOFT
    for _ in range(spec.organs):
        center = size / 2 + rng.uniform(-0.2, 0.2, 3) * size
        region = _ellipsoid(grid, center, size * rng.uniform(0.08, 0.18, 3), _rotation(rng)) & (labels == SOFT)
        offsets[region] += rng.uniform(-0.5, 0.5)
    for i in range(spec.lungs):
        side = -1 if i % 2 == 0 else 1
        center = size / 2 + np.array([side * 0.17, rng.uniform(-0.05, 0.05), rng.uniform(-0.1, 0.1)]) * size
        radii = size * np.array([0.12, 0.2, 0.3]) * rng.uniform(0.85, 1.1, 3)
        region = _ellipsoid(grid, center, radii, np.eye(3))
        labels[region] = LUNG
    for _ in range(spec.bones):
        center = size / 2 + rng.uniform(-0.3, 0.3, 3) * size * np.array([1, 1, 0.5])
        radii = size * rng.uniform(0.06, 0.11, 3)
        rot = _rotation(rng)
        shell = _ellipsoid(grid, center, radii, rot) & ~_ellipsoid(grid, center, radii * 0.55, rot)
        labels[shell] = BONE

    texture = _texture(rng, labels.shape, spec.texture_sigma)
    data = np.empty(labels.shape)
    for cls in range(4):
        lo, hi = spec.band(cls)
        center, half = (lo + hi) / 2, (hi - lo) / 2
        m = labels == cls
        data[m] = center + half * np.clip(spec.texture * texture[m] + offsets[m], -1.0, 1.0)
    return Volume(data), labels


def generate_phantom(spec: PhantomSpec) -> Volume:
    return generate_phantom_with_labels(spec)[0]


def generate_dataset(n: int, dims: Sequence[int] = (32, 32, 32), seed: int = 0, **spec_kw) -> List[Volume]:
    """``n`` phantoms with per-volume seeds derived from ``seed``."""
    if n < 1:
        raise ConfigError("dataset size must be >= 1")
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [generate_phantom(PhantomSpec(tuple(dims), int(s), **spec_kw)) for s in seeds]
