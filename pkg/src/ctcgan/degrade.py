"""Condition generation (identity, Poisson noise, pixelation) and the
34-member augmentation family used to build training pairs."""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CTCGANError, ConfigError, ShapeMismatchError
from .volume import (
    BlockGrid,
    Volume,
    VoxelBlock,
    load_volume,
    make_grid,
    pad_to_grid,
    partition_array,
    save_volume,
)

TRANSLATION_STRIDE = 8
DEFAULT_PEAK = 1024


class ConditionKind(str, enum.Enum):
    AUTOENCODER = "autoencoder"
    NOISY = "noisy"
    PIXELATED = "pixelated"

    @classmethod
    def parse(cls, value) -> "ConditionKind":
        if isinstance(value, cls):
            return value
        aliases = {"auto": "autoencoder", "noise": "noisy", "denoise": "noisy", "pixel": "pixelated"}
        return cls(aliases.get(value, value))


def _seed_rng(rng_seed) -> np.random.Generator:
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    if isinstance(rng_seed, (tuple, list)):
        return np.random.default_rng([int(s) for s in rng_seed])
    return np.random.default_rng(rng_seed)


def poisson_degrade(values: np.ndarray, rng: np.random.Generator, peak: float = DEFAULT_PEAK) -> np.ndarray:
    """Map [-1, 1] to photon rates ``peak * (v + 1) / 2``, sample counts and map back."""
    if peak < 1:
        raise ConfigError(f"peak must be >= 1, got {peak}")
    lam = np.clip(peak * (np.asarray(values, dtype=np.float64) + 1.0) / 2.0, 0.0, None)
    counts = rng.poisson(lam)
    return np.clip(2.0 * counts / peak - 1.0, -1.0, 1.0)


def pixelate_array(a: np.ndarray) -> np.ndarray:
    if any(s % 2 for s in a.shape):
        raise ShapeMismatchError(f"pixelate needs even extents, got {a.shape}")
    low = a[::2, ::2, ::2]
    return np.repeat(np.repeat(np.repeat(low, 2, axis=0), 2, axis=1), 2, axis=2)


def pixelate(x: VoxelBlock) -> VoxelBlock:
    """Nearest-neighbour half-resolution downsample, upsampled back to the input edge."""
    return VoxelBlock(pixelate_array(x.data), x.origin)


def make_condition(x: VoxelBlock, kind, rng_seed=0, peak: float = DEFAULT_PEAK) -> VoxelBlock:
    kind = ConditionKind.parse(kind)
    if peak < 1:
        raise ConfigError(f"peak must be >= 1, got {peak}")
    if kind is ConditionKind.AUTOENCODER:
        return VoxelBlock(x.data.copy(), x.origin)
    if kind is ConditionKind.NOISY:
        return VoxelBlock(poisson_degrade(x.data, _seed_rng(rng_seed), peak), x.origin)
    return pixelate(x)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentTransform:
    index: int
    kind: str  # "rotation-mirror" or "translation"
    quarter_turns: int = 0
    flip_x: bool = False
    offset: Tuple[int, int, int] = (0, 0, 0)  # (dx, dy, dz) in units of the stride

    @property
    def is_identity(self) -> bool:
        return self.kind == "rotation-mirror" and self.quarter_turns == 0 and not self.flip_x


def enumerate_transforms() -> List[AugmentTransform]:
    """8 rigid symmetries about the z axis followed by the 26 unit translations."""
    out = []
    for turns, flip in itertools.product(range(4), (False, True)):
        out.append(AugmentTransform(len(out), "rotation-mirror", turns, flip))
    for off in itertools.product((-1, 0, 1), repeat=3):
        if off != (0, 0, 0):
            out.append(AugmentTransform(len(out), "translation", offset=off))
    return out


def _blockwise(padded: np.ndarray, edge: int) -> np.ndarray:
    pz, py, px = padded.shape
    return padded.reshape(pz // edge, edge, py // edge, edge, px // edge, edge).transpose(0, 2, 4, 1, 3, 5)


def _unblockwise(blocks: np.ndarray) -> np.ndarray:
    bz, by, bx, e = blocks.shape[:4]
    return blocks.transpose(0, 3, 1, 4, 2, 5).reshape(bz * e, by * e, bx * e)


def transform_array(padded: np.ndarray, t: AugmentTransform, grid: BlockGrid,
                    stride: int = TRANSLATION_STRIDE) -> np.ndarray:
    px, py, pz = grid.padded_dims
    if padded.shape != (pz, py, px):
        raise ShapeMismatchError(f"expected padded shape {(pz, py, px)}, got {padded.shape}")
    if t.kind == "rotation-mirror":
        # rotate each block in place so non-square grids stay bijective
        b = _blockwise(padded, grid.edge)
        if t.flip_x:
            b = b[..., ::-1]
        b = np.rot90(b, t.quarter_turns, axes=(-2, -1))
        return np.ascontiguousarray(_unblockwise(b))
    dx, dy, dz = t.offset
    zi = np.clip(np.arange(pz) + dz * stride, 0, pz - 1)
    yi = np.clip(np.arange(py) + dy * stride, 0, py - 1)
    xi = np.clip(np.arange(px) + dx * stride, 0, px - 1)
    return padded[np.ix_(zi, yi, xi)]


def apply_transform(v: Volume, t: AugmentTransform, grid: BlockGrid) -> Volume:
    return v.with_data(transform_array(v.data, t, grid))


# ---------------------------------------------------------------------------
# training pairs


@dataclass
class PairKey:
    volume: int
    transform: int
    block: int

    def stem(self) -> str:
        return f"vol{self.volume}_t{self.transform}_b{self.block}"


def iter_training_pairs(
    volumes: Sequence[Volume],
    kind,
    seed: int,
    edge: int = 32,
    peak: float = DEFAULT_PEAK,
    transforms: Optional[Sequence[AugmentTransform]] = None,
    block_filter: Optional[Callable[[VoxelBlock], bool]] = None,
) -> Iterator[Tuple[PairKey, VoxelBlock, VoxelBlock]]:
    """Yield ``(key, condition, target)`` for every volume × transform × block.

    Noise for each pair is seeded from (seed, volume, transform, block) so the
    output does not depend on iteration order.  ``block_filter`` is the hook
    for restricting training to a region (e.g. lung-only blocks).
    """
    kind = ConditionKind.parse(kind)
    if not volumes:
        raise CTCGANError("build_training_set needs at least one volume")
    transforms = enumerate_transforms() if transforms is None else list(transforms)
    for vi, vol in enumerate(volumes):
        grid = make_grid(vol.dims, edge, -1.0)
        padded = pad_to_grid(vol.data, grid)
        for t in transforms:
            blocks = partition_array(transform_array(padded, t, grid), grid)
            for bi, block in enumerate(blocks):
                if block_filter is not None and not block_filter(block):
                    continue
                cond = make_condition(block, kind, (seed, vi, t.index, bi), peak)
                yield PairKey(vi, t.index, bi), cond, block


def build_training_set(volumes: Sequence[Volume], kind, seed: int, **kw) -> List[Tuple[VoxelBlock, VoxelBlock]]:
    return [(c, x) for _, c, x in iter_training_pairs(volumes, kind, seed, **kw)]


def pairs_to_arrays(pairs) -> Tuple[np.ndarray, np.ndarray]:
    """Stack pairs into (conditions, targets), each [P, 1, e, e, e] float32."""
    cond = np.stack([c.data for c, _ in pairs])[:, None].astype(np.float32)
    tgt = np.stack([x.data for _, x in pairs])[:, None].astype(np.float32)
    return cond, tgt


MANIFEST_NAME = "pairs.manifest"


def write_pairs(out_dir, keyed_pairs, seed: int, kind, edge: int) -> Path:
    """Write pair block files and the manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, cond, target in keyed_pairs:
        cname = f"{key.stem()}_cond.ctv"
        tname = f"{key.stem()}_target.ctv"
        save_volume(Volume(cond.data), out_dir / cname)
        save_volume(Volume(target.data), out_dir / tname)
        lines.append(f"{cname} {tname}")
    manifest = out_dir / MANIFEST_NAME
    header = [
        "# ctcgan training pairs",
        f"seed {seed}",
        f"condition {ConditionKind.parse(kind).value}",
        f"edge {edge}",
        f"pairs {len(lines)}",
    ]
    manifest.write_text("\n".join(header + lines) + "\n")
    return manifest


def read_manifest(path) -> Tuple[dict, List[Tuple[str, str]]]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    info, entries = {}, []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        a, b = line.split(None, 1)
        if a.endswith(".ctv"):
            entries.append((a, b))
        else:
            info[a] = b
    return info, entries


def load_pairs(path) -> Tuple[np.ndarray, np.ndarray, dict]:
    path = Path(path)
    root = path if path.is_dir() else path.parent
    info, entries = read_manifest(path)
    pairs = [
        (VoxelBlock(load_volume(root / c).data), VoxelBlock(load_volume(root / t).data))
        for c, t in entries
    ]
    cond, tgt = pairs_to_arrays(pairs)
    return cond, tgt, info
