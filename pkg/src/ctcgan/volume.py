"""
Volume data model, the CTV1 binary format, invertible intensity
preprocessing and block partitioning.

Arrays are stored as ``data[z, y, x]`` so that C order is x-fastest, which
is also the on-disk voxel order.  ``Volume.dims`` reports ``(nx, ny, nz)``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import (
    BadMagicError,
    DimensionOverflowError,
    GridMismatchError,
    InvalidParamsError,
    NonFiniteVoxelError,
    TruncatedFileError,
)

MAGIC = b"CTV1"
HEADER_SIZE = 16
MAX_VOXELS = 2**32
DEFAULT_BINS = 4096


@dataclass
class Volume:
    """Dense 3D scalar field.

    Attributes:
        data: float64 array of shape (nz, ny, nx).
        spacing: (sx, sy, sz) in millimeters; informational only.
    """

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DimensionOverflowError(f"volume must be 3D and non-empty, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NonFiniteVoxelError("volume contains NaN or Inf voxels")
        self.data = data
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> Tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing)


@dataclass
class VoxelBlock:
    """An edge³ cube cut from a volume; ``origin`` is (ox, oy, oz)."""

    data: np.ndarray
    origin: Tuple[int, int, int] = (0, 0, 0)

    @property
    def edge(self) -> int:
        return self.data.shape[0]


@dataclass
class BlockGrid:
    parent_dims: Tuple[int, int, int]
    padded_dims: Tuple[int, int, int]
    edge: int
    pad_value: float
    block_count: Tuple[int, int, int]

    @property
    def n_blocks(self) -> int:
        bx, by, bz = self.block_count
        return bx * by * bz

    def origins(self) -> List[Tuple[int, int, int]]:
        """Block origins in z-major, then y, then x order."""
        bx, by, bz = self.block_count
        e = self.edge
        return [(ix * e, iy * e, iz * e) for iz in range(bz) for iy in range(by) for ix in range(bx)]

    def to_dict(self) -> dict:
        return {
            "parent_dims": list(self.parent_dims),
            "padded_dims": list(self.padded_dims),
            "edge": self.edge,
            "pad_value": self.pad_value,
            "block_count": list(self.block_count),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlockGrid":
        return cls(
            tuple(d["parent_dims"]),
            tuple(d["padded_dims"]),
            int(d["edge"]),
            float(d["pad_value"]),
            tuple(d["block_count"]),
        )


@dataclass
class PreprocessParams:
    """Recorded histogram equalization state.

    ``hist_lut[b]`` is the equalized value of input bin ``b``;
    ``inv_lut[b]`` is the preimage chosen for that equalized level, which is
    the center of the first bin mapping to it.
    """

    hist_lut: np.ndarray
    inv_lut: np.ndarray
    vmin: float
    vmax: float
    bin_width: float
    constant: bool = False

    @property
    def bins(self) -> int:
        return len(self.hist_lut)

    def to_dict(self) -> dict:
        return {
            "hist_lut": [float(x) for x in self.hist_lut],
            "inv_lut": [float(x) for x in self.inv_lut],
            "vmin": self.vmin,
            "vmax": self.vmax,
            "bin_width": self.bin_width,
            "constant": self.constant,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessParams":
        return cls(
            np.asarray(d["hist_lut"], dtype=np.float64),
            np.asarray(d["inv_lut"], dtype=np.float64),
            float(d["vmin"]),
            float(d["vmax"]),
            float(d["bin_width"]),
            bool(d.get("constant", False)),
        )


# ---------------------------------------------------------------------------
# CTV1 io


def save_volume(v: Volume, path) -> None:
    """Write ``v`` as CTV1 (payload is float32, so round trips are exact for
    float32-representable data)."""
    data = np.asarray(v.data)
    if not np.all(np.isfinite(data)):
        raise NonFiniteVoxelError("refusing to save a volume with non-finite voxels")
    nx, ny, nz = v.dims
    payload = data.astype("<f4", copy=False)
    if not np.all(np.isfinite(payload)):
        raise NonFiniteVoxelError("voxel values overflow float32")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", nx, ny, nz))
        f.write(np.ascontiguousarray(payload).tobytes())


def load_volume(path, spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)) -> Volume:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: missing CTV1 magic")
    if len(raw) < HEADER_SIZE:
        raise TruncatedFileError(f"{path}: header truncated")
    nx, ny, nz = struct.unpack("<III", raw[4:HEADER_SIZE])
    n = nx * ny * nz
    if min(nx, ny, nz) == 0 or n > MAX_VOXELS:
        raise DimensionOverflowError(f"{path}: invalid dims {(nx, ny, nz)}")
    expected = HEADER_SIZE + 4 * n
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=HEADER_SIZE)
    if not np.all(np.isfinite(data)):
        raise NonFiniteVoxelError(f"{path}: payload contains non-finite voxels")
    return Volume(data.reshape(nz, ny, nx).astype(np.float64), spacing)


def meta_path(path) -> Path:
    """Sidecar path: same basename, suffix ``.meta.json``."""
    p = Path(path)
    return p.with_name(p.name[: -len(p.suffix)] + ".meta.json" if p.suffix else p.name + ".meta.json")


def save_meta(path, meta: Dict) -> Path:
    out = meta_path(path)
    with open(out, "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    return out


def load_meta(path) -> Dict:
    with open(meta_path(path)) as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# preprocessing


def _bin_index(values: np.ndarray, vmin: float, bin_width: float, bins: int) -> np.ndarray:
    idx = np.floor((values - vmin) / bin_width).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def equalize(v: Volume, bins: int = DEFAULT_BINS) -> Tuple[Volume, PreprocessParams]:
    """Histogram-equalize ``v`` into [0, 1] with the CDF remap
    ``e(b) = (cdf(b) - cdf_min) / (1 - cdf_min)``."""
    if bins < 2:
        raise InvalidParamsError("bins must be >= 2")
    data = v.data
    vmin = float(data.min())
    vmax = float(data.max())
    if vmax == vmin:
        lut = np.zeros(bins)
        inv = np.full(bins, vmin)
        params = PreprocessParams(lut, inv, vmin, vmax, 0.0, constant=True)
        return v.with_data(np.zeros_like(data)), params

    bin_width = (vmax - vmin) / bins
    idx = _bin_index(data, vmin, bin_width, bins)
    counts = np.bincount(idx.ravel(), minlength=bins)
    cdf = np.cumsum(counts) / idx.size
    cdf_min = cdf[counts > 0][0]
    lut = (cdf - cdf_min) / (1.0 - cdf_min)
    lut = np.clip(lut, 0.0, 1.0)

    centers = vmin + (np.arange(bins) + 0.5) * bin_width
    _, first = np.unique(lut, return_index=True)
    # every bin inherits the center of the first bin that shares its level
    owner = np.maximum.accumulate(np.where(np.isin(np.arange(bins), first), np.arange(bins), 0))
    inv = centers[owner]

    params = PreprocessParams(lut, inv, vmin, vmax, bin_width)
    return v.with_data(lut[idx]), params


def unequalize(values: np.ndarray, p: PreprocessParams) -> np.ndarray:
    """Map equalized values back to the original intensity scale."""
    _validate_params(p)
    values = np.asarray(values, dtype=np.float64)
    if p.constant:
        return np.full(values.shape, p.vmin)
    levels, first = np.unique(p.hist_lut, return_index=True)
    return np.interp(values, levels, p.inv_lut[first])


def _validate_params(p: PreprocessParams) -> None:
    if len(p.hist_lut) != len(p.inv_lut) or len(p.hist_lut) < 2:
        raise InvalidParamsError("lookup tables must have equal length >= 2")
    if np.any(np.diff(p.hist_lut) < 0) or np.any(np.diff(p.inv_lut) < 0):
        raise InvalidParamsError("lookup tables must be monotone non-decreasing")
    if p.hist_lut.min() < 0 or p.hist_lut.max() > 1:
        raise InvalidParamsError("hist_lut values must lie in [0, 1]")


def normalize(v: Volume) -> Tuple[Volume, Tuple[float, float]]:
    """Affine map of [min, max] onto [-1, 1]; constant volumes map to 0."""
    lo = float(v.data.min())
    hi = float(v.data.max())
    if hi == lo:
        return v.with_data(np.zeros_like(v.data)), (lo, hi)
    return v.with_data(normalize_values(v.data, (lo, hi))), (lo, hi)


def normalize_values(values: np.ndarray, bounds: Tuple[float, float]) -> np.ndarray:
    lo, hi = bounds
    if hi == lo:
        return np.zeros_like(values, dtype=np.float64)
    return 2.0 * (values - lo) / (hi - lo) - 1.0


def denormalize_values(values: np.ndarray, bounds: Tuple[float, float]) -> np.ndarray:
    lo, hi = bounds
    values = np.clip(values, -1.0, 1.0)
    return (values + 1.0) * 0.5 * (hi - lo) + lo


def denormalize_and_unequalize(
    v: Volume, p: PreprocessParams, bounds: Tuple[float, float]
) -> Volume:
    _validate_params(p)
    return v.with_data(unequalize(denormalize_values(v.data, bounds), p))


def apply_preprocess(v: Volume, p: PreprocessParams, bounds: Tuple[float, float]) -> Volume:
    """Equalize and normalize ``v`` with previously recorded parameters."""
    _validate_params(p)
    if p.constant:
        eq = np.zeros_like(v.data)
    else:
        eq = p.hist_lut[_bin_index(v.data, p.vmin, p.bin_width, p.bins)]
    return v.with_data(normalize_values(eq, bounds))


def preprocess(v: Volume, bins: int = DEFAULT_BINS):
    """Equalize then normalize. Returns (volume in [-1, 1], params, bounds)."""
    eq, params = equalize(v, bins)
    norm, bounds = normalize(eq)
    return norm, params, bounds


# ---------------------------------------------------------------------------
# blocks


def make_grid(dims: Sequence[int], edge: int = 32, pad_value: float = -1.0) -> BlockGrid:
    if edge < 2:
        raise GridMismatchError("edge must be >= 2")
    dims = tuple(int(d) for d in dims)
    padded = tuple(int(math.ceil(d / edge)) * edge for d in dims)
    count = tuple(p // edge for p in padded)
    return BlockGrid(dims, padded, edge, float(pad_value), count)


def pad_to_grid(data: np.ndarray, grid: BlockGrid) -> np.ndarray:
    """Pad a (nz, ny, nx) array at the high end of each axis with the grid's pad value."""
    px, py, pz = grid.padded_dims
    nz, ny, nx = data.shape
    out = np.full((pz, py, px), grid.pad_value, dtype=np.float64)
    out[:nz, :ny, :nx] = data
    return out


def partition(
    v: Volume, edge: int = 32, pad_value: float = -1.0
) -> Tuple[BlockGrid, List[VoxelBlock]]:
    grid = make_grid(v.dims, edge, pad_value)
    return grid, partition_array(pad_to_grid(v.data, grid), grid)


def partition_array(padded: np.ndarray, grid: BlockGrid) -> List[VoxelBlock]:
    """Cut an already padded (pz, py, px) array into blocks in grid order."""
    px, py, pz = grid.padded_dims
    if padded.shape != (pz, py, px):
        raise GridMismatchError(f"array shape {padded.shape} does not match padded dims")
    e = grid.edge
    return [
        VoxelBlock(padded[oz:oz + e, oy:oy + e, ox:ox + e].copy(), (ox, oy, oz))
        for ox, oy, oz in grid.origins()
    ]


def stitch(g: BlockGrid, blocks: Sequence[VoxelBlock], spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Reassemble blocks and trim the padding."""
    if len(blocks) != g.n_blocks:
        raise GridMismatchError(f"expected {g.n_blocks} blocks, got {len(blocks)}")
    expected = set(g.origins())
    seen = set()
    px, py, pz = g.padded_dims
    out = np.empty((pz, py, px), dtype=np.float64)
    e = g.edge
    for b in blocks:
        origin = tuple(int(o) for o in b.origin)
        if origin not in expected:
            raise GridMismatchError(f"block origin {origin} not on grid")
        if origin in seen:
            raise GridMismatchError(f"duplicate block origin {origin}")
        if b.data.shape != (e, e, e):
            raise GridMismatchError(f"block at {origin} has shape {b.data.shape}")
        seen.add(origin)
        ox, oy, oz = origin
        out[oz:oz + e, oy:oy + e, ox:ox + e] = b.data
    nx, ny, nz = g.parent_dims
    return Volume(out[:nz, :ny, :nx].copy(), spacing)
