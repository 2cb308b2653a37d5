"""Block DCT codec: tiling, frequency maps, channel statistics, file formats.

A plane is tiled into M x M blocks (M = 32 by default) and each block is
transformed with the orthonormal 2-D DCT-II, computed as T @ block @ T.T where
T is the orthonormal basis matrix

    T[0, j] = sqrt(1/M)
    T[k, j] = sqrt(2/M) * cos((2j + 1) k pi / (2M)),  k >= 1.

Orthonormality gives an exact inverse (T.T @ coeff @ T) and Parseval energy
equality, independent of M. The top-left R x R coefficients of every block are
"reformed" into R^2 channel maps: channel c holds coefficient
(u, v) = (c // R, c % R) of every block, laid out on the block grid. Channel
statistics normalize each map to roughly unit scale for the model.

Binary map files use the FQM1 layout: magic "FQM1", five little-endian u32
fields {R, M, Hb, Wb, normalized}, then R^2 * Hb * Wb little-endian f32 values
in channel-major order.
"""

import json
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, StateError

DEFAULT_BLOCK = 32
DEFAULT_REGION = 10
STD_FLOOR = 1e-8

_FQM_MAGIC = b"FQM1"


@lru_cache(maxsize=8)
def dct_matrix(m: int) -> np.ndarray:
    """Orthonormal DCT-II basis matrix of size m x m (read-only, cached)."""
    if m < 1:
        raise InvalidInputError(f"block size must be >= 1, got {m}")
    j = np.arange(m)
    k = np.arange(m)[:, None]
    mat = np.sqrt(2.0 / m) * np.cos((2 * j + 1) * k * np.pi / (2 * m))
    mat[0, :] = np.sqrt(1.0 / m)
    mat.flags.writeable = False
    return mat


def _square_block(block: np.ndarray) -> np.ndarray:
    arr = np.asarray(block, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InvalidInputError(f"expected a square block, got shape {arr.shape}")
    return arr


def forward_dct_block(block: np.ndarray) -> np.ndarray:
    arr = _square_block(block)
    t = dct_matrix(arr.shape[0])
    return t @ arr @ t.T


def inverse_dct_block(coeffs: np.ndarray) -> np.ndarray:
    arr = _square_block(coeffs)
    t = dct_matrix(arr.shape[0])
    return t.T @ arr @ t


def plane_to_blocks(plane: np.ndarray, m: int = DEFAULT_BLOCK) -> np.ndarray:
    """Tile a zero-centered plane and DCT every tile -> grid [Hb, Wb, m, m]."""
    arr = np.asarray(plane, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"expected a 2-D plane, got shape {arr.shape}")
    h, w = arr.shape
    if h % m or w % m or h == 0 or w == 0:
        raise InvalidInputError(f"plane dims {h}x{w} not positive multiples of {m}")
    tiles = arr.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3)
    t = dct_matrix(m)
    return t @ tiles @ t.T


def blocks_to_plane(grid: np.ndarray) -> np.ndarray:
    """Inverse-DCT a block grid and stitch the tiles back into a plane."""
    arr = _check_grid(grid)
    m = arr.shape[2]
    t = dct_matrix(m)
    tiles = t.T @ arr @ t
    hb, wb = arr.shape[:2]
    return tiles.transpose(0, 2, 1, 3).reshape(hb * m, wb * m)


def _check_grid(grid: np.ndarray) -> np.ndarray:
    arr = np.asarray(grid, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[2] != arr.shape[3]:
        raise InvalidInputError(
            f"expected a block grid [Hb, Wb, m, m], got shape {arr.shape}"
        )
    return arr


@dataclass
class FreqMaps:
    """R^2 frequency-channel maps over the block grid.

    data has shape [R^2, Hb, Wb]; channel c corresponds to DCT coefficient
    (c // R, c % R). normalized records whether channel statistics have been
    applied; m is the block size of the source grid.
    """

    data: np.ndarray
    r: int
    m: int = DEFAULT_BLOCK
    normalized: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise InvalidInputError(
                f"maps data must be [R^2, Hb, Wb], got shape {self.data.shape}"
            )
        if self.r < 1 or self.data.shape[0] != self.r * self.r:
            raise InvalidInputError(
                f"channel count {self.data.shape[0]} != R^2 for R={self.r}"
            )
        if self.m < self.r:
            raise InvalidInputError(f"region R={self.r} exceeds block size {self.m}")

    @property
    def grid_shape(self):
        return self.data.shape[1:]


def reform_to_maps(grid: np.ndarray, r: int = DEFAULT_REGION) -> FreqMaps:
    """Select the top-left r x r coefficients of every block as channel maps."""
    arr = _check_grid(grid)
    m = arr.shape[2]
    if not 1 <= r <= m:
        raise InvalidInputError(f"region size {r} out of range for block size {m}")
    hb, wb = arr.shape[:2]
    data = arr[:, :, :r, :r].reshape(hb, wb, r * r).transpose(2, 0, 1)
    return FreqMaps(data=data.copy(), r=r, m=m, normalized=False)


def maps_to_blocks(maps: FreqMaps, fill: np.ndarray) -> np.ndarray:
    """Write channel maps back into a block grid.

    Coefficients outside the R x R region come from `fill`, a full grid whose
    block-grid dims must match the maps.
    """
    if maps.normalized:
        raise StateError("maps must be denormalized before block reconstruction")
    grid = _check_grid(fill)
    if grid.shape[2] != maps.m:
        raise InvalidInputError(
            f"fill block size {grid.shape[2]} != maps block size {maps.m}"
        )
    if grid.shape[:2] != maps.grid_shape:
        raise InvalidInputError(
            f"fill grid {grid.shape[:2]} != maps grid {maps.grid_shape}"
        )
    out = grid.copy()
    r = maps.r
    hb, wb = maps.grid_shape
    out[:, :, :r, :r] = maps.data.transpose(1, 2, 0).reshape(hb, wb, r, r)
    return out


@dataclass
class ChannelStats:
    """Per-channel mean/std over a map dataset (population statistics)."""

    means: np.ndarray
    stds: np.ndarray
    samples: int

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        if self.means.shape != self.stds.shape or self.means.ndim != 1:
            raise InvalidInputError("means/stds must be 1-D and the same length")
        r = int(round(len(self.means) ** 0.5))
        if r * r != len(self.means):
            raise InvalidInputError(
                f"stats length {len(self.means)} is not a square number"
            )
        if np.any(self.stds <= 0):
            raise InvalidInputError("stds must be positive (floored at 1e-8)")

    @property
    def r(self) -> int:
        return int(round(len(self.means) ** 0.5))


def compute_channel_stats(maps_seq) -> ChannelStats:
    """Population mean/std per channel over every block position of a dataset.

    Single streaming pass using pairwise (Chan) merging per map, so large
    corpora do not need to fit in memory at once. Stds are floored at 1e-8.
    """
    count = 0
    n = None
    mean = None
    m2 = None
    for maps in maps_seq:
        if not isinstance(maps, FreqMaps):
            raise InvalidInputError("stats input must be FreqMaps instances")
        if maps.normalized:
            raise StateError("stats must be computed on unnormalized maps")
        flat = maps.data.reshape(maps.data.shape[0], -1)
        if mean is None:
            n = np.float64(flat.shape[1])
            mean = flat.mean(axis=1)
            m2 = ((flat - mean[:, None]) ** 2).sum(axis=1)
        else:
            if flat.shape[0] != mean.shape[0]:
                raise InvalidInputError("all maps must share the same R")
            nb = np.float64(flat.shape[1])
            mb = flat.mean(axis=1)
            m2b = ((flat - mb[:, None]) ** 2).sum(axis=1)
            delta = mb - mean
            total = n + nb
            mean = mean + delta * (nb / total)
            m2 = m2 + m2b + delta * delta * (n * nb / total)
            n = total
        count += 1
    if count == 0:
        raise InvalidInputError("cannot compute statistics of an empty dataset")
    stds = np.maximum(np.sqrt(m2 / n), STD_FLOOR)
    return ChannelStats(means=mean, stds=stds, samples=count)


def _check_stats(maps: FreqMaps, stats: ChannelStats) -> None:
    if len(stats.means) != maps.data.shape[0]:
        raise InvalidInputError(
            f"stats have {len(stats.means)} channels, maps have {maps.data.shape[0]}"
        )


def normalize_maps(maps: FreqMaps, stats: ChannelStats) -> FreqMaps:
    """Per-channel (x - mean) / std. Errors if already normalized."""
    if maps.normalized:
        raise StateError("maps are already normalized")
    _check_stats(maps, stats)
    data = (maps.data - stats.means[:, None, None]) / stats.stds[:, None, None]
    return FreqMaps(data=data, r=maps.r, m=maps.m, normalized=True)


def denormalize_maps(maps: FreqMaps, stats: ChannelStats) -> FreqMaps:
    """Inverse of normalize_maps. Errors if not normalized."""
    if not maps.normalized:
        raise StateError("maps are not normalized")
    _check_stats(maps, stats)
    data = maps.data * stats.stds[:, None, None] + stats.means[:, None, None]
    return FreqMaps(data=data, r=maps.r, m=maps.m, normalized=False)


def save_freqmaps(path, maps: FreqMaps) -> None:
    hb, wb = maps.grid_shape
    header = struct.pack(
        "<4s5I", _FQM_MAGIC, maps.r, maps.m, hb, wb, 1 if maps.normalized else 0
    )
    payload = maps.data.astype("<f4").tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_freqmaps(path) -> FreqMaps:
    with open(path, "rb") as fh:
        raw = fh.read()
    head_size = struct.calcsize("<4s5I")
    if len(raw) < head_size:
        raise InvalidInputError(f"{path}: truncated map file")
    magic, r, m, hb, wb, normalized = struct.unpack("<4s5I", raw[:head_size])
    if magic != _FQM_MAGIC:
        raise InvalidInputError(f"{path}: bad magic {magic!r}, expected FQM1")
    expect = r * r * hb * wb
    data = np.frombuffer(raw, dtype="<f4", offset=head_size)
    if data.size != expect:
        raise InvalidInputError(
            f"{path}: payload holds {data.size} floats, header implies {expect}"
        )
    data = data.astype(np.float64).reshape(r * r, hb, wb)
    return FreqMaps(data=data, r=r, m=m, normalized=bool(normalized))


def save_stats(path, stats: ChannelStats) -> None:
    doc = {
        "r": stats.r,
        "means": stats.means.tolist(),
        "stds": stats.stds.tolist(),
        "samples": stats.samples,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_stats(path) -> ChannelStats:
    with open(path) as fh:
        doc = json.load(fh)
    try:
        stats = ChannelStats(
            means=np.array(doc["means"], dtype=np.float64),
            stds=np.array(doc["stds"], dtype=np.float64),
            samples=int(doc["samples"]),
        )
    except (KeyError, TypeError) as exc:
        raise InvalidInputError(f"{path}: malformed stats file ({exc})") from exc
    if stats.r != int(doc["r"]):
        raise InvalidInputError(f"{path}: r field disagrees with means length")
    return stats
