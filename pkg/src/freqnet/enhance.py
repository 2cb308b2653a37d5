"""Channel-merge post-processing: overwrite selected frequency channels of a
third-party SR image with model predictions, then rebuild the image.
"""

from dataclasses import dataclass

import numpy as np

from .color import luma_plane
from .dct import FreqMaps, blocks_to_plane, maps_to_blocks, plane_to_blocks, reform_to_maps
from .errors import InvalidInputError
from .infer import assemble_image
from .metrics import annulus_channels

BLOCK = 32


def parse_selection(text: str, r: int) -> list:
    """Comma-separated channel indices, inclusive ranges, and ring labels.

    Example: "0-8,annulus:6-5,annulus:7-6". Returns sorted unique indices.
    """
    if text is None:
        raise InvalidInputError("selection must be a string (may be empty)")
    chans = set()
    for token in text.split(","):
        tok = token.strip()
        if not tok:
            continue
        try:
            if tok.startswith("annulus:"):
                chans.update(annulus_channels(tok[len("annulus:"):], r))
            elif "-" in tok:
                lo_s, hi_s = tok.split("-", 1)
                lo, hi = int(lo_s), int(hi_s)
                if lo > hi:
                    raise InvalidInputError(f"empty range {tok!r}")
                chans.update(range(lo, hi + 1))
            else:
                chans.add(int(tok))
        except ValueError:
            raise InvalidInputError(f"bad selection token {tok!r}") from None
    bad = [c for c in chans if not 0 <= c < r * r]
    if bad:
        raise InvalidInputError(
            f"selection indices {sorted(bad)} outside [0, {r * r})"
        )
    return sorted(chans)


def image_to_maps(img: np.ndarray, r: int = 10):
    """Luma plane -> block transform -> (unnormalized maps, full block grid)."""
    arr = np.asarray(img)
    h, w = arr.shape[0], arr.shape[1]
    if h % BLOCK or w % BLOCK or h == 0 or w == 0:
        raise InvalidInputError(f"image dims {h}x{w} must be multiples of {BLOCK}")
    grid = plane_to_blocks(luma_plane(arr))
    return reform_to_maps(grid, r), grid


@dataclass
class MergeJob:
    """One merge request; fill_mode picks the out-of-band coefficient source:
    "lr" uses the upscaled-LR grid, "sr" keeps the SR image's own high band.
    """

    sr_image: np.ndarray
    freqnet_maps: FreqMaps
    selection: list
    lr_fill: np.ndarray = None
    fill_mode: str = "lr"

    def __post_init__(self):
        if self.fill_mode not in ("lr", "sr"):
            raise InvalidInputError(f"fill_mode must be lr or sr, got {self.fill_mode!r}")
        if self.fill_mode == "lr" and self.lr_fill is None:
            raise InvalidInputError("fill_mode 'lr' needs the upscaled-LR block grid")
        if self.freqnet_maps.normalized:
            raise InvalidInputError("merge operates on denormalized maps")
        r2 = self.freqnet_maps.r ** 2
        bad = [c for c in self.selection if not 0 <= c < r2]
        if bad or len(set(self.selection)) != len(self.selection):
            raise InvalidInputError(f"selection invalid for R={self.freqnet_maps.r}")


def merge_maps(sr_maps: FreqMaps, freqnet_maps: FreqMaps, selection) -> FreqMaps:
    """Channel c of the result comes from freqnet_maps if selected, else sr_maps."""
    if sr_maps.normalized or freqnet_maps.normalized:
        raise InvalidInputError("merge operates on denormalized maps")
    if sr_maps.data.shape != freqnet_maps.data.shape or sr_maps.r != freqnet_maps.r:
        raise InvalidInputError(
            f"map shape mismatch: {sr_maps.data.shape} vs {freqnet_maps.data.shape}"
        )
    data = sr_maps.data.copy()
    sel = list(selection)
    if sel:
        data[sel] = freqnet_maps.data[sel]
    return FreqMaps(data=data, r=sr_maps.r, m=sr_maps.m, normalized=False)


def merge_channels(job: MergeJob):
    """Resolve the SR image to maps, merge, and pick the fill grid.

    Returns (merged maps, fill grid) ready for reconstruct_merged.
    """
    sr_maps, sr_grid = image_to_maps(job.sr_image, job.freqnet_maps.r)
    merged = merge_maps(sr_maps, job.freqnet_maps, job.selection)
    fill = job.lr_fill if job.fill_mode == "lr" else sr_grid
    if fill.shape != sr_grid.shape:
        raise InvalidInputError(
            f"fill grid {fill.shape} does not match the SR grid {sr_grid.shape}"
        )
    return merged, fill


def reconstruct_merged(maps: FreqMaps, fill: np.ndarray, chroma=None) -> np.ndarray:
    """Merged maps + fill -> luma -> uint8 image (chroma passes through)."""
    if fill is None:
        raise InvalidInputError("reconstruction needs a fill block grid")
    if maps.normalized:
        raise InvalidInputError("reconstruction operates on denormalized maps")
    y = blocks_to_plane(maps_to_blocks(maps, fill))
    if chroma is None:
        return assemble_image(y, None, None)
    cb, cr = chroma
    return assemble_image(y, cb, cr)
