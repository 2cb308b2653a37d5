"""End-to-end single-image inference and the bicubic reference path.

Both the model pipeline and the plain-bicubic baseline go through the same
plane resize and color code, so the identity-initialized model reproduces
the baseline image exactly.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .color import YccImage, luma_plane, rgb_to_ycc, ycc_to_rgb
from .dct import (
    ChannelStats,
    FreqMaps,
    blocks_to_plane,
    denormalize_maps,
    maps_to_blocks,
    normalize_maps,
    plane_to_blocks,
    reform_to_maps,
)
from .errors import InvalidInputError
from .model import ModelConfig, freqnet_forward
from .resample import bicubic_resize

BLOCK = 32


def upscale_planes(lr_img: np.ndarray, scale: int = 4):
    """Bicubic-upscale an LR image in YCbCr space.

    Returns (y, cb, cr) zero-centered planes; cb/cr are None for grayscale.
    """
    arr = np.asarray(lr_img)
    if scale < 1:
        raise InvalidInputError("scale must be >= 1")
    if arr.ndim == 2:
        return bicubic_resize(luma_plane(arr), float(scale)), None, None
    ycc = rgb_to_ycc(arr)
    return (
        bicubic_resize(ycc.y, float(scale)),
        bicubic_resize(ycc.cb, float(scale)),
        bicubic_resize(ycc.cr, float(scale)),
    )


def assemble_image(y: np.ndarray, cb, cr) -> np.ndarray:
    """Zero-centered planes back to a uint8 image (clamp happens here)."""
    if cb is None:
        return np.clip(np.rint(np.asarray(y) + 128.0), 0, 255).astype(np.uint8)
    return ycc_to_rgb(YccImage(y=np.asarray(y), cb=np.asarray(cb), cr=np.asarray(cr)))


def bicubic_upscale_image(lr_img: np.ndarray, scale: int = 4) -> np.ndarray:
    """The reference upscaler: bicubic per YCbCr plane, reassembled to uint8."""
    y, cb, cr = upscale_planes(lr_img, scale)
    return assemble_image(y, cb, cr)


@dataclass
class SuperResolveResult:
    image: np.ndarray           # uint8 SR image
    maps: FreqMaps              # model output, denormalized
    maps_normalized: FreqMaps   # model output in normalized space
    fill: np.ndarray            # LR-up block grid used outside the R band
    y_plane: np.ndarray         # reconstructed luma before the final clamp


def super_resolve(lr_img: np.ndarray, params: dict, cfg: ModelConfig,
                  stats: ChannelStats, scale: int = 4) -> SuperResolveResult:
    """LR image -> upscale -> maps -> model -> stage-1 fill -> image."""
    arr = np.asarray(lr_img)
    h, w = arr.shape[0], arr.shape[1]
    if (h * scale) % BLOCK or (w * scale) % BLOCK or h == 0 or w == 0:
        raise InvalidInputError(
            f"LR dims {h}x{w} must upscale to multiples of {BLOCK} at x{scale}"
        )
    if stats.r != cfg.region:
        raise InvalidInputError(
            f"stats are for R={stats.r}, model expects R={cfg.region}"
        )
    y_up, cb_up, cr_up = upscale_planes(arr, scale)
    fill = plane_to_blocks(y_up)
    m_lr = normalize_maps(reform_to_maps(fill, stats.r), stats)

    out = freqnet_forward(
        ad.Tensor(y_up[None, None]), ad.Tensor(m_lr.data[None]), params, cfg
    )
    maps_normalized = FreqMaps(
        data=np.asarray(out.data[0], dtype=np.float64), r=stats.r,
        normalized=True,
    )
    maps = denormalize_maps(maps_normalized, stats)
    y_sr = blocks_to_plane(maps_to_blocks(maps, fill))
    return SuperResolveResult(
        image=assemble_image(y_sr, cb_up, cr_up),
        maps=maps,
        maps_normalized=maps_normalized,
        fill=fill,
        y_plane=y_sr,
    )
