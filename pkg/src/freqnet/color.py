"""RGB <-> YCbCr conversion on zero-centered planes.

Uses the BT.601 full-range luma weights (KR = 0.299, KB = 0.114). All three
output planes are zero-centered: the luma plane is level-shifted by -128 so a
mid-gray image sits near zero, and the chroma planes use their natural signed
form (no +128 storage offset). The block transform downstream expects
zero-centered input, so the shift lives here rather than in the codec.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

LEVEL_SHIFT = 128.0

_KR = 0.299
_KB = 0.114
_KG = 1.0 - _KR - _KB

# Row vectors of the forward transform, derived from the luma weights so the
# inverse below is the exact matrix inverse (float round-trip error only).
_Y_ROW = np.array([_KR, _KG, _KB])
_CB_ROW = np.array([-_KR, -_KG, 1.0 - _KB]) * (0.5 / (1.0 - _KB))
_CR_ROW = np.array([1.0 - _KR, -_KG, -_KB]) * (0.5 / (1.0 - _KR))


@dataclass
class YccImage:
    """Zero-centered YCbCr planes of one image.

    y is in [-128, 127]; cb/cr are within about +/-127.5. level_shift records
    the value subtracted from luma (fixed at 128).
    """

    y: np.ndarray
    cb: np.ndarray
    cr: np.ndarray
    level_shift: float = field(default=LEVEL_SHIFT)

    @property
    def shape(self):
        return self.y.shape


def _check_rgb(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInputError(
            f"expected an RGB image of shape (H, W, 3), got {arr.shape}"
        )
    return arr.astype(np.float64)


def rgb_to_ycc(img: np.ndarray) -> YccImage:
    """Convert an RGB image ([0, 255] intensities) to zero-centered planes."""
    arr = _check_rgb(img)
    y = arr @ _Y_ROW - LEVEL_SHIFT
    cb = arr @ _CB_ROW
    cr = arr @ _CR_ROW
    return YccImage(y=y, cb=cb, cr=cr)


def ycc_to_rgb(ycc: YccImage) -> np.ndarray:
    """Invert rgb_to_ycc, rounding and clamping to uint8."""
    if ycc.y.shape != ycc.cb.shape or ycc.y.shape != ycc.cr.shape:
        raise InvalidInputError("Y/Cb/Cr plane shapes differ")
    y = ycc.y + ycc.level_shift
    # Exact inverse of the forward rows.
    r = y + (1.0 - _KR) / 0.5 * ycc.cr
    b = y + (1.0 - _KB) / 0.5 * ycc.cb
    g = (y - _KR * r - _KB * b) / _KG
    rgb = np.stack([r, g, b], axis=-1)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def luma_plane(img: np.ndarray) -> np.ndarray:
    """Zero-centered luma of an RGB or grayscale image.

    Grayscale input is treated as a luma plane directly (shifted by -128).
    """
    arr = np.asarray(img)
    if arr.ndim == 2:
        return arr.astype(np.float64) - LEVEL_SHIFT
    return rgb_to_ycc(arr).y
