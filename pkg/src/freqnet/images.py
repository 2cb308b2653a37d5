"""PNG loading/saving and alignment crops.

Images are plain numpy arrays: uint8, shape (H, W, 3) for RGB or (H, W) for
grayscale. Anything else (palette, alpha, 16-bit) is converted on load.
"""

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import InvalidInputError


def load_image(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise InvalidInputError(f"image file not found: {p}")
    with PILImage.open(p) as im:
        if im.mode in ("L", "I;16", "I"):
            im = im.convert("L")
        elif im.mode != "RGB":
            im = im.convert("RGB")
        return np.asarray(im)


def save_image(path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        raise InvalidInputError(f"expected uint8 image data, got {arr.dtype}")
    if arr.ndim not in (2, 3):
        raise InvalidInputError(f"expected (H, W) or (H, W, 3) image, got {arr.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr).save(path)


def center_crop_multiple(img: np.ndarray, multiple: int) -> np.ndarray:
    """Center-crop so both spatial dims are multiples of `multiple`."""
    if multiple <= 0:
        raise InvalidInputError("crop multiple must be positive")
    h, w = img.shape[:2]
    nh = (h // multiple) * multiple
    nw = (w // multiple) * multiple
    if nh == 0 or nw == 0:
        raise InvalidInputError(
            f"image {h}x{w} smaller than required multiple {multiple}"
        )
    top = (h - nh) // 2
    left = (w - nw) // 2
    return img[top : top + nh, left : left + nw]
