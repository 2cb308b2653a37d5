"""Separable bicubic resampling with the Keys kernel (a = -0.5).

Conventions match the de-facto standard resampler used to generate
super-resolution training data: output sample i maps to source coordinate
(i + 0.5)/factor - 0.5, the kernel is widened by 1/factor when shrinking
(antialias), source indices are clamped to the edge, and each output's weights
are renormalized to sum to one, so constants are preserved exactly.
"""

import numpy as np

from .errors import InvalidInputError

_A = -0.5  # Keys cubic parameter


def cubic_kernel(t: np.ndarray) -> np.ndarray:
    """Keys cubic convolution kernel, support (-2, 2), a = -0.5."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2 = t * t
    t3 = t2 * t
    near = (_A + 2.0) * t3 - (_A + 3.0) * t2 + 1.0
    far = _A * t3 - 5.0 * _A * t2 + 8.0 * _A * t - 4.0 * _A
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def _axis_weights(n_in: int, factor: float) -> np.ndarray:
    """Dense [n_out, n_in] resampling matrix for one axis."""
    n_out_f = n_in * factor
    n_out = int(round(n_out_f))
    if abs(n_out_f - n_out) > 1e-9 or n_out < 1:
        raise InvalidInputError(
            f"factor {factor} gives non-integral output size for {n_in} samples"
        )
    # Shrinking stretches the kernel so it averages, not just interpolates.
    kscale = factor if factor < 1.0 else 1.0
    support = 2.0 / kscale

    u = (np.arange(n_out, dtype=np.float64) + 0.5) / factor - 0.5
    left = np.floor(u - support).astype(np.int64) + 1
    taps = int(np.ceil(2.0 * support)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = cubic_kernel((u[:, None] - idx) * kscale) * kscale
    w /= w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, n_in - 1)

    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(np.arange(n_out), taps), idx.ravel()), w.ravel())
    return mat


def bicubic_resize(plane: np.ndarray, factor: float) -> np.ndarray:
    """Resize a 2-D plane by `factor` (>1 enlarges, <1 shrinks with antialias).

    Both output dims must come out integral. The operation is linear in the
    input and preserves constants exactly up to float rounding.
    """
    arr = np.asarray(plane, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"expected a 2-D plane, got shape {arr.shape}")
    if factor <= 0:
        raise InvalidInputError("resize factor must be positive")
    rows = _axis_weights(arr.shape[0], factor)
    cols = _axis_weights(arr.shape[1], factor)
    return rows @ arr @ cols.T


def resize_image(img: np.ndarray, factor: float) -> np.ndarray:
    """Channel-wise bicubic resize of a uint8 image, rounded back to uint8.

    This is the degradation model: LR inputs are produced with factor 1/4.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        out = bicubic_resize(arr, factor)
    elif arr.ndim == 3:
        out = np.stack(
            [bicubic_resize(arr[..., c], factor) for c in range(arr.shape[2])],
            axis=-1,
        )
    else:
        raise InvalidInputError(f"expected an image array, got shape {arr.shape}")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)
