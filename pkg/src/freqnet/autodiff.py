"""Minimal dense-tensor reverse-mode autodiff engine on numpy.

Design rules:

* A Tensor wraps one numpy array. There is no broadcasting anywhere; every
  shape agreement is explicit and checked, so gradients are easy to audit.
* Ops are module-level functions that record a vjp closure on the output
  node. If no input requires a gradient the output is detached and nothing is
  retained, which keeps pure inference memory flat.
* backward(loss) walks the graph in reverse topological order with a
  pass-local gradient table, then adds each node's total into its .grad
  field. Repeated calls therefore accumulate exactly, and a fresh call never
  double-counts through stale interior gradients.
* Everything is plain single-threaded numpy, so identical inputs give
  bit-identical outputs and gradients.

Tensor files use the FQW1 layout: magic "FQW1", little-endian u32 tensor
count, then per tensor {u32 name length, utf-8 name, u32 rank, u32 dims...,
little-endian f32 data}.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

_FQW_MAGIC = b"FQW1"


class Tensor:
    """Node in the autodiff graph holding a dense numpy array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def astensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents, vjp) -> Tensor:
    """Wrap an op result; detach when no parent wants gradients."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise InvalidInputError(
            f"{op}: shape mismatch {a.data.shape} vs {b.data.shape} (no broadcasting)"
        )


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into .grad over the whole graph."""
    if loss.data.size != 1:
        raise InvalidInputError(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
        )
    # Iterative DFS topological sort (graphs can be thousands of nodes deep).
    topo = []
    visited = set()
    stack = [(loss, iter(loss._parents))]
    visited.add(id(loss))
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if id(parent) not in visited:
                visited.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            topo.append(node)
            stack.pop()

    table = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = table.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            table[key] = pg if key not in table else table[key] + pg


def clear_grads(tensors) -> None:
    values = tensors.values() if isinstance(tensors, dict) else tensors
    for t in values:
        t.zero_grad()


# ---------------------------------------------------------------------------
# Elementwise and reduction ops


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _same_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, s: float) -> Tensor:
    a = astensor(a)
    s = float(s)
    return _node(a.data * s, (a,), lambda g: (g * s,))


def add_scalar(a, s: float) -> Tensor:
    a = astensor(a)
    return _node(a.data + float(s), (a,), lambda g: (g,))


def sqrt(a) -> Tensor:
    a = astensor(a)
    if np.any(a.data < 0):
        raise InvalidInputError("sqrt requires non-negative input")
    root = np.sqrt(a.data)
    return _node(root, (a,), lambda g: (g * 0.5 / root,))


def tensor_sum(a) -> Tensor:
    a = astensor(a)
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return _node(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    """x for x >= 0 else slope * x; the subgradient at 0 is slope."""
    x = astensor(x)
    if not 0.0 < slope < 1.0:
        raise InvalidInputError(f"leaky_relu slope must be in (0, 1), got {slope}")
    data = np.where(x.data >= 0, x.data, x.data * slope)
    mult = np.where(x.data > 0, x.data.dtype.type(1.0), x.data.dtype.type(slope))
    return _node(data, (x,), lambda g: (g * mult,))


def channel_scale(x, weights) -> Tensor:
    """Multiply channel c of a [B, C, H, W] tensor by weights[c]."""
    x = astensor(x)
    w = np.asarray(weights, dtype=x.data.dtype)
    if x.data.ndim != 4:
        raise InvalidInputError(f"channel_scale expects [B, C, H, W], got {x.shape}")
    if w.ndim != 1 or w.shape[0] != x.data.shape[1]:
        raise InvalidInputError(
            f"channel_scale weights length {w.shape} != channels {x.data.shape[1]}"
        )
    wcol = w[None, :, None, None]
    return _node(x.data * wcol, (x,), lambda g: (g * wcol,))


def weighted_sum(tensors, weights) -> Tensor:
    """sum_i weights[i] * tensors[i]; all shapes must agree exactly."""
    ts = [astensor(t) for t in tensors]
    if not ts:
        raise InvalidInputError("weighted_sum of no tensors")
    if len(ts) != len(weights):
        raise InvalidInputError("weighted_sum: one weight per tensor required")
    for t in ts[1:]:
        _same_shape(ts[0], t, "weighted_sum")
    ws = [float(w) for w in weights]
    acc = ws[0] * ts[0].data
    for w, t in zip(ws[1:], ts[1:]):
        acc = acc + w * t.data
    return _node(acc, tuple(ts), lambda g: tuple(g * w for w in ws))


# ---------------------------------------------------------------------------
# Convolutions


def _check_conv_input(x: Tensor, w: Tensor, b: Tensor, stride: int, padding: int):
    if x.data.ndim != 4:
        raise InvalidInputError(f"conv input must be [B, C, H, W], got {x.shape}")
    if w.data.ndim != 4 or w.data.shape[2] != w.data.shape[3]:
        raise InvalidInputError(f"conv weight must be [O, C, k, k], got {w.shape}")
    if b.data.ndim != 1 or b.data.shape[0] != w.data.shape[0]:
        raise InvalidInputError(
            f"conv bias shape {b.shape} != output channels {w.data.shape[0]}"
        )
    if stride < 1 or padding < 0:
        raise InvalidInputError(f"bad stride/padding ({stride}, {padding})")


def _out_dim(n: int, k: int, stride: int, padding: int, axis: str) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise InvalidInputError(
            f"conv {axis} dim {n} with k={k} s={stride} p={padding} "
            "gives non-integral output"
        )
    return span // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D convolution (cross-correlation) with exact output dims."""
    x, w, b = astensor(x), astensor(w), astensor(b)
    _check_conv_input(x, w, b, stride, padding)
    bsz, cin, h, wdt = x.data.shape
    cout, cw, k, _ = w.data.shape
    if cw != cin:
        raise InvalidInputError(f"conv channels: input {cin}, weight expects {cw}")
    ho = _out_dim(h, k, stride, padding, "H")
    wo = _out_dim(wdt, k, stride, padding, "W")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, k, stride)
    out = np.einsum("bchwij,ocij->bohw", win, w.data, optimize=True)
    out += b.data[None, :, None, None]

    def vjp(g):
        dw = np.einsum("bohw,bchwij->ocij", g, win, optimize=True)
        db = g.sum(axis=(0, 2, 3))
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    np.einsum("bohw,oc->bchw", g, w.data[:, :, i, j], optimize=True)
                )
        dx = dxp[:, :, padding : padding + h, padding : padding + wdt]
        return dx, dw, db

    return _node(out, (x, w, b), vjp)


def depthwise_conv2d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel 2-D convolution; channel c sees only input channel c."""
    x, w, b = astensor(x), astensor(w), astensor(b)
    if w.data.ndim != 4 or w.data.shape[1] != 1 or w.data.shape[2] != w.data.shape[3]:
        raise InvalidInputError(
            f"depthwise weight must be [C, 1, k, k], got {w.shape}"
        )
    if x.data.ndim != 4:
        raise InvalidInputError(f"conv input must be [B, C, H, W], got {x.shape}")
    bsz, c, h, wdt = x.data.shape
    if w.data.shape[0] != c:
        raise InvalidInputError(
            f"depthwise channels: input {c}, weight has {w.data.shape[0]}"
        )
    if b.data.ndim != 1 or b.data.shape[0] != c:
        raise InvalidInputError(f"depthwise bias shape {b.shape} != channels {c}")
    if stride < 1 or padding < 0:
        raise InvalidInputError(f"bad stride/padding ({stride}, {padding})")
    k = w.data.shape[2]
    ho = _out_dim(h, k, stride, padding, "H")
    wo = _out_dim(wdt, k, stride, padding, "W")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _windows(xp, k, stride)
    kernels = w.data[:, 0]
    out = np.einsum("bchwij,cij->bchw", win, kernels, optimize=True)
    out += b.data[None, :, None, None]

    def vjp(g):
        dw = np.einsum("bchw,bchwij->cij", g, win, optimize=True)[:, None]
        db = g.sum(axis=(0, 2, 3))
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    g * kernels[:, i, j][None, :, None, None]
                )
        dx = dxp[:, :, padding : padding + h, padding : padding + wdt]
        return dx, dw, db

    return _node(out, (x, w, b), vjp)


def _gather_plane(x: np.ndarray, iy: np.ndarray, ix: np.ndarray) -> np.ndarray:
    """x[b, :, iy[b], ix[b]] with zeros outside the plane -> [B, C, H, W]."""
    bsz, c, h, w = x.shape
    valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    flat = np.clip(iy, 0, h - 1) * w + np.clip(ix, 0, w - 1)
    src = x.reshape(bsz, c, h * w)
    idx = np.broadcast_to(flat[:, None, :, :].reshape(bsz, 1, -1), (bsz, c, h * w))
    vals = np.take_along_axis(src, idx, axis=2).reshape(x.shape)
    return vals * valid[:, None, :, :]


def _scatter_plane(acc: np.ndarray, iy, ix, vals) -> None:
    """acc[b, :, iy[b], ix[b]] += vals, dropping out-of-bounds targets."""
    bsz, c, h, w = acc.shape
    valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    flat = np.clip(iy, 0, h - 1) * w + np.clip(ix, 0, w - 1)
    offsets = (np.arange(bsz)[:, None, None, None] * c + np.arange(c)[None, :, None, None])
    combined = offsets * (h * w) + flat[:, None, :, :]
    weights = (vals * valid[:, None, :, :]).ravel()
    summed = np.bincount(
        combined.ravel(), weights=weights.astype(np.float64), minlength=acc.size
    )
    acc += summed.reshape(acc.shape).astype(acc.dtype, copy=False)


def deformable_conv2d(x, w, b, offsets) -> Tensor:
    """Deformable convolution, stride 1, padding k//2 (odd k only).

    Every kernel tap t = i*k + j samples the input at its regular position
    displaced by (offsets[:, 2t] rows, offsets[:, 2t+1] cols), with bilinear
    interpolation; samples whose corners fall outside the plane contribute
    zero, matching zero padding. With all offsets zero this reduces exactly
    to conv2d(x, w, b, stride=1, padding=k//2).
    """
    x, w, b, offsets = astensor(x), astensor(w), astensor(b), astensor(offsets)
    _check_conv_input(x, w, b, 1, 0)
    bsz, cin, h, wdt = x.data.shape
    cout, cw, k, _ = w.data.shape
    if cw != cin:
        raise InvalidInputError(f"conv channels: input {cin}, weight expects {cw}")
    if k % 2 == 0:
        raise InvalidInputError(f"deformable_conv2d requires odd kernels, got {k}")
    want = (bsz, 2 * k * k, h, wdt)
    if offsets.data.shape != want:
        raise InvalidInputError(
            f"offsets shape {offsets.data.shape} != required {want}"
        )
    pad = k // 2
    grid_y = np.arange(h, dtype=x.data.dtype)[None, :, None]
    grid_x = np.arange(wdt, dtype=x.data.dtype)[None, None, :]

    def tap_samples(i, j, need_corners: bool):
        """Bilinear samples for one tap; optionally the corner pieces too."""
        t = i * k + j
        py = grid_y + (i - pad) + offsets.data[:, 2 * t]
        px = grid_x + (j - pad) + offsets.data[:, 2 * t + 1]
        y0 = np.floor(py).astype(np.int64)
        x0 = np.floor(px).astype(np.int64)
        fy = (py - y0).astype(x.data.dtype)
        fx = (px - x0).astype(x.data.dtype)
        v00 = _gather_plane(x.data, y0, x0)
        v01 = _gather_plane(x.data, y0, x0 + 1)
        v10 = _gather_plane(x.data, y0 + 1, x0)
        v11 = _gather_plane(x.data, y0 + 1, x0 + 1)
        fyb = fy[:, None]
        fxb = fx[:, None]
        s = (
            v00 * (1 - fyb) * (1 - fxb)
            + v01 * (1 - fyb) * fxb
            + v10 * fyb * (1 - fxb)
            + v11 * fyb * fxb
        )
        if not need_corners:
            return s
        return s, (y0, x0, fy, fx, v00, v01, v10, v11)

    out = np.zeros((bsz, cout, h, wdt), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            s = tap_samples(i, j, need_corners=False)
            out += np.einsum("bchw,oc->bohw", s, w.data[:, :, i, j], optimize=True)
    out += b.data[None, :, None, None]

    def vjp(g):
        # Recompute sampling per tap instead of caching the forward pieces;
        # costs a second pass but keeps graph memory flat.
        dx = np.zeros_like(x.data)
        dw = np.zeros_like(w.data)
        doff = np.zeros_like(offsets.data)
        db = g.sum(axis=(0, 2, 3))
        for i in range(k):
            for j in range(k):
                t = i * k + j
                s, (y0, x0, fy, fx, v00, v01, v10, v11) = tap_samples(
                    i, j, need_corners=True
                )
                dw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, s, optimize=True)
                gs = np.einsum("bohw,oc->bchw", g, w.data[:, :, i, j], optimize=True)
                fyb = fy[:, None]
                fxb = fx[:, None]
                _scatter_plane(dx, y0, x0, gs * (1 - fyb) * (1 - fxb))
                _scatter_plane(dx, y0, x0 + 1, gs * (1 - fyb) * fxb)
                _scatter_plane(dx, y0 + 1, x0, gs * fyb * (1 - fxb))
                _scatter_plane(dx, y0 + 1, x0 + 1, gs * fyb * fxb)
                ds_dpy = (v10 - v00) * (1 - fxb) + (v11 - v01) * fxb
                ds_dpx = (v01 - v00) * (1 - fyb) + (v11 - v10) * fyb
                doff[:, 2 * t] = (gs * ds_dpy).sum(axis=1)
                doff[:, 2 * t + 1] = (gs * ds_dpx).sum(axis=1)
        return dx, dw, db, doff

    return _node(out, (x, w, b, offsets), vjp)


# ---------------------------------------------------------------------------
# FQW1 tensor files


def save_tensors(path, tensors: dict) -> None:
    """Write named tensors as FQW1 (f32 storage, insertion order)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_FQW_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, value in tensors.items():
            arr = np.asarray(value.data if isinstance(value, Tensor) else value)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_tensors(path) -> dict:
    """Read an FQW1 file back into {name: float32 ndarray}."""
    with open(path, "rb") as fh:
        raw = fh.read()

    def take(fmt, pos):
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise InvalidInputError(f"{path}: truncated tensor file")
        return struct.unpack(fmt, raw[pos : pos + size]), pos + size

    (magic,), pos = take("<4s", 0)
    if magic != _FQW_MAGIC:
        raise InvalidInputError(f"{path}: bad magic {magic!r}, expected FQW1")
    (count,), pos = take("<I", pos)
    out = {}
    for _ in range(count):
        (name_len,), pos = take("<I", pos)
        if pos + name_len > len(raw):
            raise InvalidInputError(f"{path}: truncated tensor file")
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,), pos = take("<I", pos)
        dims, pos = take(f"<{rank}I", pos)
        n = int(np.prod(dims)) if rank else 1
        size = 4 * n
        if pos + size > len(raw):
            raise InvalidInputError(f"{path}: truncated tensor data for {name}")
        arr = np.frombuffer(raw, dtype="<f4", offset=pos, count=n)
        out[name] = arr.reshape(dims).astype(np.float32)
        pos += size
    if pos != len(raw):
        raise InvalidInputError(f"{path}: {len(raw) - pos} trailing bytes")
    return out
