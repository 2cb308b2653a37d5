"""Dual-branch frequency-restoration model.

Two branches predict the same R^2-channel frequency maps and are blended with
fixed weights (w1, w2):

* Spatial branch (SEN): works on the upscaled luma plane. A shallow 3x3 conv
  lifts 1 -> C channels, a trunk of residual groups (plain, then
  deformable-conv groups) refines features, a stack of stride-2 convs shrinks
  the plane down to the block grid, and a 1x1 conv projects C -> R^2.
* Frequency branch (FRN): works directly on the input maps. A 1x1 head
  projects R^2 -> C, a trunk of depthwise residual groups then plain groups
  refines, a 1x1 tail projects back to R^2 and is added to the input maps
  (global skip).

Every residual tail (second conv of each block, each group's tail conv, the
FRN trunk tail) and every offset branch is zero-initialized, so at init each
block and group is the identity and the FRN returns its input exactly. With
(w1, w2) = (0, 1) the whole model is therefore the identity on maps at init.

Shrink convs are 4x4 stride-2 pad-1: halving even dims with a 3x3 kernel
cannot satisfy the engine's exact-output-dims contract, a 4x4 kernel can.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import InvalidInputError

KERNEL = 3
SHRINK_KERNEL = 4


@dataclass
class ModelConfig:
    feature_channels: int = 64
    blocks_per_group: int = 10
    sen_num_rg: int = 7
    sen_num_drg: int = 3
    frn_num_dwrg: int = 3
    frn_num_rg: int = 7
    shrink_stages: int = 5
    w1: float = 0.5
    w2: float = 0.5
    leaky_slope: float = 0.2
    region: int = 10

    def __post_init__(self):
        if self.feature_channels < 1 or self.blocks_per_group < 1:
            raise InvalidInputError("feature_channels and blocks_per_group must be >= 1")
        if min(self.sen_num_rg, self.sen_num_drg, self.frn_num_dwrg, self.frn_num_rg) < 0:
            raise InvalidInputError("group counts must be >= 0")
        if self.shrink_stages < 1:
            raise InvalidInputError("shrink_stages must be >= 1")
        if not 0.0 < self.leaky_slope < 1.0:
            raise InvalidInputError("leaky_slope must be in (0, 1)")
        if self.region < 1:
            raise InvalidInputError("region must be >= 1")
        if self.w1 == 0.0 and self.w2 == 0.0:
            raise InvalidInputError("at least one combination weight must be nonzero")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise InvalidInputError(f"unknown model config fields: {sorted(extra)}")
        return cls(**doc)


def _group_shapes(shapes: dict, prefix: str, kind: str, cfg: ModelConfig) -> None:
    c = cfg.feature_channels
    k = KERNEL
    for bi in range(cfg.blocks_per_group):
        if kind == "rb":
            pre = f"{prefix}rb{bi}."
            shapes[pre + "conv1.w"] = (c, c, k, k)
            shapes[pre + "conv1.b"] = (c,)
            shapes[pre + "conv2.w"] = (c, c, k, k)
            shapes[pre + "conv2.b"] = (c,)
        elif kind == "drb":
            pre = f"{prefix}drb{bi}."
            shapes[pre + "conv1.w"] = (c, c, k, k)
            shapes[pre + "conv1.b"] = (c,)
            shapes[pre + "offset.w"] = (2 * k * k, c, k, k)
            shapes[pre + "offset.b"] = (2 * k * k,)
            shapes[pre + "dconv.w"] = (c, c, k, k)
            shapes[pre + "dconv.b"] = (c,)
        elif kind == "dwrb":
            pre = f"{prefix}dwrb{bi}."
            shapes[pre + "dwconv.w"] = (c, 1, k, k)
            shapes[pre + "dwconv.b"] = (c,)
            shapes[pre + "conv2.w"] = (c, c, 1, 1)
            shapes[pre + "conv2.b"] = (c,)
        else:
            raise InvalidInputError(f"unknown block kind {kind}")
    shapes[prefix + "tail.w"] = (c, c, k, k)
    shapes[prefix + "tail.b"] = (c,)


def parameter_shapes(cfg: ModelConfig) -> dict:
    """Deterministically ordered {name: shape} for every learnable tensor."""
    c = cfg.feature_channels
    r2 = cfg.region * cfg.region
    shapes = {}
    shapes["sen.shallow.w"] = (c, 1, KERNEL, KERNEL)
    shapes["sen.shallow.b"] = (c,)
    for gi in range(cfg.sen_num_rg):
        _group_shapes(shapes, f"sen.rg{gi}.", "rb", cfg)
    for gi in range(cfg.sen_num_drg):
        _group_shapes(shapes, f"sen.drg{gi}.", "drb", cfg)
    for si in range(cfg.shrink_stages):
        shapes[f"sen.shrink{si}.w"] = (c, c, SHRINK_KERNEL, SHRINK_KERNEL)
        shapes[f"sen.shrink{si}.b"] = (c,)
    shapes["sen.proj.w"] = (r2, c, 1, 1)
    shapes["sen.proj.b"] = (r2,)
    shapes["frn.head.w"] = (c, r2, 1, 1)
    shapes["frn.head.b"] = (c,)
    for gi in range(cfg.frn_num_dwrg):
        _group_shapes(shapes, f"frn.dwrg{gi}.", "dwrb", cfg)
    for gi in range(cfg.frn_num_rg):
        _group_shapes(shapes, f"frn.rg{gi}.", "rb", cfg)
    shapes["frn.proj.w"] = (r2, c, 1, 1)
    shapes["frn.proj.b"] = (r2,)
    return shapes


def _is_zero_init(name: str) -> bool:
    """Residual tails, group tails, offset branches, and the FRN trunk tail."""
    return (
        ".conv2." in name
        or ".dconv." in name
        or ".offset." in name
        or ".tail." in name
        or name.startswith("frn.proj.")
    )


def _needs_lrelu_gain(name: str) -> bool:
    # Convs whose output feeds a LeakyReLU directly.
    return ".conv1." in name or ".dwconv." in name or ".shrink" in name


def init_params(cfg: ModelConfig, seed: int, dtype=np.float64) -> dict:
    """Kaiming fan-in init; zero biases; zero tails/offsets (identity start)."""
    rng = np.random.default_rng(seed)
    slope = cfg.leaky_slope
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".b") or _is_zero_init(name):
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            gain2 = 2.0 / (1.0 + slope * slope) if _needs_lrelu_gain(name) else 1.0
            std = np.sqrt(gain2 / fan_in)
            data = rng.normal(0.0, std, size=shape).astype(dtype)
        params[name] = ad.Tensor(data, requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# Blocks and groups. Each takes a getter mapping a local key ("conv1.w") to
# the parameter Tensor, so the same code serves any prefix in the model.


def residual_block(x, get, slope: float):
    h = ad.conv2d(x, get("conv1.w"), get("conv1.b"), stride=1, padding=KERNEL // 2)
    h = ad.leaky_relu(h, slope)
    h = ad.conv2d(h, get("conv2.w"), get("conv2.b"), stride=1, padding=KERNEL // 2)
    return ad.add(x, h)


def deformable_residual_block(x, get, slope: float):
    h = ad.conv2d(x, get("conv1.w"), get("conv1.b"), stride=1, padding=KERNEL // 2)
    h = ad.leaky_relu(h, slope)
    offsets = ad.conv2d(h, get("offset.w"), get("offset.b"), stride=1, padding=KERNEL // 2)
    h = ad.deformable_conv2d(h, get("dconv.w"), get("dconv.b"), offsets)
    return ad.add(x, h)


def depthwise_residual_block(x, get, slope: float):
    h = ad.depthwise_conv2d(x, get("dwconv.w"), get("dwconv.b"), stride=1, padding=KERNEL // 2)
    h = ad.leaky_relu(h, slope)
    h = ad.conv2d(h, get("conv2.w"), get("conv2.b"), stride=1, padding=0)
    return ad.add(x, h)


_BLOCK_FNS = {
    "rb": (residual_block, "rb"),
    "drb": (deformable_residual_block, "drb"),
    "dwrb": (depthwise_residual_block, "dwrb"),
}


def residual_group(x, params: dict, prefix: str, kind: str, cfg: ModelConfig):
    """blocks -> zero-init tail conv -> skip from the group input."""
    fn, label = _BLOCK_FNS[kind]
    h = x
    for bi in range(cfg.blocks_per_group):
        pre = f"{prefix}{label}{bi}."
        h = fn(h, lambda key, pre=pre: params[pre + key], cfg.leaky_slope)
    h = ad.conv2d(
        h, params[prefix + "tail.w"], params[prefix + "tail.b"],
        stride=1, padding=KERNEL // 2,
    )
    return ad.add(x, h)


# ---------------------------------------------------------------------------
# Branches


def sen_forward(i_lr_up, params: dict, cfg: ModelConfig):
    """Spatial branch: upscaled luma [B, 1, H, W] -> maps [B, R^2, H/2^s, W/2^s]."""
    x = ad.astensor(i_lr_up)
    if x.data.ndim != 4 or x.data.shape[1] != 1:
        raise InvalidInputError(f"SEN input must be [B, 1, H, W], got {x.shape}")
    h, w = x.data.shape[2], x.data.shape[3]
    if h % 32 or w % 32 or h == 0 or w == 0:
        raise InvalidInputError(f"SEN input dims {h}x{w} must be multiples of 32")
    div = 1 << cfg.shrink_stages
    if h % div or w % div:
        raise InvalidInputError(
            f"SEN input dims {h}x{w} not divisible by 2^{cfg.shrink_stages}"
        )
    f = ad.conv2d(x, params["sen.shallow.w"], params["sen.shallow.b"],
                  stride=1, padding=KERNEL // 2)
    for gi in range(cfg.sen_num_rg):
        f = residual_group(f, params, f"sen.rg{gi}.", "rb", cfg)
    for gi in range(cfg.sen_num_drg):
        f = residual_group(f, params, f"sen.drg{gi}.", "drb", cfg)
    for si in range(cfg.shrink_stages):
        f = ad.conv2d(f, params[f"sen.shrink{si}.w"], params[f"sen.shrink{si}.b"],
                      stride=2, padding=1)
        f = ad.leaky_relu(f, cfg.leaky_slope)
    return ad.conv2d(f, params["sen.proj.w"], params["sen.proj.b"],
                     stride=1, padding=0)


def frn_forward(m_lr, params: dict, cfg: ModelConfig):
    """Frequency branch: maps [B, R^2, Hb, Wb] -> same shape, global skip."""
    m = ad.astensor(m_lr)
    r2 = cfg.region * cfg.region
    if m.data.ndim != 4 or m.data.shape[1] != r2:
        raise InvalidInputError(
            f"FRN input must be [B, {r2}, Hb, Wb], got {m.shape}"
        )
    f = ad.conv2d(m, params["frn.head.w"], params["frn.head.b"], stride=1, padding=0)
    for gi in range(cfg.frn_num_dwrg):
        f = residual_group(f, params, f"frn.dwrg{gi}.", "dwrb", cfg)
    for gi in range(cfg.frn_num_rg):
        f = residual_group(f, params, f"frn.rg{gi}.", "rb", cfg)
    f = ad.conv2d(f, params["frn.proj.w"], params["frn.proj.b"], stride=1, padding=0)
    return ad.add(m, f)


def freqnet_forward(i_lr_up, m_lr, params: dict, cfg: ModelConfig):
    """Blend both branches: w1 * SEN(I) + w2 * FRN(M)."""
    sr1 = sen_forward(i_lr_up, params, cfg)
    sr2 = frn_forward(m_lr, params, cfg)
    if sr1.data.shape != sr2.data.shape:
        raise RuntimeError(
            f"branch shape mismatch: SEN {sr1.data.shape} vs FRN {sr2.data.shape}; "
            f"shrink_stages={cfg.shrink_stages} does not align the block grid"
        )
    return ad.weighted_sum([sr1, sr2], [cfg.w1, cfg.w2])


# ---------------------------------------------------------------------------
# Checkpoints: FQW1 tensor file + JSON sidecar with the config


def _sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(path, params: dict, cfg: ModelConfig, optimizer: dict = None,
                    extra: dict = None) -> None:
    """Write params (and optional optimizer moments) plus a config sidecar.

    Optimizer moment arrays are stored in the same tensor file under
    "adam.m.<name>" / "adam.v.<name>"; scalar state goes into the sidecar.
    """
    tensors = {name: t.data for name, t in params.items()}
    sidecar = {"format": "FQW1", "model": cfg.to_dict()}
    if optimizer is not None:
        for name, (m, v) in optimizer["moments"].items():
            tensors[f"adam.m.{name}"] = m
            tensors[f"adam.v.{name}"] = v
        sidecar["optimizer"] = {"step": optimizer["step"]}
    if extra:
        sidecar.update(extra)
    ad.save_tensors(path, tensors)
    with open(_sidecar_path(path), "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")


@dataclass
class CheckpointBundle:
    params: dict
    cfg: ModelConfig
    sidecar: dict
    adam_moments: dict
    adam_step: int


def load_checkpoint(path, dtype=np.float64) -> CheckpointBundle:
    side_path = _sidecar_path(path)
    if not Path(path).is_file() or not side_path.is_file():
        raise InvalidInputError(f"checkpoint {path} (or its .json sidecar) missing")
    with open(side_path) as fh:
        sidecar = json.load(fh)
    if "model" not in sidecar:
        raise InvalidInputError(f"{side_path}: sidecar lacks a model config")
    cfg = ModelConfig.from_dict(sidecar["model"])
    tensors = ad.load_tensors(path)

    expected = parameter_shapes(cfg)
    params = {}
    for name, shape in expected.items():
        if name not in tensors:
            raise InvalidInputError(f"{path}: missing tensor {name}")
        arr = tensors[name]
        if arr.shape != shape:
            raise InvalidInputError(
                f"{path}: tensor {name} has shape {arr.shape}, config implies {shape}"
            )
        params[name] = ad.Tensor(arr.astype(dtype), requires_grad=True)

    moments = {}
    step = int(sidecar.get("optimizer", {}).get("step", 0))
    for name in expected:
        mk, vk = f"adam.m.{name}", f"adam.v.{name}"
        if mk in tensors and vk in tensors:
            moments[name] = (
                tensors[mk].astype(dtype),
                tensors[vk].astype(dtype),
            )
    return CheckpointBundle(
        params=params, cfg=cfg, sidecar=sidecar, adam_moments=moments, adam_step=step
    )
