"""Patch preparation, ADAM with cosine restarts, the training loop, and
evaluation.

Dataset flow: HR images are cropped at 32-aligned offsets, each crop is
bicubic-degraded by 1/4 to its LR twin, and the model learns to map the
upscaled-LR representation onto the HR frequency maps. Channel statistics
are computed once over the corpus's upscaled-LR maps and shared between the
LR and HR sides, so the identity mapping is meaningful in normalized space.
"""

import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .color import luma_plane
from .dct import (
    ChannelStats,
    FreqMaps,
    compute_channel_stats,
    normalize_maps,
    plane_to_blocks,
    reform_to_maps,
    save_stats,
)
from .errors import InvalidInputError, StateError, TrainingDivergedError
from .images import center_crop_multiple
from .metrics import (
    CharbonnierParams,
    WeightProfile,
    freq_loss,
    freq_loss_graph,
    frm,
    psnr_y,
    table1_weights,
)
from .model import ModelConfig, freqnet_forward, init_params, save_checkpoint
from .resample import bicubic_resize, resize_image

log = logging.getLogger(__name__)

BLOCK = 32


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise InvalidInputError("adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise InvalidInputError("adam eps must be positive")


@dataclass
class CosLrConfig:
    eta_max: float = 1e-4
    eta_min: float = 1e-7
    period_epochs: int = 30

    def __post_init__(self):
        if self.eta_min < 0 or self.eta_max < self.eta_min:
            raise InvalidInputError("need eta_max >= eta_min >= 0")
        if self.period_epochs < 1:
            raise InvalidInputError("period_epochs must be >= 1")


@dataclass
class TrainConfig:
    hr_patch: int = 64
    scale: int = 4
    batch_size: int = 8
    iterations: int = 500
    patches_per_image: int = 4
    seed: int = 0
    adam: AdamConfig = field(default_factory=AdamConfig)
    coslr: CosLrConfig = field(default_factory=CosLrConfig)
    epsilon: float = 1e-3
    weight_profile: str = "table1"
    precision: str = "float32"
    grad_clip_norm: float = None
    log_interval: int = 10
    checkpoint_interval: int = 100

    def __post_init__(self):
        if self.hr_patch % BLOCK:
            raise InvalidInputError(f"hr_patch must be a multiple of {BLOCK}")
        if self.scale < 1 or self.hr_patch % self.scale:
            raise InvalidInputError("scale must divide hr_patch")
        if min(self.batch_size, self.iterations, self.patches_per_image) < 1:
            raise InvalidInputError(
                "batch_size, iterations, patches_per_image must be >= 1"
            )
        if self.epsilon <= 0:
            raise InvalidInputError("charbonnier epsilon must be positive")
        if self.precision not in ("float32", "float64"):
            raise InvalidInputError("precision must be float32 or float64")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise InvalidInputError("grad_clip_norm must be positive when set")
        if min(self.log_interval, self.checkpoint_interval) < 1:
            raise InvalidInputError("intervals must be >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise InvalidInputError(f"unknown train config fields: {sorted(extra)}")
        if "adam" in doc:
            doc["adam"] = AdamConfig(**doc["adam"])
        if "coslr" in doc:
            doc["coslr"] = CosLrConfig(**doc["coslr"])
        return cls(**doc)


def resolve_weight_profile(name: str, r: int) -> WeightProfile:
    if name == "table1":
        return table1_weights(r)
    if name == "uniform":
        return WeightProfile(betas=np.ones(r * r), profile_id="uniform")
    raise InvalidInputError(f"unknown weight profile {name!r}")


# ---------------------------------------------------------------------------
# Dataset


@dataclass
class PatchPair:
    """One aligned LR/HR crop; hr_offset = scale * lr_offset exactly."""

    lr: np.ndarray
    hr: np.ndarray
    source_id: str
    hr_offset: tuple


def make_patch_pairs(hr_images, cfg: TrainConfig, seed: int) -> list:
    """Crop HR patches at uniform random 32-aligned offsets and degrade each
    to its LR twin. Deterministic given the seed; too-small images are
    skipped with a warning."""
    rng = np.random.default_rng(seed)
    pairs = []
    for source_id, img in hr_images:
        arr = np.asarray(img)
        h, w = arr.shape[0], arr.shape[1]
        if h < cfg.hr_patch or w < cfg.hr_patch:
            log.warning(
                "skipping %s: %dx%d smaller than the %d patch size",
                source_id, h, w, cfg.hr_patch,
            )
            continue
        ny = (h - cfg.hr_patch) // BLOCK + 1
        nx = (w - cfg.hr_patch) // BLOCK + 1
        for _ in range(cfg.patches_per_image):
            oy = int(rng.integers(ny)) * BLOCK
            ox = int(rng.integers(nx)) * BLOCK
            hr = arr[oy : oy + cfg.hr_patch, ox : ox + cfg.hr_patch].copy()
            lr = resize_image(hr, 1.0 / cfg.scale)
            pairs.append(PatchPair(lr=lr, hr=hr, source_id=source_id,
                                   hr_offset=(oy, ox)))
    return pairs


@dataclass
class PreparedSample:
    i_lr_up: np.ndarray  # [1, 1, H, W] zero-centered upscaled-LR luma
    m_lr: FreqMaps       # normalized maps of the upscaled-LR luma
    m_hr: FreqMaps       # normalized maps of the HR luma
    lr_fill: np.ndarray  # full LR-up block grid (the stage-1 fill source)
    hr_fill: np.ndarray


def prepare_sample(pair: PatchPair, stats: ChannelStats) -> PreparedSample:
    """Turn one patch pair into model-ready arrays (all float64 codec math)."""
    hr_h, hr_w = pair.hr.shape[0], pair.hr.shape[1]
    lr_h = pair.lr.shape[0]
    if lr_h == 0 or hr_h % lr_h:
        raise InvalidInputError(
            f"LR/HR sizes {pair.lr.shape} vs {pair.hr.shape} are not an "
            "integer scale apart"
        )
    scale = hr_h // lr_h
    y_up = bicubic_resize(luma_plane(pair.lr), float(scale))
    if y_up.shape != (hr_h, hr_w):
        raise InvalidInputError(
            f"upscaled LR {y_up.shape} does not match HR {(hr_h, hr_w)}"
        )
    lr_grid = plane_to_blocks(y_up)
    hr_grid = plane_to_blocks(luma_plane(pair.hr))
    m_lr = normalize_maps(reform_to_maps(lr_grid, stats.r), stats)
    m_hr = normalize_maps(reform_to_maps(hr_grid, stats.r), stats)
    return PreparedSample(
        i_lr_up=y_up[None, None],
        m_lr=m_lr,
        m_hr=m_hr,
        lr_fill=lr_grid,
        hr_fill=hr_grid,
    )


def corpus_stats(hr_images, scale: int = 4, r: int = 10) -> ChannelStats:
    """Channel statistics over the corpus's upscaled-LR maps (shared for the
    HR side). Images are center-cropped to 32-multiples first."""
    all_maps = []
    for source_id, img in hr_images:
        crop = center_crop_multiple(np.asarray(img), BLOCK)
        lr = resize_image(crop, 1.0 / scale)
        y_up = bicubic_resize(luma_plane(lr), float(scale))
        all_maps.append(reform_to_maps(plane_to_blocks(y_up), r))
    if not all_maps:
        raise InvalidInputError("cannot compute stats over an empty corpus")
    return compute_channel_stats(all_maps)


# ---------------------------------------------------------------------------
# Optimization


def cos_lr(t: int, period: int, eta_max: float, eta_min: float) -> float:
    """Cosine decay from eta_max (t = 0) to eta_min (t = period)."""
    if period < 1:
        raise InvalidInputError("period must be >= 1")
    if not 0 <= t <= period:
        raise InvalidInputError(f"epoch-in-period {t} outside [0, {period}]")
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + math.cos(math.pi * t / period))


@dataclass
class OptimizerState:
    moments: dict = field(default_factory=dict)  # name -> (m, v)
    step: int = 0


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float,
              cfg: AdamConfig, grad_clip_norm: float = None) -> OptimizerState:
    """One bias-corrected ADAM update, in place, over sorted parameter names.

    lr = 0 is allowed (a frozen step that still advances moments), so a
    zero-lr schedule degenerates to a no-op trainer rather than an error.
    """
    if lr < 0:
        raise InvalidInputError("learning rate must be non-negative")
    names = sorted(params)
    step = state.step + 1
    for name in names:
        g = grads.get(name)
        if g is None:
            raise StateError(f"no gradient for parameter {name}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(
                f"non-finite gradient in {name} at step {step}"
            )

    if grad_clip_norm is not None:
        total = math.sqrt(sum(float((grads[n] ** 2).sum()) for n in names))
        if total > grad_clip_norm:
            factor = grad_clip_norm / total
            grads = {n: grads[n] * factor for n in names}

    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name in names:
        p = params[name]
        g = grads[name]
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state.moments[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.moments[name] = (m, v)
        update = lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = p.data - update.astype(p.data.dtype)
    state.step = step
    return state


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    stats: ChannelStats
    baseline_l_freq: float  # dataset loss of the identity mapping M_LR -> M_HR
    first_l_freq: float
    final_l_freq: float
    iterations: int


def _dataset_identity_loss(prepared, profile, params_c) -> float:
    vals = [freq_loss(s.m_lr, s.m_hr, profile, params_c) for s in prepared]
    return float(np.mean(vals))


def train(hr_images, model_cfg: ModelConfig, cfg: TrainConfig, out_dir,
          stats: ChannelStats = None) -> TrainResult:
    """Run the full optimization and leave a checkpoint, an NDJSON metrics
    log, and the stats file in out_dir. Deterministic given cfg.seed."""
    images = list(hr_images)
    if not images:
        raise InvalidInputError("training needs at least one HR image")
    if stats is None:
        stats = corpus_stats(images, cfg.scale, model_cfg.region)
    if stats.r != model_cfg.region:
        raise InvalidInputError(
            f"stats are for R={stats.r}, model expects R={model_cfg.region}"
        )
    profile = resolve_weight_profile(cfg.weight_profile, model_cfg.region)
    char = CharbonnierParams(cfg.epsilon)

    pairs = make_patch_pairs(images, cfg, cfg.seed)
    if not pairs:
        raise InvalidInputError("no usable training patches (all images too small?)")
    prepared = [prepare_sample(p, stats) for p in pairs]
    baseline = _dataset_identity_loss(prepared, profile, char)

    dtype = cfg.dtype
    params = init_params(model_cfg, cfg.seed, dtype=dtype)
    state = OptimizerState()
    betas = profile.betas

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_stats(out_dir / "stats.json", stats)
    log_path = out_dir / "train_log.ndjson"
    final_path = out_dir / "checkpoint_final.fqw"

    def write_checkpoint(path, iteration):
        save_checkpoint(
            path, params, model_cfg,
            optimizer={"moments": state.moments, "step": state.step},
            extra={
                "train": cfg.to_dict(),
                "stats": {
                    "r": stats.r,
                    "means": stats.means.tolist(),
                    "stds": stats.stds.tolist(),
                    "samples": stats.samples,
                },
                "baseline_l_freq": baseline,
                "iteration": iteration,
            },
        )

    n = len(prepared)
    iters_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    order_rng = np.random.default_rng([cfg.seed, 1])
    period = cfg.coslr.period_epochs
    perm = None
    first_loss = None
    last_loss = None

    with open(log_path, "w") as fh:
        for i in range(cfg.iterations):
            epoch, j = divmod(i, iters_per_epoch)
            if j == 0:
                perm = order_rng.permutation(n)
            idxs = perm[j * cfg.batch_size : (j + 1) * cfg.batch_size]
            # Restart the cosine schedule at every period boundary.
            lr = cos_lr(epoch % period, period, cfg.coslr.eta_max, cfg.coslr.eta_min)

            x = np.concatenate([prepared[k].i_lr_up for k in idxs]).astype(dtype)
            m_lr = np.stack([prepared[k].m_lr.data for k in idxs]).astype(dtype)
            m_hr = np.stack([prepared[k].m_hr.data for k in idxs]).astype(dtype)

            for t in params.values():
                t.zero_grad()
            out = freqnet_forward(ad.Tensor(x), ad.Tensor(m_lr), params, model_cfg)
            loss = freq_loss_graph(out, m_hr, betas, cfg.epsilon)
            l_val = float(loss.data)
            if not math.isfinite(l_val):
                raise TrainingDivergedError(
                    f"loss {l_val} at iteration {i + 1}; last checkpoint kept"
                )
            if first_loss is None:
                first_loss = l_val
            last_loss = l_val

            ad.backward(loss)
            grads = {name: t.grad for name, t in params.items()}
            adam_step(params, grads, state, lr, cfg.adam, cfg.grad_clip_norm)

            if (i + 1) % cfg.log_interval == 0 or i == 0 or i + 1 == cfg.iterations:
                fh.write(json.dumps(
                    {"iter": i + 1, "lr": lr, "l_freq": l_val, "frm": frm(l_val)}
                ) + "\n")
            if (i + 1) % cfg.checkpoint_interval == 0 and i + 1 != cfg.iterations:
                write_checkpoint(out_dir / f"checkpoint_iter{i + 1:06d}.fqw", i + 1)

    write_checkpoint(final_path, cfg.iterations)
    return TrainResult(
        checkpoint_path=final_path,
        log_path=log_path,
        stats=stats,
        baseline_l_freq=baseline,
        first_l_freq=first_loss,
        final_l_freq=last_loss,
        iterations=cfg.iterations,
    )


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(eval_images, params: dict, model_cfg: ModelConfig,
             stats: ChannelStats, epsilon: float = 1e-3,
             weight_profile: str = "table1", scale: int = 4) -> dict:
    """Full-pipeline evaluation: degrade, super-resolve, score.

    Returns one record per image plus an aggregate; PSNR-Y is measured
    against the 32-aligned center crop of each source image.
    """
    from .infer import super_resolve  # local import to avoid a cycle

    if stats.r != model_cfg.region:
        raise InvalidInputError(
            f"stats are for R={stats.r}, model expects R={model_cfg.region}"
        )
    profile = resolve_weight_profile(weight_profile, model_cfg.region)
    char = CharbonnierParams(epsilon)
    records = []
    for source_id, img in eval_images:
        hr = center_crop_multiple(np.asarray(img), BLOCK)
        lr = resize_image(hr, 1.0 / scale)
        result = super_resolve(lr, params, model_cfg, stats, scale=scale)
        m_hr = normalize_maps(
            reform_to_maps(plane_to_blocks(luma_plane(hr)), stats.r), stats
        )
        l_val = freq_loss(result.maps_normalized, m_hr, profile, char)
        records.append({
            "image": source_id,
            "psnr_y_db": psnr_y(result.image, hr),
            "l_freq": l_val,
            "frm": frm(l_val),
        })
    if not records:
        raise InvalidInputError("evaluation needs at least one image")
    agg = {
        "count": len(records),
        "psnr_y_db": float(np.mean([r["psnr_y_db"] for r in records])),
        "l_freq": float(np.mean([r["l_freq"] for r in records])),
        "frm": float(np.mean([r["frm"] for r in records])),
    }
    return {
        "images": records,
        "aggregate": agg,
        "epsilon": epsilon,
        "weight_profile_id": profile.profile_id,
        "r": stats.r,
        "scale": scale,
    }
