"""Self-supervised feature enhancement.

A content-aware reassembly upsampler lifts low-resolution extractor
features to the image grid; a learned normalized-kernel depthwise
downsampler maps enhanced features back down; an adaptive per-position
uncertainty reweights the multiview consistency loss

    L = (1/n) * sum_views mean_positions[ ||LF - LF'||^2 / (2 s^2) + log s ]

which is minimized at s* = ||r|| for a fixed residual r. Training needs
no labels: every target is the frozen extractor's own output under a
different view of the same tile.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .augment import apply_feature_diff, make_views
from .features import FeatureMap, HIGH, LOW

_CLAMP_LO = 1e-3
_CLAMP_HI = 1e3
_ENC_KERNEL = 3   # kernel-prediction conv size


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class CarafeStage:
    factor: int
    k_up: int
    comp_w: nm.ParamTensor
    comp_b: nm.ParamTensor
    enc_w: nm.ParamTensor
    enc_b: nm.ParamTensor


class EnhancerParams:
    """Learnable state of the enhancement module: per-stage reassembly
    kernel predictors, the shared downsampler kernel logits, and the
    uncertainty net (1x1 conv + bias)."""

    def __init__(self, channels: int, factors: tuple[int, ...], k_up: int,
                 c_mid: int, stages: list[CarafeStage],
                 down_logits: nm.ParamTensor, unc_w: nm.ParamTensor,
                 unc_b: nm.ParamTensor):
        self.channels = channels
        self.factors = tuple(factors)
        self.k_up = k_up
        self.c_mid = c_mid
        self.stages = stages
        self.down_logits = down_logits
        self.unc_w = unc_w
        self.unc_b = unc_b

    @property
    def total_factor(self) -> int:
        return int(np.prod(self.factors))

    @property
    def k_down(self) -> int:
        return self.total_factor + 1

    @property
    def dtype(self):
        return self.down_logits.values.dtype

    @classmethod
    def initialize(cls, channels: int, factors: tuple[int, ...] = (7, 2),
                   k_up: int = 5, c_mid: int = 32, seed: int = 0,
                   dtype=np.float32) -> "EnhancerParams":
        rng = np.random.default_rng(seed)
        stages = []
        for i, f in enumerate(factors):
            n_logits = f * f * k_up * k_up
            stages.append(CarafeStage(
                factor=f, k_up=k_up,
                comp_w=nm.init_conv_kernel(rng, f"stage{i}.comp.w", c_mid, channels, 1, dtype),
                comp_b=nm.init_bias(f"stage{i}.comp.b", c_mid, dtype),
                enc_w=nm.init_conv_kernel(rng, f"stage{i}.enc.w", n_logits, c_mid,
                                          _ENC_KERNEL, dtype),
                enc_b=nm.init_bias(f"stage{i}.enc.b", n_logits, dtype),
            ))
        total = int(np.prod(factors))
        k_down = total + 1
        down_logits = nm.ParamTensor("down.logits", np.zeros((k_down, k_down), dtype=dtype))
        unc_w = nm.ParamTensor("unc.w", np.zeros((1, channels, 1, 1), dtype=dtype))
        unc_b = nm.ParamTensor("unc.b", np.zeros(1, dtype=dtype))
        return cls(channels, tuple(factors), k_up, c_mid, stages,
                   down_logits, unc_w, unc_b)

    def all_params(self) -> list[nm.ParamTensor]:
        out = []
        for s in self.stages:
            out.extend([s.comp_w, s.comp_b, s.enc_w, s.enc_b])
        out.extend([self.down_logits, self.unc_w, self.unc_b])
        return out

    def save(self, path) -> None:
        meta = {"channels": self.channels, "factors": list(self.factors),
                "k_up": self.k_up, "c_mid": self.c_mid}
        nm.save_params(path, self.all_params(), meta=meta)

    @classmethod
    def load(cls, path) -> "EnhancerParams":
        arrays, meta = nm.load_params_full(path)
        for key in ("channels", "factors", "k_up", "c_mid"):
            if key not in meta:
                raise ValueError(f"enhancer parameter file missing meta key {key!r}")
        params = cls.initialize(meta["channels"], tuple(meta["factors"]),
                                meta["k_up"], meta["c_mid"])
        for p in params.all_params():
            if p.name not in arrays:
                raise ValueError(f"parameter {p.name!r} missing from file")
            if arrays[p.name].shape != p.values.shape:
                raise ValueError(
                    f"parameter {p.name!r} shape {arrays[p.name].shape} "
                    f"!= expected {p.values.shape}")
            p.values = arrays[p.name]
            p.grad = np.zeros_like(p.values)
        return params


@dataclass
class UncertaintyMap:
    """Strictly positive per-position uncertainty over the low-res grid."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if np.any(self.values <= 0):
            raise ValueError("uncertainty must be strictly positive")


# ---------------------------------------------------------------------------
# Differentiable cores
# ---------------------------------------------------------------------------


def upsample_diff(params: EnhancerParams, x: nm.DiffArray) -> nm.DiffArray:
    for stage in params.stages:
        h, w = x.values.shape[1:]
        comp = nm.conv2d(x, stage.comp_w, bias=stage.comp_b)
        logits = nm.conv2d(comp, stage.enc_w, bias=stage.enc_b,
                           padding=_ENC_KERNEL // 2)
        logits = nm.reshape(logits, (stage.factor ** 2, stage.k_up ** 2, h, w))
        weights = nm.softmax(logits, axis=1)
        x = nm.carafe_reassemble(x, weights, stage.factor, stage.k_up)
    return x


def down_kernel_diff(params: EnhancerParams) -> nm.DiffArray:
    flat = nm.reshape(params.down_logits, (1, params.k_down * params.k_down))
    kern = nm.softmax(flat, axis=1)
    return nm.reshape(kern, (params.k_down, params.k_down))


def downsample_diff(params: EnhancerParams, x: nm.DiffArray) -> nm.DiffArray:
    total = params.total_factor
    kern = down_kernel_diff(params)
    return nm.depthwise_conv(x, kern, stride=total, padding=params.k_down // 2,
                             pad_mode="edge")


def uncertainty_diff(params: EnhancerParams, lf: nm.DiffArray) -> nm.DiffArray:
    u = nm.conv2d(lf, params.unc_w, bias=params.unc_b)
    return nm.clamp(nm.exp(u), _CLAMP_LO, _CLAMP_HI)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def upsample(params: EnhancerParams, lf: FeatureMap) -> FeatureMap:
    """Lift a low-resolution feature map by the configured total factor.

    Each output cell is a convex combination (softmax weights) of a
    k_up x k_up neighborhood of its source cell, with weights predicted
    from the feature content.
    """
    if lf.resolution != LOW:
        raise ValueError(f"upsample expects a low-resolution map, got {lf.resolution!r}")
    if lf.channels != params.channels:
        raise ValueError(
            f"feature channels {lf.channels} != enhancer channels {params.channels}")
    total = params.total_factor
    if lf.stride_px % total != 0:
        raise ValueError(
            f"patch stride {lf.stride_px} not divisible by total factor {total}")
    with nm.no_grad():
        out = upsample_diff(params, nm.constant(lf.values.astype(params.dtype, copy=False)))
    return FeatureMap(out.values, resolution=HIGH, stride_px=lf.stride_px // total)


def downsample(params: EnhancerParams, hf: FeatureMap) -> FeatureMap:
    """Map enhanced features back to the extractor grid with the shared
    softmax-normalized blur kernel (stride = total factor)."""
    total = params.total_factor
    h, w = hf.spatial
    if h % total or w % total:
        raise ValueError(f"feature size ({h},{w}) not divisible by factor {total}")
    with nm.no_grad():
        out = downsample_diff(params, nm.constant(hf.values.astype(params.dtype, copy=False)))
    return FeatureMap(out.values, resolution=LOW, stride_px=hf.stride_px * total)


def down_kernel(params: EnhancerParams) -> np.ndarray:
    """The normalized downsampler kernel (non-negative, sums to 1)."""
    with nm.no_grad():
        return down_kernel_diff(params).values


def reassembly_weights(params: EnhancerParams, lf: FeatureMap) -> list[np.ndarray]:
    """Per-stage reassembly weights, shape (factor^2, k_up^2, h, w), as the
    upsampler would predict them (softmax-normalized)."""
    out = []
    with nm.no_grad():
        x = nm.constant(lf.values.astype(params.dtype, copy=False))
        for stage in params.stages:
            h, w = x.values.shape[1:]
            comp = nm.conv2d(x, stage.comp_w, bias=stage.comp_b)
            logits = nm.conv2d(comp, stage.enc_w, bias=stage.enc_b,
                               padding=_ENC_KERNEL // 2)
            logits = nm.reshape(logits, (stage.factor ** 2, stage.k_up ** 2, h, w))
            weights = nm.softmax(logits, axis=1)
            out.append(weights.values)
            x = nm.carafe_reassemble(x, weights, stage.factor, stage.k_up)
    return out


def uncertainty(params: EnhancerParams, lf: FeatureMap) -> UncertaintyMap:
    """Per-position uncertainty s = exp(linear(lf)) clamped to [1e-3, 1e3]."""
    with nm.no_grad():
        s = uncertainty_diff(params, nm.constant(lf.values.astype(params.dtype, copy=False)))
    return UncertaintyMap(s.values[0])


def _lift_values(x, dtype) -> nm.DiffArray:
    if isinstance(x, nm.DiffArray):
        return x
    if isinstance(x, FeatureMap):
        x = x.values
    if isinstance(x, UncertaintyMap):
        x = x.values[None]
    return nm.constant(np.asarray(x, dtype=dtype))


def loss_rec(lf_views, lf_recon, s_maps) -> nm.DiffArray:
    """Uncertainty-weighted multiview consistency loss.

    Per view: mean over positions of ||LF - LF'||^2 (channel vector norm)
    / (2 s^2) + log s, averaged over views. Differentiable through LF'
    and s when they are graph nodes.
    """
    if not (len(lf_views) == len(lf_recon) == len(s_maps)) or len(lf_views) == 0:
        raise ValueError(
            f"view lists must be equal non-zero length, got "
            f"{len(lf_views)}/{len(lf_recon)}/{len(s_maps)}")
    total = None
    for target, recon, s in zip(lf_views, lf_recon, s_maps):
        recon = _lift_values(recon, np.float64)
        target = _lift_values(target, recon.values.dtype)
        s = _lift_values(s, recon.values.dtype)
        if s.values.ndim == 2:
            s = nm.reshape(s, (1,) + s.values.shape)
        if target.values.shape != recon.values.shape:
            raise ValueError(
                f"view shape mismatch: {target.values.shape} vs {recon.values.shape}")
        sq = nm.square(nm.sub(target, recon))
        csum = nm.sum_axis(sq, 0, keepdims=True)
        weighted = nm.mul(csum, nm.scale(nm.pow_const(s, -2.0), 0.5))
        term = nm.mean_all(nm.add(weighted, nm.log(s)))
        total = term if total is None else nm.add(total, term)
    return nm.scale(total, 1.0 / len(lf_views))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class EnhancerTrainConfig:
    steps: int = 400
    n_views: int = 4
    lr: float = 1e-2
    momentum: float = 0.9
    clip_grad: float | None = 1.0
    seed: int = 0
    crop_px: int | None = 140      # image-space training window, stride-aligned
    factors: tuple[int, ...] = (7, 2)
    k_up: int = 5
    c_mid: int = 32
    dtype: str = "float32"
    cosine_decay: bool = False


@dataclass
class TrainLogRow:
    step: int
    loss: float
    s_mean: float

    def as_list(self) -> list:
        return [self.step, self.loss, self.s_mean]


def _aligned_crop(rng: np.random.Generator, tile: np.ndarray, crop_px: int,
                  stride: int) -> np.ndarray:
    h, w = tile.shape[-2:]
    crop_px = min(crop_px, h, w)
    crop_px -= crop_px % stride
    r0 = int(rng.integers(0, (h - crop_px) // stride + 1)) * stride
    c0 = int(rng.integers(0, (w - crop_px) // stride + 1)) * stride
    return tile[..., r0:r0 + crop_px, c0:c0 + crop_px]


def train_enhancer(tiles: list[np.ndarray], extractor,
                   config: EnhancerTrainConfig
                   ) -> tuple[EnhancerParams, list[TrainLogRow]]:
    """Fit the enhancer by multiview self-consistency on raw RGB tiles.

    The extractor is frozen: its outputs enter the graph as constants.
    Deterministic under config.seed.
    """
    if not tiles:
        raise ValueError("need at least one training tile")
    dtype = np.dtype(config.dtype).type
    rng = np.random.default_rng(config.seed)
    params = EnhancerParams.initialize(
        extractor.channels, config.factors, config.k_up, config.c_mid,
        seed=int(rng.integers(2 ** 31)), dtype=dtype)
    opt = nm.SGD(params.all_params(), lr=config.lr, momentum=config.momentum,
                 clip_grad=config.clip_grad)
    stride = extractor.stride
    hf_stride = stride // params.total_factor
    if stride % params.total_factor:
        raise ValueError(
            f"extractor stride {stride} not divisible by total factor "
            f"{params.total_factor}")

    log: list[TrainLogRow] = []
    for step in range(config.steps):
        tile = tiles[int(rng.integers(len(tiles)))]
        if config.crop_px:
            tile = _aligned_crop(rng, tile, config.crop_px, stride)
        views = make_views(tile, config.n_views, seed=int(rng.integers(2 ** 31)),
                           stride=stride)
        lf_maps = [extractor.extract(v) for v in views.tiles]
        targets = [nm.constant(m.values.astype(dtype)) for m in lf_maps]

        hf = upsample_diff(params, targets[0])
        recons, uncertainties = [], []
        for t, target in zip(views.transforms, targets):
            hf_t = apply_feature_diff(t, hf, stride=hf_stride)
            recons.append(downsample_diff(params, hf_t))
            uncertainties.append(uncertainty_diff(params, target))

        loss = loss_rec(targets, recons, uncertainties)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise RuntimeError(f"non-finite loss at step {step}")
        nm.backward(loss)
        lr = nm.cosine_lr(step, config.steps, config.lr) if config.cosine_decay else None
        opt.step(lr=lr)
        s_mean = float(np.mean([u.values.mean() for u in uncertainties]))
        log.append(TrainLogRow(step, loss_val, s_mean))
    return params, log
