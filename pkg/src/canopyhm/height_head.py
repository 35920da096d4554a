"""Lightweight convolutional tree height estimator.

Two 3x3 conv layers (each with per-channel normalization and ReLU), a 1x1
projection, and a sigmoid scaled by h_max: predictions are meters in
[0, h_max] on the same grid as the enhanced features.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .features import FeatureMap, HIGH
from .raster import RasterGrid

logger = logging.getLogger(__name__)


class HeadParams:
    def __init__(self, conv1_w, bn1_gamma, bn1_beta, bn1_state,
                 conv2_w, bn2_gamma, bn2_beta, bn2_state,
                 conv3_w, conv3_b, h_max: float):
        self.conv1_w = conv1_w
        self.bn1_gamma, self.bn1_beta, self.bn1_state = bn1_gamma, bn1_beta, bn1_state
        self.conv2_w = conv2_w
        self.bn2_gamma, self.bn2_beta, self.bn2_state = bn2_gamma, bn2_beta, bn2_state
        self.conv3_w, self.conv3_b = conv3_w, conv3_b
        if h_max <= 0:
            raise ValueError(f"h_max must be positive, got {h_max}")
        self.h_max = float(h_max)

    @property
    def in_channels(self) -> int:
        return self.conv1_w.values.shape[1]

    @classmethod
    def initialize(cls, in_channels: int, hidden1: int = 64, hidden2: int = 32,
                   h_max: float = 30.0, seed: int = 0, dtype=np.float32) -> "HeadParams":
        rng = np.random.default_rng(seed)
        return cls(
            conv1_w=nm.init_conv_kernel(rng, "conv1.w", hidden1, in_channels, 3, dtype),
            bn1_gamma=nm.ParamTensor("bn1.gamma", np.ones(hidden1, dtype=dtype)),
            bn1_beta=nm.ParamTensor("bn1.beta", np.zeros(hidden1, dtype=dtype)),
            bn1_state=nm.BatchNormState(hidden1),
            conv2_w=nm.init_conv_kernel(rng, "conv2.w", hidden2, hidden1, 3, dtype),
            bn2_gamma=nm.ParamTensor("bn2.gamma", np.ones(hidden2, dtype=dtype)),
            bn2_beta=nm.ParamTensor("bn2.beta", np.zeros(hidden2, dtype=dtype)),
            bn2_state=nm.BatchNormState(hidden2),
            conv3_w=nm.init_conv_kernel(rng, "conv3.w", 1, hidden2, 1, dtype),
            conv3_b=nm.init_bias("conv3.b", 1, dtype),
            h_max=h_max,
        )

    def all_params(self) -> list[nm.ParamTensor]:
        return [self.conv1_w, self.bn1_gamma, self.bn1_beta,
                self.conv2_w, self.bn2_gamma, self.bn2_beta,
                self.conv3_w, self.conv3_b]

    def save(self, path) -> None:
        entries = [(p.name, p.values) for p in self.all_params()]
        entries += [
            ("bn1.running_mean", self.bn1_state.running_mean),
            ("bn1.running_var", self.bn1_state.running_var),
            ("bn2.running_mean", self.bn2_state.running_mean),
            ("bn2.running_var", self.bn2_state.running_var),
        ]
        nm.save_params(path, entries, meta={"h_max": self.h_max,
                                            "in_channels": self.in_channels})

    @classmethod
    def load(cls, path) -> "HeadParams":
        arrays, meta = nm.load_params_full(path)
        if "h_max" not in meta:
            raise ValueError("head parameter file missing meta key 'h_max'")
        hidden1 = arrays["conv1.w"].shape[0]
        hidden2 = arrays["conv2.w"].shape[0]
        params = cls.initialize(arrays["conv1.w"].shape[1], hidden1, hidden2,
                                h_max=meta["h_max"])
        for p in params.all_params():
            p.values = arrays[p.name]
            p.grad = np.zeros_like(p.values)
        params.bn1_state.running_mean = arrays["bn1.running_mean"]
        params.bn1_state.running_var = arrays["bn1.running_var"]
        params.bn2_state.running_mean = arrays["bn2.running_mean"]
        params.bn2_state.running_var = arrays["bn2.running_var"]
        return params


def head_forward_diff(params: HeadParams, x: nm.DiffArray,
                      training: bool) -> nm.DiffArray:
    """Sigmoid-scale output in (0, 1): sigmoid(conv1x1(relu(norm(conv3x3(
    relu(norm(conv3x3(x)))))))).

    The k=3 convs use padding 1 (same grid as the features) with edge
    replication so constant fields stay constant up to the border.
    """
    if x.values.shape[0] != params.in_channels:
        raise ValueError(
            f"feature channels {x.values.shape[0]} != head input {params.in_channels}")
    h = nm.conv2d(x, params.conv1_w, padding=1, pad_mode="edge")
    h = nm.relu(nm.batchnorm2d(h, params.bn1_gamma, params.bn1_beta,
                               params.bn1_state, training=training))
    h = nm.conv2d(h, params.conv2_w, padding=1, pad_mode="edge")
    h = nm.relu(nm.batchnorm2d(h, params.bn2_gamma, params.bn2_beta,
                               params.bn2_state, training=training))
    h = nm.conv2d(h, params.conv3_w, bias=params.conv3_b)
    return nm.sigmoid(h)


def predict_height(params: HeadParams, hf: FeatureMap, cell_size: float = 1.0,
                   origin: tuple[float, float] = (0.0, 0.0),
                   nodata: float = -9999.0) -> RasterGrid:
    """Predict a CHM (meters, in [0, h_max]) on the enhanced-feature grid."""
    if hf.resolution != HIGH:
        raise ValueError(f"predict_height expects enhanced features, got {hf.resolution!r}")
    dtype = params.conv1_w.values.dtype
    with nm.no_grad():
        sig = head_forward_diff(params, nm.constant(hf.values.astype(dtype, copy=False)),
                                training=False)
    return RasterGrid(sig.values[0] * params.h_max, cell_size=cell_size,
                      origin=origin, nodata=nodata)


# ---------------------------------------------------------------------------
# Supervised training
# ---------------------------------------------------------------------------


@dataclass
class HeadTrainConfig:
    epochs: int = 30
    lr: float = 1e-2
    momentum: float = 0.9
    seed: int = 0
    crop_px: int | None = 256
    crops_per_tile: int = 2
    cosine_decay: bool = False


def masked_head_loss(params: HeadParams, x: nm.DiffArray, target: np.ndarray,
                     mask: np.ndarray, training: bool = True) -> nm.DiffArray:
    """Masked MSE between the sigmoid output and the h_max-scaled target.

    Masked cells contribute exactly zero gradient (residuals are multiplied
    by the 0/1 mask before reduction).
    """
    sig = head_forward_diff(params, x, training=training)
    diff = nm.sub(sig, nm.constant(target[None].astype(sig.values.dtype)))
    sq = nm.mul(nm.square(diff), nm.constant(mask[None].astype(sig.values.dtype)))
    n_valid = float(mask.sum())
    return nm.scale(nm.sum_all(sq), 1.0 / n_valid)


def train_head(params: HeadParams, pairs: list[tuple[FeatureMap, RasterGrid]],
               config: HeadTrainConfig) -> tuple[HeadParams, list[tuple[int, float]]]:
    """Fit the head on (enhanced features, reference CHM) pairs.

    References are meters; cells equal to the raster nodata are masked out.
    References above h_max are clamped with a warning. Deterministic under
    config.seed.
    """
    dtype = params.conv1_w.values.dtype
    opt = nm.SGD(params.all_params(), lr=config.lr, momentum=config.momentum)
    rng = np.random.default_rng(config.seed)

    prepared = []
    for hf, ref in pairs:
        mask = ref.valid_mask()
        if not mask.any():
            logger.warning("reference tile fully nodata, skipped")
            continue
        target = np.where(mask, ref.values, 0.0)
        n_over = int((target > params.h_max).sum())
        if n_over:
            logger.warning("clamping %d reference cells above h_max=%.1f m",
                           n_over, params.h_max)
            target = np.minimum(target, params.h_max)
        prepared.append((hf.values.astype(dtype), target / params.h_max,
                         mask.astype(dtype)))
    if not prepared:
        raise ValueError("no usable (features, reference) pairs")

    log: list[tuple[int, float]] = []
    total_epochs = config.epochs
    for epoch in range(total_epochs):
        losses = []
        for x_all, t_all, m_all in prepared:
            windows = _epoch_windows(rng, x_all.shape[1:], config)
            for (r0, c0, hh, ww) in windows:
                x = nm.constant(x_all[:, r0:r0 + hh, c0:c0 + ww])
                t = t_all[r0:r0 + hh, c0:c0 + ww]
                m = m_all[r0:r0 + hh, c0:c0 + ww]
                if not m.any():
                    continue
                loss = masked_head_loss(params, x, t, m, training=True)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise RuntimeError(f"non-finite head loss at epoch {epoch}")
                nm.backward(loss)
                lr = (nm.cosine_lr(epoch, total_epochs, config.lr)
                      if config.cosine_decay else None)
                opt.step(lr=lr)
                losses.append(loss_val)
        log.append((epoch, float(np.mean(losses)) if losses else float("nan")))
    return params, log


def _epoch_windows(rng: np.random.Generator, shape: tuple[int, int],
                   config: HeadTrainConfig) -> list[tuple[int, int, int, int]]:
    h, w = shape
    if not config.crop_px or config.crop_px >= min(h, w):
        return [(0, 0, h, w)]
    size = config.crop_px
    out = []
    for _ in range(config.crops_per_tile):
        r0 = int(rng.integers(0, h - size + 1))
        c0 = int(rng.integers(0, w - size + 1))
        out.append((r0, c0, size, size))
    return out
