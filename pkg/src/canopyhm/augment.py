"""View transforms applied consistently in image space and feature space.

Pad and crop geometry is restricted to multiples of the extractor patch
stride so every image-space transform has an exact feature-space
counterpart (image offsets divided by the stride are integral).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .features import FeatureMap

KINDS = ("identity", "flip_h", "flip_v", "pad", "crop")


@dataclass(frozen=True)
class ViewTransform:
    """One member of the augmentation family t(.).

    Crop offsets/sizes and the pad amount are in image pixels and must be
    multiples of the patch stride.
    """

    kind: str = "identity"
    pad_px: int = 0
    crop_row: int = 0
    crop_col: int = 0
    crop_height: int = 0
    crop_width: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "pad" and self.pad_px <= 0:
            raise ValueError("pad transform requires a positive pad_px")
        if self.kind == "crop" and (self.crop_height <= 0 or self.crop_width <= 0):
            raise ValueError("crop transform requires a positive window")

    def check_alignment(self, stride: int) -> None:
        offsets = ()
        if self.kind == "pad":
            offsets = (self.pad_px,)
        elif self.kind == "crop":
            offsets = (self.crop_row, self.crop_col, self.crop_height, self.crop_width)
        for v in offsets:
            if v % stride != 0:
                raise ValueError(
                    f"{self.kind} offset {v} not a multiple of patch stride {stride}")

    @property
    def invertible(self) -> bool:
        return self.kind in ("identity", "flip_h", "flip_v", "pad")

    def to_json(self) -> str:
        d = {"kind": self.kind}
        if self.kind == "pad":
            d["pad_px"] = self.pad_px
        elif self.kind == "crop":
            d.update(row=self.crop_row, col=self.crop_col,
                     height=self.crop_height, width=self.crop_width)
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "ViewTransform":
        d = json.loads(text)
        kind = d["kind"]
        if kind == "pad":
            return cls(kind="pad", pad_px=d["pad_px"])
        if kind == "crop":
            return cls(kind="crop", crop_row=d["row"], crop_col=d["col"],
                       crop_height=d["height"], crop_width=d["width"])
        return cls(kind=kind)


@dataclass
class ViewBatch:
    """Ordered views of one tile; the first view is always the identity."""

    transforms: list[ViewTransform]
    tiles: list[np.ndarray]

    def __post_init__(self):
        if len(self.transforms) < 2:
            raise ValueError("multiview consistency requires n >= 2 views")
        if len(self.transforms) != len(self.tiles):
            raise ValueError("transform/tile count mismatch")

    @property
    def n(self) -> int:
        return len(self.transforms)


# ---------------------------------------------------------------------------
# Image-space application
# ---------------------------------------------------------------------------


def apply_image(t: ViewTransform, x: np.ndarray) -> np.ndarray:
    """Apply a view transform to a (h, w) or (C, h, w) tile."""
    x = np.asarray(x)
    if t.kind == "identity":
        return x.copy()
    if t.kind == "flip_h":
        return np.flip(x, axis=-1).copy()
    if t.kind == "flip_v":
        return np.flip(x, axis=-2).copy()
    if t.kind == "pad":
        width = [(0, 0)] * (x.ndim - 2) + [(t.pad_px, t.pad_px), (t.pad_px, t.pad_px)]
        return np.pad(x, width)
    # crop
    h, w = x.shape[-2:]
    if (t.crop_row < 0 or t.crop_col < 0
            or t.crop_row + t.crop_height > h or t.crop_col + t.crop_width > w):
        raise ValueError(
            f"crop window ({t.crop_row},{t.crop_col})+"
            f"({t.crop_height},{t.crop_width}) outside bounds ({h},{w})")
    return x[..., t.crop_row:t.crop_row + t.crop_height,
             t.crop_col:t.crop_col + t.crop_width].copy()


# ---------------------------------------------------------------------------
# Feature-space application
# ---------------------------------------------------------------------------


def _feature_window(t: ViewTransform, stride: int) -> tuple[int, int, int, int]:
    t.check_alignment(stride)
    return (t.crop_row // stride, t.crop_col // stride,
            t.crop_height // stride, t.crop_width // stride)


def apply_feature(t: ViewTransform, f: FeatureMap, stride: int | None = None) -> FeatureMap:
    """Feature-space counterpart of apply_image, offsets scaled by 1/stride."""
    stride = f.stride_px if stride is None else stride
    values = apply_feature_array(t, f.values, stride)
    return FeatureMap(values=values, resolution=f.resolution, stride_px=f.stride_px)


def apply_feature_array(t: ViewTransform, values: np.ndarray, stride: int) -> np.ndarray:
    if t.kind == "identity":
        return np.asarray(values).copy()
    if t.kind == "flip_h":
        return np.flip(values, axis=-1).copy()
    if t.kind == "flip_v":
        return np.flip(values, axis=-2).copy()
    if t.kind == "pad":
        t.check_alignment(stride)
        p = t.pad_px // stride
        width = [(0, 0)] * (values.ndim - 2) + [(p, p), (p, p)]
        return np.pad(values, width)
    r0, c0, hh, ww = _feature_window(t, stride)
    h, w = values.shape[-2:]
    if r0 + hh > h or c0 + ww > w:
        raise ValueError(f"feature crop ({r0},{c0})+({hh},{ww}) outside bounds ({h},{w})")
    return values[..., r0:r0 + hh, c0:c0 + ww].copy()


def apply_feature_diff(t: ViewTransform, x: nm.DiffArray, stride: int) -> nm.DiffArray:
    """Differentiable feature-space transform (used while training the
    enhancer, where gradients must flow back through t)."""
    if t.kind == "identity":
        return x
    if t.kind == "flip_h":
        return nm.flip(x, axis=-1)
    if t.kind == "flip_v":
        return nm.flip(x, axis=-2)
    if t.kind == "pad":
        t.check_alignment(stride)
        return nm.pad2d(x, t.pad_px // stride)
    r0, c0, hh, ww = _feature_window(t, stride)
    return nm.crop2d(x, r0, c0, hh, ww)


def invert_feature(t: ViewTransform, f: FeatureMap, stride: int | None = None) -> FeatureMap:
    """Undo an invertible transform in feature space (crop is not invertible)."""
    if not t.invertible:
        raise ValueError(f"transform {t.kind!r} is not invertible")
    stride = f.stride_px if stride is None else stride
    if t.kind in ("flip_h", "flip_v", "identity"):
        return apply_feature(t, f, stride)
    t.check_alignment(stride)
    p = t.pad_px // stride
    values = f.values[..., p:f.values.shape[-2] - p, p:f.values.shape[-1] - p].copy()
    return FeatureMap(values=values, resolution=f.resolution, stride_px=f.stride_px)


# ---------------------------------------------------------------------------
# View sampling
# ---------------------------------------------------------------------------

_MIN_CROP_AREA = 0.75


def sample_transform(rng: np.random.Generator, tile_px: tuple[int, int],
                     stride: int) -> ViewTransform:
    """Uniform draw over {flip_h, flip_v, patch-aligned crops of >= 75% area}."""
    h, w = tile_px
    hp, wp = h // stride, w // stride
    kind = rng.choice(["flip_h", "flip_v", "crop"])
    if kind != "crop":
        return ViewTransform(kind=str(kind))
    min_side = int(np.ceil(np.sqrt(_MIN_CROP_AREA) * min(hp, wp)))
    min_side = max(1, min(min_side, min(hp, wp)))
    side = int(rng.integers(min_side, min(hp, wp) + 1))
    r0 = int(rng.integers(0, hp - side + 1))
    c0 = int(rng.integers(0, wp - side + 1))
    return ViewTransform(kind="crop", crop_row=r0 * stride, crop_col=c0 * stride,
                         crop_height=side * stride, crop_width=side * stride)


def make_views(tile: np.ndarray, n: int, seed: int, stride: int = 14) -> ViewBatch:
    """Build n views of a tile: the identity plus n-1 sampled transforms."""
    if n < 2:
        raise ValueError(f"multiview consistency requires n >= 2, got {n}")
    tile = np.asarray(tile)
    rng = np.random.default_rng(seed)
    transforms = [ViewTransform()]
    for _ in range(n - 1):
        transforms.append(sample_transform(rng, tile.shape[-2:], stride))
    tiles = [apply_image(t, tile) for t in transforms]
    return ViewBatch(transforms=transforms, tiles=tiles)
