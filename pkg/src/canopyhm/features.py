"""Feature-map container and feature file IO.

Feature files carry one JSON header line
``{"stride", "channels", "h", "w", "dtype"}`` followed by little-endian
channel-major raw values. Pseudo-RGB tiles ride the same container with
``stride=1, channels=3``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

_DTYPE_TAGS = {"float32": "<f4", "float64": "<f8"}

LOW = "low"
HIGH = "high"


@dataclass
class FeatureMap:
    """C-channel feature array with its image-space patch stride."""

    values: np.ndarray          # (C, h, w)
    resolution: str = LOW       # "low" (extractor grid) or "high" (enhanced)
    stride_px: int = 14         # image pixels per feature cell

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ValueError(f"feature values must be (C, h, w), got {self.values.shape}")
        if self.resolution not in (LOW, HIGH):
            raise ValueError(f"resolution must be 'low' or 'high', got {self.resolution!r}")
        if self.stride_px < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride_px}")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]


def write_features(fmap: FeatureMap, path) -> None:
    dtype = str(fmap.values.dtype)
    if dtype not in _DTYPE_TAGS:
        raise ValueError(f"unsupported feature dtype {dtype}")
    c, h, w = fmap.values.shape
    header = json.dumps({"stride": fmap.stride_px, "channels": c, "h": h, "w": w,
                         "dtype": dtype}).encode()
    payload = np.ascontiguousarray(fmap.values, dtype=_DTYPE_TAGS[dtype]).tobytes()
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(payload)


def read_features(path, expect_tile_px: int | None = None,
                  resolution: str = LOW) -> FeatureMap:
    """Read a feature file; optionally validate that h*stride matches an
    expected tile size (rejects payloads inconsistent with their header)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"malformed feature header in {path}: {e}") from None
    for key in ("stride", "channels", "h", "w", "dtype"):
        if key not in header:
            raise ValueError(f"feature header missing {key!r}")
    tag = _DTYPE_TAGS.get(header["dtype"])
    if tag is None:
        raise ValueError(f"unsupported feature dtype {header['dtype']!r}")
    c, h, w = header["channels"], header["h"], header["w"]
    expected = c * h * w * np.dtype(tag).itemsize
    if len(payload) != expected:
        raise ValueError(
            f"feature payload size mismatch: header implies {expected} bytes, "
            f"file holds {len(payload)}")
    if expect_tile_px is not None and (h * header["stride"] != expect_tile_px
                                       or w * header["stride"] != expect_tile_px):
        raise ValueError(
            f"feature grid {h}x{w} at stride {header['stride']} does not cover "
            f"a {expect_tile_px}px tile")
    values = np.frombuffer(payload, dtype=tag).reshape(c, h, w)
    return FeatureMap(values=values.astype(header["dtype"]),
                      resolution=resolution, stride_px=header["stride"])
