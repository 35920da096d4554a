"""Run configuration shared by the CLI subcommands."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields


@dataclass
class RunConfig:
    seed: int = 0
    tile_size: int = 518
    patch_stride: int = 14
    stub_channels: int = 16
    stub_seed: int = 0
    up_factors: tuple[int, ...] = (7, 2)
    k_up: int = 5
    c_mid: int = 32
    n_views: int = 4
    enhancer_steps: int = 400
    enhancer_lr: float = 1e-2
    enhancer_crop_px: int = 140
    clip_grad: float | None = 1.0
    momentum: float = 0.9
    head_epochs: int = 30
    head_lr: float = 1e-2
    head_crop_px: int = 256
    head_crops_per_tile: int = 2
    head_hidden1: int = 64
    head_hidden2: int = 32
    h_max: float = 30.0
    cosine_decay: bool = False
    detect_radius_m: float = 5.0
    detect_min_height_m: float = 2.0
    match_radius_m: float = 3.0
    cell_size_m: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        self.up_factors = tuple(self.up_factors)
        if self.tile_size % self.patch_stride:
            raise ValueError(
                f"tile size {self.tile_size} not divisible by patch stride "
                f"{self.patch_stride}")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            data = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["up_factors"] = list(self.up_factors)
        return json.dumps(d, indent=2)
