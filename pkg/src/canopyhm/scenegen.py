"""Deterministic synthetic plantation scenes.

Generates parcels of trees on jittered grids, paraboloid crown surfaces,
a ground-truth CHM (pointwise max over crowns), and a pseudo-RGB tile
whose green channel is monotone in canopy height, so the whole pipeline
can be trained and validated without any external data. Also provides the
deterministic stub feature extractor standing in for a frozen foundation
model.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureMap, LOW, read_features
from .forestry import Parcel, resolve_species
from .raster import RasterGrid

# Crown radius (m) as a function of tree height (m).
CROWN_RADIUS_SLOPE = 0.25
CROWN_RADIUS_BASE = 1.0


def crown_radius_m(height_m: float) -> float:
    return CROWN_RADIUS_SLOPE * height_m + CROWN_RADIUS_BASE


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class ParcelSpec:
    """Per-parcel planting parameters.

    pos_jitter_m is the peak-to-peak amplitude of the placement jitter:
    each axis offset is drawn uniformly from [-j/2, +j/2].
    """

    species: str = "pinus_tabulaeformis"
    stand_age: float = 10.0
    spacing_m: float = 6.0
    mean_height_m: float = 8.0
    height_jitter_m: float = 0.5
    pos_jitter_m: float = 1.0
    rect: tuple[int, int, int, int] | None = None  # (row0, col0, height, width) cells

    def __post_init__(self):
        if self.spacing_m <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing_m}")
        if self.mean_height_m < 0 or self.mean_height_m - self.height_jitter_m / 2 < 0:
            raise ValueError("tree heights must stay non-negative")
        resolve_species(self.species)


@dataclass
class SceneConfig:
    width: int = 518
    height: int = 518
    cell_size_m: float = 1.0
    parcel_rows: int = 1
    parcel_cols: int = 1
    parcel_gap_px: int = 0
    parcels: list[ParcelSpec] = field(default_factory=lambda: [ParcelSpec()])
    seed: int = 0

    def __post_init__(self):
        n = self.parcel_rows * self.parcel_cols
        if len(self.parcels) == 1 and n > 1:
            self.parcels = [self.parcels[0]] * n
        if self.parcels and len(self.parcels) != n:
            raise ValueError(
                f"{len(self.parcels)} parcel specs for a "
                f"{self.parcel_rows}x{self.parcel_cols} grid")

    @classmethod
    def from_json(cls, text: str) -> "SceneConfig":
        d = json.loads(text)
        parcels = [ParcelSpec(**{**p, "rect": tuple(p["rect"]) if p.get("rect") else None})
                   for p in d.pop("parcels", [{}])]
        return cls(parcels=parcels, **d)

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["parcels"] = [{k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in p.__dict__.items() if v is not None}
                        for p in self.parcels]
        return json.dumps(d, indent=2)


@dataclass
class TreeRecord:
    id: int
    row: int
    col: int
    height_m: float
    species: str
    parcel_id: str


@dataclass
class SyntheticScene:
    chm: RasterGrid
    rgb: np.ndarray                 # (3, h, w) in [0, 1]
    trees: list[TreeRecord]
    parcels: list[Parcel]
    config: SceneConfig


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _parcel_rects(config: SceneConfig) -> list[tuple[int, int, int, int]]:
    rects = []
    ph = config.height // config.parcel_rows
    pw = config.width // config.parcel_cols
    g = config.parcel_gap_px
    for i, spec in enumerate(config.parcels):
        if spec.rect is not None:
            r0, c0, h, w = spec.rect
        else:
            pr, pc = divmod(i, config.parcel_cols)
            r0, c0 = pr * ph + g // 2, pc * pw + g // 2
            h, w = ph - g, pw - g
        if r0 < 0 or c0 < 0 or r0 + h > config.height or c0 + w > config.width:
            raise ValueError(
                f"parcel {i} rect ({r0},{c0})+({h},{w}) overflows raster "
                f"({config.height},{config.width})")
        rects.append((r0, c0, h, w))
    return rects


def _place_trees(rng: np.random.Generator, spec: ParcelSpec,
                 rect: tuple[int, int, int, int], cell: float
                 ) -> list[tuple[int, int, float]]:
    r0, c0, h, w = rect
    sp = spec.spacing_m / cell
    jit = spec.pos_jitter_m / cell / 2.0
    rows = np.arange(r0 + sp / 2, r0 + h - sp / 2 + 1e-9, sp)
    cols = np.arange(c0 + sp / 2, c0 + w - sp / 2 + 1e-9, sp)
    out = []
    for rr in rows:
        for cc in cols:
            r = rr + rng.uniform(-jit, jit)
            c = cc + rng.uniform(-jit, jit)
            hgt = spec.mean_height_m + rng.uniform(-spec.height_jitter_m / 2,
                                                   spec.height_jitter_m / 2)
            ri, ci = int(round(r)), int(round(c))
            ri = min(max(ri, r0), r0 + h - 1)
            ci = min(max(ci, c0), c0 + w - 1)
            out.append((ri, ci, float(hgt)))
    return out


def _render_crown(chm: np.ndarray, row: int, col: int, height_m: float,
                  cell: float) -> None:
    rc = crown_radius_m(height_m) / cell
    r_int = int(np.ceil(rc))
    r_lo, r_hi = max(0, row - r_int), min(chm.shape[0], row + r_int + 1)
    c_lo, c_hi = max(0, col - r_int), min(chm.shape[1], col + r_int + 1)
    rr = np.arange(r_lo, r_hi) - row
    cc = np.arange(c_lo, c_hi) - col
    dist2 = (rr[:, None] ** 2 + cc[None, :] ** 2) * cell ** 2
    rc_m = crown_radius_m(height_m)
    surface = height_m * (1.0 - dist2 / rc_m ** 2)
    surface[dist2 >= rc_m ** 2] = 0.0
    patch = chm[r_lo:r_hi, c_lo:c_hi]
    np.maximum(patch, surface, out=patch)


def _render_rgb(chm: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Pseudo-RGB where the green channel decreases monotonically with
    height; additive texture noise stays within +-2%."""
    h, w = chm.shape
    canopy = chm > 0
    green = np.where(canopy, np.clip(0.88 - 0.024 * chm, 0.1, 1.0), 0.36)
    red = np.where(canopy, 0.15 + 0.30 * green, 0.42)
    blue = np.where(canopy, 0.10 + 0.10 * green, 0.28)
    rgb = np.stack([red, green, blue]).astype(np.float64)
    rgb += rng.uniform(-0.02, 0.02, size=(3, h, w))
    return np.clip(rgb, 0.0, 1.0)


def generate_scene(config: SceneConfig) -> SyntheticScene:
    """Build a fully reproducible synthetic scene from its config."""
    rng = np.random.default_rng(config.seed)
    rects = _parcel_rects(config)
    chm_values = np.zeros((config.height, config.width), dtype=np.float64)

    trees: list[TreeRecord] = []
    parcels: list[Parcel] = []
    for i, (spec, rect) in enumerate(zip(config.parcels, rects)):
        parcel_id = f"P{i:03d}"
        placed = _place_trees(rng, spec, rect, config.cell_size_m)
        for (r, c, hgt) in placed:
            trees.append(TreeRecord(len(trees), r, c, hgt,
                                    resolve_species(spec.species).tag, parcel_id))
        mask = np.zeros((config.height, config.width), dtype=bool)
        r0, c0, hh, ww = rect
        mask[r0:r0 + hh, c0:c0 + ww] = True
        parcels.append(Parcel(id=parcel_id, mask=mask, species=spec.species,
                              stand_age=spec.stand_age))

    # CHM is the pointwise max over crown surfaces; apex cell equals the
    # tree height exactly (paraboloid with its apex on the cell).
    for t in trees:
        _render_crown(chm_values, t.row, t.col, t.height_m, config.cell_size_m)

    rgb = _render_rgb(chm_values, rng)
    chm = RasterGrid(chm_values, cell_size=config.cell_size_m)
    return SyntheticScene(chm=chm, rgb=rgb, trees=trees, parcels=parcels, config=config)


# ---------------------------------------------------------------------------
# Feature extractors
# ---------------------------------------------------------------------------


class FeatureExtractor:
    """Interface: maps an RGB tile to a low-resolution feature map with
    spatial size exactly tile/stride."""

    stride: int
    channels: int

    def extract(self, tile: np.ndarray) -> FeatureMap:
        raise NotImplementedError


def stub_extract(tile: np.ndarray, stride: int = 14, channels: int = 16,
                 seed: int = 0) -> FeatureMap:
    """Deterministic patchwise pooling extractor.

    Per patch and channel: mean, max, and standard deviation, projected
    through a fixed seeded linear map. Patch statistics are computed on the
    values sorted within each patch, so patch-aligned flips and crops of
    the tile produce bit-identical (transformed) features.
    """
    tile = np.asarray(tile, dtype=np.float64)
    if tile.ndim != 3:
        raise ValueError(f"tile must be (C, h, w), got {tile.shape}")
    c_in, h, w = tile.shape
    if h % stride or w % stride:
        raise ValueError(f"tile size ({h},{w}) not divisible by stride {stride}")
    hp, wp = h // stride, w // stride
    patches = (tile.reshape(c_in, hp, stride, wp, stride)
               .transpose(0, 1, 3, 2, 4)
               .reshape(c_in, hp, wp, stride * stride))
    patches = np.sort(patches, axis=-1)
    stats = np.concatenate([
        patches.mean(axis=-1),
        patches[..., -1],
        patches.std(axis=-1),
    ], axis=0)                                    # (3*c_in, hp, wp)
    proj = np.random.default_rng(seed).standard_normal((channels, 3 * c_in)) / 3.0
    values = np.tensordot(proj, stats, axes=([1], [0]))
    return FeatureMap(values=values, resolution=LOW, stride_px=stride)


class StubExtractor(FeatureExtractor):
    def __init__(self, stride: int = 14, channels: int = 16, seed: int = 0):
        self.stride = stride
        self.channels = channels
        self.seed = seed

    def extract(self, tile: np.ndarray) -> FeatureMap:
        return stub_extract(tile, self.stride, self.channels, self.seed)


def load_external_features(path, expect_tile_px: int | None = None) -> FeatureMap:
    """Load precomputed extractor outputs (e.g. foundation-model features)
    from the feature-file format, validating shape against the header."""
    return read_features(path, expect_tile_px=expect_tile_px, resolution=LOW)


# ---------------------------------------------------------------------------
# Scene export
# ---------------------------------------------------------------------------


def write_trees_csv(trees: list[TreeRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "row", "col", "height_m", "species"])
        for t in trees:
            writer.writerow([t.id, t.row, t.col, f"{t.height_m:.6f}", t.species])


def read_trees_csv(path) -> list[TreeRecord]:
    out = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            out.append(TreeRecord(int(row["id"]), int(row["row"]), int(row["col"]),
                                  float(row["height_m"]), row.get("species", ""),
                                  row.get("parcel_id", "")))
    return out


def write_parcels_json(parcels: list[Parcel], rects: list[tuple[int, int, int, int]],
                       path) -> None:
    entries = [{"id": p.id, "species": p.species, "stand_age": p.stand_age,
                "rect": list(r)} for p, r in zip(parcels, rects)]
    with open(path, "w") as fh:
        json.dump(entries, fh, indent=2)


def read_parcels_json(path, shape: tuple[int, int]) -> list[Parcel]:
    with open(path) as fh:
        entries = json.load(fh)
    parcels = []
    for e in entries:
        mask = np.zeros(shape, dtype=bool)
        r0, c0, h, w = e["rect"]
        mask[r0:r0 + h, c0:c0 + w] = True
        parcels.append(Parcel(id=e["id"], mask=mask, species=e["species"],
                              stand_age=e["stand_age"], year=e.get("year")))
    return parcels


def parcel_rects(scene: SyntheticScene) -> list[tuple[int, int, int, int]]:
    return _parcel_rects(scene.config)
