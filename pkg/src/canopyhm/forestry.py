"""Downstream plantation analytics: local-maxima tree detection,
height-to-DBH conversion, species AGB allometry, parcel aggregation, and
growth-rate tracking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .raster import RasterGrid

# ---------------------------------------------------------------------------
# Species allometry
# ---------------------------------------------------------------------------

PINUS_TABULAEFORMIS = "pinus_tabulaeformis"
POPULUS_TOMENTOSA = "populus_tomentosa"
OTHER_BROADLEAF = "other_broadleaf"


@dataclass(frozen=True)
class Species:
    """A species class with quadratic AGB coefficients: AGB = a*H^2 + b*H + c (kg)."""

    tag: str
    a: float
    b: float
    c: float


SPECIES_TABLE: dict[str, Species] = {
    PINUS_TABULAEFORMIS: Species(PINUS_TABULAEFORMIS, 0.92, -0.46, 5.03),
    POPULUS_TOMENTOSA: Species(POPULUS_TOMENTOSA, 0.54, -0.27, 2.97),
    OTHER_BROADLEAF: Species(OTHER_BROADLEAF, 5.37, -20.86, 33.95),
}

# Field species collapse onto the three AGB classes.
_SPECIES_ALIASES = {
    "pinus_tabulaeformis": PINUS_TABULAEFORMIS,
    "p._tabulaeformis": PINUS_TABULAEFORMIS,
    "populus_tomentosa": POPULUS_TOMENTOSA,
    "p._tomentosa": POPULUS_TOMENTOSA,
    "robinia_pseudoacacia": OTHER_BROADLEAF,
    "ginkgo_biloba": OTHER_BROADLEAF,
    "salix_matsudana": OTHER_BROADLEAF,
    "fraxinus_chinensis": OTHER_BROADLEAF,
    "toona_sinensis": OTHER_BROADLEAF,
}


def resolve_species(tag: str) -> Species:
    key = tag.strip().lower().replace(" ", "_")
    key = _SPECIES_ALIASES.get(key, key)
    if key not in SPECIES_TABLE:
        raise ValueError(f"unknown species tag {tag!r}")
    return SPECIES_TABLE[key]


def dbh_from_height(h_m: float) -> float:
    """Tree height (m) to diameter at breast height (cm), local linear fit."""
    if h_m < 0:
        raise ValueError(f"height must be non-negative, got {h_m}")
    return 1.117 * h_m + 5.38


def agb_single(species: Species | str, h_m: float) -> float:
    """Single-tree aboveground biomass (kg) from the species AGB function."""
    if h_m < 0:
        raise ValueError(f"height must be non-negative, got {h_m}")
    sp = resolve_species(species) if isinstance(species, str) else species
    return sp.a * h_m * h_m + sp.b * h_m + sp.c


# ---------------------------------------------------------------------------
# Parcels and detections
# ---------------------------------------------------------------------------


@dataclass
class Parcel:
    """A plantation unit: pixel mask, species tag, stand age."""

    id: str
    mask: np.ndarray
    species: str
    stand_age: float
    year: int | None = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise ValueError(f"parcel {self.id!r} has an empty mask")
        resolve_species(self.species)


@dataclass(frozen=True)
class DetectedTree:
    row: int
    col: int
    height_m: float


@dataclass
class ParcelAGB:
    parcel_id: str
    species: str
    stand_age: float
    count: int
    mean_kg: float | None
    total_kg: float
    trees: list[float] = field(default_factory=list, repr=False)


# ---------------------------------------------------------------------------
# Local-maxima tree detection
# ---------------------------------------------------------------------------


def _circular_footprint(radius_cells: float) -> np.ndarray:
    r = int(np.floor(radius_cells))
    dr = np.arange(-r, r + 1)
    dist2 = dr[:, None] ** 2 + dr[None, :] ** 2
    return dist2 <= radius_cells ** 2


def detect_trees(chm: RasterGrid, radius_m: float = 5.0,
                 min_height_m: float = 2.0) -> list[DetectedTree]:
    """Detect trees as cells that dominate every cell within a Euclidean
    radius, one detection per equal-height plateau (lexicographic minimum).
    """
    if radius_m < chm.cell_size:
        raise ValueError(
            f"radius {radius_m} m below cell size {chm.cell_size} m")
    if chm.values.size == 0:
        raise ValueError("empty raster")
    radius_cells = radius_m / chm.cell_size
    footprint = _circular_footprint(radius_cells)

    values = np.where(chm.valid_mask(), chm.values, -np.inf)
    neighborhood_max = ndimage.maximum_filter(values, footprint=footprint,
                                              mode="constant", cval=-np.inf)
    candidates = (values >= neighborhood_max) & (values >= min_height_m)
    if not candidates.any():
        return []

    # Adjacent candidates are necessarily equal in height (radius >= cell
    # size), so connected components of the candidate mask are plateaus.
    labels, n_labels = ndimage.label(candidates, structure=np.ones((3, 3), dtype=int))
    rows, cols = np.nonzero(candidates)
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    seen: set[int] = set()
    detections = []
    for r, c in zip(rows, cols):
        lab = int(labels[r, c])
        if lab in seen:
            continue
        seen.add(lab)
        detections.append(DetectedTree(int(r), int(c), float(chm.values[r, c])))
        if len(seen) == n_labels:
            break
    return detections


def detection_success(detected: list[DetectedTree], truth: list[tuple[int, int]],
                      match_radius_m: float, cell_size: float = 1.0) -> float:
    """Greedy one-to-one nearest-neighbor matching; success = matched/|truth|."""
    if match_radius_m <= 0:
        raise ValueError(f"match radius must be positive, got {match_radius_m}")
    if not truth:
        return 1.0
    if not detected:
        return 0.0
    det = np.array([[t.row, t.col] for t in detected], dtype=float)
    tru = np.array(truth, dtype=float)
    d2 = ((det[:, None, :] - tru[None, :, :]) ** 2).sum(axis=2) * cell_size ** 2
    limit = match_radius_m ** 2
    pairs = np.argwhere(d2 <= limit)
    if pairs.size == 0:
        return 0.0
    order = np.argsort(d2[pairs[:, 0], pairs[:, 1]], kind="stable")
    used_det: set[int] = set()
    used_tru: set[int] = set()
    matched = 0
    for di, ti in pairs[order]:
        if di in used_det or ti in used_tru:
            continue
        used_det.add(int(di))
        used_tru.add(int(ti))
        matched += 1
    return matched / len(truth)


# ---------------------------------------------------------------------------
# Parcel aggregation and growth
# ---------------------------------------------------------------------------


def trees_in_parcel(parcel: Parcel, trees: list[DetectedTree]) -> list[DetectedTree]:
    return [t for t in trees if parcel.mask[t.row, t.col]]


def parcel_agb(parcel: Parcel, trees: list[DetectedTree]) -> ParcelAGB:
    """Aggregate per-tree AGB over a parcel; trees must already be filtered
    to the parcel mask."""
    sp = resolve_species(parcel.species)
    per_tree = [agb_single(sp, t.height_m) for t in trees]
    total = float(sum(per_tree))
    mean = total / len(per_tree) if per_tree else None
    return ParcelAGB(parcel_id=parcel.id, species=sp.tag, stand_age=parcel.stand_age,
                     count=len(per_tree), mean_kg=mean, total_kg=total, trees=per_tree)


def growth_rate(series: list[tuple[float, float]]) -> float:
    """OLS slope (kg/yr) of mean single-tree AGB against year."""
    if len(series) < 2:
        raise ValueError("growth rate needs at least two (year, AGB) points")
    years = np.array([p[0] for p in series], dtype=float)
    agb = np.array([p[1] for p in series], dtype=float)
    if np.all(years == years[0]):
        raise ValueError("growth rate needs at least two distinct years")
    ym = years - years.mean()
    return float((ym * (agb - agb.mean())).sum() / (ym * ym).sum())
