"""Georeferenced raster grid container, file IO, and tiling.

File format: one UTF-8 JSON header line
``{"width", "height", "cell_size", "origin", "nodata", "dtype"}`` followed
by little-endian row-major raw values. Round-trips are bit-exact. The
origin is the lower-left corner of the grid in a local projected frame;
rows are stored top to bottom.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

_DTYPE_TAGS = {"float32": "<f4", "float64": "<f8"}


@dataclass
class RasterGrid:
    """A 2-D scalar field with cell size in meters and a nodata sentinel."""

    values: np.ndarray
    cell_size: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)
    nodata: float = -9999.0

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"raster values must be 2-D, got shape {self.values.shape}")
        if self.cell_size <= 0:
            raise ValueError(f"cell size must be positive, got {self.cell_size}")
        finite = np.isfinite(self.values)
        if not np.all(finite | (self.values == self.nodata)):
            raise ValueError("raster contains non-finite values other than nodata")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def valid_mask(self) -> np.ndarray:
        return self.values != self.nodata


@dataclass
class Tile:
    """A raster window plus its offset (in cells) within the source grid."""

    raster: RasterGrid
    row_off: int
    col_off: int


@dataclass
class TilingManifest:
    tile_size: int
    overlap: int
    source_height: int
    source_width: int
    dropped_bottom: int
    dropped_right: int
    tiles: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TilingManifest":
        return cls(**json.loads(text))


def write_raster(raster: RasterGrid, path) -> None:
    dtype = str(raster.values.dtype)
    if dtype not in _DTYPE_TAGS:
        raise ValueError(f"unsupported raster dtype {dtype}")
    header = json.dumps({
        "width": raster.width,
        "height": raster.height,
        "cell_size": raster.cell_size,
        "origin": list(raster.origin),
        "nodata": raster.nodata,
        "dtype": dtype,
    }).encode()
    payload = np.ascontiguousarray(raster.values, dtype=_DTYPE_TAGS[dtype]).tobytes()
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(payload)


def read_raster(path) -> RasterGrid:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"malformed raster header in {path}: {e}") from None
    for key in ("width", "height", "cell_size", "origin", "nodata", "dtype"):
        if key not in header:
            raise ValueError(f"raster header missing {key!r}")
    tag = _DTYPE_TAGS.get(header["dtype"])
    if tag is None:
        raise ValueError(f"unsupported raster dtype {header['dtype']!r}")
    expected = header["width"] * header["height"] * np.dtype(tag).itemsize
    if len(payload) != expected:
        raise ValueError(
            f"raster payload size mismatch: header implies {expected} bytes, "
            f"file holds {len(payload)}")
    values = np.frombuffer(payload, dtype=tag).reshape(header["height"], header["width"])
    return RasterGrid(values=values.astype(header["dtype"]),
                      cell_size=header["cell_size"],
                      origin=tuple(header["origin"]),
                      nodata=header["nodata"])


def tile_grid(height: int, width: int, tile_size: int, overlap: int = 0
              ) -> TilingManifest:
    """Tile offsets for a non-overlapping (or overlapping) grid; edge
    remainders are dropped and recorded."""
    if tile_size > height or tile_size > width:
        raise ValueError(
            f"tile size {tile_size} exceeds raster dims ({height}, {width})")
    if overlap < 0 or overlap >= tile_size:
        raise ValueError(f"overlap must be in [0, tile_size), got {overlap}")
    step = tile_size - overlap
    rows = 1 + (height - tile_size) // step
    cols = 1 + (width - tile_size) // step
    manifest = TilingManifest(
        tile_size=tile_size,
        overlap=overlap,
        source_height=height,
        source_width=width,
        dropped_bottom=height - (tile_size + (rows - 1) * step),
        dropped_right=width - (tile_size + (cols - 1) * step),
    )
    for r in range(rows):
        for c in range(cols):
            manifest.tiles.append({"row_off": r * step, "col_off": c * step})
    return manifest


def tile_raster(raster: RasterGrid, tile_size: int, overlap: int = 0
                ) -> tuple[list[Tile], TilingManifest]:
    """Cut a raster into a grid of tiles; edge remainders are dropped and
    recorded in the manifest."""
    manifest = tile_grid(raster.height, raster.width, tile_size, overlap)
    tiles = []
    for entry in manifest.tiles:
        r0, c0 = entry["row_off"], entry["col_off"]
        window = raster.values[r0:r0 + tile_size, c0:c0 + tile_size]
        origin = (raster.origin[0] + c0 * raster.cell_size,
                  raster.origin[1] + (raster.height - r0 - tile_size) * raster.cell_size)
        tiles.append(Tile(
            raster=RasterGrid(window.copy(), raster.cell_size, origin, raster.nodata),
            row_off=r0, col_off=c0))
    return tiles, manifest


def mosaic(tiles: list[Tile], source_height: int, source_width: int,
           cell_size: float = 1.0, origin: tuple[float, float] = (0.0, 0.0),
           nodata: float = -9999.0) -> RasterGrid:
    """Reassemble tiles into a full grid; uncovered cells are nodata."""
    out = np.full((source_height, source_width), nodata,
                  dtype=tiles[0].raster.values.dtype if tiles else np.float32)
    for t in tiles:
        h, w = t.raster.values.shape
        out[t.row_off:t.row_off + h, t.col_off:t.col_off + w] = t.raster.values
    return RasterGrid(out, cell_size, origin, nodata)
