"""Covariate stacks, masking and normalization.

Rasters are read and written with :mod:`tifffile`; the georeferencing is kept
as a GDAL-style 6-coefficient affine transform
``(x0, dx, row_rot, y0, col_rot, dy)``.
"""

from __future__ import annotations

import csv
import logging
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import tifffile

from .errors import (
    AllColumnsDegenerate,
    EmptyAfterMask,
    GridMismatch,
    UnreadableFile,
    ZeroVarianceWarning,
)

logger = logging.getLogger(__name__)

IDENTITY_TRANSFORM = (0.0, 1.0, 0.0, 0.0, 0.0, 1.0)

# GeoTIFF / GDAL private tags
_TAG_PIXEL_SCALE = 33550
_TAG_TIEPOINT = 33922
_TAG_TRANSFORMATION = 34264
_TAG_GEOKEYS = 34735
_TAG_GDAL_METADATA = 42112
_TAG_GDAL_NODATA = 42113


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Band:
    name: str
    values: np.ndarray  # (height, width)
    nodata: Optional[float] = None


@dataclass(frozen=True)
class Grid:
    """Raster geometry shared by every band of a stack."""

    width: int
    height: int
    geo_transform: tuple = IDENTITY_TRANSFORM

    def cell_centers(self, rows, cols):
        """Map coordinates of cell centres for integer ``rows``/``cols``."""
        x0, dx, rx, y0, ry, dy = self.geo_transform
        r = np.asarray(rows, dtype=float) + 0.5
        c = np.asarray(cols, dtype=float) + 0.5
        return x0 + c * dx + r * rx, y0 + c * ry + r * dy


@dataclass(frozen=True)
class CovariateStack:
    width: int
    height: int
    geo_transform: tuple
    bands: tuple

    def __post_init__(self):
        names = [b.name for b in self.bands]
        if not self.bands:
            raise ValueError("a stack needs at least one band")
        if any(not n for n in names) or len(set(names)) != len(names):
            raise ValueError(f"band names must be unique and non-empty: {names}")
        for b in self.bands:
            if b.values.shape != (self.height, self.width):
                raise GridMismatch(
                    f"band {b.name!r} has shape {b.values.shape}, "
                    f"expected {(self.height, self.width)}"
                )

    @property
    def grid(self) -> Grid:
        return Grid(self.width, self.height, tuple(self.geo_transform))

    @property
    def band_names(self) -> list:
        return [b.name for b in self.bands]

    def band(self, name: str) -> Band:
        for b in self.bands:
            if b.name == name:
                return b
        raise KeyError(name)


@dataclass(frozen=True)
class FeatureMatrix:
    """``N`` valid cells by ``D`` covariates, plus each row's grid position."""

    values: np.ndarray
    cell_index: np.ndarray  # (N, 2) integer (row, col)
    covariate_names: tuple
    grid: Grid = field(default_factory=lambda: Grid(1, 1))

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("feature values must be 2-D")
        cell_index = np.asarray(self.cell_index, dtype=np.int64).reshape(-1, 2)
        if len(cell_index) != len(values):
            raise ValueError("cell_index and values disagree on N")
        if len(self.covariate_names) != values.shape[1]:
            raise ValueError("covariate_names and values disagree on D")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature values must be finite")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "cell_index", _frozen(cell_index))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def xy(self):
        return self.grid.cell_centers(self.cell_index[:, 0], self.cell_index[:, 1])

    def take(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        return FeatureMatrix(self.values[rows], self.cell_index[rows],
                             self.covariate_names, self.grid)

    @classmethod
    def from_array(cls, values, names=None) -> "FeatureMatrix":
        """Wrap a bare array, laying rows out as an ``N x 1`` grid."""
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        n, d = values.shape
        if names is None:
            names = [f"x{j}" for j in range(d)]
        idx = np.column_stack([np.arange(n), np.zeros(n, dtype=np.int64)])
        return cls(values, idx, tuple(names), Grid(1, n))


@dataclass(frozen=True)
class NormalizationParams:
    method: str
    names: tuple
    center: np.ndarray
    scale: np.ndarray
    dropped: tuple = ()

    def __post_init__(self):
        if np.any(np.asarray(self.scale) <= 0):
            raise ValueError("normalization scale must be positive")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "covariates": [
                {"name": n, "center": float(c), "scale": float(s)}
                for n, c, s in zip(self.names, self.center, self.scale)
            ],
            "dropped": list(self.dropped),
        }


@dataclass(frozen=True)
class MaskRule:
    """Reject cells of ``band`` equal to its nodata flag or outside ``[lo, hi]``."""

    band: str
    kind: str = "nodata"  # "nodata" | "range"
    lo: float = -math.inf
    hi: float = math.inf

    def __post_init__(self):
        if self.kind not in ("nodata", "range"):
            raise ValueError(f"unknown mask rule kind {self.kind!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "MaskRule":
        lo = d.get("lo")
        hi = d.get("hi")
        return cls(
            band=d["band"],
            kind=d.get("rule", d.get("kind", "nodata")),
            lo=-math.inf if lo is None else float(lo),
            hi=math.inf if hi is None else float(hi),
        )


# --------------------------------------------------------------------------
# GeoTIFF I/O


def _transform_from_tags(tags) -> tuple:
    if _TAG_TRANSFORMATION in tags:
        m = tags[_TAG_TRANSFORMATION].value
        return (m[3], m[0], m[1], m[7], m[4], m[5])
    if _TAG_PIXEL_SCALE in tags and _TAG_TIEPOINT in tags:
        sx, sy = tags[_TAG_PIXEL_SCALE].value[:2]
        i, j, _, x, y, _ = tags[_TAG_TIEPOINT].value[:6]
        x0 = x - i * sx
        y0 = y + j * sy
        return (float(x0), float(sx), 0.0, float(y0), 0.0, -float(sy))
    return IDENTITY_TRANSFORM


def _band_descriptions(tags) -> dict:
    if _TAG_GDAL_METADATA not in tags:
        return {}
    xml = tags[_TAG_GDAL_METADATA].value
    out = {}
    for m in re.finditer(
        r'<Item name="DESCRIPTION" sample="(\d+)" role="description">([^<]*)</Item>', xml
    ):
        out[int(m.group(1))] = m.group(2)
    return out


def read_geotiff(path) -> tuple:
    """Read one GeoTIFF into ``(bands (B, H, W), transform, nodata, names)``."""
    path = Path(path)
    try:
        with tifffile.TiffFile(path) as tif:
            series = tif.series[0]
            data = series.asarray()
            axes = series.axes
            tags = tif.pages[0].tags
            transform = _transform_from_tags(tags)
            nodata = None
            if _TAG_GDAL_NODATA in tags:
                raw = str(tags[_TAG_GDAL_NODATA].value).strip("\x00 ")
                nodata = float(raw) if raw else None
            names = _band_descriptions(tags)
    except (OSError, tifffile.TiffFileError, ValueError, IndexError) as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc
    if data.ndim == 2:
        data = data[None]
    elif data.ndim == 3 and axes.endswith("S") and axes[0] == "Y":
        data = np.moveaxis(data, -1, 0)
    elif data.ndim != 3:
        raise UnreadableFile(f"{path}: unsupported raster layout {axes!r}")
    band_names = [names.get(i, "") for i in range(data.shape[0])]
    return data, tuple(float(v) for v in transform), nodata, band_names


def write_geotiff(path, bands, geo_transform=IDENTITY_TRANSFORM, nodata=None,
                  names=None) -> None:
    """Write ``bands`` (``(H, W)`` or ``(B, H, W)``) as a band-separate GeoTIFF."""
    arr = np.asarray(bands)
    if arr.ndim == 2:
        arr = arr[None]
    x0, dx, rx, y0, ry, dy = geo_transform
    extratags = []
    if rx == 0 and ry == 0:
        extratags.append((_TAG_PIXEL_SCALE, "d", 3, (dx, -dy, 0.0), True))
        extratags.append((_TAG_TIEPOINT, "d", 6, (0.0, 0.0, 0.0, x0, y0, 0.0), True))
    else:
        m = (dx, rx, 0.0, x0, ry, dy, 0.0, y0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0)
        extratags.append((_TAG_TRANSFORMATION, "d", 16, m, True))
    # raster-is-area, no CRS declared
    extratags.append((_TAG_GEOKEYS, "H", 8, (1, 1, 0, 1, 1025, 0, 1, 1), True))
    if names:
        items = "".join(
            f'<Item name="DESCRIPTION" sample="{i}" role="description">{n}</Item>'
            for i, n in enumerate(names)
        )
        extratags.append((_TAG_GDAL_METADATA, "s", 0, f"<GDALMetadata>{items}</GDALMetadata>", True))
    if nodata is not None:
        extratags.append((_TAG_GDAL_NODATA, "s", 0, repr(float(nodata)), True))
    kwargs = {"photometric": "minisblack", "extratags": extratags, "metadata": None}
    if arr.shape[0] > 1:
        kwargs["planarconfig"] = "separate"
    else:
        arr = arr[0]
    tifffile.imwrite(path, arr, **kwargs)


def _transforms_close(a, b, rtol=1e-6) -> bool:
    scale = max(1.0, max(abs(v) for v in a))
    return all(abs(x - y) <= rtol * scale for x, y in zip(a, b))


def load_stack(paths: Sequence, band_names: Optional[Sequence[str]] = None) -> CovariateStack:
    """Stack single- or multi-band GeoTIFFs that already share one grid.

    Band names come from ``band_names`` when given, otherwise from the GDAL band
    descriptions, falling back to ``<file stem>_b<i>``.
    """
    paths = [Path(p) for p in paths]
    if not paths:
        raise ValueError("load_stack needs at least one path")
    bands = []
    ref_shape = ref_transform = None
    for path in paths:
        data, transform, nodata, names = read_geotiff(path)
        shape = data.shape[1:]
        if ref_shape is None:
            ref_shape, ref_transform = shape, transform
        elif shape != ref_shape:
            raise GridMismatch(f"{path}: grid {shape[::-1]} differs from {ref_shape[::-1]}")
        elif not _transforms_close(transform, ref_transform):
            raise GridMismatch(f"{path}: geo_transform differs from the first layer")
        for i, layer in enumerate(data):
            name = names[i] or f"{path.stem}_b{i}"
            bands.append(Band(name, _frozen(layer.astype(float)), nodata))
    if band_names is not None:
        if len(band_names) != len(bands):
            raise ValueError(f"got {len(band_names)} band names for {len(bands)} bands")
        bands = [Band(n, b.values, b.nodata) for n, b in zip(band_names, bands)]
    height, width = ref_shape
    return CovariateStack(width, height, ref_transform, tuple(bands))


# --------------------------------------------------------------------------
# delimited text fallback


def _lattice(coords: np.ndarray) -> tuple:
    u = np.unique(coords)
    if len(u) == 1:
        return 1.0, np.zeros(len(coords), dtype=np.int64)
    step = float(np.min(np.diff(u)))
    pos = (coords - u[0]) / step
    idx = np.rint(pos)
    if np.max(np.abs(pos - idx)) > 1e-6:
        raise GridMismatch("X/Y coordinates do not lie on a regular grid")
    return step, idx.astype(np.int64)


def read_table(path) -> CovariateStack:
    """Read a headered comma-separated matrix as a stack.

    Columns named ``X`` and ``Y`` (any case) are treated as cell-centre
    coordinates and used to rebuild the grid; without them each row becomes
    one cell of an ``N x 1`` grid. Empty fields and ``nan`` are masked cells.
    """
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc
    if len(rows) < 2:
        raise UnreadableFile(f"{path}: no data rows")
    header = [h.strip() for h in rows[0]]
    lower = [h.lower() for h in header]
    try:
        body = np.array(
            [[float(v) if v.strip() else np.nan for v in r] for r in rows[1:] if r],
            dtype=float,
        )
    except ValueError as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc
    if body.shape[1] != len(header):
        raise UnreadableFile(f"{path}: ragged rows")
    cov_cols = [j for j, h in enumerate(lower) if h not in ("x", "y", "row", "col")]
    names = [header[j] for j in cov_cols]
    n = len(body)
    if "x" in lower and "y" in lower:
        x = body[:, lower.index("x")]
        y = body[:, lower.index("y")]
        dx, cols = _lattice(x)
        dy, rows_from_bottom = _lattice(y)
        height = int(rows_from_bottom.max()) + 1
        width = int(cols.max()) + 1
        grid_rows = height - 1 - rows_from_bottom
        transform = (float(x.min()) - dx / 2, dx, 0.0, float(y.max()) + dy / 2, 0.0, -dy)
    else:
        width, height = 1, n
        grid_rows = np.arange(n)
        cols = np.zeros(n, dtype=np.int64)
        transform = IDENTITY_TRANSFORM
    cube = np.full((len(cov_cols), height, width), np.nan)
    flat = grid_rows * width + cols
    if len(np.unique(flat)) != n:
        raise GridMismatch(f"{path}: two rows map to the same grid cell")
    for k, j in enumerate(cov_cols):
        cube[k][grid_rows, cols] = body[:, j]
    bands = tuple(Band(nm, _frozen(cube[k]), None) for k, nm in enumerate(names))
    return CovariateStack(width, height, transform, bands)


def write_table(features: FeatureMatrix, path) -> None:
    """Write ``features`` as comma-separated text with ``X, Y`` centre columns."""
    x, y = features.xy()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["X", "Y", *features.covariate_names])
        for xi, yi, row in zip(x, y, features.values):
            w.writerow([repr(float(xi)), repr(float(yi)), *(repr(float(v)) for v in row)])


# --------------------------------------------------------------------------
# masking and normalization


def valid_mask(stack: CovariateStack, rules: Iterable[MaskRule] = ()) -> np.ndarray:
    """Boolean ``(H, W)`` grid of cells that pass every rule in every band."""
    keep = np.ones((stack.height, stack.width), dtype=bool)
    for b in stack.bands:
        keep &= np.isfinite(b.values)
    for rule in rules:
        band = stack.band(rule.band)
        v = band.values
        if rule.kind == "nodata":
            if band.nodata is not None:
                keep &= v != band.nodata
        else:
            with np.errstate(invalid="ignore"):
                keep &= (v >= rule.lo) & (v <= rule.hi)
    return keep


def build_feature_matrix(stack: CovariateStack, mask: Iterable[MaskRule] = ()) -> FeatureMatrix:
    """Flatten retained cells of ``stack`` into a row-major feature matrix."""
    keep = valid_mask(stack, mask)
    rows, cols = np.nonzero(keep)  # row-major order
    if len(rows) == 0:
        raise EmptyAfterMask("no cell survived masking")
    values = np.column_stack([b.values[rows, cols] for b in stack.bands])
    return FeatureMatrix(values, np.column_stack([rows, cols]),
                         tuple(stack.band_names), stack.grid)


def normalize(features: FeatureMatrix, method: str = "zscore"):
    """Rescale each covariate; constant covariates are dropped with a warning.

    Returns ``(normalized_features, params)``.
    """
    if method not in ("zscore", "minmax"):
        raise ValueError(f"unknown normalization {method!r}")
    X = features.values
    if X.shape[0] < 2:
        raise ValueError("normalization needs at least two rows")
    if method == "zscore":
        center = X.mean(axis=0)
        scale = X.std(axis=0, ddof=1)
    else:
        center = X.min(axis=0)
        scale = X.max(axis=0) - center
    spread = np.max(np.abs(X), axis=0)
    keep = scale > 1e-12 * np.maximum(spread, 1e-300)
    dropped = tuple(n for n, k in zip(features.covariate_names, keep) if not k)
    for name in dropped:
        msg = f"covariate {name!r} is constant and was dropped"
        logger.warning(msg)
        warnings.warn(msg, ZeroVarianceWarning, stacklevel=2)
    if not keep.any():
        raise AllColumnsDegenerate("every covariate is constant")
    names = tuple(n for n, k in zip(features.covariate_names, keep) if k)
    center, scale = center[keep], scale[keep]
    Z = (X[:, keep] - center) / scale
    params = NormalizationParams(method, names, _frozen(center), _frozen(scale), dropped)
    return FeatureMatrix(Z, features.cell_index, names, features.grid), params


def denormalize(features: FeatureMatrix, params: NormalizationParams) -> FeatureMatrix:
    X = features.values * params.scale + params.center
    return FeatureMatrix(X, features.cell_index, features.covariate_names, features.grid)
