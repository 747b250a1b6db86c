"""Synthetic covariate rasters for trying the pipeline end to end.

The landscape has ten latent zones of very different area (one is tiny), an
elevation gradient from about 10 m to 80 m, a cloud patch flagged as nodata in
the multi-temporal imagery and an irregular study-area boundary.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy import ndimage

from .ingest import write_geotiff

NODATA = -9999.0
ORIGIN = (500_000.0, 4_200_000.0)
CELL = 10.0


def _smooth(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.normal(size=shape), sigma)
    return (f - f.mean()) / f.std()


def landscape(width: int = 60, height: int = 60, seed: int = 10) -> dict:
    """Named ``(height, width)`` covariate grids; NaN marks cells outside the area."""
    rng = np.random.default_rng(seed)
    rr, cc = np.mgrid[0:height, 0:width]
    sites = np.column_stack([rng.uniform(0, height, 10), rng.uniform(0, width, 10)])
    weight = np.linspace(1.0, 2.2, 10)  # unequal zone areas
    weight[6] = 0.35  # a rare zone
    d = np.sqrt((rr[..., None] - sites[:, 0]) ** 2 + (cc[..., None] - sites[:, 1]) ** 2)
    zone = np.argmin(d / weight, axis=2)
    effect = rng.normal(0.0, 1.0, (10, 6)) * 1.6

    elev = 10.0 + 70.0 * (0.6 * cc / (width - 1) + 0.4 * rr / (height - 1))
    elev += 4.0 * _smooth(rng, zone.shape, 4)
    elev += ndimage.gaussian_filter(3.0 * effect[zone, 0], 2.0)
    elev = np.clip(elev, 10.0, 80.0)
    gy, gx = np.gradient(elev, CELL)
    slope = np.degrees(np.arctan(np.hypot(gx, gy)))

    out = {}
    season = (0.55, 0.75, 0.65, 0.35)
    for t, s in enumerate(season):
        out[f"ndvi_t{t + 1}"] = np.clip(
            s + 0.08 * effect[zone, 1] + 0.03 * _smooth(rng, zone.shape, 3), -1, 1)
    for t, s in enumerate(season):
        out[f"ndmi_t{t + 1}"] = np.clip(
            0.6 * s - 0.2 + 0.07 * effect[zone, 2] - 0.002 * (elev - 45)
            + 0.02 * _smooth(rng, zone.shape, 3), -1, 1)
    out["b4_recent"] = 0.08 + 0.02 * effect[zone, 3] + 0.005 * _smooth(rng, zone.shape, 2)
    out["b8_recent"] = 0.30 + 0.05 * effect[zone, 1] + 0.01 * _smooth(rng, zone.shape, 2)
    out["elevation"] = elev
    out["slope"] = slope
    out["clay"] = 22.0 + 5.0 * effect[zone, 4] + 2.0 * _smooth(rng, zone.shape, 5)

    outside = (rr + 0.7 * cc) < 10  # clipped corner of the study area
    outside |= (rr - height * 0.85) ** 2 + (cc - width * 0.1) ** 2 < 30
    for v in out.values():
        v[outside] = np.nan
    out["_zone"] = zone
    return out


def write_demo(directory, width: int = 60, height: int = 60, seed: int = 10) -> Path:
    """Write the demo GeoTIFFs and a ready-to-run config; returns the config path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    grids = landscape(width, height, seed)
    transform = (ORIGIN[0], CELL, 0.0, ORIGIN[1], 0.0, -CELL)
    rng = np.random.default_rng(seed + 1)
    cloud = np.zeros((height, width), dtype=bool)
    cy, cx = rng.uniform(0.3, 0.7) * height, rng.uniform(0.3, 0.7) * width
    rr, cc = np.mgrid[0:height, 0:width]
    cloud[(rr - cy) ** 2 + ((cc - cx) / 1.5) ** 2 < 16] = True

    files = {
        "s2_multitemporal.tif": [f"ndvi_t{t}" for t in range(1, 5)] + [f"ndmi_t{t}" for t in range(1, 5)],
        "s2_recent.tif": ["b4_recent", "b8_recent"],
        "terrain.tif": ["elevation", "slope"],
        "soil.tif": ["clay"],
    }
    for fname, names in files.items():
        stack = np.stack([grids[n] for n in names]).astype(np.float32)
        if fname == "s2_multitemporal.tif":
            stack[:, cloud] = NODATA
        stack[np.isnan(stack)] = NODATA
        write_geotiff(directory / fname, stack, transform, nodata=NODATA, names=names)
    config = {
        "input": {"format": "geotiff", "paths": list(files)},
        "mask": [
            {"band": "ndvi_t1", "rule": "nodata"},
            {"band": "elevation", "rule": "nodata"},
            {"band": "ndvi_t2", "rule": "range", "lo": -1.0, "hi": 1.0},
        ],
        "normalization": "zscore",
        "kernel": {"gamma": "auto", "knn": 10, "subset_size": 2000, "dense_threshold": 3000},
        "k": 10,
        "k_range": [2, 15],
        "n": 10,
        "weights": [1.0, 1.0, 1.0],
        "schedule": {"t0": 1.0, "cooling": 0.95},
        "seed": 42,
        "output_dir": "out",
        "coverage_covariate": "elevation",
    }
    path = directory / "config.json"
    path.write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    return path
