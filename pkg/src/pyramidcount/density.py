"""Ground-truth density maps from point annotations."""
from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError

log = logging.getLogger(__name__)

TRUNCATE = 4.0
SIGMA_MIN = 1.0
SIGMA_MAX = 25.0
FALLBACK_SIGMA = 15.0
DEFAULT_BETA = 0.3


def _as_points(points):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return pts


def check_points(points, dims):
    h, w = dims
    pts = _as_points(points)
    bad = np.where((pts[:, 0] < 0) | (pts[:, 0] >= w) | (pts[:, 1] < 0) | (pts[:, 1] >= h))[0]
    if len(bad):
        listing = ", ".join(f"#{i} ({pts[i, 0]:g}, {pts[i, 1]:g})" for i in bad[:5])
        raise InputError(f"{len(bad)} point(s) outside the {w}x{h} image: {listing}")
    return pts


def _splat(density, x, y, sigma):
    """Add one unit-mass Gaussian centred at (x, y), truncated and renormalised."""
    h, w = density.shape
    r = int(math.ceil(TRUNCATE * sigma))
    cx, cy = int(round(x)), int(round(y))
    x0, x1 = max(0, cx - r), min(w, cx + r + 1)
    y0, y1 = max(0, cy - r), min(h, cy + r + 1)
    gx = np.exp(-((np.arange(x0, x1) - x) ** 2) / (2 * sigma * sigma))
    gy = np.exp(-((np.arange(y0, y1) - y) ** 2) / (2 * sigma * sigma))
    k = np.outer(gy, gx)
    density[y0:y1, x0:x1] += k / k.sum()


def generate_fixed(points, dims, sigma=FALLBACK_SIGMA):
    """Density map with an isotropic Gaussian of std ``sigma`` per point.

    Gaussians are evaluated at integer pixel coordinates against the raw
    point coordinates, truncated at 4 sigma and renormalised over the part
    of the window inside the image, so every point contributes mass 1.
    """
    if sigma <= 0:
        raise InputError(f"sigma must be positive, got {sigma}")
    pts = check_points(points, dims)
    density = np.zeros(dims, dtype=np.float64)
    for x, y in pts:
        _splat(density, x, y, sigma)
    return density


def knn_distances(points, k):
    """Mean distance from each point to its k nearest other points.

    With fewer than k other points the mean runs over all of them.
    """
    pts = _as_points(points)
    if len(pts) < 2:
        raise InputError(f"need at least 2 points for kNN distances, got {len(pts)}")
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    k_eff = min(k, len(pts) - 1)
    dist, _ = cKDTree(pts).query(pts, k=k_eff + 1)
    # column 0 is the point itself (distance 0), duplicates are also 0
    return dist[:, 1:].mean(axis=1)


def adaptive_sigmas(points, k=5, beta=DEFAULT_BETA):
    pts = _as_points(points)
    if len(pts) < 2:
        return np.full(len(pts), FALLBACK_SIGMA)
    return np.clip(beta * knn_distances(pts, k), SIGMA_MIN, SIGMA_MAX)


def generate_adaptive(points, dims, k=5, beta=DEFAULT_BETA):
    """Geometry-adaptive kernels: sigma_i = beta * mean kNN distance of point i."""
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    pts = check_points(points, dims)
    if len(pts) == 1:
        log.warning("single annotated point: using fallback sigma %.1f", FALLBACK_SIGMA)
    density = np.zeros(dims, dtype=np.float64)
    for (x, y), s in zip(pts, adaptive_sigmas(pts, k, beta)):
        _splat(density, x, y, s)
    return density


def pad_to_multiple(arr, m=4):
    h, w = arr.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph == 0 and pw == 0:
        return arr
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(arr, pad)


def sum_pool_4(density):
    """Non-overlapping 4x4 block sums (zero-padding right/bottom if needed)."""
    d = pad_to_multiple(np.asarray(density, dtype=np.float64), 4)
    h, w = d.shape[-2:]
    return d.reshape(*d.shape[:-2], h // 4, 4, w // 4, 4).sum(axis=(-3, -1))


# -- file formats ---------------------------------------------------------
def load_annotations(path):
    with open(path) as f:
        doc = json.load(f)
    if "points" not in doc:
        raise InputError(f"{path}: missing 'points'")
    pts = doc["points"]
    if any(len(p) != 2 for p in pts):
        raise InputError(f"{path}: every point must be [x, y]")
    return doc.get("image", Path(path).stem), _as_points(pts)


def save_annotations(path, image_name, points):
    doc = {"image": image_name, "points": [[float(x), float(y)] for x, y in _as_points(points)]}
    with open(path, "w") as f:
        json.dump(doc, f)


def save_csv(path, grid):
    np.savetxt(path, grid, delimiter=",", fmt="%.9g")


def load_csv(path):
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))
