"""Synthetic perspective scenes: soft-edged blobs whose size grows with y."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError


@dataclass
class SyntheticSceneSpec:
    height: int = 192
    width: int = 192
    count_min: int = 10
    count_max: int = 40
    size_top: float = 6.0          # blob diameter at y = 0
    size_gradient: float = 22.0 / 191.0  # diameter increase per pixel of y
    size_profile: str = "linear"   # "linear" or "step" (top half small, bottom half large)
    size_bottom: float = 28.0      # used by the step profile only
    edge_softness: float = 1.0
    intensity_min: float = 150.0
    intensity_max: float = 230.0
    background: float = 40.0
    noise: float = 8.0
    min_gap: float = 1.0           # required clearance between blob rims
    # rows are drawn with weight (size_top / size(y)) ** density_falloff;
    # 0 is uniform in y, 2 gives a constant count per unit of ground area
    density_falloff: float = 0.0
    seed: int = 0

    def diameter(self, y):
        y = np.asarray(y, dtype=np.float64)
        if self.size_profile == "step":
            return np.where(y < self.height / 2, self.size_top, self.size_bottom)
        return self.size_top + self.size_gradient * y

    def validate(self):
        if self.height < 4 or self.width < 4:
            raise ConfigError(f"image dims {self.height}x{self.width} too small")
        if not 0 <= self.count_min <= self.count_max:
            raise ConfigError(f"bad count range [{self.count_min}, {self.count_max}]")
        if self.size_profile not in ("linear", "step"):
            raise ConfigError(f"unknown size_profile {self.size_profile!r}")
        d = self.diameter(np.array([0.0, self.height - 1.0]))
        if d.min() < 2:
            raise ConfigError(f"blob diameter must stay >= 2 px, got {d.min():.3g}")
        if self.noise < 0 or self.edge_softness <= 0:
            raise ConfigError("noise must be >= 0 and edge_softness > 0")
        if self.density_falloff < 0:
            raise ConfigError(f"density_falloff must be >= 0, got {self.density_falloff}")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scene spec field(s): {', '.join(sorted(unknown))}")
        return cls(**d).validate()

    def to_dict(self):
        return asdict(self)


@dataclass
class Scene:
    image: np.ndarray       # (h, w) uint8
    points: np.ndarray      # (n, 2) blob centres as (x, y)
    diameters: np.ndarray   # (n,)


def place_blobs(spec, n, rng, max_tries=2000):
    """Rejection-sample n non-overlapping centres; gives up on crowded draws."""
    pts, diam = [], []
    d_min = float(spec.diameter(np.array([0.0, spec.height - 1.0])).min())
    tries = 0
    while len(pts) < n and tries < max_tries * max(n, 1):
        tries += 1
        y = rng.uniform(0, spec.height - 1)
        d = float(spec.diameter(y))
        if spec.density_falloff and rng.random() > (d_min / d) ** spec.density_falloff:
            continue
        r = d / 2
        lo_x, hi_x = min(r, spec.width / 2), max(spec.width - 1 - r, spec.width / 2)
        x = rng.uniform(lo_x, hi_x)
        ok = all((x - px) ** 2 + (y - py) ** 2 >= (r + pd / 2 + spec.min_gap) ** 2
                 for (px, py), pd in zip(pts, diam))
        if ok:
            pts.append((x, y))
            diam.append(d)
    if len(pts) < n:
        raise ConfigError(f"could not place {n} blobs without overlap in "
                          f"{spec.height}x{spec.width}; lower count_max")
    return np.array(pts, dtype=np.float64).reshape(-1, 2), np.array(diam)


def render(spec, points, diameters, rng):
    h, w = spec.height, spec.width
    img = np.full((h, w), spec.background, dtype=np.float64)
    yy, xx = np.mgrid[0:h, 0:w]
    for (x, y), d in zip(points, diameters):
        r = d / 2
        amp = rng.uniform(spec.intensity_min, spec.intensity_max)
        pad = int(np.ceil(r + 2 * spec.edge_softness)) + 1
        x0, x1 = max(0, int(x) - pad), min(w, int(x) + pad + 1)
        y0, y1 = max(0, int(y) - pad), min(h, int(y) + pad + 1)
        dist = np.hypot(xx[y0:y1, x0:x1] - x, yy[y0:y1, x0:x1] - y)
        cover = np.clip((r - dist) / spec.edge_softness + 0.5, 0.0, 1.0)
        patch = img[y0:y1, x0:x1]
        img[y0:y1, x0:x1] = patch + cover * (amp - patch)
    if spec.noise > 0:
        img += rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_scene(spec, rng, count=None):
    n = int(rng.integers(spec.count_min, spec.count_max + 1)) if count is None else count
    pts, diam = place_blobs(spec, n, rng)
    return Scene(render(spec, pts, diam, rng), pts, diam)


def generate_synthetic_dataset(spec, n_images):
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    return [generate_scene(spec, rng) for _ in range(n_images)]
