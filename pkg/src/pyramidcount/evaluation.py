"""Full-image inference and counting metrics."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import InputError
from .training import to_input


def _padded_dims(h, w, scales):
    # every pyramid level must survive two 2x2 pools
    smallest = min(scales)
    min_dim = int(math.ceil(4.0 / smallest))
    ph = max(h, min_dim)
    pw = max(w, min_dim)
    return ph + (-ph) % 4, pw + (-pw) % 4


def predict_full(model, image, density_scale=100.0, return_output=False):
    """Density map at 1/4 resolution whose sum is the predicted count.

    ``image`` is a 2-D grayscale array on the 0..255 scale. It is zero-padded
    right/bottom to a multiple of 4, and the result is cropped back to
    (ceil(h/4), ceil(w/4)).
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise InputError(f"expected a 2-D grayscale image, got shape {image.shape}")
    h, w = image.shape
    H, W = _padded_dims(h, w, model.scales)
    x = np.zeros((1, 1, H, W), dtype=np.float32)
    x[0, 0, :h, :w] = to_input(image)
    out = model.forward(x)
    oh, ow = -(-h // 4), -(-w // 4)
    dens = out.fused.data[0, 0, :oh, :ow].astype(np.float64) / density_scale
    if return_output:
        return dens, out
    return dens


def _pairs(gt, pred):
    gt = np.asarray(gt, dtype=np.float64).ravel()
    pred = np.asarray(pred, dtype=np.float64).ravel()
    if gt.size == 0:
        raise InputError("metrics need at least one (gt, pred) pair")
    if gt.shape != pred.shape:
        raise InputError(f"{gt.size} ground-truth counts vs {pred.size} predictions")
    return gt, pred


def mae(gt, pred):
    gt, pred = _pairs(gt, pred)
    return float(np.mean(np.abs(pred - gt)))


def mse(gt, pred):
    gt, pred = _pairs(gt, pred)
    return float(np.mean((pred - gt) ** 2))


def rmse(gt, pred):
    return math.sqrt(mse(gt, pred))


@dataclass
class EvalResult:
    names: list
    gt: np.ndarray
    pred: np.ndarray
    fps: float = float("nan")
    mae: float = field(init=False)
    mse: float = field(init=False)
    rmse: float = field(init=False)

    def __post_init__(self):
        self.mae = mae(self.gt, self.pred)
        self.mse = mse(self.gt, self.pred)
        self.rmse = math.sqrt(self.mse)

    def summary(self):
        return {"mae": self.mae, "mse": self.mse, "rmse": self.rmse, "fps": self.fps,
                "n_images": len(self.names)}

    def write(self, csv_path, json_path):
        with open(csv_path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["image", "gt", "pred", "abs_err"])
            for n, g, p in zip(self.names, self.gt, self.pred):
                wr.writerow([n, f"{g:.6g}", f"{p:.6g}", f"{abs(p - g):.6g}"])
        with open(json_path, "w") as f:
            json.dump({k: (None if isinstance(v, float) and math.isnan(v) else v)
                       for k, v in self.summary().items()}, f, indent=2)


def evaluate_counts(model, items, density_scale=100.0, names=None):
    """``items``: (raw image, gt count) pairs."""
    gt, pred = [], []
    for image, count in items:
        gt.append(float(count))
        pred.append(float(predict_full(model, image, density_scale).sum()))
    names = names or [str(i) for i in range(len(gt))]
    return EvalResult(list(names), np.array(gt), np.array(pred))


def benchmark_fps(model, dims, n_runs=5, warmup=1, seed=0, threads=1):
    """Median images/second of predict_full on random images of size dims=(h, w).

    BLAS is pinned to ``threads`` threads (None leaves the pool alone).
    """
    if n_runs < 1:
        raise InputError(f"n_runs must be >= 1, got {n_runs}")
    rng = np.random.default_rng(seed)
    image = rng.integers(0, 256, size=dims).astype(np.uint8)
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            predict_full(model, image)
        times = []
        for _ in range(n_runs):
            t0 = time.perf_counter()
            predict_full(model, image)
            times.append(time.perf_counter() - t0)
    return 1.0 / float(np.median(times))
