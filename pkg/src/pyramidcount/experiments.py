"""Desk-scale comparison of single-scale, fixed-fusion and adaptive pyramids.

Everything here runs on synthetic perspective scenes so that it finishes on a
laptop CPU; the models are deliberately small.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .evaluation import evaluate_counts, predict_full
from .network import PyramidModel, make_config
from .synthetic import SyntheticSceneSpec, generate_scene, generate_synthetic_dataset
from .training import TrainConfig, make_sample, train

VARIANTS = ("single", "fixed", "adaptive")


@dataclass
class DeskConfig:
    channels: tuple = (4, 8, 8, 8, 8, 1)
    kernels: tuple = (3, 3, 3, 3, 1, 1)
    pool_after: tuple = (2, 3)
    scales: tuple = (1.0, 0.5)
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    gt_sigma: float = 4.0
    n_train: int = 64
    n_test: int = 16
    scene: dict = field(default_factory=dict)   # SyntheticSceneSpec overrides

    def network(self):
        return make_config("desk", list(self.channels), list(self.kernels), self.pool_after)

    def train_config(self, seed):
        # Adam throughout; one lr halving two thirds of the way in
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           adam_warm_epochs=self.epochs, lr_initial=self.lr,
                           lr_decay_every=max(1, 2 * self.epochs // 3), seed=seed)

    def build(self, variant, seed):
        if variant == "single":
            return PyramidModel(self.network(), self.scales[:1], "fixed", seed=seed)
        return PyramidModel(self.network(), self.scales, variant, seed=seed)


def desk_data(cfg, seed):
    spec = SyntheticSceneSpec(seed=100 + seed, **cfg.scene)
    scenes = generate_synthetic_dataset(spec, cfg.n_train + cfg.n_test)
    train_set = [make_sample(s.image, s.points, cfg.gt_sigma) for s in scenes[:cfg.n_train]]
    test_set = [(s.image, len(s.points)) for s in scenes[cfg.n_train:]]
    return train_set, test_set


@dataclass
class DeskRun:
    seed: int
    variant: str
    mae: float
    seconds: float
    final_loss: float
    model: PyramidModel


def run_seed(cfg, seed, variants=VARIANTS, log=None):
    """Train every variant on the same data, sampling seed and budget."""
    train_set, test_set = desk_data(cfg, seed)
    runs = {}
    for v in variants:
        model = cfg.build(v, seed)
        t0 = time.perf_counter()
        recs = train(model, train_set, cfg.train_config(seed))
        res = evaluate_counts(model, test_set)
        runs[v] = DeskRun(seed, v, res.mae, time.perf_counter() - t0, recs[-1].train_loss, model)
        if log:
            log(f"seed {seed} {v:<9} test MAE {res.mae:.4g}  "
                f"train loss {recs[-1].train_loss:.4g}  {runs[v].seconds:.0f}s")
    return runs


def adaptive_wins(runs):
    return (runs["adaptive"].mae < runs["single"].mae
            and runs["adaptive"].mae < runs["fixed"].mae)


def split_scene(seed=7, small=6.0, large=28.0, count=30):
    """Small blobs in the top half, large blobs in the bottom half."""
    spec = SyntheticSceneSpec(size_profile="step", size_top=small, size_bottom=large,
                              count_min=count, count_max=count, seed=seed)
    return spec, generate_scene(spec.validate(), np.random.default_rng(seed))


def blob_coverage(shape, points, diameters, stride=4):
    """Fraction of each stride x stride cell covered by blob disks."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros(shape, dtype=bool)
    for (x, y), d in zip(points, diameters):
        mask |= (xx - x) ** 2 + (yy - y) ** 2 <= (d / 2) ** 2
    hh, ww = -(-h // stride) * stride, -(-w // stride) * stride
    padded = np.zeros((hh, ww))
    padded[:h, :w] = mask
    return padded.reshape(hh // stride, stride, ww // stride, stride).mean(axis=(1, 3))


def attention_by_blob_size(model, scene, scale_index=0):
    """Coverage-weighted mean attention of one scale over small and large blobs."""
    _, out = predict_full(model, scene.image, return_output=True)
    att = out.attention[scale_index].data[0, 0]
    sizes = np.unique(scene.diameters)
    small = scene.diameters == sizes.min()
    means = []
    for sel in (small, ~small):
        cov = blob_coverage(scene.image.shape, scene.points[sel], scene.diameters[sel])
        cov = cov[:att.shape[0], :att.shape[1]]
        means.append(float((att * cov).sum() / cov.sum()))
    return tuple(means)
