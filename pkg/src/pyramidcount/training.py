"""Patch sampling, optimizers and the end-to-end training loop."""
from __future__ import annotations

import csv
import json
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .density import generate_fixed, sum_pool_4
from .engine import GradTape, Var, functional as F
from .errors import ConfigError, TrainingDiverged
from .network import save_weights

log = logging.getLogger(__name__)

PIXEL_SCALE = 255.0


@dataclass
class TrainConfig:
    patch_size: int = 128
    target_size: int = 32
    density_scale: float = 100.0
    lr_initial: float = 0.001
    momentum: float = 0.9
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 100
    weight_decay: float = 1e-4
    adam_warm_epochs: int = 0
    epochs: int = 100
    batch_size: int = 8
    patches_per_image: int = 1
    hflip: bool = False
    seed: int = 0

    def validate(self):
        if self.patch_size != 4 * self.target_size:
            raise ConfigError(
                f"patch_size ({self.patch_size}) must be 4 x target_size ({self.target_size})")
        for name in ("lr_initial", "density_scale", "lr_decay_factor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("momentum must be in [0, 1) and weight_decay >= 0")
        if self.epochs < 0 or self.adam_warm_epochs < 0:
            raise ConfigError("epochs and adam_warm_epochs must be >= 0")
        if self.batch_size < 1 or self.patches_per_image < 1 or self.lr_decay_every < 1:
            raise ConfigError("batch_size, patches_per_image and lr_decay_every must be >= 1")
        return self

    def lr_at(self, epoch):
        return self.lr_initial * self.lr_decay_factor ** (epoch // self.lr_decay_every)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config field(s): {', '.join(sorted(unknown))}")
        return cls(**d).validate()

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def to_input(image):
    """uint8-range grayscale -> float32 in [0, 1]."""
    return np.asarray(image, dtype=np.float32) / np.float32(PIXEL_SCALE)


def make_sample(image, points, sigma=4.0):
    """(normalised image, full-resolution density) pair for training."""
    image = np.asarray(image)
    return to_input(image), generate_fixed(points, image.shape, sigma)


def sample_patch(image, density, rng, patch_size=128, density_scale=100.0, hflip=False):
    """Random crop plus its 4x4 sum-pooled, scaled density target."""
    h, w = image.shape
    ph, pw = max(0, patch_size - h), max(0, patch_size - w)
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw)))
        density = np.pad(density, ((0, ph), (0, pw)))
        h, w = image.shape
    top = int(rng.integers(0, h - patch_size + 1))
    left = int(rng.integers(0, w - patch_size + 1))
    patch = image[top:top + patch_size, left:left + patch_size]
    dens = density[top:top + patch_size, left:left + patch_size]
    if hflip and rng.random() < 0.5:
        patch, dens = patch[:, ::-1], dens[:, ::-1]
    return np.ascontiguousarray(patch), sum_pool_4(dens) * density_scale


def _check_finite(params, step):
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDiverged(f"non-finite gradient in {name} at step {step}")


class SGDMomentum:
    """v <- momentum * v - lr * (g + wd * w);  w <- w + v."""

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())
        self.steps = 0

    def step(self, lr):
        _check_finite(self.params, self.steps)
        for k, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[k]
            v *= self.momentum
            v -= lr * (p.grad + self.weight_decay * p.data)
            p.data += v
        self.steps += 1

    def state_dict(self):
        return {"kind": "sgd", "steps": self.steps,
                **{f"v:{k}": v for k, v in self.velocity.items()}}

    def load_state_dict(self, state):
        self.steps = int(state["steps"])
        for k in self.velocity:
            self.velocity[k] = np.array(state[f"v:{k}"], dtype=np.float32)


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())
        self.v = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())
        self.steps = 0

    def step(self, lr):
        _check_finite(self.params, self.steps)
        self.steps += 1
        t = self.steps
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_dict(self):
        return {"kind": "adam", "steps": self.steps,
                **{f"m:{k}": a for k, a in self.m.items()},
                **{f"v:{k}": a for k, a in self.v.items()}}

    def load_state_dict(self, state):
        self.steps = int(state["steps"])
        for k in self.m:
            self.m[k] = np.array(state[f"m:{k}"], dtype=np.float32)
            self.v[k] = np.array(state[f"v:{k}"], dtype=np.float32)


def sgd_momentum_step(params, optimizer_state, lr, momentum=0.9, weight_decay=0.0):
    """Functional form: ``optimizer_state`` is an SGDMomentum created on ``params``."""
    if optimizer_state is None:
        optimizer_state = SGDMomentum(params, momentum, weight_decay)
    optimizer_state.momentum, optimizer_state.weight_decay = momentum, weight_decay
    optimizer_state.step(lr)
    return optimizer_state


def adam_step(params, optimizer_state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    if optimizer_state is None:
        optimizer_state = Adam(params, beta1, beta2, eps)
    optimizer_state.step(lr)
    return optimizer_state


def batch_loss(model, patches, targets, tape=None):
    """Mean per-pixel MSE over a batch; returns the loss Var."""
    x = np.stack(patches)[:, None].astype(np.float32)
    y = np.stack(targets)[:, None]
    out = model.forward(x, tape)
    return F.mse_loss(out.fused, y, tape)


def train_step(model, optimizer, patches, targets, lr):
    model.zero_grad()
    tape = GradTape()
    loss = batch_loss(model, patches, targets, tape)
    if not np.isfinite(loss.data):
        raise TrainingDiverged(f"loss is {float(loss.data)} at step {optimizer.steps}")
    tape.backward(loss)
    optimizer.step(lr)
    return float(loss.data)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_mae: float = float("nan")


LOG_FIELDS = ("epoch", "lr", "train_loss", "val_mae")


def write_log(path, records):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(LOG_FIELDS)
        for r in records:
            wr.writerow([r.epoch, f"{r.lr:.6g}", f"{r.train_loss:.6g}", f"{r.val_mae:.6g}"])


def read_log(path):
    with open(path, newline="") as f:
        return [EpochRecord(int(r["epoch"]), float(r["lr"]), float(r["train_loss"]),
                            float(r["val_mae"])) for r in csv.DictReader(f)]


def save_checkpoint(model, optimizer, epoch, out_dir, rng=None):
    out_dir = Path(out_dir)
    save_weights(model, out_dir / "model.pyrd")
    state = optimizer.state_dict()
    state["epoch"] = epoch
    if rng is not None:
        state["rng"] = json.dumps(rng.bit_generator.state)
    np.savez(out_dir / "optimizer.npz", **state)


def load_optimizer_state(path):
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def train(model, dataset, config, val=None, out_dir=None, start_epoch=0,
          optimizer_state=None, records=None, progress=None):
    """Train ``model`` on ``dataset`` (a list of (image, density) pairs).

    Runs ``adam_warm_epochs`` of Adam, then SGD with momentum (velocity starts
    at zero). ``val`` is an optional list of (raw image, gt count) pairs for
    per-epoch MAE. With ``out_dir`` a checkpoint and CSV log are written
    after every epoch, so the last good state survives a divergence.
    """
    config.validate()
    if not dataset:
        raise ConfigError("training dataset is empty")
    from .evaluation import evaluate_counts  # circular at import time

    params = model.parameters()
    rng = np.random.default_rng(config.seed)
    if optimizer_state is not None and "rng" in optimizer_state:
        rng.bit_generator.state = json.loads(str(optimizer_state["rng"]))
    records = list(records or [])
    opt = None
    if optimizer_state is not None:
        kind = str(optimizer_state["kind"])
        opt = (Adam(params, weight_decay=config.weight_decay) if kind == "adam"
               else SGDMomentum(params, config.momentum, config.weight_decay))
        opt.load_state_dict(optimizer_state)
    out_dir = Path(out_dir) if out_dir is not None else None

    for epoch in range(start_epoch, config.epochs):
        use_adam = epoch < config.adam_warm_epochs
        if use_adam and not isinstance(opt, Adam):
            opt = Adam(params, weight_decay=config.weight_decay)
        elif not use_adam and not isinstance(opt, SGDMomentum):
            opt = SGDMomentum(params, config.momentum, config.weight_decay)
        lr = config.lr_at(epoch)

        order = np.repeat(np.arange(len(dataset)), config.patches_per_image)
        rng.shuffle(order)
        losses, weights = [], []
        for b0 in range(0, len(order), config.batch_size):
            patches, targets = [], []
            for idx in order[b0:b0 + config.batch_size]:
                img, dens = dataset[idx]
                p, t = sample_patch(img, dens, rng, config.patch_size,
                                    config.density_scale, config.hflip)
                patches.append(p)
                targets.append(t)
            losses.append(train_step(model, opt, patches, targets, lr))
            weights.append(len(patches))
        rec = EpochRecord(epoch + 1, lr, float(np.average(losses, weights=weights)))
        if val:
            rec.val_mae = evaluate_counts(model, val, config.density_scale).mae
        records.append(rec)
        if progress is not None:
            progress(rec)
        log.info("epoch %d lr %.3g loss %.6g val_mae %.4g", rec.epoch, lr, rec.train_loss, rec.val_mae)
        if out_dir is not None:
            save_checkpoint(model, opt, epoch + 1, out_dir, rng)
            write_log(out_dir / "train_log.csv", records)
    return records
