"""Tape-recording wrappers around the raw kernels in :mod:`ops`.

Each function takes :class:`Var` inputs and returns a new :class:`Var`. When
``tape`` is None nothing is recorded (inference).
"""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from . import ops
from .tape import Var


def _out(data, *inputs):
    return Var(data, requires_grad=any(v.requires_grad for v in inputs))


def _record(tape, name, out, fn):
    if tape is None or not out.requires_grad:
        return

    def backward():
        if out.grad is not None:
            fn(out.grad)

    tape.record(name, backward)


def conv2d(x, w, b, tape=None, name="conv2d"):
    out = _out(ops.conv2d_forward(x.data, w.data, b.data), x, w, b)

    def bw(g):
        gx, gw, gb = ops.conv2d_backward(g, x.data, w.data, need_input_grad=x.requires_grad)
        if gx is not None:
            x.accumulate(gx)
        w.accumulate(gw)
        b.accumulate(gb)

    _record(tape, name, out, bw)
    return out


def maxpool2x2(x, tape=None, name="maxpool"):
    y, arg = ops.maxpool2x2_forward(x.data)
    out = _out(y, x)
    _record(tape, name, out, lambda g: x.accumulate(ops.maxpool2x2_backward(g, arg, x.shape)))
    return out


def leaky_relu(x, slope=0.1, tape=None, name="leaky_relu"):
    out = _out(ops.leaky_relu(x.data, slope), x)
    _record(tape, name, out, lambda g: x.accumulate(ops.leaky_relu_backward(g, x.data, slope)))
    return out


def relu(x, tape=None, name="relu"):
    out = _out(ops.relu(x.data), x)
    _record(tape, name, out, lambda g: x.accumulate(ops.relu_backward(g, x.data)))
    return out


def bilinear_upsample(x, target_h, target_w, tape=None, name="upsample"):
    out = _out(ops.bilinear_upsample(x.data, target_h, target_w), x)
    _record(tape, name, out,
            lambda g: x.accumulate(ops.bilinear_upsample_backward(g, x.shape)))
    return out


def softmax_across_scales(maps, tape=None, name="softmax"):
    """Per-pixel softmax over a list of equally shaped maps; returns a list."""
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise ConfigError(f"scale maps differ in shape: {sorted(shapes)}")
    probs = ops.softmax_across_scales(np.stack([m.data for m in maps]))
    outs = [_out(p, *maps) for p in probs]

    def backward():
        if all(o.grad is None for o in outs):
            return
        g = np.stack([o.grad if o.grad is not None else np.zeros_like(o.data) for o in outs])
        gin = ops.softmax_across_scales_backward(g, probs)
        for m, gi in zip(maps, gin):
            m.accumulate(gi)

    if tape is not None and any(o.requires_grad for o in outs):
        tape.record(name, backward)
    return outs


def mul(a, b, tape=None, name="mul"):
    out = _out(ops.elementwise_mul(a.data, b.data), a, b)

    def bw(g):
        ga, gb = ops.elementwise_mul_backward(g, a.data, b.data)
        a.accumulate(ga)
        b.accumulate(gb)

    _record(tape, name, out, bw)
    return out


def add(vars_, tape=None, name="add"):
    data = vars_[0].data.copy()
    for v in vars_[1:]:
        data += v.data
    out = _out(data, *vars_)

    def bw(g):
        for v in vars_:
            v.accumulate(g)

    _record(tape, name, out, bw)
    return out


def concat_channels(vars_, tape=None, name="concat"):
    out = _out(np.concatenate([v.data for v in vars_], axis=1), *vars_)
    sizes = np.cumsum([v.shape[1] for v in vars_])[:-1]

    def bw(g):
        for v, gi in zip(vars_, np.split(g, sizes, axis=1)):
            v.accumulate(gi)

    _record(tape, name, out, bw)
    return out


def mse_loss(pred, target, tape=None, name="mse"):
    """Returns a 0-d Var holding the mean squared error."""
    out = _out(np.array(ops.mse_loss(pred.data, target), dtype=np.float64), pred)
    _record(tape, name, out,
            lambda g: pred.accumulate(ops.mse_loss_backward(pred.data, target, float(g))))
    return out
