"""Backbone FCNs, the attention sub-net and the image-pyramid fusion model."""
from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import GradTape, Var, functional as F, ops
from .errors import ConfigError, WeightFileError

ACTIVATIONS = ("leaky_relu", "relu", "none")
FUSION_MODES = ("adaptive", "fixed", "no_softmax", "sum")
LEAKY_SLOPE = 0.1


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" or "pool"
    out_ch: int = 0
    in_ch: int = 0
    kh: int = 0
    kw: int = 0
    activation: str = "leaky_relu"

    def describe(self):
        if self.kind == "pool":
            return "max-pool 2x2"
        return f"conv {self.out_ch}x{self.in_ch}x{self.kh}x{self.kw} ({self.activation})"


POOL = LayerSpec("pool")


def conv(out_ch, in_ch, k, activation="leaky_relu"):
    return LayerSpec("conv", out_ch, in_ch, k, k, activation)


@dataclass(frozen=True)
class NetworkConfig:
    name: str
    layers: tuple

    @property
    def convs(self):
        return [l for l in self.layers if l.kind == "conv"]

    @property
    def feature_channels(self):
        """Channels of the penultimate conv output (the attention sub-net input)."""
        return self.convs[-2].out_ch

    def validate(self):
        convs = self.convs
        if len(convs) < 2:
            raise ConfigError(f"{self.name}: need at least two conv layers")
        n_pool = sum(l.kind == "pool" for l in self.layers)
        if n_pool != 2:
            raise ConfigError(f"{self.name}: expected exactly 2 pool layers, found {n_pool}")
        prev = 1
        for i, l in enumerate(self.layers):
            if l.kind == "pool":
                continue
            if l.kind != "conv":
                raise ConfigError(f"{self.name} layer {i}: unknown kind {l.kind!r}")
            if l.in_ch != prev:
                raise ConfigError(
                    f"{self.name} layer {i} ({l.describe()}): in_ch {l.in_ch} != previous out_ch {prev}")
            if l.kh % 2 == 0 or l.kw % 2 == 0 or l.kh < 1 or l.kw < 1:
                raise ConfigError(f"{self.name} layer {i} ({l.describe()}): kernel must be odd")
            if l.activation not in ACTIVATIONS:
                raise ConfigError(f"{self.name} layer {i}: unknown activation {l.activation!r}")
            prev = l.out_ch
        last = convs[-1]
        if last.out_ch != 1 or last.activation != "relu":
            raise ConfigError(
                f"{self.name}: last conv ({last.describe()}) must have 1 output channel and relu")
        # the attention branch reads the penultimate conv, which must already be
        # at the 1/4 output resolution
        kinds = [l.kind for l in self.layers]
        if kinds[-2:] != ["conv", "conv"]:
            raise ConfigError(f"{self.name}: the last two layers must be convs after the final pool")
        return self

    def to_dict(self):
        return {"name": self.name, "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], tuple(LayerSpec(**l) for l in d["layers"])).validate()


def make_config(name, channels, kernels, pool_after=(2, 4)):
    """Build a backbone from per-conv channel and kernel lists.

    ``pool_after`` holds 1-based conv indices followed by a max-pool.
    """
    if len(channels) != len(kernels):
        raise ConfigError(f"{name}: {len(channels)} channel entries vs {len(kernels)} kernels")
    layers, prev = [], 1
    for i, (c, k) in enumerate(zip(channels, kernels), start=1):
        act = "relu" if i == len(channels) else "leaky_relu"
        layers.append(conv(c, prev, k, act))
        if i in pool_after:
            layers.append(POOL)
        prev = c
    return NetworkConfig(name, tuple(layers)).validate()


PRESETS = {
    cfg.name: cfg
    for cfg in (
        make_config("FCN-7c", [16, 16, 32, 32, 64, 32, 1], [5] * 7),
        make_config("FCN-5c", [16, 32, 64, 32, 1], [5, 5, 3, 3, 3], pool_after=(1, 2)),
        make_config("FCN-7c-40", [32, 32, 64, 64, 96, 48, 1], [3] * 7),
        make_config("FCN-5c-64", [16, 32, 64, 32, 1], [5] * 5, pool_after=(1, 2)),
        make_config("FCN-5c-78", [16, 32, 64, 32, 1], [7, 7, 7, 5, 5], pool_after=(1, 2)),
        make_config("FCN-14c-76", [24, 24, 24, 24, 32, 32, 32, 32, 64, 64, 32, 32, 32, 1],
                    [3] * 14, pool_after=(4, 8)),
    )
}


def get_config(name_or_config):
    if isinstance(name_or_config, NetworkConfig):
        return name_or_config.validate()
    try:
        return PRESETS[name_or_config]
    except KeyError:
        raise ConfigError(
            f"unknown network {name_or_config!r}; presets: {', '.join(PRESETS)}") from None


def receptive_field(config):
    """Input extent seen by one output pixel: rf += (k - 1) * jump per layer."""
    rf, jump = 1, 1
    for l in get_config(config).layers:
        if l.kind == "pool":
            rf += (2 - 1) * jump
            jump *= 2
        else:
            rf += (l.kh - 1) * jump
    return rf


def _glorot(rng, out_ch, in_ch, kh, kw):
    bound = np.sqrt(6.0 / (in_ch * kh * kw + out_ch * kh * kw))
    w = rng.uniform(-bound, bound, size=(out_ch, in_ch, kh, kw)).astype(np.float32)
    return w, np.zeros(out_ch, dtype=np.float32)


def _conv_act(x, w, b, activation, tape, name):
    y = F.conv2d(x, w, b, tape, name)
    if activation == "leaky_relu":
        return F.leaky_relu(y, LEAKY_SLOPE, tape, name + ".act")
    if activation == "relu":
        return F.relu(y, tape, name + ".act")
    return y


class Backbone:
    """Fully convolutional density regressor, output at 1/4 resolution."""

    def __init__(self, config, seed=0):
        self.config = get_config(config)
        rng = np.random.default_rng(seed)
        self.params = OrderedDict()
        for i, l in enumerate(self.config.convs, start=1):
            w, b = _glorot(rng, l.out_ch, l.in_ch, l.kh, l.kw)
            self.params[f"conv{i}.w"] = Var(w, True, f"backbone.conv{i}.w")
            self.params[f"conv{i}.b"] = Var(b, True, f"backbone.conv{i}.b")

    def forward(self, x, tape=None):
        """Returns (density, penultimate feature map)."""
        convs = self.config.convs
        feat, i = None, 0
        for l in self.config.layers:
            if l.kind == "pool":
                x = F.maxpool2x2(x, tape)
                continue
            i += 1
            x = _conv_act(x, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"],
                          l.activation, tape, f"backbone.conv{i}")
            if i == len(convs) - 1:
                feat = x
        return x, feat

    def layer_shapes(self, h, w):
        rows, c = [], 1
        for l in self.config.layers:
            if l.kind == "pool":
                h, w = h // 2, w // 2
            else:
                c = l.out_ch
            rows.append((l.describe(), (c, h, w)))
        return rows


class AttentionSubnet:
    """Two convs summarising backbone features into a 1-channel attention map."""

    def __init__(self, in_ch=32, seed=0, hidden=8):
        rng = np.random.default_rng(seed)
        self.in_ch = in_ch
        w1, b1 = _glorot(rng, hidden, in_ch, 3, 3)
        w2, b2 = _glorot(rng, 1, hidden, 1, 1)
        self.params = OrderedDict([
            ("conv1.w", Var(w1, True, "attention.conv1.w")),
            ("conv1.b", Var(b1, True, "attention.conv1.b")),
            ("conv2.w", Var(w2, True, "attention.conv2.w")),
            ("conv2.b", Var(b2, True, "attention.conv2.b")),
        ])

    def forward(self, feat, tape=None):
        if feat.shape[1] != self.in_ch:
            raise ConfigError(
                f"attention sub-net expects {self.in_ch} channels, got {feat.shape[1]}")
        p = self.params
        a = _conv_act(feat, p["conv1.w"], p["conv1.b"], "leaky_relu", tape, "attention.conv1")
        return _conv_act(a, p["conv2.w"], p["conv2.b"], "none", tape, "attention.conv2")


def build_backbone(config, seed=0):
    return Backbone(config, seed)


def build_attention_subnet(in_ch=32, seed=0, backbone=None):
    if backbone is not None and backbone.config.feature_channels != in_ch:
        raise ConfigError(
            f"attention in_ch {in_ch} != backbone feature channels "
            f"{backbone.config.feature_channels} ({backbone.config.name})")
    return AttentionSubnet(in_ch, seed)


@dataclass
class PyramidOutput:
    fused: Var
    densities: list
    attention: list = field(default_factory=list)


class PyramidModel:
    """Shared backbone over an image pyramid, fused per pixel across scales.

    The same backbone and attention objects serve every scale, so their
    parameters exist once.
    """

    def __init__(self, config, scales=(1.0,), fusion_mode="adaptive", seed=0):
        scales = tuple(float(s) for s in scales)
        if not scales:
            raise ConfigError("scale list is empty")
        if scales[0] != 1.0 or any(not 0.0 < s <= 1.0 for s in scales):
            raise ConfigError(f"scales must lie in (0, 1] and start with 1.0, got {scales}")
        if fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {fusion_mode!r}; choose from {FUSION_MODES}")
        self.scales = scales
        self.fusion_mode = fusion_mode
        ss = np.random.SeedSequence(seed)
        s_bb, s_att = ss.spawn(2)
        self.backbone = Backbone(config, np.random.default_rng(s_bb))
        self.config = self.backbone.config
        self.attention = None
        if fusion_mode != "fixed":
            self.attention = AttentionSubnet(self.config.feature_channels,
                                             np.random.default_rng(s_att))
        self.fusion = OrderedDict()
        if fusion_mode != "sum":
            S = len(scales)
            self.fusion["w"] = Var(np.full((1, S, 1, 1), 1.0 / S, np.float32), True, "fusion.w")
            self.fusion["b"] = Var(np.zeros(1, np.float32), True, "fusion.b")

    @property
    def num_scales(self):
        return len(self.scales)

    def parameters(self):
        out = OrderedDict(("backbone." + k, v) for k, v in self.backbone.params.items())
        if self.attention is not None:
            out.update(("attention." + k, v) for k, v in self.attention.params.items())
        out.update(("fusion." + k, v) for k, v in self.fusion.items())
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    @property
    def dtype(self):
        return self.backbone.params["conv1.w"].data.dtype

    def astype(self, dtype):
        """Convert every parameter in place (float64 is used for gradient checks)."""
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        return self

    def scaled_dims(self, h, w):
        return [(int(np.floor(s * h + 0.5)), int(np.floor(s * w + 0.5))) for s in self.scales]

    def forward(self, image, tape=None):
        """Run the pyramid on an (n, 1, h, w) image batch; h, w multiples of 4."""
        image = np.asarray(image)
        if image.ndim == 2:
            image = image[None, None]
        n, c, h, w = image.shape
        if c != 1:
            raise ConfigError(f"expected a 1-channel image, got {c} channels")
        if h % 4 or w % 4:
            raise ConfigError(f"image dims {h}x{w} must be multiples of 4 (pad first)")
        th, tw = h // 4, w // 4
        dens, atts = [], []
        for k, (hs, ws) in enumerate(self.scaled_dims(h, w)):
            if hs < 4 or ws < 4:
                raise ConfigError(f"scale {self.scales[k]} shrinks {h}x{w} below 4 px")
            xs = image if (hs, ws) == (h, w) else ops.resize_bilinear(image, hs, ws)
            d, feat = self.backbone.forward(Var(xs.astype(self.dtype, copy=False)), tape)
            if d.shape[2:] != (th, tw):
                d = F.bilinear_upsample(d, th, tw, tape, f"scale{k}.density_up")
            dens.append(d)
            if self.attention is not None:
                a = self.attention.forward(feat, tape)
                if a.shape[2:] != (th, tw):
                    a = F.bilinear_upsample(a, th, tw, tape, f"scale{k}.attention_up")
                atts.append(a)
        return self._fuse(dens, atts, tape)

    def _fuse(self, dens, atts, tape):
        mode = self.fusion_mode
        if mode == "fixed":
            stack = F.concat_channels(dens, tape) if len(dens) > 1 else dens[0]
            fused = F.conv2d(stack, self.fusion["w"], self.fusion["b"], tape, "fusion.conv")
            return PyramidOutput(F.relu(fused, tape, "fusion.relu"), dens, [])
        weights = atts if mode == "no_softmax" else F.softmax_across_scales(atts, tape)
        rect = [F.mul(d, a, tape) for d, a in zip(dens, weights)]
        if mode == "sum":
            fused = F.add(rect, tape) if len(rect) > 1 else rect[0]
        else:
            stack = F.concat_channels(rect, tape) if len(rect) > 1 else rect[0]
            fused = F.conv2d(stack, self.fusion["w"], self.fusion["b"], tape, "fusion.conv")
        return PyramidOutput(F.relu(fused, tape, "fusion.relu"), dens, weights)

    def __call__(self, image):
        return self.forward(image).fused.data


def forward_pyramid(model, image, record_tape=False):
    """Returns (PyramidOutput, tape or None)."""
    tape = GradTape() if record_tape else None
    return model.forward(image, tape), tape


def count_parameters(model):
    if isinstance(model, PyramidModel):
        params = model.parameters().values()
    elif isinstance(model, (Backbone, AttentionSubnet)):
        params = model.params.values()
    else:
        params = Backbone(model).params.values()
    return int(sum(p.data.size for p in params))


def count_parameters_arith(config, scales=0, fusion_mode=None):
    """Parameter count from the layer table alone, without allocating weights."""
    cfg = get_config(config)
    total = sum(l.out_ch * l.in_ch * l.kh * l.kw + l.out_ch for l in cfg.convs)
    if fusion_mode in ("adaptive", "no_softmax", "sum"):
        total += 8 * cfg.feature_channels * 9 + 8 + 8 + 1
    if fusion_mode in ("adaptive", "no_softmax", "fixed"):
        total += scales + 1
    return total


# -- weight file ----------------------------------------------------------
MAGIC = b"PYRD"
FORMAT_VERSION = 1
_MODE_CODES = {m: i for i, m in enumerate(FUSION_MODES)}


def _write_str(f, s):
    raw = s.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def save_weights(model, path):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    _write_str(buf, model.config.name)
    custom = "" if PRESETS.get(model.config.name) == model.config else json.dumps(model.config.to_dict())
    _write_str(buf, custom)
    buf.write(struct.pack("<I", model.num_scales))
    buf.write(struct.pack("<B", _MODE_CODES[model.fusion_mode]))
    buf.write(struct.pack(f"<{model.num_scales}d", *model.scales))
    params = list(model.parameters().values())
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise WeightFileError(f"{self.path}: truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what):
        (n,) = self.unpack("<I", what + " length")
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise WeightFileError(f"{self.path}: {what} is not valid UTF-8") from None


def load_weights(path, model=None):
    """Read a weight file; builds the model from the header unless one is given."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    if r.take(4, "magic") != MAGIC:
        raise WeightFileError(f"{path}: bad magic (not a PYRD weight file)")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise WeightFileError(f"{path}: unsupported format version {version}")
    name = r.string("config name")
    custom = r.string("config json")
    (S,) = r.unpack("<I", "scale count")
    (mode_code,) = r.unpack("<B", "fusion mode")
    if mode_code >= len(FUSION_MODES):
        raise WeightFileError(f"{path}: unknown fusion mode code {mode_code}")
    scales = r.unpack(f"<{S}d", "scales")
    mode = FUSION_MODES[mode_code]
    if custom:
        config = NetworkConfig.from_dict(json.loads(custom))
    else:
        try:
            config = PRESETS[name]
        except KeyError:
            raise WeightFileError(f"{path}: unknown preset {name!r}") from None
    if model is None:
        model = PyramidModel(config, scales, mode)
    elif model.fusion_mode != mode or model.num_scales != S:
        raise WeightFileError(
            f"{path}: file holds {S} scales/{mode}, model has {model.num_scales}/{model.fusion_mode}")
    params = model.parameters()
    (count,) = r.unpack("<I", "tensor count")
    if count != len(params):
        raise WeightFileError(f"{path}: file has {count} tensors, model expects {len(params)}")
    loaded = []
    for key, p in params.items():
        (rank,) = r.unpack("<I", f"{key} rank")
        dims = r.unpack(f"<{rank}I", f"{key} dims")
        if tuple(dims) != p.data.shape:
            raise WeightFileError(f"{path}: shape mismatch for {key}: file {dims}, model {p.data.shape}")
        n = int(np.prod(dims)) * 4
        loaded.append(np.frombuffer(r.take(n, key), dtype="<f4").reshape(dims).astype(np.float32))
    if r.pos != len(r.data):
        raise WeightFileError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    for p, arr in zip(params.values(), loaded):
        p.data = arr
    return model
