"""Network modules, composite blocks, and the model-graph descriptor.

Parameters are plain Tensors registered on Modules; initialization draws
from an explicit :class:`~b2bdet.rng.Rng` in construction order, so a
(seed, graph) pair always yields bit-identical weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


class ConfigurationError(ValueError):
    """A block or graph was configured with incompatible hyperparameters."""


def make_divisible(v, divisor=8):
    return max(divisor, int(round(v / divisor)) * divisor)


# ---------------------------------------------------------------------------
# module system
# ---------------------------------------------------------------------------

class Module:
    """Minimal container: tracks parameters, buffers and child modules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield (f"{prefix}{name}", b)
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def state_dict(self):
        """Ordered name -> float32 array map (parameters then buffers)."""
        out = {}
        for name, p in self.named_parameters():
            out[name] = p.data
        for name, b in self.named_buffers():
            out["buffer." + name] = b
        return out

    def load_state_dict(self, state):
        """Load arrays by name; raises on the first mismatching tensor name."""
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"checkpoint is missing tensor {name!r}")
            arr = state[name]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise ValueError(
                    f"tensor {name!r} has shape {tuple(arr.shape)}, model expects {tuple(p.data.shape)}"
                )
            p.data = np.ascontiguousarray(arr, dtype=np.float32)
        for name, b in self.named_buffers():
            key = "buffer." + name
            if key not in state:
                raise KeyError(f"checkpoint is missing tensor {key!r}")
            arr = state[key]
            if tuple(arr.shape) != tuple(b.shape):
                raise ValueError(
                    f"tensor {key!r} has shape {tuple(arr.shape)}, model expects {tuple(b.shape)}"
                )
            b[...] = arr

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def unit_count(self):
        """Fused primitive-layer count (conv+bn+act = one unit)."""
        return sum(m.unit_count() for m in self._modules.values())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._list = []
        for m in mods:
            self.append(m)

    def append(self, m):
        self._modules[str(len(self._list))] = m
        self._list.append(m)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


def _conv_weight(rng, c_out, c_in, k):
    fan_in = c_in * k * k
    std = math.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, (c_out, c_in, k, k)).astype(np.float32), requires_grad=True)


def _linear_weight(rng, c_out, c_in):
    std = math.sqrt(2.0 / c_in)
    return Tensor(rng.normal(0.0, std, (c_out, c_in)).astype(np.float32), requires_grad=True)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, k=1, s=1, p=None, bias=True):
        super().__init__()
        self.k, self.s = k, s
        self.p = k // 2 if p is None else p
        self.weight = _conv_weight(rng, c_out, c_in, k)
        self.bias = Tensor(np.zeros(c_out, np.float32), requires_grad=True) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.s, self.p)

    def unit_count(self):
        return 1


class BatchNorm2d(Module):
    def __init__(self, c, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(c, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(c, np.float32), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(c, np.float32))
        self.register_buffer("running_var", np.ones(c, np.float32))

    def forward(self, x):
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, self.momentum, self.eps, self.training)

    def unit_count(self):
        return 1


class Linear(Module):
    def __init__(self, rng, c_in, c_out, bias=True):
        super().__init__()
        self.weight = _linear_weight(rng, c_out, c_in)
        self.bias = Tensor(np.zeros(c_out, np.float32), requires_grad=True) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)

    def unit_count(self):
        return 1


class PReLU(Module):
    def __init__(self, c=1, init=0.25):
        super().__init__()
        self.alpha = Tensor(np.full(c, init, np.float32), requires_grad=True)

    def forward(self, x):
        return T.prelu(x, self.alpha)

    def unit_count(self):
        return 0


_ACTS = {
    "silu": T.silu,
    "relu": T.relu,
    "sigmoid": T.sigmoid,
    "none": lambda x: x,
}


class ConvBnAct(Module):
    """Conv (no bias) -> BatchNorm -> activation, counted as one fused layer."""

    def __init__(self, rng, c_in, c_out, k=1, s=1, act="silu"):
        super().__init__()
        self.conv = Conv2d(rng, c_in, c_out, k, s, bias=False)
        self.bn = BatchNorm2d(c_out)
        if act == "leaky":
            self.act = lambda x: T.leaky_relu(x, 0.2)
        elif act == "prelu":
            self.pr = PReLU(c_out)
            self.act = self.pr
        elif act in _ACTS:
            self.act = _ACTS[act]
        else:
            raise ConfigurationError(f"unknown activation {act!r}")

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))

    def unit_count(self):
        return 1


class Focus(Module):
    """Lossless 2x downsample: 2x2 blocks to channels, then a fused conv."""

    def __init__(self, rng, c_in, c_out, k=3):
        super().__init__()
        self.conv = ConvBnAct(rng, c_in * 4, c_out, k, 1)

    def forward(self, x):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise T.DimensionError(
                f"focus requires even spatial dims, got {x.shape[2]}x{x.shape[3]}"
            )
        return self.conv(T.space_to_depth(x, 2))


class Bottleneck(Module):
    def __init__(self, rng, c_in, c_out, shortcut=True, e=1.0):
        super().__init__()
        c_ = int(c_out * e)
        self.cv1 = ConvBnAct(rng, c_in, c_, 1, 1)
        self.cv2 = ConvBnAct(rng, c_, c_out, 3, 1)
        self.add = shortcut and c_in == c_out

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y


class C3(Module):
    """Cross-stage-partial block: bypass branch + n bottlenecks, 1x1 fuse."""

    def __init__(self, rng, c_in, c_out, n=1, shortcut=True, e=0.5):
        super().__init__()
        if c_in <= 0 or c_out <= 0 or n < 1:
            raise ConfigurationError(f"c3: invalid channels/repeats ({c_in}, {c_out}, {n})")
        c_ = int(c_out * e)
        self.cv1 = ConvBnAct(rng, c_in, c_, 1, 1)
        self.cv2 = ConvBnAct(rng, c_in, c_, 1, 1)
        self.m = ModuleList([Bottleneck(rng, c_, c_, shortcut) for _ in range(n)])
        self.cv3 = ConvBnAct(rng, 2 * c_, c_out, 1, 1)

    def forward(self, x):
        y = self.cv1(x)
        for b in self.m:
            y = b(y)
        return self.cv3(T.concat([y, self.cv2(x)], axis=1))


class BottleneckCSP(Module):
    """Original CSP form with raw 1x1 side convs and a BN+LeakyReLU fuse."""

    def __init__(self, rng, c_in, c_out, n=1, shortcut=True, e=0.5):
        super().__init__()
        c_ = int(c_out * e)
        self.cv1 = ConvBnAct(rng, c_in, c_, 1, 1)
        self.cv2 = Conv2d(rng, c_in, c_, 1, 1, bias=False)
        self.cv3 = Conv2d(rng, c_, c_, 1, 1, bias=False)
        self.cv4 = ConvBnAct(rng, 2 * c_, c_out, 1, 1)
        self.bn = BatchNorm2d(2 * c_)
        self.m = ModuleList([Bottleneck(rng, c_, c_, shortcut) for _ in range(n)])

    def forward(self, x):
        y = self.cv1(x)
        for b in self.m:
            y = b(y)
        y = self.cv3(y)
        cat = T.concat([y, self.cv2(x)], axis=1)
        return self.cv4(T.leaky_relu(self.bn(cat), 0.2))


class TransformerBlock(Module):
    """Windowed multi-head self-attention + MLP, pre-norm residuals.

    Attention is computed inside non-overlapping window x window tiles with a
    learned per-window positional bias added to the logits.
    """

    def __init__(self, rng, c, heads=4, window=4, mlp_ratio=2.0):
        super().__init__()
        if c % heads:
            raise ConfigurationError(f"channels {c} not divisible by heads {heads}")
        self.c, self.heads, self.window = c, heads, window
        self.head_dim = c // heads
        t = window * window
        self.q = Linear(rng, c, c)
        self.k = Linear(rng, c, c)
        self.v = Linear(rng, c, c)
        self.proj = Linear(rng, c, c)
        hidden = int(c * mlp_ratio)
        self.fc1 = Linear(rng, c, hidden)
        self.fc2 = Linear(rng, hidden, c)
        self.pos_bias = Tensor(
            (0.02 * rng.normal(0.0, 1.0, (heads, t, t))).astype(np.float32), requires_grad=True
        )
        self.ln1_g = Tensor(np.ones(c, np.float32), requires_grad=True)
        self.ln1_b = Tensor(np.zeros(c, np.float32), requires_grad=True)
        self.ln2_g = Tensor(np.ones(c, np.float32), requires_grad=True)
        self.ln2_b = Tensor(np.zeros(c, np.float32), requires_grad=True)

    def _attend(self, tok):
        b, t, c = tok.shape
        h, hd = self.heads, self.head_dim

        def split_heads(z):
            return z.reshape(b, t, h, hd).transpose(0, 2, 1, 3)

        q = split_heads(self.q(tok))
        k = split_heads(self.k(tok))
        v = split_heads(self.v(tok))
        logits = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
        logits = logits + self.pos_bias  # broadcasts over the window batch
        attn = T.softmax(logits, -1)
        out = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, t, c)
        return self.proj(out)

    def forward(self, x):
        n, c, hgt, wid = x.shape
        wn = self.window
        if hgt % wn or wid % wn:
            raise ConfigurationError(
                f"spatial dims {hgt}x{wid} not divisible by window {wn}"
            )
        nh, nw = hgt // wn, wid // wn
        tok = (
            x.reshape(n, c, nh, wn, nw, wn)
            .transpose(0, 2, 4, 3, 5, 1)
            .reshape(n * nh * nw, wn * wn, c)
        )
        y = T.layernorm(tok, -1) * self.ln1_g + self.ln1_b
        tok = tok + self._attend(y)
        y = T.layernorm(tok, -1) * self.ln2_g + self.ln2_b
        tok = tok + self.fc2(T.silu(self.fc1(y)))
        return (
            tok.reshape(n, nh, nw, wn, wn, c)
            .transpose(0, 5, 1, 3, 2, 4)
            .reshape(n, c, hgt, wid)
        )

    def unit_count(self):
        return 8  # 6 linears + 2 layernorms


class C3STR(Module):
    """C3 whose inner bottlenecks are transformer encoder blocks."""

    def __init__(self, rng, c_in, c_out, n=1, heads=4, window=4, e=0.5):
        super().__init__()
        c_ = int(c_out * e)
        if c_ % heads:
            raise ConfigurationError(
                f"c3str: hidden channels {c_} not divisible by heads {heads}"
            )
        self.cv1 = ConvBnAct(rng, c_in, c_, 1, 1)
        self.cv2 = ConvBnAct(rng, c_in, c_, 1, 1)
        self.m = ModuleList([TransformerBlock(rng, c_, heads, window) for _ in range(n)])
        self.cv3 = ConvBnAct(rng, 2 * c_, c_out, 1, 1)

    def forward(self, x):
        y = self.cv1(x)
        for blk in self.m:
            y = blk(y)
        return self.cv3(T.concat([y, self.cv2(x)], axis=1))


class CBAM(Module):
    """Channel gate (avg+max pooled MLP) then spatial gate (7x7 conv)."""

    def __init__(self, rng, c, reduction=8, spatial_kernel=7):
        super().__init__()
        if reduction > c:
            raise ConfigurationError(f"cbam: reduction {reduction} exceeds channels {c}")
        if c % reduction:
            raise ConfigurationError(f"cbam: channels {c} not divisible by reduction {reduction}")
        self.fc1 = Linear(rng, c, c // reduction, bias=False)
        self.fc2 = Linear(rng, c // reduction, c, bias=False)
        self.spatial = Conv2d(rng, 2, 1, spatial_kernel, 1, bias=False)

    def channel_gate(self, x):
        n, c = x.shape[0], x.shape[1]
        avg = x.mean(axis=(2, 3))
        mx = x.max(axis=(2, 3))
        shared = lambda z: self.fc2(T.relu(self.fc1(z)))
        return T.sigmoid(shared(avg) + shared(mx)).reshape(n, c, 1, 1)

    def spatial_gate(self, x):
        avg = x.mean(axis=1, keepdims=True)
        mx = x.max(axis=1, keepdims=True)
        return T.sigmoid(self.spatial(T.concat([avg, mx], axis=1)))

    def forward(self, x):
        x = x * self.channel_gate(x)
        return x * self.spatial_gate(x)

    def unit_count(self):
        return 3


class SPP(Module):
    """Concat of identity and stride-1 same-padded max pools, then 1x1 fuse."""

    def __init__(self, rng, c_in, c_out, pools=(5, 9, 13)):
        super().__init__()
        self.pools = tuple(pools)
        self.fuse = ConvBnAct(rng, c_in * (1 + len(self.pools)), c_out, 1, 1)

    def forward(self, x):
        branches = [x] + [T.maxpool2d(x, k, 1, k // 2) for k in self.pools]
        return self.fuse(T.concat(branches, axis=1))


class Upsample(Module):
    def __init__(self, factor=2):
        super().__init__()
        self.factor = factor

    def forward(self, x):
        return T.upsample_nearest(x, self.factor)

    def unit_count(self):
        return 1


class Concat(Module):
    def __init__(self, axis=1):
        super().__init__()
        self.axis = axis

    def forward(self, xs):
        return T.concat(xs, self.axis)

    def unit_count(self):
        return 0


class ResidualBlock(Module):
    """conv-BN-PReLU-conv-BN with identity skip (super-resolution trunk)."""

    def __init__(self, rng, c, k=3):
        super().__init__()
        self.conv1 = Conv2d(rng, c, c, k, 1, bias=False)
        self.bn1 = BatchNorm2d(c)
        self.act = PReLU(c)
        self.conv2 = Conv2d(rng, c, c, k, 1, bias=False)
        self.bn2 = BatchNorm2d(c)

    def forward(self, x):
        y = self.act(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return x + y

    def unit_count(self):
        return 2


class PixelShuffleBlock(Module):
    """conv to c*r^2 channels, pixel shuffle by r, PReLU: learned x r upsample."""

    def __init__(self, rng, c, r=2):
        super().__init__()
        self.r = r
        self.conv = Conv2d(rng, c, c * r * r, 3, 1)
        self.act = PReLU(c)

    def forward(self, x):
        return self.act(T.pixel_shuffle(self.conv(x), self.r))

    def unit_count(self):
        return 1


class Dense(Module):
    def __init__(self, rng, c_in, c_out, act="leaky"):
        super().__init__()
        self.fc = Linear(rng, c_in, c_out)
        if act == "leaky":
            self.act = lambda x: T.leaky_relu(x, 0.2)
        else:
            self.act = _ACTS[act]

    def forward(self, x):
        return self.act(self.fc(x))

    def unit_count(self):
        return 1


class Detect(Module):
    """Three-scale detection head: one 1x1 conv per scale.

    Raw output per scale is (N, A*(5+nc), H, W) with per-anchor layout
    (tx, ty, tw, th, obj, c1..ck).
    """

    def __init__(self, rng, in_channels, n_classes, anchors, strides=(8, 16, 32), ref_size=640):
        super().__init__()
        anchors = np.asarray(anchors, dtype=np.float32)
        if anchors.shape != (len(strides), 3, 2):
            raise ConfigurationError(
                f"detect: anchors must have shape ({len(strides)}, 3, 2), got {anchors.shape}"
            )
        if len(in_channels) != len(strides):
            raise ConfigurationError(
                f"detect: {len(in_channels)} feature maps for {len(strides)} strides"
            )
        self.n_classes = n_classes
        self.n_anchors = anchors.shape[1]
        self.strides = tuple(strides)
        self.register_buffer("anchors", anchors)
        out_c = self.n_anchors * (5 + n_classes)
        self.convs = ModuleList([Conv2d(rng, c, out_c, 1, 1) for c in in_channels])
        for i, conv in enumerate(self.convs):
            b = conv.bias.data.reshape(self.n_anchors, 5 + n_classes)
            b[:, 4] = math.log(8.0 / (ref_size / strides[i]) ** 2)  # obj prior
            if n_classes > 1:
                b[:, 5:] = math.log(0.6 / (n_classes - 0.99999))

    def forward(self, features):
        if len(features) != len(self.convs):
            raise ConfigurationError(
                f"detect: expected {len(self.convs)} feature maps, got {len(features)}"
            )
        return [conv(f) for conv, f in zip(self.convs, features)]


# ---------------------------------------------------------------------------
# model graph
# ---------------------------------------------------------------------------

@dataclass
class LayerSpec:
    """One layer of a model graph; channels stored pre-scaling."""

    kind: str
    inputs: list = field(default_factory=lambda: [-1])
    args: dict = field(default_factory=dict)


@dataclass
class ModelGraph:
    layers: list
    width_multiple: float = 1.0
    depth_multiple: float = 1.0

    def validate(self):
        if not (0.0 < self.width_multiple <= 2.0 and 0.0 < self.depth_multiple <= 2.0):
            raise ConfigurationError(
                f"width/depth multiples must lie in (0, 2], got "
                f"({self.width_multiple}, {self.depth_multiple})"
            )
        for i, spec in enumerate(self.layers):
            for j in spec.inputs:
                if j >= i:
                    raise ConfigurationError(
                        f"layer {i} reads from layer {j}: inputs must reference earlier layers"
                    )
                if j < -1:
                    raise ConfigurationError(f"layer {i}: invalid input index {j}")


_ARG_ORDER = {
    "Focus": ("out", "k"),
    "ConvBnAct": ("out", "k", "s", "act"),
    "Bottleneck": ("out", "shortcut"),
    "C3": ("out", "n", "shortcut"),
    "C3STR": ("out", "n", "heads", "window"),
    "CBAM": ("reduction", "spatial_kernel"),
    "SPP": ("out", "pools"),
    "Upsample": ("factor",),
    "Concat": (),
    "Detect": ("n_classes", "ref_size"),
    "ResidualBlock": (),
    "PixelShuffleBlock": ("r",),
    "Dense": ("out", "act"),
}

_DEFAULTS = {
    "k": 3, "s": 1, "act": "silu", "n": 1, "shortcut": True, "heads": 4,
    "window": 4, "reduction": 8, "spatial_kernel": 7, "pools": (5, 9, 13),
    "factor": 2, "r": 2, "ref_size": 640,
}


def graph_to_text(graph):
    """Deterministic plain-text serialization of a model graph."""
    lines = [
        "b2bdet-graph v1",
        f"width_multiple {graph.width_multiple!r}",
        f"depth_multiple {graph.depth_multiple!r}",
    ]
    for i, spec in enumerate(graph.layers):
        frm = ",".join(str(j) for j in spec.inputs)
        parts = [str(i), spec.kind, f"from={frm}"]
        for key in _ARG_ORDER.get(spec.kind, ()):
            if key in spec.args:
                val = spec.args[key]
                if isinstance(val, (tuple, list)):
                    val = ",".join(str(v) for v in val)
                parts.append(f"{key}={val}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def graph_from_text(text):
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines or lines[0] != "b2bdet-graph v1":
        raise ConfigurationError("not a model-graph document (bad header)")
    width = float(lines[1].split()[1])
    depth = float(lines[2].split()[1])
    layers = []
    for ln in lines[3:]:
        parts = ln.split()
        idx, kind = int(parts[0]), parts[1]
        if idx != len(layers):
            raise ConfigurationError(f"layer indices out of order at {idx}")
        if kind not in _ARG_ORDER:
            raise ConfigurationError(f"unknown layer kind {kind!r}")
        inputs, args = [-1], {}
        for p in parts[2:]:
            key, val = p.split("=", 1)
            if key == "from":
                inputs = [int(v) for v in val.split(",")]
            elif key in ("out", "k", "s", "n", "heads", "window", "reduction",
                         "spatial_kernel", "factor", "r", "n_classes", "ref_size"):
                args[key] = int(val)
            elif key == "shortcut":
                args[key] = val == "True"
            elif key == "pools":
                args[key] = tuple(int(v) for v in val.split(","))
            elif key == "act":
                args[key] = val
            else:
                raise ConfigurationError(f"unknown graph key {key!r}")
        layers.append(LayerSpec(kind, inputs, args))
    g = ModelGraph(layers, width, depth)
    g.validate()
    return g


def _arg(spec, key):
    return spec.args.get(key, _DEFAULTS.get(key))


class GraphModel(Module):
    """Executable model instantiated from a :class:`ModelGraph`."""

    def __init__(self, graph, rng, in_channels=3, anchors=None):
        super().__init__()
        graph.validate()
        self.graph = graph
        w_mult, d_mult = graph.width_multiple, graph.depth_multiple
        chans = []  # output channels per layer
        mods = []
        self.out_channels = chans

        def scaled(c):
            return c if w_mult == 1.0 else make_divisible(c * w_mult, 8)

        def depth(n):
            return max(1, round(n * d_mult))

        for i, spec in enumerate(graph.layers):
            srcs = [j if j >= 0 else i - 1 for j in spec.inputs]
            c_ins = [in_channels if j < 0 else chans[j] for j in srcs]
            kind = spec.kind
            if kind == "Focus":
                c_out = scaled(_arg(spec, "out"))
                mod = Focus(rng, c_ins[0], c_out, _arg(spec, "k"))
            elif kind == "ConvBnAct":
                c_out = scaled(_arg(spec, "out"))
                mod = ConvBnAct(rng, c_ins[0], c_out, _arg(spec, "k"), _arg(spec, "s"), _arg(spec, "act"))
            elif kind == "Bottleneck":
                c_out = scaled(_arg(spec, "out"))
                mod = Bottleneck(rng, c_ins[0], c_out, _arg(spec, "shortcut"))
            elif kind == "C3":
                c_out = scaled(_arg(spec, "out"))
                mod = C3(rng, c_ins[0], c_out, depth(_arg(spec, "n")), _arg(spec, "shortcut"))
            elif kind == "C3STR":
                c_out = scaled(_arg(spec, "out"))
                mod = C3STR(rng, c_ins[0], c_out, depth(_arg(spec, "n")),
                            _arg(spec, "heads"), _arg(spec, "window"))
            elif kind == "CBAM":
                c_out = c_ins[0]
                mod = CBAM(rng, c_out, _arg(spec, "reduction"), _arg(spec, "spatial_kernel"))
            elif kind == "SPP":
                c_out = scaled(_arg(spec, "out"))
                mod = SPP(rng, c_ins[0], c_out, _arg(spec, "pools"))
            elif kind == "Upsample":
                c_out = c_ins[0]
                mod = Upsample(_arg(spec, "factor"))
            elif kind == "Concat":
                c_out = sum(c_ins)
                mod = Concat()
            elif kind == "ResidualBlock":
                c_out = c_ins[0]
                mod = ResidualBlock(rng, c_ins[0])
            elif kind == "PixelShuffleBlock":
                r = _arg(spec, "r")
                if c_ins[0] % (r * r):
                    raise ConfigurationError(
                        f"pixel-shuffle block needs channels divisible by {r * r}"
                    )
                c_out = c_ins[0] // (r * r)
                mod = PixelShuffleBlock(rng, c_out, r)
            elif kind == "Dense":
                c_out = _arg(spec, "out")
                mod = Dense(rng, c_ins[0], c_out, _arg(spec, "act"))
            elif kind == "Detect":
                if anchors is None:
                    raise ConfigurationError("graph contains Detect but no anchors were given")
                c_out = 0
                mod = Detect(rng, c_ins, _arg(spec, "n_classes"), anchors,
                             ref_size=_arg(spec, "ref_size"))
                self.detect = mod
            else:
                raise ConfigurationError(f"unknown layer kind {kind!r}")
            chans.append(c_out)
            mods.append(mod)
        self.layers = ModuleList(mods)
        self._srcs = [
            [j if j >= 0 else i - 1 for j in spec.inputs]
            for i, spec in enumerate(graph.layers)
        ]
        self._keep = sorted({j for srcs in self._srcs for j in srcs if j >= 0})

    def forward(self, x):
        outs = [None] * len(self.layers._list)
        result = None
        for i, (mod, spec) in enumerate(zip(self.layers, self.graph.layers)):
            ins = [x if j < 0 else outs[j] for j in self._srcs[i]]
            if spec.kind == "Concat":
                y = mod(ins)
            elif spec.kind == "Detect":
                y = mod(ins)
                result = y
            else:
                y = mod(ins[0])
            outs[i] = y
        return result if result is not None else outs[-1]


def count_model(graph, input_size=640, in_channels=3, anchors=None, seed=0):
    """Layer / parameter / FLOP accounting for a model graph.

    Parameters are counted from an instantiated model; FLOPs (2 per MAC)
    are measured by instrumenting a forward pass at a reduced probe size
    and scaling quadratically, which is exact because every op in these
    graphs costs proportionally to H*W at fixed channel widths.
    """
    graph.validate()
    if anchors is None and any(s.kind == "Detect" for s in graph.layers):
        anchors = _DEFAULT_ANCHORS
    model = GraphModel(graph, Rng(seed), in_channels, anchors)
    params = sum(p.data.size for p in model.parameters())

    probe = input_size
    if probe > 256 and probe % 128 == 0 and not any(s.kind == "Dense" for s in graph.layers):
        probe = 128
    model.eval()
    x = Tensor(np.zeros((1, in_channels, probe, probe), np.float32))
    with T.no_grad(), T.flop_counter as fc:
        model(x)
    flops = fc.flops * (input_size / probe) ** 2
    return {
        "layers": model.unit_count(),
        "params": int(params),
        "flops": int(round(flops)),
    }


# src-scale anchor prior used when a graph is counted without dataset anchors
_DEFAULT_ANCHORS = np.array(
    [
        [[10, 13], [16, 30], [33, 23]],
        [[30, 61], [62, 45], [59, 119]],
        [[116, 90], [156, 198], [373, 326]],
    ],
    dtype=np.float32,
)
