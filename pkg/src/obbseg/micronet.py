"""A small DarkNet-style encoder-decoder with five per-cell classification heads.

Activations are kept channels-last, ``(N, H, W, C)``, so that every
convolution is a single GEMM over an im2col matrix. The public
:func:`forward` wrapper accepts and returns channels-first arrays.

Layer layout (channel counts divided by ``divisor``)::

    conv 32 /1 -> [conv 64 /2, res(32,64) x r1] -> [conv 128 /2, res x r2]
    -> [conv 256 /2, res x r3] -> [conv 512 /2, res x r4]
    -> [conv 1024 /2, res x r5]
    set(512,1024)x3 -> head1                         (input / 32)
    conv 256 1x1, up x2, cat res4 -> set(256,512)x3 -> head2
    conv 128 1x1, up x2, cat res3 -> set(128,256)x3 -> head3
    conv 128 1x1, up x2, cat res2 -> set(128,256)x3 -> head4
    conv 128 1x1, up x2, cat res1 -> set(128,256)x3 -> head5   (input / 2)

Heads are 1x1 convolutions emitting ``C + 1`` logits per cell, channel 0
being background.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ._jit import kernel
from .errors import FormatError, InvalidArgument, InvalidConfig, InvalidState

LEAKY_SLOPE = 0.1
CHECKPOINT_MAGIC = b"OBBSEGNN"

# (encoder widths, decoder set widths, lateral widths) at divisor 1
ENCODER_WIDTHS = (32, 64, 128, 256, 512, 1024)
SET_WIDTHS = ((512, 1024), (256, 512), (128, 256), (128, 256), (128, 256))
LATERAL_WIDTHS = (256, 128, 128, 128)
CONVSET_PAIRS = 3
HEAD_GAIN = 0.1


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 64
    divisor: int = 8
    repeats: tuple = (1, 1, 2, 2, 1)
    num_classes: int = 3
    head_mode: str = "cell"
    leaky_slope: float = LEAKY_SLOPE

    def validate(self) -> None:
        if self.num_classes < 1:
            raise InvalidConfig("num_classes must be >= 1")
        if self.input_size <= 0 or self.input_size % 32:
            raise InvalidConfig(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if len(self.repeats) != 5 or any(int(r) < 1 for r in self.repeats):
            raise InvalidConfig(f"repeats must be five integers >= 1, got {self.repeats}")
        if self.divisor < 1:
            raise InvalidConfig("divisor must be >= 1")
        if self.head_mode != "cell":
            raise InvalidConfig(f"unsupported head mode {self.head_mode!r}")

    def width(self, base: int) -> int:
        return max(1, base // self.divisor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["repeats"] = list(self.repeats)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetworkConfig:
        d = dict(d)
        d["repeats"] = tuple(d.get("repeats", (1, 1, 2, 2, 1)))
        return cls(**d)


PRESETS = {
    "micro": NetworkConfig(64, 8, (1, 1, 2, 2, 1), 3),
    "micro-micro": NetworkConfig(32, 32, (1, 1, 1, 1, 1), 2),
    "full": NetworkConfig(512, 1, (1, 2, 8, 8, 4), 60),
}


# --------------------------------------------------------------------------
# im2col kernels
# --------------------------------------------------------------------------


def _im2col_np(xp, k, s, ho, wo):
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    view = as_strided(xp, (n, ho, wo, k, k, c), (sn, sh * s, sw * s, sh, sw, sc), writeable=False)
    return view.reshape(n * ho * wo, k * k * c)


@kernel(_im2col_np)
def _im2col(xp, k, s, ho, wo):
    n = xp.shape[0]
    c = xp.shape[3]
    out = np.empty((n * ho * wo, k * k * c), xp.dtype)
    row = 0
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                col = 0
                for a in range(k):
                    for e in range(k):
                        for ch in range(c):
                            out[row, col] = xp[b, i * s + a, j * s + e, ch]
                            col += 1
                row += 1
    return out


def _col2im_np(dcols, n, hp, wp, c, k, s, ho, wo):
    d = dcols.reshape(n, ho, wo, k, k, c)
    dx = np.zeros((n, hp, wp, c), dcols.dtype)
    for a in range(k):
        for e in range(k):
            dx[:, a : a + s * (ho - 1) + 1 : s, e : e + s * (wo - 1) + 1 : s, :] += d[:, :, :, a, e, :]
    return dx


@kernel(_col2im_np)
def _col2im(dcols, n, hp, wp, c, k, s, ho, wo):
    dx = np.zeros((n, hp, wp, c), dcols.dtype)
    row = 0
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                col = 0
                for a in range(k):
                    for e in range(k):
                        for ch in range(c):
                            dx[b, i * s + a, j * s + e, ch] += dcols[row, col]
                            col += 1
                row += 1
    return dx


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


class Layer:
    """Base layer: ``forward`` caches what ``backward`` needs."""

    def params(self) -> list:
        return []

    def grads(self) -> list:
        return []


class Conv(Layer):
    """Square convolution with 'same' padding, weights stored ``(k*k*Cin, Cout)``."""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, name: str = ""):
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.name = name
        self.weight = np.zeros((k * k * cin, cout))
        self.bias = np.zeros(cout)
        self.dweight = np.zeros_like(self.weight)
        self.dbias = np.zeros_like(self.bias)
        self._cache = None

    @property
    def fan_in(self) -> int:
        return self.k * self.k * self.cin

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.dweight, self.dbias]

    def out_size(self, size: int) -> int:
        pad = self.k // 2
        return (size + 2 * pad - self.k) // self.stride + 1

    def forward(self, x):
        n, h, w, c = x.shape
        if c != self.cin:
            raise InvalidArgument(f"{self.name}: expected {self.cin} channels, got {c}")
        k, s = self.k, self.stride
        ho, wo = self.out_size(h), self.out_size(w)
        if k == 1 and s == 1:
            cols = x.reshape(n * h * w, c)
            hp = wp = 0
        else:
            pad = k // 2
            hp, wp = h + 2 * pad, w + 2 * pad
            xp = np.zeros((n, hp, wp, c), x.dtype)
            xp[:, pad : pad + h, pad : pad + w, :] = x
            cols = _im2col(xp, k, s, ho, wo)
        y = cols @ self.weight
        y += self.bias
        self._cache = (cols, (n, h, w, c, hp, wp, ho, wo))
        return y.reshape(n, ho, wo, self.cout)

    def backward(self, dy):
        if self._cache is None:
            raise InvalidState(f"{self.name}: backward before forward")
        cols, (n, h, w, c, hp, wp, ho, wo) = self._cache
        dym = dy.reshape(n * ho * wo, self.cout)
        self.dweight += cols.T @ dym
        self.dbias += dym.sum(axis=0)
        dcols = dym @ self.weight.T
        if self.k == 1 and self.stride == 1:
            return dcols.reshape(n, h, w, c)
        dxp = _col2im(dcols, n, hp, wp, c, self.k, self.stride, ho, wo)
        pad = self.k // 2
        return dxp[:, pad : pad + h, pad : pad + w, :]


class LeakyReLU(Layer):
    def __init__(self, slope: float = LEAKY_SLOPE):
        self.slope = slope
        self._pos = None

    def forward(self, x):
        self._pos = x > 0
        return np.where(self._pos, x, x * self.slope)

    def backward(self, dy):
        if self._pos is None:
            raise InvalidState("LeakyReLU: backward before forward")
        return np.where(self._pos, dy, dy * self.slope)


class ConvAct(Layer):
    """Convolution followed by leaky ReLU."""

    def __init__(self, cin, cout, k, stride=1, slope=LEAKY_SLOPE, name=""):
        self.conv = Conv(cin, cout, k, stride, name)
        self.act = LeakyReLU(slope)

    @property
    def cout(self):
        return self.conv.cout

    def params(self):
        return self.conv.params()

    def grads(self):
        return self.conv.grads()

    def forward(self, x):
        return self.act.forward(self.conv.forward(x))

    def backward(self, dy):
        return self.conv.backward(self.act.backward(dy))


class Residual(Layer):
    """``x + f(x)`` where ``f`` is a 1x1 squeeze then a 3x3 expand."""

    def __init__(self, channels, hidden, slope=LEAKY_SLOPE, name=""):
        self.a = ConvAct(channels, hidden, 1, 1, slope, name + ".a")
        self.b = ConvAct(hidden, channels, 3, 1, slope, name + ".b")

    def params(self):
        return self.a.params() + self.b.params()

    def grads(self):
        return self.a.grads() + self.b.grads()

    def forward(self, x):
        return x + self.b.forward(self.a.forward(x))

    def backward(self, dy):
        return dy + self.a.backward(self.b.backward(dy))


class Upsample2x(Layer):
    """Nearest-neighbour x2 upsampling."""

    def forward(self, x):
        return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)

    def backward(self, dy):
        n, h, w, c = dy.shape
        return dy.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers for g in layer.grads()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


def concat_channels(a, b):
    return np.concatenate([a, b], axis=3)


def split_channels(d, ca: int):
    return d[..., :ca], d[..., ca:]


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------


@dataclass
class Network:
    """Encoder-decoder graph plus SGD momentum buffers.

    ``forward`` returns the five heads ordered coarse to fine; head ``k``
    (0-based) belongs to pyramid scale ``5 - k`` with cell size
    ``2 ** (5 - k)``.
    """

    config: NetworkConfig
    stem: ConvAct = None
    stages: list = field(default_factory=list)
    sets: list = field(default_factory=list)
    heads: list = field(default_factory=list)
    laterals: list = field(default_factory=list)
    dtype: np.dtype = np.float64
    velocity: list = None
    _cache: dict = None

    head_scales = (5, 4, 3, 2, 1)

    # -- construction ----------------------------------------------------
    @property
    def layers(self) -> list:
        """Parameterised blocks in graph order (checkpoint order)."""
        out = [self.stem] + list(self.stages)
        for lvl in range(5):
            out.append(self.sets[lvl])
            out.append(self.heads[lvl])
            if lvl < 4:
                out.append(self.laterals[lvl])
        return out

    def params(self) -> list:
        return [p for layer in self.layers for p in layer.params()]

    def grads(self) -> list:
        return [g for layer in self.layers for g in layer.grads()]

    def convs(self) -> list:
        found = []

        def walk(obj):
            if isinstance(obj, Conv):
                found.append(obj)
            elif isinstance(obj, ConvAct):
                found.append(obj.conv)
            elif isinstance(obj, Residual):
                walk(obj.a)
                walk(obj.b)
            elif isinstance(obj, Sequential):
                for sub in obj.layers:
                    walk(sub)

        for layer in self.layers:
            walk(layer)
        return found

    @property
    def num_params(self) -> int:
        return int(sum(p.size for p in self.params()))

    def zero_grad(self) -> None:
        for g in self.grads():
            g[...] = 0.0

    def astype(self, dtype) -> Network:
        dtype = np.dtype(dtype)
        for conv in self.convs():
            conv.weight = conv.weight.astype(dtype)
            conv.bias = conv.bias.astype(dtype)
            conv.dweight = np.zeros_like(conv.weight)
            conv.dbias = np.zeros_like(conv.bias)
        if self.velocity is not None:
            self.velocity = [v.astype(dtype) for v in self.velocity]
        self.dtype = dtype
        return self

    # -- forward / backward ----------------------------------------------
    def forward(self, x):
        """Channels-last forward pass: ``x`` is ``(N, H, W, 3)``."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.input_size or x.shape[2] != cfg.input_size or x.shape[3] != 3:
            raise InvalidArgument(f"expected input (N, {cfg.input_size}, {cfg.input_size}, 3), got {x.shape}")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        h = self.stem.forward(x)
        skips = []
        for stage in self.stages:
            h = stage.forward(h)
            skips.append(h)
        outs = []
        shapes = []
        feat = self.sets[0].forward(skips[4])
        outs.append(self.heads[0].forward(feat))
        for lvl in range(1, 5):
            lat = self.laterals[lvl - 1].forward(feat)
            up = np.repeat(np.repeat(lat, 2, axis=1), 2, axis=2)
            skip = skips[4 - lvl]
            shapes.append(lat.shape[3])
            feat = self.sets[lvl].forward(concat_channels(up, skip))
            outs.append(self.heads[lvl].forward(feat))
        self._cache = {"lat_channels": shapes}
        return outs

    def backward(self, head_grads):
        """Accumulate parameter gradients from per-head upstream gradients.

        Returns the gradient with respect to the input batch.
        """
        if self._cache is None:
            raise InvalidState("backward called without a cached forward pass")
        if len(head_grads) != 5:
            raise InvalidArgument("need one gradient per head")
        lat_ch = self._cache["lat_channels"]
        dskips = [None] * 5
        dfeat = None
        for lvl in range(4, 0, -1):
            d = self.heads[lvl].backward(np.asarray(head_grads[lvl], dtype=self.dtype))
            if dfeat is not None:
                d = d + dfeat
            dcat = self.sets[lvl].backward(d)
            dup, dskip = split_channels(dcat, lat_ch[lvl - 1])
            dskips[4 - lvl] = dskip
            n, hh, ww, c = dup.shape
            dlat = dup.reshape(n, hh // 2, 2, ww // 2, 2, c).sum(axis=(2, 4))
            dfeat = self.laterals[lvl - 1].backward(dlat)
        d = self.heads[0].backward(np.asarray(head_grads[0], dtype=self.dtype)) + dfeat
        dh = self.sets[0].backward(d)
        for si in range(4, -1, -1):
            if dskips[si] is not None:
                dh = dh + dskips[si]
            dh = self.stages[si].backward(dh)
        return self.stem.backward(dh)


def build_network(cfg: NetworkConfig, seed=0, dtype=np.float64) -> Network:
    """Construct and initialise a network.

    Weights are drawn uniformly with a fan-in-scaled bound (He init adjusted
    for the leaky slope); biases start at zero. The last conv of every
    residual branch is further scaled by ``1/sqrt(#residual blocks)`` so the
    un-normalised residual stack keeps its activation scale, and heads use
    gain ``HEAD_GAIN`` so initial logits are small. The same ``(cfg, seed)``
    always yields identical parameters.
    """
    cfg.validate()
    slope = cfg.leaky_slope
    wd = cfg.width
    enc = [wd(c) for c in ENCODER_WIDTHS]
    stem = ConvAct(3, enc[0], 3, 1, slope, "conv1")
    stages = []
    for si in range(5):
        layers = [ConvAct(enc[si], enc[si + 1], 3, 2, slope, f"conv{si + 2}")]
        for r in range(int(cfg.repeats[si])):
            layers.append(Residual(enc[si + 1], wd(ENCODER_WIDTHS[si + 1] // 2), slope, f"res{si + 1}.{r}"))
        stages.append(Sequential(layers))
    sets, heads, laterals = [], [], []
    cin = enc[5]
    for lvl in range(5):
        narrow, wide = (wd(c) for c in SET_WIDTHS[lvl])
        layers = []
        c = cin
        for p in range(CONVSET_PAIRS):
            layers.append(ConvAct(c, narrow, 1, 1, slope, f"set{lvl + 1}.{p}a"))
            layers.append(ConvAct(narrow, wide, 3, 1, slope, f"set{lvl + 1}.{p}b"))
            c = wide
        sets.append(Sequential(layers))
        heads.append(Conv(wide, cfg.num_classes + 1, 1, 1, f"head{lvl + 1}"))
        if lvl < 4:
            lat = wd(LATERAL_WIDTHS[lvl])
            laterals.append(ConvAct(wide, lat, 1, 1, slope, f"lateral{lvl + 1}"))
            cin = lat + enc[4 - lvl]
    net = Network(cfg, stem, stages, sets, heads, laterals)
    rng = np.random.default_rng(seed)
    gain2 = 2.0 / (1.0 + slope * slope)
    scale2 = {id(h): HEAD_GAIN**2 for h in heads}
    n_res = sum(int(r) for r in cfg.repeats)
    for stage in stages:
        for block in stage.layers[1:]:
            scale2[id(block.b.conv)] = gain2 / n_res
    for conv in net.convs():
        g2 = scale2.get(id(conv), gain2)
        bound = np.sqrt(3.0 * g2 / conv.fan_in)
        conv.weight[...] = rng.uniform(-bound, bound, size=conv.weight.shape)
        conv.bias[...] = 0.0
    return net.astype(dtype)


def forward(net: Network, image) -> list:
    """Channels-first convenience wrapper.

    ``image`` is ``(3, H, W)`` or ``(N, 3, H, W)``; heads come back as
    ``(C+1, h, w)`` (or with a leading batch axis), coarse to fine.
    """
    x = np.asarray(image)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise InvalidArgument(f"expected a (3, H, W) or (N, 3, H, W) image, got {x.shape}")
    heads = net.forward(np.transpose(x, (0, 2, 3, 1)))
    heads = [np.transpose(h, (0, 3, 1, 2)) for h in heads]
    return [h[0] for h in heads] if single else heads


def backward(net: Network, head_grads) -> list:
    """Channels-first wrapper over :meth:`Network.backward`; returns the parameter gradients."""
    gs = []
    for g in head_grads:
        g = np.asarray(g)
        if g.ndim == 3:
            g = g[None]
        gs.append(np.transpose(g, (0, 2, 3, 1)))
    net.backward(gs)
    return net.grads()


def sgd_step(net: Network, lr: float, momentum: float = 0.9, weight_decay: float = 0.0005) -> None:
    """``v <- momentum * v + g + weight_decay * p``;  ``p <- p - lr * v``."""
    params = net.params()
    if net.velocity is None:
        net.velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, net.grads(), net.velocity):
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(dest, net: Network, extra: dict | None = None) -> None:
    """Write magic, a JSON header echoing the config, then float64 LE parameters.

    Momentum buffers, when present, follow the parameters in the same order.
    """
    header = {
        "config": net.config.to_dict(),
        "dtype": np.dtype(net.dtype).name,
        "num_params": net.num_params,
        "has_velocity": net.velocity is not None,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    for p in net.params():
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    if net.velocity is not None:
        for v in net.velocity:
            buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    data = buf.getvalue()
    if hasattr(dest, "write"):
        dest.write(data)
    else:
        with open(dest, "wb") as fh:
            fh.write(data)


def load_checkpoint(src) -> tuple[Network, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(net, extra)``."""
    if hasattr(src, "read"):
        data = src.read()
    else:
        with open(src, "rb") as fh:
            data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError("not a network checkpoint (bad magic)")
    if len(data) < 12:
        raise FormatError("truncated checkpoint header")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    cfg = NetworkConfig.from_dict(header["config"])
    net = build_network(cfg, seed=0, dtype=np.float64)
    params = net.params()
    n = sum(p.size for p in params)
    if n != header["num_params"]:
        raise FormatError("parameter count does not match config")
    count = n * (2 if header["has_velocity"] else 1)
    body = data[12 + hlen :]
    if len(body) != 8 * count:
        raise FormatError(f"checkpoint body has {len(body)} bytes, expected {8 * count}")
    flat = np.frombuffer(body, dtype="<f8")
    off = 0
    for p in params:
        p[...] = flat[off : off + p.size].reshape(p.shape)
        off += p.size
    if header["has_velocity"]:
        net.velocity = []
        for p in params:
            net.velocity.append(flat[off : off + p.size].reshape(p.shape).astype(np.float64))
            off += p.size
    net.astype(header.get("dtype", "float64"))
    return net, header.get("extra", {})
