"""Network architecture specs and their static analysis.

A :class:`NetworkGraph` is an ordered list of :class:`LayerSpec` nodes, each
reading from a named source layer (default: the previous one) and optionally a
second skip source.  ``build_network`` constructs the four families used here:

* ``FCN4s`` / ``FCN8s`` / ``FCN2s``: a VGG-16 convolutional trunk with the
  fully-connected layers converted to convolutions, a 1x1 scoring convolution,
  and in-network learned upsampling that fuses progressively shallower pool
  skips (down to pool2 / pool3 / pool1 respectively).
* ``UNetGen`` / ``UNetStandalone``: a U-Net with dilated convolutions in the
  outer blocks and a nearest-neighbor upsample + concat decoder; ``UNetGen``
  takes 2 input channels (CT plus an upstream synthesis), the standalone
  variant takes the CT alone.
* ``Discriminator``: three strided conv blocks, one plain conv block, then a
  dense 2-way softmax.

``propagate_shapes`` runs the size arithmetic symbolically, so structural
tests never need a forward pass.  Max pooling is ceil-mode and merge points
crop both branches to the smaller spatial size, which keeps every family
consistent for any input divisible by 16 (FCN) or 8 (U-Net, discriminator).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops

KINDS = {"conv", "transposed_conv", "maxpool", "upsample_nn", "concat", "add",
         "dense", "softmax", "activation"}
ACTIVATIONS = {"relu", "leaky_relu", "linear"}
LEAKY_SLOPE = 0.2

FAMILIES = ("FCN4s", "FCN8s", "FCN2s", "UNetGen", "UNetStandalone", "Discriminator")


@dataclass
class LayerSpec:
    """One node of a network graph.

    ``source`` defaults to the previous layer; ``skip_source`` names the
    second input of concat/add nodes.  ``channels_out`` is meaningful only for
    parameterized kinds (conv, transposed_conv, dense).
    """

    name: str
    kind: str
    source: str
    skip_source: str | None = None
    kernel: tuple[int, int] = (1, 1)
    channels_out: int = 0
    stride: int = 1
    dilation: int = 1
    activation: str = "linear"

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if min(self.kernel) < 1 or self.stride < 1 or self.dilation < 1:
            raise ValueError("kernel, stride, and dilation must be >= 1")
        if self.kind in ("conv", "transposed_conv", "dense") and self.channels_out < 1:
            raise ValueError(f"{self.kind} layer {self.name!r} needs channels_out >= 1")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "transposed_conv", "dense")


@dataclass
class NetworkGraph:
    name: str
    layers: list[LayerSpec]
    input_channels: int
    input_size: tuple[int, int]
    width_scale: float = 1.0

    def __post_init__(self) -> None:
        seen = {"input"}
        for layer in self.layers:
            if layer.name in seen:
                raise ValueError(f"duplicate layer name {layer.name!r}")
            if layer.source not in seen:
                raise ValueError(f"layer {layer.name!r} reads undefined {layer.source!r}")
            if layer.skip_source is not None and layer.skip_source not in seen:
                raise ValueError(f"layer {layer.name!r} skips from undefined "
                                 f"{layer.skip_source!r}")
            seen.add(layer.name)

    @property
    def output_layer(self) -> str:
        return self.layers[-1].name


def _scaled(channels: int, width_scale: float) -> int:
    return max(1, int(round(channels * width_scale)))


class _Builder:
    """Accumulates layers, tracking the previous layer as the default source."""

    def __init__(self, width_scale: float):
        self.width_scale = width_scale
        self.layers: list[LayerSpec] = []
        self.prev = "input"

    def _push(self, spec: LayerSpec) -> None:
        self.layers.append(spec)
        self.prev = spec.name

    def conv(self, name, channels, kernel=3, stride=1, dilation=1,
             activation="linear", source=None, scaled=True):
        c = _scaled(channels, self.width_scale) if scaled else channels
        self._push(LayerSpec(name, "conv", source or self.prev, kernel=(kernel, kernel),
                             channels_out=c, stride=stride, dilation=dilation,
                             activation=activation))

    def upconv(self, name, channels, stride, source=None, scaled=True):
        c = _scaled(channels, self.width_scale) if scaled else channels
        k = 2 * stride
        self._push(LayerSpec(name, "transposed_conv", source or self.prev,
                             kernel=(k, k), channels_out=c, stride=stride))

    def pool(self, name, source=None):
        self._push(LayerSpec(name, "maxpool", source or self.prev,
                             kernel=(2, 2), stride=2))

    def upsample(self, name, source=None):
        self._push(LayerSpec(name, "upsample_nn", source or self.prev,
                             kernel=(2, 2), stride=2))

    def concat(self, name, a, b):
        self._push(LayerSpec(name, "concat", a, skip_source=b))

    def add(self, name, a, b):
        self._push(LayerSpec(name, "add", a, skip_source=b))

    def dense(self, name, channels, activation="linear", source=None):
        self._push(LayerSpec(name, "dense", source or self.prev,
                             channels_out=channels, activation=activation))

    def softmax(self, name, source=None):
        self._push(LayerSpec(name, "softmax", source or self.prev))


def _vgg_trunk(b: _Builder) -> None:
    widths = {1: 64, 2: 128, 3: 256, 4: 512, 5: 512}
    depths = {1: 2, 2: 2, 3: 3, 4: 3, 5: 3}
    for block in range(1, 6):
        for i in range(1, depths[block] + 1):
            b.conv(f"conv{block}_{i}", widths[block], activation="relu")
        b.pool(f"pool{block}")
    b.conv("fc6", 4096, kernel=7, activation="relu")
    b.conv("fc7", 4096, kernel=1, activation="relu")
    b.conv("score_fr", 1, kernel=1, scaled=False)


def _fcn_skip_chain(b: _Builder, deepest_pool: int) -> None:
    """Fuse pool skips from pool4 down to ``deepest_pool``, then restore scale."""
    prev = "score_fr"
    for p in range(4, deepest_pool - 1, -1):
        b.upconv(f"upscore_pool{p + 1}", 1, stride=2, source=prev, scaled=False)
        b.conv(f"score_pool{p}", 1, kernel=1, source=f"pool{p}", scaled=False)
        b.add(f"fuse_pool{p}", f"upscore_pool{p + 1}", f"score_pool{p}")
        prev = f"fuse_pool{p}"
    b.upconv("upscore_final", 1, stride=2 ** deepest_pool, source=prev, scaled=False)


def _unet(b: _Builder) -> None:
    enc = [(1, 32, 3), (2, 64, 2), (3, 128, 1), (4, 256, 1), (5, 512, 1)]
    for block, channels, rate in enc:
        for i in (1, 2):
            b.conv(f"conv{block}_{i}", channels, dilation=rate, activation="leaky_relu")
        if block < 5:
            b.pool(f"pool{block}")
    dec = [(6, 256, 1, "conv4_2"), (7, 128, 1, "conv3_2"),
           (8, 64, 2, "conv2_2"), (9, 32, 3, "conv1_2")]
    for i, (block, channels, rate, skip) in enumerate(dec, start=1):
        b.upsample(f"upsampling{i}_up")
        b.concat(f"upsampling{i}", f"upsampling{i}_up", skip)
        for j in (1, 2):
            b.conv(f"conv{block}_{j}", channels, dilation=rate, activation="leaky_relu")
    b.conv("conv10", 1, kernel=1, scaled=False)


def _discriminator(b: _Builder) -> None:
    b.conv("conv1", 32, stride=2, activation="leaky_relu")
    b.conv("conv2", 64, stride=2, activation="leaky_relu")
    b.conv("conv3", 128, stride=2, activation="leaky_relu")
    b.conv("conv4", 256, stride=1, activation="leaky_relu")
    b.dense("dense", 2)
    b.softmax("prob")


def build_network(name: str, input_channels: int, input_size: tuple[int, int],
                  width_scale: float = 1.0) -> NetworkGraph:
    """Construct one of the six architecture specs at a given size and width."""
    if name not in FAMILIES:
        raise ValueError(f"unknown network {name!r}; expected one of {FAMILIES}")
    if not 0 < width_scale <= 1:
        raise ValueError("width_scale must be in (0, 1]")
    if input_channels < 1:
        raise ValueError("input_channels must be >= 1")
    div = 16 if name.startswith("FCN") else 8
    h, w = input_size
    if h < div or w < div or h % div or w % div:
        raise ValueError(f"{name} input size must be a positive multiple of {div}, "
                         f"got {input_size}")

    b = _Builder(width_scale)
    if name.startswith("FCN"):
        _vgg_trunk(b)
        _fcn_skip_chain(b, deepest_pool={"FCN4s": 2, "FCN8s": 3, "FCN2s": 1}[name])
    elif name in ("UNetGen", "UNetStandalone"):
        _unet(b)
    else:
        _discriminator(b)
    return NetworkGraph(name=name, layers=b.layers, input_channels=input_channels,
                        input_size=(h, w), width_scale=width_scale)


def propagate_shapes(g: NetworkGraph) -> dict[str, tuple[int, ...]]:
    """Symbolic per-layer output shapes: (h, w, c), or (m,) after dense."""
    shapes: dict[str, tuple[int, ...]] = {
        "input": (g.input_size[0], g.input_size[1], g.input_channels)
    }
    for layer in g.layers:
        src = shapes[layer.source]
        if layer.kind == "conv":
            h, w, _ = src
            kh, kw = layer.kernel
            s, d = layer.stride, layer.dilation
            ph, pw = ops.same_pad(kh, d), ops.same_pad(kw, d)
            ho = (h + 2 * ph - d * (kh - 1) - 1) // s + 1
            wo = (w + 2 * pw - d * (kw - 1) - 1) // s + 1
            shapes[layer.name] = (ho, wo, layer.channels_out)
        elif layer.kind == "transposed_conv":
            h, w, _ = src
            shapes[layer.name] = (h * layer.stride, w * layer.stride, layer.channels_out)
        elif layer.kind == "maxpool":
            h, w, c = src
            shapes[layer.name] = (math.ceil(h / 2), math.ceil(w / 2), c)
        elif layer.kind == "upsample_nn":
            h, w, c = src
            shapes[layer.name] = (2 * h, 2 * w, c)
        elif layer.kind in ("concat", "add"):
            ha, wa, ca = src
            hb, wb, cb = shapes[layer.skip_source]
            if layer.kind == "add" and ca != cb:
                raise ValueError(f"add layer {layer.name!r} fuses {ca} with {cb} channels")
            c = ca + cb if layer.kind == "concat" else ca
            shapes[layer.name] = (min(ha, hb), min(wa, wb), c)
        elif layer.kind == "dense":
            shapes[layer.name] = (layer.channels_out,)
        else:  # softmax, activation
            shapes[layer.name] = src
    return shapes


def count_parameters(g: NetworkGraph) -> int:
    shapes = propagate_shapes(g)
    total = 0
    for layer in g.layers:
        if not layer.has_params:
            continue
        src = shapes[layer.source]
        if layer.kind == "dense":
            d = int(np.prod(src))
            total += d * layer.channels_out + layer.channels_out
        else:
            kh, kw = layer.kernel
            total += kh * kw * src[-1] * layer.channels_out + layer.channels_out
    return total


def _bilinear_kernel(stride: int, c_in: int, c_out: int) -> np.ndarray:
    """Transposed-conv weights that perform bilinear interpolation per channel."""
    k = 2 * stride
    centre = (k - 1) / 2.0
    taps = 1.0 - np.abs(np.arange(k) - centre) / stride
    w = np.zeros((k, k, c_in, c_out), dtype=np.float32)
    plane = np.outer(taps, taps).astype(np.float32)
    for c in range(min(c_in, c_out)):
        w[:, :, c, c] = plane
    return w


def init_params(g: NetworkGraph, rng: np.random.Generator,
                trunk_weights: dict[str, tuple[np.ndarray, np.ndarray]] | None = None):
    """He-uniform conv/dense weights, bilinear upsampling kernels, zero biases.

    ``trunk_weights`` optionally overrides named layers (e.g. an externally
    pretrained encoder); shapes must match the graph exactly.
    """
    shapes = propagate_shapes(g)
    params: dict[str, dict[str, np.ndarray]] = {}
    for layer in g.layers:
        if not layer.has_params:
            continue
        src = shapes[layer.source]
        if layer.kind == "dense":
            d = int(np.prod(src))
            limit = math.sqrt(6.0 / d)
            w = rng.uniform(-limit, limit, size=(d, layer.channels_out))
        elif layer.kind == "transposed_conv":
            w = _bilinear_kernel(layer.stride, src[-1], layer.channels_out)
        else:
            kh, kw = layer.kernel
            fan_in = kh * kw * src[-1]
            limit = math.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, size=(kh, kw, src[-1], layer.channels_out))
        params[layer.name] = {
            "w": np.asarray(w, dtype=np.float32),
            "b": np.zeros(layer.channels_out, dtype=np.float32),
        }
    if trunk_weights:
        for name, (w, bias) in trunk_weights.items():
            if name not in params:
                raise ValueError(f"no parameterized layer named {name!r}")
            if params[name]["w"].shape != w.shape or params[name]["b"].shape != bias.shape:
                raise ValueError(f"external weights for {name!r} have wrong shape")
            params[name] = {"w": np.asarray(w, np.float32), "b": np.asarray(bias, np.float32)}
    return params


def graph_manifest(g: NetworkGraph) -> str:
    """Layer table as text, for architecture diffing in tests and run logs."""
    shapes = propagate_shapes(g)
    header = f"{g.name}  input={g.input_size[0]}x{g.input_size[1]}x{g.input_channels}" \
             f"  width_scale={g.width_scale}  params={count_parameters(g)}"
    rows = [header, "-" * len(header)]
    for layer in g.layers:
        shape = "x".join(str(s) for s in shapes[layer.name])
        detail = f"{layer.kernel[0]}x{layer.kernel[1]} s{layer.stride} d{layer.dilation}"
        src = layer.source + (f"+{layer.skip_source}" if layer.skip_source else "")
        rows.append(f"{layer.name:<16} {layer.kind:<16} {detail:<12} "
                    f"{layer.activation:<11} {src:<28} {shape}")
    return "\n".join(rows)
