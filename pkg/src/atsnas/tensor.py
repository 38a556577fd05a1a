"""A small NCHW float64 runtime: graph construction, forward with rectifier
tracing, reverse-mode gradients and the parameter-store file format.

Networks are static graphs of primitive ops.  A parameter store is a plain
``dict[str, np.ndarray]`` kept outside the graph, so one compiled network
can be evaluated with many stores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .genome import (
    ArchitectureGenome,
    BlockKind,
    ConvOp,
    LayerSpec,
    Skip,
    block_input_channels,
    execution_order,
    slot_index,
    validate,
)


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


# -- primitive ops ---------------------------------------------------------------
#
# forward(inputs, params, attrs) -> (output, cache)
# backward(grad, cache, attrs) -> (input_grads, param_grads)


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp, k, stride):
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    return cols[:, :, ::stride, ::stride]


def _col2im(dcols, x_shape, k, stride, pad):
    """Scatter-add window gradients (N, C, Ho, Wo, k, k) back onto the input."""
    n, c, h, w = x_shape
    ho, wo = dcols.shape[2:4]
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv_forward(inputs, params, attrs):
    (x,) = inputs
    w, b = params
    k, stride, pad, depthwise = attrs["k"], attrs["stride"], attrs["pad"], attrs["depthwise"]
    if k == 1 and stride == 1 and not depthwise:
        out = np.tensordot(w[:, :, 0, 0], x, axes=([1], [1])).transpose(1, 0, 2, 3)
        return out + b[None, :, None, None], (x, None)
    cols = _windows(_pad(x, pad), k, stride)
    if depthwise:
        out = np.einsum("nchwij,cij->nchw", cols, w[:, 0])
    else:
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    return out + b[None, :, None, None], (x, cols)


def conv_backward(g, cache, attrs):
    x, cols = cache
    k, stride, pad, depthwise, w = attrs["k"], attrs["stride"], attrs["pad"], attrs["depthwise"], attrs["_w"]
    db = g.sum(axis=(0, 2, 3))
    if cols is None:
        dw = np.tensordot(g, x, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        dx = np.tensordot(w[:, :, 0, 0], g, axes=([0], [1])).transpose(1, 0, 2, 3)
        return [dx], [dw, db]
    if depthwise:
        dw = np.einsum("nchw,nchwij->cij", g, cols)[:, None]
        dcols = g[:, :, :, :, None, None] * w[:, 0][None, :, None, None]
    else:
        dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        dcols = np.tensordot(g, w, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    dx = _col2im(dcols, x.shape, k, stride, pad)
    return [dx], [dw, db]


def relu_forward(inputs, params, attrs):
    (x,) = inputs
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(g, mask, attrs):
    return [np.where(mask, g, 0.0)], []


def add_forward(inputs, params, attrs):
    a, b = inputs
    return a + b, None


def add_backward(g, cache, attrs):
    return [g, g], []


def upsample_forward(inputs, params, attrs):
    (x,) = inputs
    return x.repeat(2, axis=2).repeat(2, axis=3), None


def upsample_backward(g, cache, attrs):
    n, c, h, w = g.shape
    return [g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))], []


def gap_forward(inputs, params, attrs):
    (x,) = inputs
    return x.mean(axis=(2, 3), keepdims=True), x.shape


def gap_backward(g, shape, attrs):
    h, w = shape[2:]
    return [np.broadcast_to(g / (h * w), shape).copy()], []


def sigmoid_forward(inputs, params, attrs):
    (x,) = inputs
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def sigmoid_backward(g, s, attrs):
    return [g * s * (1.0 - s)], []


def scale_forward(inputs, params, attrs):
    x, s = inputs
    return x * s, (x, s)


def scale_backward(g, cache, attrs):
    x, s = cache
    return [g * s, (g * x).sum(axis=(2, 3), keepdims=True)], []


OPS: dict[str, tuple[Callable, Callable]] = {
    "conv": (conv_forward, conv_backward),
    "relu": (relu_forward, relu_backward),
    "add": (add_forward, add_backward),
    "upsample": (upsample_forward, upsample_backward),
    "gap": (gap_forward, gap_backward),
    "sigmoid": (sigmoid_forward, sigmoid_backward),
    "scale": (scale_forward, scale_backward),
}


# -- graph ------------------------------------------------------------------------

@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    shape: tuple[int, int, int]
    name: str
    params: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)


@dataclass
class NetworkInstance:
    input_shape: tuple[int, int, int]
    nodes: list[Node]
    param_shapes: dict[str, tuple[int, ...]]
    fan_in: dict[str, int]
    n_activations: int

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes.values())

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return self.nodes[-1].shape

    def op_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for node in self.nodes[1:]:
            counts[node.op] = counts.get(node.op, 0) + 1
        return counts


class NetworkBuilder:
    """Appends primitive ops and tracks shapes, parameters and rectifier units."""

    def __init__(self, input_shape):
        c, h, w = (int(v) for v in input_shape)
        self.input_shape = (c, h, w)
        self.nodes = [Node("input", (), (c, h, w), "input")]
        self.param_shapes: dict[str, tuple[int, ...]] = {}
        self.fan_in: dict[str, int] = {}
        self.n_activations = 0

    @property
    def input(self) -> int:
        return 0

    def shape(self, x: int) -> tuple[int, int, int]:
        return self.nodes[x].shape

    def _add(self, op, inputs, shape, name, params=(), **attrs) -> int:
        self.nodes.append(Node(op, tuple(inputs), tuple(shape), name, tuple(params), attrs))
        return len(self.nodes) - 1

    def conv(self, x, cout, k, name, stride=1, depthwise=False) -> int:
        cin, h, w = self.shape(x)
        if depthwise and cout != cin:
            raise ShapeError(f"{name}: depthwise conv keeps width ({cin} -> {cout})")
        pad = k // 2
        ho = (h + 2 * pad - k) // stride + 1
        wo = (w + 2 * pad - k) // stride + 1
        per_group = 1 if depthwise else cin
        self.param_shapes[f"{name}.w"] = (cout, per_group, k, k)
        self.param_shapes[f"{name}.b"] = (cout,)
        self.fan_in[f"{name}.w"] = per_group * k * k
        return self._add(
            "conv", [x], (cout, ho, wo), name, (f"{name}.w", f"{name}.b"),
            k=k, stride=stride, pad=pad, depthwise=depthwise,
        )

    def relu(self, x, name) -> int:
        shape = self.shape(x)
        self.n_activations += shape[0] * shape[1] * shape[2]
        return self._add("relu", [x], shape, name)

    def add(self, a, b, name) -> int:
        if self.shape(a) != self.shape(b):
            raise ShapeError(f"{name}: cannot add {self.shape(a)} and {self.shape(b)}")
        return self._add("add", [a, b], self.shape(a), name)

    def upsample(self, x, name) -> int:
        c, h, w = self.shape(x)
        return self._add("upsample", [x], (c, 2 * h, 2 * w), name)

    def se_gate(self, x, ratio, name) -> int:
        c, h, w = self.shape(x)
        hidden = math.ceil(ratio * c)
        s = self._add("gap", [x], (c, 1, 1), f"{name}.pool")
        s = self.relu(self.conv(s, hidden, 1, f"{name}.reduce"), f"{name}.reduce.relu")
        s = self._add("sigmoid", [self.conv(s, c, 1, f"{name}.expand")], (c, 1, 1), f"{name}.gate")
        return self._add("scale", [x, s], (c, h, w), f"{name}.scale")

    def layer(self, x, layer: LayerSpec, name, stride=1, expansion=3) -> int:
        """One searchable layer: optional SE on the input, the conv op with a
        rectifier after every conv, then an optional residual add."""
        cin = self.shape(x)[0]
        h = x
        if layer.se_ratio > 0:
            h = self.se_gate(h, layer.se_ratio, f"{name}.se")
        k, cout = layer.ksize, layer.out_channels
        if layer.conv_op is ConvOp.VANILLA:
            h = self.relu(self.conv(h, cout, k, f"{name}.conv", stride), f"{name}.conv.relu")
        elif layer.conv_op is ConvOp.DEPTHWISE:
            h = self.relu(self.conv(h, cin, k, f"{name}.dw", stride, depthwise=True), f"{name}.dw.relu")
            h = self.relu(self.conv(h, cout, 1, f"{name}.pw"), f"{name}.pw.relu")
        else:
            e = expansion * cin
            h = self.relu(self.conv(h, e, 1, f"{name}.expand"), f"{name}.expand.relu")
            h = self.relu(self.conv(h, e, k, f"{name}.dw", stride, depthwise=True), f"{name}.dw.relu")
            h = self.relu(self.conv(h, cout, 1, f"{name}.project"), f"{name}.project.relu")
        if layer.skip is Skip.RESIDUAL:
            h = self.add(h, x, f"{name}.residual")
        return h

    def build(self) -> NetworkInstance:
        return NetworkInstance(
            self.input_shape, self.nodes, dict(self.param_shapes), dict(self.fan_in), self.n_activations
        )


def compile_genome(genome: ArchitectureGenome, input_shape=None, expansion: int = 3) -> NetworkInstance:
    """Build the full backbone plus the fixed 1x1 depth head.

    ``input_shape`` is ``(C, H, W)``; it defaults to the genome's
    ``input_resolution`` (stored as ``(H, W, C)``).
    """
    report = validate(genome)
    if not report.ok:
        raise ValueError("invalid genome: " + "; ".join(report.violations))
    if input_shape is None:
        h, w, c = genome.input_resolution
        input_shape = (c, h, w)
    c, h, w = input_shape
    factor = 2 ** (genome.num_scales - 1)
    if h % factor or w % factor:
        raise ShapeError(f"input {h}x{w} not divisible by {factor} for {genome.num_scales} scales")
    if c != genome.input_resolution[2]:
        raise ShapeError(f"input has {c} channels, genome expects {genome.input_resolution[2]}")

    nb = NetworkBuilder(input_shape)
    outputs: dict[int, int] = {}
    cins = block_input_channels(genome)
    for slot in execution_order(genome.num_scales):
        block = genome.blocks[slot]
        i, j = block.scale, block.index
        name = f"s{i}b{j}"
        if (i, j) == (1, 1):
            x = nb.input
        elif j == 1:
            x = outputs[slot_index(i, 6)]
        elif j == 6:
            x = outputs[slot_index(i - 1, 2)]
        elif j == 7:
            x = nb.upsample(outputs[slot_index(i, 5)], f"{name}.up")
        elif j == 3 and i < genome.num_scales:
            skip = outputs[slot_index(i, 2)]
            coarse = outputs[slot_index(i + 1, 7)]
            if nb.shape(coarse)[0] != nb.shape(skip)[0]:
                coarse = nb.conv(coarse, nb.shape(skip)[0], 1, f"fuse{i}.proj")
            x = nb.add(skip, coarse, f"fuse{i}")
        elif j == 3:
            x = outputs[slot_index(i, 2)]
        else:
            x = outputs[slot - 1]
        assert nb.shape(x)[0] == cins[slot]
        for r in range(block.repeats):
            stride = 2 if (block.kind is BlockKind.DOWNSAMPLE and r == 0) else 1
            x = nb.layer(x, block.layer, f"{name}.l{r}", stride=stride, expansion=expansion)
        outputs[slot] = x
    nb.conv(outputs[slot_index(1, 5)], 1, 1, "head")
    return nb.build()


# -- execution --------------------------------------------------------------------

@dataclass
class Tape:
    values: list
    caches: list
    params: dict


def _run(net: NetworkInstance, params: dict, batch: np.ndarray, trace: bool, record: bool):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != net.input_shape:
        raise ShapeError(f"batch shape {batch.shape} does not match input {net.input_shape}")
    values = [batch]
    caches = [None]
    codes = []
    for node in net.nodes[1:]:
        fwd, _ = OPS[node.op]
        out, cache = fwd([values[i] for i in node.inputs], [params[p] for p in node.params], node.attrs)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite values produced by {node.op} '{node.name}'")
        if trace and node.op == "relu":
            codes.append(cache.reshape(len(batch), -1))
        values.append(out)
        caches.append(cache if record else None)
    traces = np.concatenate(codes, axis=1) if trace and codes else (
        np.zeros((len(batch), 0), dtype=bool) if trace else None
    )
    return values, caches, traces


def forward(net: NetworkInstance, params: dict, batch: np.ndarray, trace: bool = False):
    """Return ``(output, traces)``; ``traces`` is an ``(N, N_A)`` bool array
    (row ``i`` = rectifier on/off bits for input ``i``) or ``None``."""
    values, _, traces = _run(net, params, batch, trace, record=False)
    return values[-1], traces


def forward_with_tape(net: NetworkInstance, params: dict, batch: np.ndarray):
    values, caches, _ = _run(net, params, batch, trace=False, record=True)
    return values[-1], Tape(values, caches, params)


def backward(net: NetworkInstance, tape: Tape, grad_output: np.ndarray) -> dict:
    """Reverse pass over a recorded forward; one gradient per parameter tensor."""
    grads = {name: np.zeros(shape) for name, shape in net.param_shapes.items()}
    node_grads: list = [None] * len(net.nodes)
    node_grads[-1] = np.asarray(grad_output, dtype=np.float64)
    if node_grads[-1].shape != tape.values[-1].shape:
        raise ShapeError("grad_output shape differs from the network output")
    for idx in range(len(net.nodes) - 1, 0, -1):
        g = node_grads[idx]
        if g is None:
            continue
        node = net.nodes[idx]
        _, bwd = OPS[node.op]
        attrs = node.attrs
        if node.op == "conv":
            attrs = dict(attrs, _w=tape.params[node.params[0]])
        in_grads, p_grads = bwd(g, tape.caches[idx], attrs)
        for name, pg in zip(node.params, p_grads):
            grads[name] += pg
        for i, ig in zip(node.inputs, in_grads):
            node_grads[i] = ig if node_grads[i] is None else node_grads[i] + ig
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    return grads


def init_params(net: NetworkInstance, seed) -> dict:
    """Weights ~ Normal(0, 2 / fan_in), biases zero.  Deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in net.param_shapes.items():
        if name.endswith(".w"):
            params[name] = rng.normal(0.0, math.sqrt(2.0 / net.fan_in[name]), size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


# -- parameter store files --------------------------------------------------------

def save_params(params: dict, path) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (little-endian float64, concatenated) and a
    tab-separated ``<path>.manifest`` of ``name, shape, byte offset``."""
    path = Path(path)
    bin_path, manifest_path = path.with_suffix(".bin"), path.with_suffix(".manifest")
    offset = 0
    lines = ["# name\tshape\toffset\tdtype=<f8"]
    with open(bin_path, "wb") as fh:
        for name, arr in params.items():
            data = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(data.tobytes())
            lines.append(f"{name}\t{'x'.join(str(s) for s in data.shape)}\t{offset}")
            offset += data.nbytes
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return bin_path, manifest_path


def load_params(path) -> dict:
    path = Path(path)
    raw = path.with_suffix(".bin").read_bytes()
    params = {}
    for line in path.with_suffix(".manifest").read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        name, shape_text, offset = line.split("\t")
        shape = tuple(int(s) for s in shape_text.split("x")) if shape_text else ()
        count = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=int(offset)).reshape(shape).astype(np.float64)
    return params
