"""Forward and backward passes over a NetworkGraph.

Batches are NHWC.  ``forward`` optionally returns a cache holding every
intermediate activation plus per-layer op caches; ``backward`` consumes it and
returns parameter gradients (same nesting as the params dict) and the gradient
with respect to the input batch.  Gradients from layers with multiple
consumers (pool skips) accumulate by summation.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .graph import LEAKY_SLOPE, NetworkGraph


def _apply_activation(layer, x):
    if layer.activation == "relu":
        return ops.relu(x)
    if layer.activation == "leaky_relu":
        return ops.leaky_relu(x, LEAKY_SLOPE)
    return x, None


def _activation_backward(layer, dout, act_cache):
    if layer.activation == "relu":
        return ops.relu_backward(dout, act_cache)
    if layer.activation == "leaky_relu":
        return ops.leaky_relu_backward(dout, act_cache)
    return dout


def forward(g: NetworkGraph, params, batch: np.ndarray, return_cache: bool = False):
    """Evaluate the graph on an NHWC batch.

    Returns the final layer's output, or ``(output, cache)`` when
    ``return_cache`` is set.  ``cache["acts"]`` maps layer names to their
    outputs for shape and inspection tests.
    """
    x = np.asarray(batch)
    if x.ndim != 4:
        raise ValueError(f"batch must be (n, h, w, c), got shape {x.shape}")
    n, h, w, c = x.shape
    if (h, w) != g.input_size or c != g.input_channels:
        raise ValueError(f"{g.name} expects {g.input_size} x{g.input_channels} input, "
                         f"got {(h, w)} x{c}")

    acts: dict[str, np.ndarray] = {"input": x}
    layer_caches = []
    for layer in g.layers:
        src = acts[layer.source]
        act_cache = None
        if layer.kind == "conv":
            p = params[layer.name]
            out, cache = ops.conv2d(src, p["w"], p["b"],
                                    stride=layer.stride, dilation=layer.dilation)
            out, act_cache = _apply_activation(layer, out)
        elif layer.kind == "transposed_conv":
            p = params[layer.name]
            out, cache = ops.conv2d_transpose(src, p["w"], p["b"], stride=layer.stride)
        elif layer.kind == "maxpool":
            out, cache = ops.maxpool2x2(src)
        elif layer.kind == "upsample_nn":
            out, cache = ops.upsample_nn2x(src)
        elif layer.kind == "concat":
            out, cache = ops.concat_channels(src, acts[layer.skip_source])
        elif layer.kind == "add":
            out, cache = ops.add_fuse(src, acts[layer.skip_source])
        elif layer.kind == "dense":
            p = params[layer.name]
            out, cache = ops.dense(src, p["w"], p["b"])
            out, act_cache = _apply_activation(layer, out)
        elif layer.kind == "softmax":
            out, cache = ops.softmax(src)
        else:  # standalone activation
            out, cache = _apply_activation(layer, src)
        acts[layer.name] = out
        layer_caches.append((layer, cache, act_cache))

    out = acts[g.output_layer]
    if return_cache:
        return out, {"acts": acts, "layers": layer_caches}
    return out


def backward(g: NetworkGraph, params, cache, dout: np.ndarray):
    """Backpropagate ``dout`` (gradient at the final output) through the graph.

    Returns ``(param_grads, dinput)`` where ``param_grads[name]`` holds "w"
    and "b" arrays matching ``params[name]``.
    """
    acts = cache["acts"]
    grads_out: dict[str, np.ndarray] = {g.output_layer: np.asarray(dout)}
    param_grads: dict[str, dict[str, np.ndarray]] = {}

    def _push(name: str, grad: np.ndarray) -> None:
        if name in grads_out:
            grads_out[name] = grads_out[name] + grad
        else:
            grads_out[name] = grad

    for layer, op_cache, act_cache in reversed(cache["layers"]):
        gout = grads_out.pop(layer.name, None)
        if gout is None:
            continue  # dead branch
        if layer.kind == "conv":
            gout = _activation_backward(layer, gout, act_cache)
            dx, dw, db = ops.conv2d_backward(gout, op_cache)
            param_grads[layer.name] = {"w": dw, "b": db}
            _push(layer.source, dx)
        elif layer.kind == "transposed_conv":
            dx, dw, db = ops.conv2d_transpose_backward(gout, op_cache)
            param_grads[layer.name] = {"w": dw, "b": db}
            _push(layer.source, dx)
        elif layer.kind == "maxpool":
            _push(layer.source, ops.maxpool2x2_backward(gout, op_cache))
        elif layer.kind == "upsample_nn":
            _push(layer.source, ops.upsample_nn2x_backward(gout, op_cache))
        elif layer.kind == "concat":
            da, db_ = ops.concat_channels_backward(gout, op_cache)
            _push(layer.source, da)
            _push(layer.skip_source, db_)
        elif layer.kind == "add":
            da, db_ = ops.add_fuse_backward(gout, op_cache)
            _push(layer.source, da)
            _push(layer.skip_source, db_)
        elif layer.kind == "dense":
            gout = _activation_backward(layer, gout, act_cache)
            dx, dw, db = ops.dense_backward(gout, op_cache)
            param_grads[layer.name] = {"w": dw, "b": db}
            _push(layer.source, dx)
        elif layer.kind == "softmax":
            _push(layer.source, ops.softmax_backward(gout, acts[layer.name]))
        else:  # standalone activation
            _push(layer.source, _activation_backward(layer, gout, op_cache))

    return param_grads, grads_out.get("input")
