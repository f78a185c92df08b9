"""Run a NetworkGraph forward and backward against a parameter store."""

from __future__ import annotations

import math

import numpy as np

from ..netspec import NetworkGraph
from . import ops
from .tensor import ParamStore


class TrainingDivergence(ArithmeticError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


def _run(graph: NetworkGraph, params: ParamStore, x, train: bool, track_stats: bool):
    expected = graph.input_shape
    if tuple(x.shape[1:]) != tuple(expected):
        raise ValueError(f"batch shape {x.shape[1:]} does not match graph input {expected}")
    caches = []
    for layer in graph.layers:
        n = layer.name
        if layer.kind == "conv":
            x, cache = ops.conv2d_forward(x, params[f"{n}.weight"].values,
                                          params[f"{n}.bias"].values, layer.padding)
        elif layer.kind == "composite":
            h, c_bn = ops.batchnorm_forward(
                x, params[f"{n}.bn.gamma"].values, params[f"{n}.bn.beta"].values,
                params[f"{n}.bn.running_mean"].values, params[f"{n}.bn.running_var"].values,
                train, track_stats)
            h, c_relu = ops.relu_forward(h)
            h, c_conv = ops.conv2d_forward(h, params[f"{n}.conv.weight"].values,
                                           params[f"{n}.conv.bias"].values, 1)
            x, c_cat = ops.concat_forward([x, h])
            cache = (c_bn, c_relu, c_conv, c_cat)
        elif layer.kind == "bn":
            x, cache = ops.batchnorm_forward(
                x, params[f"{n}.gamma"].values, params[f"{n}.beta"].values,
                params[f"{n}.running_mean"].values, params[f"{n}.running_var"].values,
                train, track_stats)
        elif layer.kind == "relu":
            x, cache = ops.relu_forward(x)
        elif layer.kind == "avgpool":
            x, cache = ops.avgpool2_forward(x)
        elif layer.kind == "gap":
            x, cache = ops.gap_forward(x)
        elif layer.kind == "fc":
            x, cache = ops.linear_forward(x, params[f"{n}.weight"].values,
                                          params[f"{n}.bias"].values)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        caches.append(cache)
    return x, caches


def forward(graph: NetworkGraph, params: ParamStore, batch, mode: str = "train",
            track_stats: bool = False):
    """Logits of shape (batch, num_classes).

    ``mode`` is ``"train"`` (batch statistics) or ``"eval"`` (running statistics).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
    logits, _ = _run(graph, params, batch, mode == "train", track_stats)
    return logits


def backward(graph: NetworkGraph, params: ParamStore, batch, labels, mode: str = "train",
             track_stats: bool = False):
    """Mean softmax cross-entropy and the gradient of every trainable tensor.

    Returns ``(loss, grads, logits)``.  Parameters are never modified; running
    statistics only when ``track_stats`` is set.
    """
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= graph.num_classes:
        raise ValueError("label out of range")
    logits, caches = _run(graph, params, batch, mode == "train", track_stats)
    loss, d = ops.softmax_cross_entropy(logits, labels)
    if not math.isfinite(loss):
        raise TrainingDivergence(f"non-finite loss {loss}")
    grads = {}
    for layer, cache in zip(reversed(graph.layers), reversed(caches)):
        n = layer.name
        if layer.kind == "conv":
            d, grads[f"{n}.weight"], grads[f"{n}.bias"] = ops.conv2d_backward(d, cache)
        elif layer.kind == "composite":
            c_bn, c_relu, c_conv, c_cat = cache
            d_skip, d_new = ops.concat_backward(d, c_cat)
            d_new, grads[f"{n}.conv.weight"], grads[f"{n}.conv.bias"] = \
                ops.conv2d_backward(d_new, c_conv)
            d_new = ops.relu_backward(d_new, c_relu)
            d_new, grads[f"{n}.bn.gamma"], grads[f"{n}.bn.beta"] = \
                ops.batchnorm_backward(d_new, c_bn)
            d = d_skip + d_new
        elif layer.kind == "bn":
            d, grads[f"{n}.gamma"], grads[f"{n}.beta"] = ops.batchnorm_backward(d, cache)
        elif layer.kind == "relu":
            d = ops.relu_backward(d, cache)
        elif layer.kind == "avgpool":
            d = ops.avgpool2_backward(d, cache)
        elif layer.kind == "gap":
            d = ops.gap_backward(d, cache)
        elif layer.kind == "fc":
            d, grads[f"{n}.weight"], grads[f"{n}.bias"] = ops.linear_backward(d, cache)
    return loss, grads, logits


def predict(graph: NetworkGraph, params: ParamStore, images, batch_size: int = 256):
    out = []
    for i in range(0, len(images), batch_size):
        out.append(forward(graph, params, images[i:i + batch_size], "eval").argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)
