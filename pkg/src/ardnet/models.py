"""Reference model builders and the image-classifier compression harness."""

from __future__ import annotations

import numpy as np

from . import nn
from .updates import SearchConfig

__all__ = [
    "lenet300_100",
    "lenet5",
    "default_patterns",
    "mnist_compression_config",
    "build_model",
    "save_weights",
    "load_weights",
]


def lenet300_100(rng=None):
    """784-300-100-10 fully connected classifier (relu hidden units)."""
    if rng is None:
        rng = np.random.default_rng(0)
    return [
        nn.flatten_layer(),
        nn.fc_layer(784, 300, activation="relu", rng=rng),
        nn.fc_layer(300, 100, activation="relu", rng=rng),
        nn.fc_layer(100, 10, activation="identity", rng=rng),
    ]


def lenet5(rng=None):
    """Conv 20/50 (5x5) + fc 500 classifier for 28x28 single-channel input."""
    if rng is None:
        rng = np.random.default_rng(0)
    return [
        nn.conv_layer(1, 20, 5, activation="relu", rng=rng),
        nn.pool_layer("maxpool2d", 2),
        nn.conv_layer(20, 50, 5, activation="relu", rng=rng),
        nn.pool_layer("maxpool2d", 2),
        nn.flatten_layer(),
        nn.fc_layer(800, 500, activation="relu", rng=rng),
        nn.fc_layer(500, 10, activation="identity", rng=rng),
    ]


def default_patterns(name):
    """Per-layer sparsity patterns for the reference models.

    Keys are layer indices within the stack; conv layers prune whole
    filters, fc layers prune input and output units (the final classifier
    layer only prunes inputs so all ten classes survive).
    """
    if name == "lenet300-100":
        return {1: ["row_and_column"], 2: ["row_and_column"], 3: ["column"]}
    if name == "lenet5":
        return {0: ["filter"], 2: ["filter"], 5: ["row_and_column"],
                6: ["column"]}
    raise ValueError(f"unknown model {name!r} (expected lenet300-100 or lenet5)")


def mnist_compression_config(name, seed=0):
    """Compression hyperparameters tuned for the reference classifiers."""
    base = dict(t_max=10, epochs_per_iteration=1, retrain_epochs=5,
                batch_size=64, curvature_batch=256, learning_rate=0.05,
                momentum=0.9, weight_decay=1e-4, hessian_mode="approx",
                seed=seed)
    if name == "lenet300-100":
        return SearchConfig(lambda_w=0.02, **base)
    if name == "lenet5":
        return SearchConfig(lambda_w=0.01, **base)
    raise ValueError(f"unknown model {name!r} (expected lenet300-100 or lenet5)")


def build_model(name, seed=0):
    rng = np.random.default_rng(seed)
    if name == "lenet300-100":
        return lenet300_100(rng)
    if name == "lenet5":
        return lenet5(rng)
    raise ValueError(f"unknown model {name!r} (expected lenet300-100 or lenet5)")


def save_weights(net, path):
    """Store weights, biases and masks of the weighted layers as one npz."""
    arrays = {}
    for li, layer in enumerate(net):
        if layer.weights is None:
            continue
        arrays[f"w{li}"] = layer.weights
        if layer.bias is not None:
            arrays[f"b{li}"] = layer.bias
        if layer.mask is not None:
            arrays[f"m{li}"] = layer.mask
    np.savez(path, **arrays)


def load_weights(net, path):
    """Restore weights saved by save_weights into a matching stack."""
    with np.load(path) as arrays:
        for li, layer in enumerate(net):
            if layer.weights is None:
                continue
            key = f"w{li}"
            if key not in arrays:
                raise ValueError(f"weight file is missing layer {li}")
            if arrays[key].shape != layer.weights.shape:
                raise ValueError(
                    f"layer {li} shape mismatch: file has {arrays[key].shape}, "
                    f"model has {layer.weights.shape}"
                )
            layer.weights = arrays[key]
            if f"b{li}" in arrays:
                layer.bias = arrays[f"b{li}"]
            if f"m{li}" in arrays:
                layer.mask = arrays[f"m{li}"]
    return net
