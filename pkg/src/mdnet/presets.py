"""Architectures used by the three gas-sensing tasks.

``ir_convnet``        32x1 input, three conv/pool/BN blocks (16, 32, 64 kernels of length 3)
``mixtures_convnet``  40x16 input, three conv/pool/BN blocks (64, 128, 256 kernels of length 5)
``drift_mlp``         128 features, two hidden layers of 512 with 20% dropout

Passing ``md=True`` turns every hidden dense/conv layer into an md layer
(AddNet); the output layer stays a regular dot product.
"""
from __future__ import annotations

from .layers import (
    NetworkSpec,
    activation,
    batchnorm,
    conv1d,
    dense,
    dropout,
    global_avg_pool,
    maxpool1d,
)


def ir_convnet(md: bool = False, dropout_rate: float = 0.0, sharpness: float = 10.0) -> NetworkSpec:
    layers = []
    for kernels in (16, 32, 64):
        layers += [conv1d(kernels, 3, md=md), maxpool1d(2), batchnorm(), activation("relu")]
    layers += [global_avg_pool(), dense(64, md=md), batchnorm(), activation("relu")]
    if dropout_rate > 0:
        layers.append(dropout(dropout_rate))
    name = "addnet" if md else "convnet"
    return NetworkSpec((32, 1), layers, 1, md_sharpness=sharpness, name=f"ir-{name}")


def mixtures_convnet(md: bool = False, dropout_rate: float = 0.0, sharpness: float = 10.0) -> NetworkSpec:
    # 'same' padding: with valid convolutions the third block has a length-2
    # input for a length-5 kernel.
    layers = []
    for kernels in (64, 128, 256):
        layers += [
            conv1d(kernels, 5, md=md, padding="same"),
            maxpool1d(4, stride=3),
            batchnorm(),
            activation("relu"),
        ]
    layers += [global_avg_pool(), dense(256, md=md), batchnorm(), activation("relu")]
    if dropout_rate > 0:
        layers.append(dropout(dropout_rate))
    name = "addnet" if md else "convnet"
    return NetworkSpec((40, 16), layers, 3, md_sharpness=sharpness, name=f"mixtures-{name}")


def drift_mlp(
    md: bool = False,
    dropout_rate: float = 0.2,
    n_features: int = 128,
    n_classes: int = 6,
    hidden: int = 512,
    sharpness: float = 10.0,
) -> NetworkSpec:
    alpha = "inv-l1-norm" if md else "none"
    layers = []
    for _ in range(2):
        layers += [dense(hidden, md=md, alpha_mode=alpha), activation("relu")]
        if dropout_rate > 0:
            layers.append(dropout(dropout_rate))
    name = "addnet-mlp" if md else "mlp"
    return NetworkSpec((n_features,), layers, n_classes, md_sharpness=sharpness, name=f"drift-{name}")


def generator_mlp(noise_dim: int, out_features: int, hidden: int = 256, output_activation: str = "sigmoid") -> NetworkSpec:
    layers = [dense(hidden), activation("relu")]
    return NetworkSpec((noise_dim,), layers, out_features, output_activation=output_activation, name="generator")


PRESETS = {
    "ir-synth": ir_convnet,
    "mixtures": mixtures_convnet,
    "drift": drift_mlp,
}
