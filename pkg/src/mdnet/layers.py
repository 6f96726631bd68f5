"""Regular and md layers, declarative network specs, forward and backward.

A network is described by a ``NetworkSpec``: an input shape, an ordered list
of ``LayerConfig`` records and the number of output units. The output layer
is always a regular (dot-product) dense layer that is appended automatically,
so an AddNet never uses md products in its last layer.

Parameters live in a flat ``dict`` keyed ``"<layer index>.<name>"``
(e.g. ``"0.W"``, ``"2.gamma"``, ``"2.running_var"``); gradients use the same
keys for the trainable entries.

Signals are laid out as ``(batch, time, channels)`` for convolutional stacks
and ``(batch, features)`` for dense stacks.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

import numpy as np

from . import mdop
from .errors import BatchError, InternalError, ParameterError, ShapeError, SpecError
from .tensor import Rng

KINDS = ("dense", "conv1d", "maxpool1d", "global-avg-pool", "batchnorm", "dropout", "activation")
ACTIVATIONS = ("relu", "sigmoid", "tanh", "linear")
ALPHA_MODES = ("none", "trainable", "inv-l1-norm")
PARAMETRIC = ("dense", "conv1d")
TRAINABLE = ("W", "b", "alpha", "gamma", "beta")

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


@dataclass
class LayerConfig:
    kind: str
    md: bool = False
    units: int | None = None
    num_kernels: int | None = None
    kernel_len: int | None = None
    stride: int | None = None
    padding: str = "valid"
    pool_size: int | None = None
    rate: float = 0.0
    activation: str = "relu"
    alpha_mode: str = "none"

    def to_dict(self) -> dict[str, Any]:
        defaults = LayerConfig(kind=self.kind)
        return {
            k: v for k, v in asdict(self).items() if k == "kind" or v != getattr(defaults, k)
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LayerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown layer fields {sorted(unknown)}")
        return cls(**d)


def dense(units, md=False, alpha_mode="none"):
    return LayerConfig("dense", md=md, units=units, alpha_mode=alpha_mode)


def conv1d(num_kernels, kernel_len, md=False, stride=1, padding="valid", alpha_mode="none"):
    return LayerConfig(
        "conv1d",
        md=md,
        num_kernels=num_kernels,
        kernel_len=kernel_len,
        stride=stride,
        padding=padding,
        alpha_mode=alpha_mode,
    )


def maxpool1d(pool_size, stride=None):
    return LayerConfig("maxpool1d", pool_size=pool_size, stride=stride)


def global_avg_pool():
    return LayerConfig("global-avg-pool")


def batchnorm():
    return LayerConfig("batchnorm")


def dropout(rate):
    return LayerConfig("dropout", rate=rate)


def activation(kind="relu"):
    return LayerConfig("activation", activation=kind)


@dataclass
class NetworkSpec:
    input_shape: tuple[int, ...]
    layers: list[LayerConfig]
    output_units: int
    output_activation: str = "linear"
    md_sharpness: float = mdop.DEFAULT_SHARPNESS
    name: str = ""
    _shapes: list = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self._shapes = shape_check(self)

    def stack(self) -> list[LayerConfig]:
        """Hidden layers followed by the regular linear output layer."""
        out = list(self.layers) + [dense(self.output_units)]
        if self.output_activation != "linear":
            out.append(activation(self.output_activation))
        return out

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        """Per-instance shape after each layer of ``stack()`` (input first)."""
        return self._shapes

    @property
    def output_index(self) -> int:
        return len(self.layers)

    @property
    def uses_md(self) -> bool:
        return any(layer.md for layer in self.layers)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
            "output_units": self.output_units,
            "output_activation": self.output_activation,
            "md_sharpness": self.md_sharpness,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NetworkSpec":
        try:
            return cls(
                input_shape=tuple(d["input_shape"]),
                layers=[LayerConfig.from_dict(x) for x in d["layers"]],
                output_units=int(d["output_units"]),
                output_activation=d.get("output_activation", "linear"),
                md_sharpness=float(d.get("md_sharpness", mdop.DEFAULT_SHARPNESS)),
                name=d.get("name", ""),
            )
        except KeyError as exc:
            raise SpecError(f"missing spec field {exc}") from None

    def with_dropout(self, rate: float) -> "NetworkSpec":
        """Copy with every dropout layer set to ``rate``."""
        layers = [replace(l, rate=rate) if l.kind == "dropout" else l for l in self.layers]
        return NetworkSpec(
            self.input_shape, layers, self.output_units, self.output_activation,
            self.md_sharpness, self.name,
        )


def _conv_out_len(T, L, stride, padding):
    if padding == "same":
        return T
    return (T - L) // stride + 1


def _next_parametric_is_preceded_by_bn(stack, i):
    for layer in stack[i + 1:]:
        if layer.kind in PARAMETRIC:
            return False
        if layer.kind == "batchnorm":
            return True
    return False


def shape_check(spec: NetworkSpec) -> list[tuple[int, ...]]:
    if spec.output_units < 1:
        raise SpecError("output_units must be positive")
    if spec.output_activation not in ACTIVATIONS:
        raise SpecError(f"unknown output activation {spec.output_activation!r}")
    if not spec.md_sharpness > 0:
        raise SpecError("md_sharpness must be positive")
    shape = tuple(spec.input_shape)
    if not shape or any(d < 1 for d in shape):
        raise SpecError(f"bad input shape {shape}")
    shapes = [shape]
    stack = spec.stack()
    for i, layer in enumerate(stack):
        where = f"layer {i} ({layer.kind})"
        if layer.kind not in KINDS:
            raise SpecError(f"{where}: unknown kind")
        if layer.md and layer.kind not in PARAMETRIC:
            raise SpecError(f"{where}: md flag only valid on dense/conv1d")
        if layer.alpha_mode not in ALPHA_MODES:
            raise SpecError(f"{where}: unknown alpha mode {layer.alpha_mode!r}")
        if layer.alpha_mode != "none":
            if not layer.md:
                raise SpecError(f"{where}: alpha scaling requires an md layer")
            if _next_parametric_is_preceded_by_bn(stack, i):
                raise SpecError(f"{where}: alpha scaling is subsumed by the following batchnorm")
        if layer.kind == "dense":
            if len(shape) != 1:
                raise SpecError(f"{where}: expects a flat input, got {shape}")
            if not layer.units or layer.units < 1:
                raise SpecError(f"{where}: units must be positive")
            shape = (layer.units,)
        elif layer.kind == "conv1d":
            if len(shape) != 2:
                raise SpecError(f"{where}: expects (time, channels), got {shape}")
            K, L = layer.num_kernels, layer.kernel_len
            stride = layer.stride or 1
            if not K or not L or K < 1 or L < 1 or stride < 1:
                raise SpecError(f"{where}: kernel geometry must be positive")
            if layer.padding not in ("valid", "same"):
                raise SpecError(f"{where}: padding must be 'valid' or 'same'")
            if layer.padding == "same" and stride != 1:
                raise SpecError(f"{where}: 'same' padding requires stride 1")
            if layer.padding == "valid" and L > shape[0]:
                raise SpecError(f"{where}: kernel length {L} exceeds input length {shape[0]}")
            shape = (_conv_out_len(shape[0], L, stride, layer.padding), K)
        elif layer.kind == "maxpool1d":
            if len(shape) != 2:
                raise SpecError(f"{where}: expects (time, channels), got {shape}")
            p = layer.pool_size
            s = layer.stride or p
            if not p or p < 1 or s < 1:
                raise SpecError(f"{where}: pool size and stride must be positive")
            if p > shape[0]:
                raise SpecError(f"{where}: pool size {p} exceeds input length {shape[0]}")
            shape = ((shape[0] - p) // s + 1, shape[1])
        elif layer.kind == "global-avg-pool":
            if len(shape) != 2:
                raise SpecError(f"{where}: expects (time, channels), got {shape}")
            shape = (shape[1],)
        elif layer.kind == "dropout":
            if not 0.0 <= layer.rate < 1.0:
                raise SpecError(f"{where}: dropout rate must be in [0, 1)")
        elif layer.kind == "activation":
            if layer.activation not in ACTIVATIONS:
                raise SpecError(f"{where}: unknown activation {layer.activation!r}")
        shapes.append(shape)
    return shapes


# -- parameters ----------------------------------------------------------------


def init_network(spec: NetworkSpec, rng: Rng, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-initialised weights, zero biases, unit alpha / BN scale."""
    state: dict[str, np.ndarray] = {}
    for i, layer in enumerate(spec.stack()):
        in_shape = spec.shapes[i]
        if layer.kind == "dense":
            fan_in = in_shape[0]
            w_shape = (layer.units, fan_in)
            n_out = layer.units
        elif layer.kind == "conv1d":
            fan_in = layer.kernel_len * in_shape[1]
            w_shape = (layer.num_kernels, layer.kernel_len, in_shape[1])
            n_out = layer.num_kernels
        elif layer.kind == "batchnorm":
            n = in_shape[-1]
            state[f"{i}.gamma"] = np.ones(n, dtype=dtype)
            state[f"{i}.beta"] = np.zeros(n, dtype=dtype)
            state[f"{i}.running_mean"] = np.zeros(n, dtype=dtype)
            state[f"{i}.running_var"] = np.ones(n, dtype=dtype)
            continue
        else:
            continue
        std = np.sqrt(2.0 / fan_in)
        state[f"{i}.W"] = rng.normal(0.0, std, size=w_shape).astype(dtype)
        state[f"{i}.b"] = np.zeros(n_out, dtype=dtype)
        if layer.alpha_mode == "trainable":
            state[f"{i}.alpha"] = np.ones(n_out, dtype=dtype)
    return state


def trainable_keys(state: dict[str, np.ndarray]) -> list[str]:
    return [k for k in state if k.split(".", 1)[1] in TRAINABLE]


def copy_state(state):
    return {k: v.copy() for k, v in state.items()}


def layer_index(key: str) -> int:
    return int(key.split(".", 1)[0])


# -- convolution helpers ---------------------------------------------------------


def _pad_amounts(L, padding):
    if padding == "same":
        return (L - 1) // 2, L - 1 - (L - 1) // 2
    return 0, 0


def im2col(x: np.ndarray, L: int, stride: int, padding: str) -> np.ndarray:
    """(B, T, C) -> (B, T', L*C) windows; flattened index is l*C + c."""
    left, right = _pad_amounts(L, padding)
    if left or right:
        x = np.pad(x, ((0, 0), (left, right), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(x, L, axis=1)[:, ::stride]
    B, Tp, C, _ = win.shape
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(B, Tp, L * C)


def col2im(dcols: np.ndarray, T: int, C: int, L: int, stride: int, padding: str) -> np.ndarray:
    left, right = _pad_amounts(L, padding)
    B, Tp, _ = dcols.shape
    d = dcols.reshape(B, Tp, L, C)
    dx = np.zeros((B, T + left + right, C), dtype=dcols.dtype)
    span = stride * (Tp - 1) + 1
    for l in range(L):
        dx[:, l:l + span:stride, :] += d[:, :, l, :]
    return dx[:, left:left + T, :]


# -- forward -----------------------------------------------------------------


def _alpha(layer, state, i, w):
    if layer.alpha_mode == "trainable":
        return state[f"{i}.alpha"]
    if layer.alpha_mode == "inv-l1-norm":
        norms = np.abs(w).reshape(w.shape[0], -1).sum(axis=1)
        return 1.0 / np.maximum(norms, 1e-12)
    return None


def _act(kind, z):
    if kind == "relu":
        return np.maximum(z, 0)
    if kind == "sigmoid":
        return _sigmoid(z)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _param_forward(layer, state, i, x, a, smooth, q8):
    """Dense / conv1d forward. Returns (output, cache entry)."""
    w = state[f"{i}.W"]
    b = state[f"{i}.b"]
    if layer.kind == "conv1d":
        B, T, C = x.shape
        K, L, _ = w.shape
        stride = layer.stride or 1
        cols = im2col(x, L, stride, layer.padding)
        Tp = cols.shape[1]
        rows = cols.reshape(B * Tp, L * C)
        wf = w.reshape(K, L * C)
    else:
        rows, wf = x, w
    if layer.md:
        if q8 is not None and i in q8:
            wq, w_scale = q8[i]
            if layer.kind == "conv1d":
                xq, x_scales = mdop.quantize_rows(x)
                qrows = im2col(xq.astype(np.int16), L, stride, layer.padding).reshape(B * Tp, L * C)
                row_scales = np.repeat(x_scales, Tp)
            else:
                qrows, row_scales = mdop.quantize_rows(x)
            m = mdop.md_linear_q8(qrows, row_scales, wq.reshape(wf.shape), w_scale).astype(x.dtype)
        else:
            m = mdop.md_linear(rows, wf, smooth=smooth, a=a)
        alpha = _alpha(layer, state, i, w)
        z = m * alpha + b if alpha is not None else m + b
    else:
        m, alpha = None, None
        z = rows @ wf.T + b
    entry = {"rows": rows, "m": m, "alpha": alpha}
    if layer.kind == "conv1d":
        entry["in_shape"] = x.shape
        z = z.reshape(B, Tp, K)
    return z, entry


def forward(
    spec: NetworkSpec,
    state: dict[str, np.ndarray],
    batch: np.ndarray,
    mode: str = "eval",
    rng: Rng | None = None,
    *,
    surrogate: dict[int, str] | None = None,
    q8: dict[int, tuple[np.ndarray, float]] | None = None,
    update_running: bool = True,
):
    """Run the stack on a batch.

    ``surrogate`` maps md layer indices to a smoothed forward ("w", "x" or
    "both") and exists for gradient checking. ``q8`` maps md layer indices
    to (int8 weights, scale) and switches those layers to the 8-bit kernel.
    Train mode updates batchnorm running statistics in ``state`` unless
    ``update_running`` is False.
    """
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(batch)
    if x.shape[1:] != spec.input_shape:
        raise ShapeError(f"batch shape {x.shape[1:]} does not match input shape {spec.input_shape}")
    if mode == "train" and rng is None and any(
        l.kind == "dropout" and l.rate > 0 for l in spec.layers
    ):
        raise ParameterError("train-mode dropout needs an rng")
    a = spec.md_sharpness
    surrogate = surrogate or {}
    caches = []
    for i, layer in enumerate(spec.stack()):
        entry: dict[str, Any] = {}
        if layer.kind in PARAMETRIC:
            x, entry = _param_forward(layer, state, i, x, a, surrogate.get(i), q8)
        elif layer.kind == "maxpool1d":
            p = layer.pool_size
            s = layer.stride or p
            win = np.lib.stride_tricks.sliding_window_view(x, p, axis=1)[:, ::s]
            arg = win.argmax(axis=-1)
            entry = {"arg": arg, "T": x.shape[1]}
            x = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        elif layer.kind == "global-avg-pool":
            entry = {"T": x.shape[1]}
            x = x.mean(axis=1)
        elif layer.kind == "batchnorm":
            x, entry = _bn_forward(x, state, i, mode, update_running)
        elif layer.kind == "dropout":
            if mode == "train" and layer.rate > 0:
                keep = 1.0 - layer.rate
                mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
                entry = {"mask": mask}
                x = x * mask
        elif layer.kind == "activation":
            x = _act(layer.activation, x)
            entry = {"out": x}
        caches.append(entry)
    return x, {"mode": mode, "layers": caches, "n_layers": len(caches)}


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 1)


def _bn_forward(x, state, i, mode, update_running, momentum=BN_MOMENTUM, eps=BN_EPS):
    gamma = state[f"{i}.gamma"]
    beta = state[f"{i}.beta"]
    axes = _bn_axes(x)
    if mode == "train":
        if x.shape[0] < 2:
            raise BatchError("batchnorm in train mode needs a batch of at least 2")
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_running:
            rm, rv = f"{i}.running_mean", f"{i}.running_var"
            state[rm] = (momentum * state[rm] + (1 - momentum) * mu).astype(state[rm].dtype)
            state[rv] = (momentum * state[rv] + (1 - momentum) * var).astype(state[rv].dtype)
    else:
        mu = state[f"{i}.running_mean"]
        var = state[f"{i}.running_var"]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, {"xhat": xhat, "inv_std": inv_std, "mode": mode}


def batchnorm_forward(x, state, mode="train", momentum=BN_MOMENTUM, eps=BN_EPS, index=0):
    """Standalone batchnorm on a (B, F) or (B, T, C) array.

    ``state`` holds ``"<index>.gamma"``, ``.beta``, ``.running_mean`` and
    ``.running_var``; running statistics are updated in train mode.
    """
    out, _ = _bn_forward(np.asarray(x), state, index, mode, True, momentum, eps)
    return out


def pool1d(kind: str, x, pool_size: int | None = None, stride: int | None = None):
    x = np.asarray(x)
    if x.ndim == 1:
        return pool1d(kind, x[None, :, None], pool_size, stride)[0, ..., 0]
    if kind == "global-avg":
        return x.mean(axis=1)
    if kind != "max":
        raise ParameterError(f"unknown pool kind {kind!r}")
    stride = stride or pool_size
    if pool_size > x.shape[1]:
        raise ShapeError(f"pool size {pool_size} exceeds length {x.shape[1]}")
    win = np.lib.stride_tricks.sliding_window_view(x, pool_size, axis=1)[:, ::stride]
    return win.max(axis=-1)


# -- backward ----------------------------------------------------------------


def backward(
    spec: NetworkSpec,
    state: dict[str, np.ndarray],
    cache,
    loss_grad: np.ndarray,
    return_input_grad: bool = False,
):
    """Gradients of every trainable tensor given d(loss)/d(output).

    md layers use the tanh-smoothed sign derivative; everything else is the
    exact gradient.
    """
    stack = spec.stack()
    if cache.get("n_layers") != len(stack):
        raise InternalError("cache does not belong to this spec")
    a = spec.md_sharpness
    g = loss_grad
    grads: dict[str, np.ndarray] = {}
    for i in range(len(stack) - 1, -1, -1):
        layer = stack[i]
        entry = cache["layers"][i]
        if layer.kind in PARAMETRIC:
            g = _param_backward(layer, state, i, entry, g, a, grads)
        elif layer.kind == "maxpool1d":
            p = layer.pool_size
            s = layer.stride or p
            arg = entry["arg"]
            B, Tp, C = g.shape
            dx = np.zeros((B, entry["T"], C), dtype=g.dtype)
            span = s * (Tp - 1) + 1
            for j in range(p):
                dx[:, j:j + span:s, :] += np.where(arg == j, g, 0)
            g = dx
        elif layer.kind == "global-avg-pool":
            T = entry["T"]
            g = np.repeat(g[:, None, :] / T, T, axis=1)
        elif layer.kind == "batchnorm":
            g = _bn_backward(state, i, entry, g, grads)
        elif layer.kind == "dropout":
            if "mask" in entry:
                g = g * entry["mask"]
        elif layer.kind == "activation":
            out = entry["out"]
            if layer.activation == "relu":
                g = g * (out > 0)
            elif layer.activation == "sigmoid":
                g = g * out * (1 - out)
            elif layer.activation == "tanh":
                g = g * (1 - out * out)
    grads = {k: grads[k] for k in sorted(grads, key=lambda k: (layer_index(k), k))}
    if return_input_grad:
        return grads, g
    return grads


def _param_backward(layer, state, i, entry, g, a, grads):
    w = state[f"{i}.W"]
    rows = entry["rows"]
    if layer.kind == "conv1d":
        B, Tp, K = g.shape
        g_rows = g.reshape(B * Tp, K)
    else:
        g_rows = g
    wf = w.reshape(w.shape[0], -1)
    grads[f"{i}.b"] = g_rows.sum(axis=0)
    if layer.md:
        m = entry["m"]
        alpha = entry["alpha"]
        if alpha is not None:
            d_alpha = (g_rows * m).sum(axis=0)
            g_m = g_rows * alpha
        else:
            g_m = g_rows
        d_rows, d_w = mdop.md_linear_backward(rows, wf, g_m, a=a)
        if layer.alpha_mode == "trainable":
            grads[f"{i}.alpha"] = d_alpha
        elif layer.alpha_mode == "inv-l1-norm":
            # alpha = 1/||w||_1  =>  d alpha / d w = -alpha^2 sgn(w)
            d_w = d_w - (d_alpha * alpha * alpha)[:, None] * np.sign(wf)
    else:
        d_rows = g_rows @ wf
        d_w = g_rows.T @ rows
    grads[f"{i}.W"] = d_w.reshape(w.shape)
    if layer.kind == "conv1d":
        Bx, T, C = entry["in_shape"]
        L = w.shape[1]
        return col2im(d_rows.reshape(Bx, -1, L * C), T, C, L, layer.stride or 1, layer.padding)
    return d_rows


def _bn_backward(state, i, entry, g, grads):
    xhat, inv_std = entry["xhat"], entry["inv_std"]
    gamma = state[f"{i}.gamma"]
    axes = (0,) if g.ndim == 2 else (0, 1)
    grads[f"{i}.gamma"] = (g * xhat).sum(axis=axes)
    grads[f"{i}.beta"] = g.sum(axis=axes)
    dxhat = g * gamma
    if entry["mode"] == "eval":
        return dxhat * inv_std
    n = np.prod([g.shape[ax] for ax in axes])
    return (inv_std / n) * (
        n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
    )


def clone_spec(spec: NetworkSpec) -> NetworkSpec:
    return copy.deepcopy(spec)
