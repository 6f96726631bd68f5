"""Central finite-difference checks for the analytic backward passes.

The md forward uses the sign function, whose derivative is replaced in the
backward pass by ``a * sech^2(a * .)``. The finite-difference oracle
therefore runs the network with the sign smoothed where a derivative is
taken: when checking the weights of md layer ``l``, layer ``l`` smooths
sgn(w) and every later md layer smooths sgn(x) (its input). The analytic
gradient of that surrogate network is exactly what ``backward`` computes.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import layers as L


def central_difference(f: Callable[[], float], param: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """d f / d param by central differences, perturbing ``param`` in place."""
    grad = np.zeros_like(param, dtype=np.float64)
    for idx in np.ndindex(param.shape):
        old = param[idx]
        param[idx] = old + h
        up = f()
        param[idx] = old - h
        down = f()
        param[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def surrogate_modes(spec: L.NetworkSpec, key: str | None) -> dict[int, str]:
    """Smoothing plan for checking ``key`` (None = the network input)."""
    md_layers = [i for i, layer in enumerate(spec.stack()) if layer.md]
    if key is None:
        return {i: "x" for i in md_layers}
    li = L.layer_index(key)
    modes = {i: "x" for i in md_layers if i > li}
    if li in md_layers and key.endswith(".W"):
        modes[li] = "w"
    return modes


def network_gradient_errors(
    spec: L.NetworkSpec,
    state: dict[str, np.ndarray],
    x: np.ndarray,
    upstream: np.ndarray,
    h: float = 1e-6,
    floor: float = 1e-4,
    keys: list[str] | None = None,
) -> dict[str, float]:
    """Normwise relative error of ``backward`` vs central differences.

    The scalar checked is ``sum(forward(x) * upstream)`` in train mode
    without touching the batchnorm running statistics. ``"input"`` reports
    the gradient w.r.t. ``x``. Use float64 state and inputs.
    """
    errors = {}
    for key in (keys or L.trainable_keys(state)) + ["input"]:
        modes = surrogate_modes(spec, None if key == "input" else key)

        def loss():
            out, _ = L.forward(spec, state, x, "train", surrogate=modes, update_running=False)
            return float((out * upstream).sum())

        out, cache = L.forward(spec, state, x, "train", surrogate=modes, update_running=False)
        grads, gx = L.backward(spec, state, cache, upstream, return_input_grad=True)
        if key == "input":
            numeric = central_difference(loss, x, h)
            analytic = gx
        else:
            numeric = central_difference(loss, state[key], h)
            analytic = grads[key]
        # normwise: entries whose true gradient is ~0 (a bias feeding
        # batchnorm) are judged against the tensor's largest entry
        scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), floor)
        errors[key] = float(np.max(np.abs(analytic - numeric))) / scale
    return errors
