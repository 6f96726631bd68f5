"""Sign-retaining magnitude pruning, int8 quantization and the weight codec.

Pruning keeps the largest weights of every hidden dense/conv layer at full
precision and replaces the smallest fraction ``f`` by ``sgn(w) * m`` with one
shared magnitude ``m`` per layer. Biases, batchnorm parameters and the output
layer stay intact. Storage is accounted as 32 bits per intact weight and 1
bit per binarized one, i.e. a compression rate of ``31 f / 32``.

Weight file layout (all little endian)::

    b"MDNW" | version u16 | entry count u32
    entry:  key length u16 | key utf-8 | kind u8
      kind 0 (intact):      tensor (rank u64, dims u64..., f32 payload)
      kind 1 (compressed):  layer index u32 | N u64 | f f64 | rank u64 | dims u64...
                            | magnitude f32 | kept count u64 | kept values f32...
                            | 2-bit codes, 4 per byte (0 kept, 1 +m, 2 -m, 3 zero)
                            | bias tensor
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from . import layers as L
from . import mdop
from .errors import ParameterError, ParseError
from .tensor import read_tensor, write_tensor

INTACT_BITS = 32
BINARIZED_BITS = 1
MAX_RATE = 1 - BINARIZED_BITS / INTACT_BITS
# compression rates reported for the pruning sweep (percent)
TABLE_RATES = (0.0, 16.1, 19.7, 67.4, 76.8, 86.6)

MAGIC = b"MDNW"
VERSION = 1


@dataclass
class CompressedLayer:
    layer: int
    shape: tuple[int, ...]
    fraction: float
    kept: np.ndarray  # bool, flat
    values: np.ndarray  # full-precision values at kept positions (flat order)
    signs: np.ndarray  # int8 in {-1, 0, 1}, flat; meaningful where not kept
    magnitude: float

    @property
    def n(self) -> int:
        return int(np.prod(self.shape))

    @property
    def n_binarized(self) -> int:
        return int(self.n - self.kept.sum())

    def weights(self, dtype=np.float32) -> np.ndarray:
        flat = np.empty(self.n, dtype=dtype)
        flat[self.kept] = self.values
        flat[~self.kept] = (self.signs[~self.kept] * dtype(self.magnitude)).astype(dtype)
        return flat.reshape(self.shape)


@dataclass
class CompressedState:
    fraction: float
    layers: dict[str, CompressedLayer] = field(default_factory=dict)
    intact: dict[str, np.ndarray] = field(default_factory=dict)

    def reconstruct(self) -> dict[str, np.ndarray]:
        state = {k: v.copy() for k, v in self.intact.items()}
        for key, cl in self.layers.items():
            dtype = next(iter(self.intact.values())).dtype.type if self.intact else np.float32
            state[key] = cl.weights(dtype)
        return dict(sorted(state.items(), key=lambda kv: (L.layer_index(kv[0]), kv[0])))

    @property
    def compression_rate(self) -> float:
        n = sum(cl.n for cl in self.layers.values())
        nb = sum(cl.n_binarized for cl in self.layers.values())
        return compression_rate(nb / n) if n else 0.0


def compression_rate(f: float) -> float:
    """1 - ((1-f)*32 + f*1)/32 for a binarized fraction f."""
    if not 0.0 <= f <= 1.0:
        raise ParameterError(f"fraction must lie in [0, 1], got {f}")
    return 1.0 - ((1.0 - f) * INTACT_BITS + f * BINARIZED_BITS) / INTACT_BITS


def fraction_for_rate(rate: float) -> float:
    if not 0.0 <= rate <= MAX_RATE + 1e-12:
        raise ParameterError(f"compression rate must lie in [0, {MAX_RATE}], got {rate}")
    return min(1.0, rate * INTACT_BITS / (INTACT_BITS - BINARIZED_BITS))


def prunable_keys(spec: L.NetworkSpec, state) -> list[str]:
    out = []
    for i, layer in enumerate(spec.stack()):
        if layer.kind in L.PARAMETRIC and i != spec.output_index:
            out.append(f"{i}.W")
    return [k for k in out if k in state]


def prune_sign_retain(state, fraction: float, spec: L.NetworkSpec, magnitude: str = "mean") -> CompressedState:
    """Binarize the ``fraction`` smallest-|w| entries of every hidden layer.

    ``magnitude="mean"`` reconstructs them as sgn(w) * mean|w| of the
    binarized entries, ``"unit"`` as sgn(w). Ties in |w| go to the lower flat
    index.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ParameterError(f"fraction must lie in [0, 1], got {fraction}")
    if magnitude not in ("mean", "unit"):
        raise ParameterError(f"unknown magnitude mode {magnitude!r}")
    keys = prunable_keys(spec, state)
    out = CompressedState(fraction)
    for key, value in state.items():
        if key not in keys:
            out.intact[key] = value.copy()
    for key in keys:
        w = state[key]
        flat = w.ravel()
        n_bin = int(np.floor(fraction * flat.size + 1e-9))
        order = np.argsort(np.abs(flat), kind="stable")
        kept = np.ones(flat.size, dtype=bool)
        kept[order[:n_bin]] = False
        if magnitude == "unit":
            m = 1.0
        else:
            m = float(np.float32(np.abs(flat[~kept]).mean())) if n_bin else 0.0
        out.layers[key] = CompressedLayer(
            layer=L.layer_index(key),
            shape=tuple(w.shape),
            fraction=fraction,
            kept=kept,
            values=flat[kept].copy(),
            signs=np.sign(flat).astype(np.int8),
            magnitude=m,
        )
    return out


def forward_compressed(spec: L.NetworkSpec, compressed: CompressedState, batch) -> np.ndarray:
    out, _ = L.forward(spec, compressed.reconstruct(), batch, "eval")
    return out


# -- int8 --------------------------------------------------------------------------


@dataclass
class QuantizedState:
    state: dict[str, np.ndarray]  # float parameters used outside the md kernels
    q8: dict[int, tuple[np.ndarray, float]]  # md layer index -> (int8 weights, scale)

    def dequantized(self) -> dict[str, np.ndarray]:
        out = {k: v.copy() for k, v in self.state.items()}
        for i, (q, s) in self.q8.items():
            out[f"{i}.W"] = (q.astype(np.float64) * s).astype(self.state[f"{i}.W"].dtype)
        return out


def quantize_q8(state, spec: L.NetworkSpec) -> QuantizedState:
    """Per-tensor symmetric int8 weights for every md layer."""
    q8 = {}
    for i, layer in enumerate(spec.stack()):
        if layer.md:
            q8[i] = mdop.quantize_symmetric(state[f"{i}.W"])
    return QuantizedState({k: v.copy() for k, v in state.items()}, q8)


def forward_q8(spec: L.NetworkSpec, quantized: QuantizedState, batch) -> np.ndarray:
    out, _ = L.forward(spec, quantized.state, batch, "eval", q8=quantized.q8)
    return out


# -- codec -----------------------------------------------------------------------

_CODES = {1: 1, -1: 2, 0: 3}


def _pack_codes(cl: CompressedLayer) -> bytes:
    codes = np.zeros(cl.n, dtype=np.uint8)
    binarized = ~cl.kept
    s = cl.signs[binarized]
    codes[binarized] = np.where(s > 0, 1, np.where(s < 0, 2, 3))
    pad = (-cl.n) % 4
    codes = np.concatenate([codes, np.zeros(pad, dtype=np.uint8)]).reshape(-1, 4)
    packed = codes[:, 0] | (codes[:, 1] << 2) | (codes[:, 2] << 4) | (codes[:, 3] << 6)
    return packed.astype(np.uint8).tobytes()


def _unpack_codes(raw: bytes, n: int) -> np.ndarray:
    b = np.frombuffer(raw, dtype=np.uint8)
    codes = np.stack([(b >> s) & 3 for s in (0, 2, 4, 6)], axis=1).ravel()
    return codes[:n]


def _write_key(fh, key: str, kind: int):
    raw = key.encode()
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", kind))


def write_weights(path, compressed: CompressedState) -> None:
    bias_keys = {f"{cl.layer}.b" for cl in compressed.layers.values()}
    intact = {k: v for k, v in compressed.intact.items() if k not in bias_keys}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(intact) + len(compressed.layers)))
        for key in sorted(intact, key=lambda k: (L.layer_index(k), k)):
            _write_key(fh, key, 0)
            write_tensor(fh, intact[key])
        for key in sorted(compressed.layers, key=L.layer_index):
            cl = compressed.layers[key]
            _write_key(fh, key, 1)
            fh.write(struct.pack("<IQd", cl.layer, cl.n, cl.fraction))
            fh.write(struct.pack("<Q", len(cl.shape)))
            fh.write(struct.pack(f"<{len(cl.shape)}Q", *cl.shape))
            fh.write(struct.pack("<fQ", cl.magnitude, int(cl.kept.sum())))
            fh.write(np.asarray(cl.values, dtype="<f4").tobytes())
            fh.write(_pack_codes(cl))
            write_tensor(fh, compressed.intact[f"{cl.layer}.b"])


def read_weights(path) -> CompressedState:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ParseError("not a weight file (bad magic)", path)
        version, count = struct.unpack("<HI", fh.read(6))
        if version != VERSION:
            raise ParseError(f"unsupported weight file version {version}", path)
        out = CompressedState(0.0)
        fractions = []
        for _ in range(count):
            (klen,) = struct.unpack("<H", fh.read(2))
            key = fh.read(klen).decode()
            (kind,) = struct.unpack("<B", fh.read(1))
            if kind == 0:
                out.intact[key] = read_tensor(fh)
            elif kind == 1:
                out.layers[key] = _read_compressed(fh, out)
                fractions.append(out.layers[key].fraction)
            else:
                raise ParseError(f"unknown entry kind {kind}", path)
        out.fraction = fractions[0] if fractions else 0.0
        out.intact = dict(sorted(out.intact.items(), key=lambda kv: (L.layer_index(kv[0]), kv[0])))
        return out


def _read_compressed(fh: BinaryIO, out: CompressedState) -> CompressedLayer:
    layer, n, f = struct.unpack("<IQd", fh.read(20))
    (rank,) = struct.unpack("<Q", fh.read(8))
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    magnitude, n_kept = struct.unpack("<fQ", fh.read(12))
    values = np.frombuffer(fh.read(4 * n_kept), dtype="<f4").astype(np.float32)
    codes = _unpack_codes(fh.read((n + 3) // 4), n)
    kept = codes == 0
    signs = np.zeros(n, dtype=np.int8)
    signs[codes == 1] = 1
    signs[codes == 2] = -1
    signs[kept] = np.sign(values).astype(np.int8)
    out.intact[f"{layer}.b"] = read_tensor(fh)
    return CompressedLayer(layer, tuple(shape), f, kept, values, signs, magnitude)


def save_state(path, state) -> None:
    """Uncompressed network state in the same file format."""
    write_weights(path, CompressedState(0.0, {}, {k: v for k, v in state.items()}))


def load_state(path) -> dict[str, np.ndarray]:
    return read_weights(path).reconstruct()
