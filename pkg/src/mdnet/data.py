"""Datasets and preprocessing for the three gas-sensing tasks.

* synthetic infrared leak signals (the real IR recordings are not public),
* the dynamic gas mixtures recordings (two long 100 Hz time series),
* the 10-batch chemical sensor drift features (sparse ``label idx:value`` text).
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, LabelError, ParameterError, ParseError, SchemaError, ShapeError
from .tensor import Rng, make_rng, signed_sqrt

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabeledSet:
    instances: np.ndarray  # (n, *instance_shape)
    labels: np.ndarray  # (n,) int
    num_classes: int
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        inst = np.asarray(self.instances)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inst.shape[0] != labels.shape[0]:
            raise DataError(f"{inst.shape[0]} instances but {labels.shape[0]} labels")
        if self.num_classes < 1:
            raise DataError("num_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise LabelError(f"labels must lie in [0, {self.num_classes})")
        names = list(self.class_names) or [str(c) for c in range(self.num_classes)]
        if len(names) != self.num_classes:
            raise DataError("class_names length must equal num_classes")
        inst = inst.copy()
        labels = labels.copy()
        inst.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "instances", inst)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", names)

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def instance_shape(self) -> tuple[int, ...]:
        return tuple(self.instances.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx) -> "LabeledSet":
        idx = np.asarray(idx)
        return LabeledSet(self.instances[idx], self.labels[idx], self.num_classes, self.class_names)

    def with_instances(self, instances) -> "LabeledSet":
        return LabeledSet(instances, self.labels, self.num_classes, self.class_names)


def concat_sets(sets: Sequence[LabeledSet]) -> LabeledSet:
    first = sets[0]
    return LabeledSet(
        np.concatenate([s.instances for s in sets]),
        np.concatenate([s.labels for s in sets]),
        first.num_classes,
        first.class_names,
    )


# -- generic preprocessing ---------------------------------------------------------


def minmax_normalize(x) -> tuple[np.ndarray, bool]:
    """Scale a signal into [0, 1]. Returns (normalized, degenerate).

    A constant signal maps to all zeros and is flagged as degenerate.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ShapeError("cannot normalize an empty signal")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x), True
    return (x - lo) / (hi - lo), False


def random_crop(x, crop_len: int, rng: Rng) -> np.ndarray:
    """Contiguous window of ``crop_len`` steps along axis 0 at a uniform offset."""
    x = np.asarray(x)
    T = x.shape[0]
    if crop_len > T or crop_len < 1:
        raise ShapeError(f"crop length {crop_len} not in [1, {T}]")
    off = int(rng.integers(0, T - crop_len + 1))
    return x[off:off + crop_len]


def random_crop_batch(X, crop_len: int, rng: Rng) -> np.ndarray:
    """Independent random crop of every instance in a (B, T, C) batch."""
    B, T = X.shape[:2]
    if crop_len > T:
        raise ShapeError(f"crop length {crop_len} exceeds {T}")
    offs = rng.integers(0, T - crop_len + 1, size=B)
    idx = offs[:, None] + np.arange(crop_len)[None, :]
    return np.take_along_axis(X, idx[:, :, None], axis=1)


def center_crop_batch(X, crop_len: int) -> np.ndarray:
    T = X.shape[1]
    if crop_len > T:
        raise ShapeError(f"crop length {crop_len} exceeds {T}")
    off = (T - crop_len) // 2
    return X[:, off:off + crop_len]


def add_gaussian_noise(X, std: float, rng: Rng) -> np.ndarray:
    if std < 0:
        raise ParameterError("noise std must be non-negative")
    if std == 0:
        return np.array(X, copy=True)
    return X + rng.normal(0.0, std, size=np.shape(X))


def signed_sqrt_transform(data: LabeledSet) -> LabeledSet:
    return data.with_instances(signed_sqrt(data.instances.astype(np.float64)))


def ema_features(r, alpha: float) -> tuple[float, float]:
    """Extrema of y[k] = (1-alpha) y[k-1] + alpha (r[k] - r[k-1]), y[0] = 0."""
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 1 or r.shape[0] < 2:
        raise ShapeError("ema_features needs a 1-D signal with at least 2 samples")
    if not 0 < alpha <= 1:
        raise ParameterError("alpha must lie in (0, 1]")
    y = np.empty_like(r)
    y[0] = 0.0
    diff = np.diff(r)
    for k in range(1, r.shape[0]):
        y[k] = (1 - alpha) * y[k - 1] + alpha * diff[k - 1]
    return float(y.max()), float(y.min())


def holdout_splits(n: int, val_size: int, trials: int, seed: int):
    """``trials`` seeded random (train_idx, val_idx) splits of range(n)."""
    if val_size >= n:
        raise DataError(f"validation size {val_size} leaves no training data (n={n})")
    rng = make_rng(seed)
    for _ in range(trials):
        perm = rng.permutation(n)
        yield np.sort(perm[val_size:]), np.sort(perm[:val_size])


# -- synthetic infrared leak signals -----------------------------------------------


IR_CLASS_NAMES = ["clean", "leak"]


@dataclass
class IrSynthConfig:
    """Morphology of the synthetic IR intensity recordings.

    Leak: a noisy plateau near ``baseline_level`` that drops, at a random
    onset, towards ``drop_level`` and then fluctuates with wind (random walk)
    and stronger noise. Clean: a slowly drifting baseline with sensor noise
    and, occasionally, an upward lighting step.
    """

    baseline_level: float = 95.0
    drop_level: float = 70.0
    baseline_jitter: float = 3.0
    drop_jitter: float = 8.0
    pre_noise_std: float = 0.8
    post_noise_std: float = 2.5
    wind_std: float = 1.2
    drop_tau_range: tuple[float, float] = (0.5, 4.0)
    onset_range: tuple[int, int] = (18, 32)
    clean_drift_amp: float = 8.0
    clean_trend: float = 6.0
    clean_step_prob: float = 0.2
    length: int = 50
    sample_rate: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if not self.drop_level < self.baseline_level:
            raise ParameterError("drop_level must be below baseline_level")
        lo, hi = self.onset_range
        if not 0 <= lo < hi <= self.length:
            raise ParameterError(f"onset range {self.onset_range} must lie within [0, {self.length})")
        if min(self.pre_noise_std, self.post_noise_std, self.wind_std) < 0:
            raise ParameterError("noise levels must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["drop_tau_range"] = list(self.drop_tau_range)
        d["onset_range"] = list(self.onset_range)
        return d


def _leak_signal(cfg: IrSynthConfig, rng: Rng) -> tuple[np.ndarray, int]:
    n = np.arange(cfg.length)
    base = cfg.baseline_level + rng.normal(0, cfg.baseline_jitter)
    target = cfg.drop_level + rng.uniform(-cfg.drop_jitter, cfg.drop_jitter)
    onset = int(rng.integers(cfg.onset_range[0], cfg.onset_range[1]))
    tau = rng.uniform(*cfg.drop_tau_range)
    after = n >= onset
    k = np.maximum(n - onset, 0)
    level = np.where(after, target + (base - target) * np.exp(-k / tau), base)
    wind = np.cumsum(rng.normal(0, cfg.wind_std, cfg.length)) * after
    noise = np.where(after, rng.normal(0, cfg.post_noise_std, cfg.length), rng.normal(0, cfg.pre_noise_std, cfg.length))
    return level + wind + noise, onset


def _clean_signal(cfg: IrSynthConfig, rng: Rng) -> np.ndarray:
    t = np.arange(cfg.length) / cfg.sample_rate
    base = cfg.baseline_level + rng.normal(0, cfg.baseline_jitter)
    amp = rng.uniform(0, cfg.clean_drift_amp)
    freq = rng.uniform(0.05, 0.5)
    phase = rng.uniform(0, 2 * np.pi)
    trend = rng.uniform(-cfg.clean_trend, cfg.clean_trend) * t / t[-1]
    x = base + amp * np.sin(2 * np.pi * freq * t + phase) + trend
    x = x + rng.normal(0, cfg.pre_noise_std, cfg.length)
    if rng.random() < cfg.clean_step_prob:
        at = int(rng.integers(1, cfg.length - 1))
        x[at:] += rng.uniform(5, 20)
    return x


def gen_ir_raw(cfg: IrSynthConfig, n_leak: int, n_clean: int):
    """Un-normalized signals, labels and leak onsets (-1 for clean)."""
    if n_leak < 0 or n_clean < 0:
        raise ParameterError("counts must be non-negative")
    rng = make_rng(cfg.seed)
    signals, labels, onsets = [], [], []
    for _ in range(n_leak):
        x, onset = _leak_signal(cfg, rng)
        signals.append(x)
        labels.append(1)
        onsets.append(onset)
    for _ in range(n_clean):
        signals.append(_clean_signal(cfg, rng))
        labels.append(0)
        onsets.append(-1)
    X = np.asarray(signals, dtype=np.float64).reshape(n_leak + n_clean, cfg.length)
    perm = rng.permutation(len(labels))
    return X[perm], np.asarray(labels, dtype=np.int64)[perm], np.asarray(onsets)[perm]


def gen_ir_dataset(cfg: IrSynthConfig, n_leak: int, n_clean: int) -> LabeledSet:
    """Min-max normalized synthetic IR set; instances are (length, 1), leak = 1."""
    X, y, _ = gen_ir_raw(cfg, n_leak, n_clean)
    normed = np.empty_like(X)
    degenerate = 0
    for i, x in enumerate(X):
        normed[i], flag = minmax_normalize(x)
        degenerate += flag
    if degenerate:
        log.warning("%d constant synthetic signals normalized to zeros", degenerate)
    return LabeledSet(normed[:, :, None], y, 2, IR_CLASS_NAMES)


def write_set_csv(data: LabeledSet, path) -> None:
    """One row per instance: label, then the row-major flattened signal."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for label, inst in zip(data.labels, data.instances):
            w.writerow([int(label), *(repr(float(v)) for v in inst.ravel())])


def read_set_csv(path, instance_shape=None, num_classes: int = 2, class_names=None) -> LabeledSet:
    labels, rows = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
            if len(rows[-1]) != len(rows[0]):
                raise SchemaError(f"expected {len(rows[0])} values, got {len(rows[-1])}", path, lineno)
    if not rows:
        raise DataError(f"{path}: no instances")
    X = np.asarray(rows, dtype=np.float64)
    if instance_shape is None:
        instance_shape = (X.shape[1], 1)
    X = X.reshape((len(rows), *instance_shape))
    names = class_names or (IR_CLASS_NAMES if num_classes == 2 else None)
    return LabeledSet(X, np.asarray(labels), num_classes, names or [])


# -- dynamic gas mixtures -------------------------------------------------------------

MIXTURE_CLASS_NAMES = ["CO", "ethylene", "methane"]

MIXTURE_SCHEMAS = {
    "ethylene_CO": {"time": 0, "concentrations": {"CO": 1, "ethylene": 2}, "sensors": list(range(3, 19))},
    "ethylene_methane": {"time": 0, "concentrations": {"methane": 1, "ethylene": 2}, "sensors": list(range(3, 19))},
}


@dataclass
class MixtureSeries:
    time: np.ndarray  # (n,)
    concentrations: dict[str, np.ndarray]  # gas name -> (n,) set-point
    sensors: np.ndarray  # (n, 16)
    source: str = ""

    @property
    def sample_rate(self) -> float:
        dt = np.median(np.diff(self.time))
        return float(1.0 / dt)


def _schema_width(schema) -> int:
    cols = [schema["time"], *schema["concentrations"].values(), *schema["sensors"]]
    return max(cols) + 1


def _is_header(line: str) -> bool:
    tok = line.replace(",", " ").split()
    if not tok:
        return False
    try:
        float(tok[0])
        return False
    except ValueError:
        return True


def _parse_lines(path, width):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            if lineno == 1 and _is_header(line):
                continue
            tok = line.split()
            if len(tok) != width:
                raise SchemaError(f"expected {width} columns, found {len(tok)}", path, lineno)
            try:
                rows.append([float(t) for t in tok])
            except ValueError as exc:
                raise ParseError(f"bad number ({exc})", path, lineno) from None
    return np.asarray(rows, dtype=np.float64).reshape(-1, width), None


def load_mixture_series(path, schema=None) -> MixtureSeries:
    """Load one whitespace-delimited mixtures recording.

    ``schema`` maps "time" and "sensors" to column indices and
    "concentrations" to {gas name: column}. By default it is picked from the
    file name (``ethylene_CO`` / ``ethylene_methane``).
    """
    path = Path(path)
    if schema is None:
        schema = next((s for k, s in MIXTURE_SCHEMAS.items() if k.lower() in path.name.lower()), None)
        if schema is None:
            raise SchemaError("cannot infer column schema from file name; pass one", path)
    width = _schema_width(schema)
    with open(path) as fh:
        first = fh.readline()
    skip = 1 if _is_header(first) else 0
    try:
        table = np.loadtxt(path, skiprows=skip, ndmin=2)
        if table.shape[1] != width:
            raise ValueError("width")
    except ValueError:
        # slow path pinpoints the offending line
        table, _ = _parse_lines(path, width)
    if table.shape[0] == 0:
        raise ParseError("no data rows", path)
    time = table[:, schema["time"]]
    bad = np.nonzero(np.diff(time) <= 0)[0]
    if bad.size:
        raise ParseError("time column is not strictly increasing", path, int(bad[0]) + 2 + skip)
    conc = {gas: table[:, col] for gas, col in schema["concentrations"].items()}
    return MixtureSeries(time, conc, table[:, schema["sensors"]], str(path))


def extract_single_analyte_segments(
    series: MixtureSeries,
    window_s: float = 100.0,
    step_s: float = 2.0,
    guard_s: float = 10.0,
    class_names: Sequence[str] = MIXTURE_CLASS_NAMES,
    max_per_interval: int | None = 1,
) -> LabeledSet:
    """Cut (window_s/step_s, sensors) instances from single-analyte intervals.

    An interval qualifies when exactly one gas set-point is non-zero; the
    window starts ``guard_s`` after the interval begins and must end inside
    it. Sensors are sampled every ``step_s`` seconds.
    """
    fs = series.sample_rate
    stride = int(round(step_s * fs))
    n_steps = int(round(window_s / step_s))
    span = stride * (n_steps - 1) + 1
    guard = int(round(guard_s * fs))
    lookup = {name.lower(): i for i, name in enumerate(class_names)}
    gases = list(series.concentrations)
    for g in gases:
        if g.lower() not in lookup:
            raise SchemaError(f"gas {g!r} is not one of {list(class_names)}")
    active = np.stack([series.concentrations[g] > 0 for g in gases], axis=1)
    single = active.sum(axis=1) == 1
    which = np.where(single, active.argmax(axis=1), -1)
    # run boundaries of `which`
    change = np.nonzero(np.diff(which))[0] + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [len(which)]])
    instances, labels, skipped = [], [], 0
    for s, e in zip(starts, ends):
        if which[s] < 0:
            continue
        label = lookup[gases[which[s]].lower()]
        first = s + guard
        taken = 0
        while first + span <= e and (max_per_interval is None or taken < max_per_interval):
            instances.append(series.sensors[first:first + span:stride])
            labels.append(label)
            first += span
            taken += 1
        if taken == 0:
            skipped += 1
            log.debug("interval %.1f-%.1f s too short", series.time[s], series.time[e - 1])
    if skipped:
        log.warning("%s: skipped %d single-analyte intervals shorter than %.0f s (+%.0f s guard)",
                    series.source or "series", skipped, window_s, guard_s)
    shape = (len(instances), n_steps, series.sensors.shape[1])
    X = np.asarray(instances, dtype=np.float64).reshape(shape)
    return LabeledSet(X, np.asarray(labels, dtype=np.int64), len(class_names), list(class_names))


def load_mixtures_dataset(data_dir, **kwargs) -> LabeledSet:
    """Both recordings of a directory merged into one labeled set."""
    data_dir = Path(data_dir)
    sets = []
    for stem in MIXTURE_SCHEMAS:
        matches = sorted(data_dir.glob(f"{stem}*.txt")) or sorted(data_dir.glob(f"{stem}*"))
        if not matches:
            raise FileNotFoundError(f"{data_dir}: no {stem}.txt recording")
        sets.append(extract_single_analyte_segments(load_mixture_series(matches[0]), **kwargs))
    return concat_sets(sets)


def normalize_per_sensor(X: np.ndarray) -> np.ndarray:
    """Min-max scale every sensor channel of every instance into [0, 1]."""
    lo = X.min(axis=1, keepdims=True)
    hi = X.max(axis=1, keepdims=True)
    rng = np.where(hi > lo, hi - lo, 1.0)
    return (X - lo) / rng


# -- drift batches -------------------------------------------------------------------

DRIFT_FEATURES = 128
DRIFT_CLASS_NAMES = ["ethanol", "ethylene", "ammonia", "acetaldehyde", "acetone", "toluene"]


def parse_drift_file(path, n_features: int = DRIFT_FEATURES) -> LabeledSet:
    """Sparse ``label[;concentration] idx:value ...`` lines, 1-based indices."""
    rows, labels, missing = [], [], 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok:
                continue
            try:
                label = int(float(tok[0].split(";")[0]))
            except ValueError:
                raise ParseError(f"bad class label {tok[0]!r}", path, lineno) from None
            if not 1 <= label <= len(DRIFT_CLASS_NAMES):
                raise ParseError(f"class label {label} outside 1..{len(DRIFT_CLASS_NAMES)}", path, lineno)
            x = np.zeros(n_features)
            seen = np.zeros(n_features, dtype=bool)
            for t in tok[1:]:
                idx, sep, val = t.partition(":")
                try:
                    i = int(idx)
                    v = float(val)
                except ValueError:
                    raise ParseError(f"bad feature token {t!r}", path, lineno) from None
                if not sep or not 1 <= i <= n_features:
                    raise ParseError(f"feature index {idx} outside [1, {n_features}]", path, lineno)
                x[i - 1] = v
                seen[i - 1] = True
            missing += int((~seen).sum())
            rows.append(x)
            labels.append(label - 1)
    if missing:
        log.warning("%s: %d absent feature values filled with 0", path, missing)
    X = np.asarray(rows, dtype=np.float64).reshape(-1, n_features)
    return LabeledSet(X, np.asarray(labels, dtype=np.int64), len(DRIFT_CLASS_NAMES), DRIFT_CLASS_NAMES)


def load_drift_batches(data_dir, n_batches: int = 10) -> list[LabeledSet]:
    """``batch1.dat`` ... ``batch10.dat`` in chronological order."""
    data_dir = Path(data_dir)
    out = []
    for b in range(1, n_batches + 1):
        path = data_dir / f"batch{b}.dat"
        if not path.exists():
            raise FileNotFoundError(f"missing drift batch file {path}")
        out.append(parse_drift_file(path))
    return out


def write_drift_file(data: LabeledSet, path) -> None:
    with open(path, "w") as fh:
        for label, x in zip(data.labels, data.instances):
            feats = " ".join(f"{i + 1}:{float(v)!r}" for i, v in enumerate(x))
            fh.write(f"{int(label) + 1} {feats}\n")


def env_data_dir(task: str) -> str | None:
    """Data directory override: MDNET_<TASK>_DIR, then MDNET_DATA_DIR/<task>."""
    specific = os.environ.get(f"MDNET_{task.upper().replace('-', '_')}_DIR")
    if specific:
        return specific
    root = os.environ.get("MDNET_DATA_DIR")
    if root:
        return str(Path(root) / task)
    return None
