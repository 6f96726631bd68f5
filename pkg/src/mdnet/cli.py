"""Command-line front end: ``mdnet gen-data | train | prune | report``.

Every command writes a ``manifest.json`` next to its outputs holding the
command, the full configuration, the seed, the package version and a sha256
of every file written. Nothing time- or host-dependent goes into any output,
so reruns with identical flags are byte-identical.

Exit codes: 0 success, 1 internal error, 2 bad arguments, 3 i/o (missing
files or data), 4 unparsable input, 5 training/data failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import compress as C
from . import data as D
from . import gan
from . import layers as L
from . import presets
from . import training as T
from .errors import InternalError, MdnetError, ParameterError, ParseError
from .tensor import make_rng

log = logging.getLogger("mdnet")

EXIT_OK, EXIT_INTERNAL, EXIT_ARGS, EXIT_IO, EXIT_PARSE, EXIT_TRAIN = 0, 1, 2, 3, 4, 5

TASKS = ("ir-synth", "mixtures", "drift")
MODELS = ("convnet", "addnet", "mlp", "discgan", "addnet-discgan")
TASK_MODELS = {
    "ir-synth": ("convnet", "addnet", "discgan", "addnet-discgan"),
    "mixtures": ("convnet", "addnet"),
    "drift": ("mlp", "addnet", "discgan", "addnet-discgan"),
}
# defaults for settings left open elsewhere; see the README
TASK_DEFAULTS = {
    "ir-synth": dict(epochs=20, batch_size=128, noise_std=0.0),
    "mixtures": dict(epochs=100, batch_size=32, noise_std=0.0),
    "drift": dict(epochs=100, batch_size=128, noise_std=0.1),
}
# adversarial budget when --adversarial-epochs is not given (discriminator updates)
ADVERSARIAL_STEPS = 300
MIXTURE_CROP = 40
METRICS_FILE = "metrics.json"


class UsageError(ParameterError):
    """Bad or inconsistent command-line arguments."""


# -- helpers ---------------------------------------------------------------------


def derive_seed(seed: int, stream: int) -> int:
    """Independent child seed ``stream`` of the master seed."""
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed: int, outputs: list[Path]) -> Path:
    payload = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": f"mdnet v{__version__}",
        "outputs": {p.name: _sha256(p) for p in sorted(outputs)},
    }
    path = out_dir / "manifest.json"
    _write_json(path, payload)
    return path


def _write_json(path: Path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


PATH_ARGS = ("train_data", "test_data", "data_dir", "model_file", "spec_file")


def _describe_input(value):
    # inputs are recorded by content, not location, so reruns from another
    # directory produce the same manifest
    if value is None:
        return None
    path = Path(value)
    if path.is_file():
        return {"name": path.name, "sha256": _sha256(path)}
    return {"name": path.name}


def _config(args, drop=("func", "out_dir", "verbose", "command")) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in drop}
    for key in PATH_ARGS:
        if key in config:
            config[key] = _describe_input(config[key])
    return config


def parse_batches(text: str) -> list[int]:
    """``"1,2"`` or ``"3..10"`` or mixtures like ``"1,3..5"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if ".." in part:
                lo, hi = part.split("..")
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise UsageError(f"bad batch list {text!r}") from None
    if not out or any(b < 1 or b > 10 for b in out):
        raise UsageError(f"batch ids must lie in 1..10, got {text!r}")
    return out


def _data_dir(args, task: str) -> Path:
    given = args.data_dir or D.env_data_dir(task)
    if not given:
        env = f"MDNET_{task.upper()}_DIR"
        raise FileNotFoundError(
            f"no data directory for task {task!r}; pass --data-dir or set {env} (or MDNET_DATA_DIR)"
        )
    path = Path(given)
    if not path.is_dir():
        raise FileNotFoundError(f"data directory {path} does not exist")
    return path


def _read_csv_set(path, input_shape) -> D.LabeledSet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file {path} not found (create it with `mdnet gen-data`)")
    channels = input_shape[-1] if len(input_shape) == 2 else 1
    probe = D.read_set_csv(path)
    width = probe.instances.shape[1]
    shape = (width // channels, channels) if len(input_shape) == 2 else (width,)
    return D.read_set_csv(path, shape)


def _model_spec(task: str, model: str, dropout: float | None) -> L.NetworkSpec:
    md = model in ("addnet", "addnet-discgan")
    if task == "ir-synth":
        return presets.ir_convnet(md=md, dropout_rate=dropout or 0.0)
    if task == "mixtures":
        return presets.mixtures_convnet(md=md, dropout_rate=dropout or 0.0)
    return presets.drift_mlp(md=md, dropout_rate=0.2 if dropout is None else dropout)


def _train_cfg(args, seed: int) -> T.TrainConfig:
    d = TASK_DEFAULTS[args.task]
    crop = None
    if args.task == "ir-synth":
        crop = 32
    elif args.task == "mixtures":
        crop = MIXTURE_CROP
    return T.TrainConfig(
        epochs=d["epochs"] if args.epochs is None else args.epochs,
        batch_size=d["batch_size"] if args.batch_size is None else args.batch_size,
        learning_rate=args.lr,
        noise_std=d["noise_std"] if args.noise_std is None else args.noise_std,
        crop_length=crop,
        seed=seed,
        dtype=args.dtype,
    )


def _fit(args, spec, train_set, val_set, seed):
    """Train one model of the selected kind. Returns (state, report)."""
    cfg = _train_cfg(args, derive_seed(seed, 1))
    if args.model in ("discgan", "addnet-discgan"):
        if spec.output_units == 1:
            n_adv = int((train_set.labels == 1).sum())
        else:
            n_adv = int(np.bincount(train_set.labels).min())
        epochs = args.adversarial_epochs
        if epochs is None:
            epochs = max(1, math.ceil(ADVERSARIAL_STEPS / max(1, math.ceil(n_adv / 64))))
        gcfg = gan.GanConfig(adversarial_epochs=epochs, seed=derive_seed(seed, 2))
        state, _, report, _ = gan.train_discgan(spec, train_set, val_set, gcfg, cfg)
        return state, report
    state = L.init_network(spec, make_rng(derive_seed(seed, 0)), np.dtype(args.dtype))
    return T.train(spec, state, train_set, val_set, cfg)


def _save_run(out_dir: Path, spec, state, report, extra: dict) -> list[Path]:
    paths = [out_dir / "state.bin", out_dir / "spec.json", out_dir / METRICS_FILE,
             out_dir / "confusion.csv", out_dir / "loss.csv"]
    C.save_state(paths[0], state)
    _write_json(paths[1], spec.to_dict())
    report.write_json(paths[2], extra)
    report.write_confusion_csv(paths[3])
    report.write_loss_csv(paths[4])
    return paths


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.task != "ir-synth":
        raise UsageError(
            f"task {args.task!r} uses public recordings; download them and point "
            f"MDNET_{args.task.upper()}_DIR at the directory instead"
        )
    if args.leak < 0 or args.clean < 0:
        raise UsageError("--leak and --clean must be non-negative")
    if args.leak == 0:
        log.warning("--leak 0: writing a clean-only dataset")
    cfg = D.IrSynthConfig(length=args.length, seed=args.seed)
    data = D.gen_ir_dataset(cfg, args.leak, args.clean)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{args.name}.csv"
    D.write_set_csv(data, path)
    config = _config(args)
    config["generator"] = cfg.to_dict()
    write_manifest(out_dir, "gen-data", config, args.seed, [path])
    log.info("wrote %d instances to %s", len(data), path)
    return EXIT_OK


def _ir_sets(args, spec):
    if args.train_data:
        train_set = _read_csv_set(args.train_data, spec.input_shape)
    else:
        cfg = D.IrSynthConfig(seed=derive_seed(args.seed, 10))
        train_set = D.gen_ir_dataset(cfg, args.leak, args.clean)
    if args.test_data:
        test_set = _read_csv_set(args.test_data, spec.input_shape)
    else:
        cfg = D.IrSynthConfig(seed=derive_seed(args.seed, 11))
        test_set = D.gen_ir_dataset(cfg, args.test_leak, args.test_clean)
    return train_set, test_set


def _train_ir(args, spec, out_dir):
    train_set, test_set = _ir_sets(args, spec)
    state, report = _fit(args, spec, train_set, test_set, args.seed)
    extra = {"task": args.task, "model": args.model, "n_train": len(train_set), "n_test": len(test_set),
             "sensitivity": round(report.sensitivity, 10), "specificity": round(report.specificity, 10)}
    return _save_run(out_dir, spec, state, report, extra)


def _train_mixtures(args, spec, out_dir):
    full = D.load_mixtures_dataset(_data_dir(args, "mixtures"))
    full = full.with_instances(D.normalize_per_sensor(full.instances))
    if args.val_size >= len(full):
        raise UsageError(f"--val-size {args.val_size} leaves no training data ({len(full)} instances)")
    cm = np.zeros((3, 3), dtype=np.int64)
    trials, outputs = [], []
    state = report = None
    splits = D.holdout_splits(len(full), args.val_size, args.holdout_trials, derive_seed(args.seed, 20))
    for k, (tr_idx, va_idx) in enumerate(splits):
        state, report = _fit(args, spec, full.subset(tr_idx), full.subset(va_idx), derive_seed(args.seed, 100 + k))
        cm += report.confusion_matrix
        trials.append({"trial": k + 1, "total_accuracy": round(report.total_accuracy, 10),
                       "confusion_matrix": report.confusion_matrix.tolist()})
        path = out_dir / f"state_trial{k + 1}.bin"
        C.save_state(path, state)
        outputs.append(path)
    y_true = np.repeat(np.arange(3), cm.sum(axis=1))
    y_pred = np.concatenate([np.repeat(np.arange(3), row) for row in cm])
    agg = T.metrics_from_predictions(y_true, y_pred, 3, D.MIXTURE_CLASS_NAMES)
    agg.loss_history = report.loss_history
    extra = {"task": args.task, "model": args.model, "trials": trials, "n_instances": len(full),
             "class_counts": full.class_counts().tolist(),
             "average_accuracy": round(float(np.mean([t["total_accuracy"] for t in trials])), 10)}
    return outputs + _save_run(out_dir, spec, state, agg, extra)


def drift_preprocess(data: D.LabeledSet) -> D.LabeledSet:
    return D.signed_sqrt_transform(data)


def _train_drift(args, spec, out_dir):
    batches = D.load_drift_batches(_data_dir(args, "drift"))
    train_ids = parse_batches(args.train_batches)
    test_ids = parse_batches(args.test_batches)
    train_set = drift_preprocess(D.concat_sets([batches[b - 1] for b in train_ids]))
    tests = {b: drift_preprocess(batches[b - 1]) for b in test_ids}
    state, report = _fit(args, spec, train_set, tests[test_ids[0]], args.seed)
    if args.adapt_epochs > 0:
        unlabeled = np.concatenate([t.instances for t in tests.values()])
        cfg = _train_cfg(args, derive_seed(args.seed, 30))
        cfg.epochs = args.adapt_epochs
        state = T.pseudo_label_adapt(spec, state, unlabeled, cfg)
    records = []
    cm = np.zeros((6, 6), dtype=np.int64)
    for b in test_ids:
        r = T.evaluate(spec, state, tests[b])
        cm += r.confusion_matrix
        records.append({"batch": b, "accuracy": round(r.total_accuracy, 10),
                        "n": len(tests[b]), "confusion_matrix": r.confusion_matrix.tolist()})
    y_true = np.repeat(np.arange(6), cm.sum(axis=1))
    y_pred = np.concatenate([np.repeat(np.arange(6), row) for row in cm])
    agg = T.metrics_from_predictions(y_true, y_pred, 6, D.DRIFT_CLASS_NAMES)
    agg.loss_history = report.loss_history
    extra = {"task": args.task, "model": args.model, "train_batches": train_ids, "batches": records}
    return _save_run(out_dir, spec, state, agg, extra)


def cmd_train(args) -> int:
    if args.model not in TASK_MODELS[args.task]:
        raise UsageError(
            f"model {args.model!r} is not available for task {args.task!r}; "
            f"valid models: {', '.join(TASK_MODELS[args.task])}"
        )
    spec = _model_spec(args.task, args.model, args.dropout)
    out_dir = Path(args.out_dir or f"runs/{args.task}-{args.model}")
    out_dir.mkdir(parents=True, exist_ok=True)
    runner = {"ir-synth": _train_ir, "mixtures": _train_mixtures, "drift": _train_drift}[args.task]
    outputs = runner(args, spec, out_dir)
    write_manifest(out_dir, "train", _config(args), args.seed, outputs)
    log.info("wrote %s", out_dir)
    return EXIT_OK


def parse_rates(text: str | None) -> list[float]:
    if text is None:
        return [r / 100 for r in C.TABLE_RATES]
    try:
        rates = [float(t) / 100 for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad rate list {text!r}") from None
    for r in rates:
        if not 0 <= r <= C.MAX_RATE:
            raise UsageError(f"compression rate {100 * r:g}% outside [0, {100 * C.MAX_RATE:g}%]")
    return rates


def cmd_prune(args) -> int:
    rates = parse_rates(args.rates)
    model_file = Path(args.model_file)
    if not model_file.exists():
        raise FileNotFoundError(f"model file {model_file} not found (train one with `mdnet train`)")
    spec_file = Path(args.spec_file) if args.spec_file else model_file.with_name("spec.json")
    if not spec_file.exists():
        raise FileNotFoundError(f"network spec {spec_file} not found")
    with open(spec_file) as fh:
        try:
            spec = L.NetworkSpec.from_dict(json.load(fh))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"bad network spec ({exc})", spec_file) from None
    state = C.load_state(model_file)
    if args.test_data:
        test_set = _read_csv_set(args.test_data, spec.input_shape)
    else:
        cfg = D.IrSynthConfig(seed=derive_seed(args.seed, 11))
        test_set = D.gen_ir_dataset(cfg, args.test_leak, args.test_clean)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, outputs = [], []
    for rate in rates:
        f = C.fraction_for_rate(rate)
        cs = C.prune_sign_retain(state, f, spec, magnitude=args.magnitude)
        r = T.evaluate(spec, cs.reconstruct(), test_set)
        path = out_dir / f"pruned_{100 * rate:.1f}.bin"
        C.write_weights(path, cs)
        outputs.append(path)
        rows.append([f"{100 * rate:.1f}", repr(f), repr(cs.compression_rate), repr(r.total_accuracy)]
                    + [repr(r.per_class_accuracy[c]) for c in range(len(r.confusion_matrix))])
    csv_path = out_dir / "prune.csv"
    names = test_set.class_names
    with open(csv_path, "w") as fh:
        fh.write(",".join(["rate_percent", "fraction", "compression_rate", "accuracy",
                           *[f"acc_{n}" for n in names]]) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    outputs.append(csv_path)
    if spec.uses_md:
        qs = C.quantize_q8(state, spec)
        ref = T.predict(spec, state, test_set.instances)
        pred = T.predict(spec, qs.state, test_set.instances, q8=qs.q8)
        q_path = out_dir / "quantized.json"
        _write_json(q_path, {"agreement": round(float(np.mean(ref == pred)), 10),
                             "accuracy_float": round(float(np.mean(ref == test_set.labels)), 10),
                             "accuracy_int8": round(float(np.mean(pred == test_set.labels)), 10)})
        outputs.append(q_path)
    write_manifest(out_dir, "prune", _config(args), args.seed, outputs)
    return EXIT_OK


def _load_metrics(path: Path) -> dict:
    if not path.exists():
        raise FileNotFoundError(f"metrics file {path} not found")
    text = path.read_text()
    if not text.strip():
        raise ParseError("empty metrics file", path)
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", path, exc.lineno) from None
    for key in ("task", "model", "per_class_accuracy", "total_accuracy"):
        if key not in payload:
            raise ParseError(f"missing field {key!r}", path)
    return payload


def _pct(v) -> str:
    return f"{100 * v:.1f}"


def render_report(runs: list[dict]) -> tuple[str, dict]:
    """Markdown comparison table plus its JSON form for runs of one task."""
    tasks = sorted({r["task"] for r in runs})
    if len(tasks) > 1:
        raise UsageError(f"metrics files mix tasks {', '.join(tasks)}; report one task at a time")
    task = tasks[0]
    lines = [f"# {task} results", ""]
    table: dict = {"task": task, "rows": []}
    if task == "drift":
        batches = sorted({rec["batch"] for r in runs for rec in r.get("batches", [])})
        lines.append("| batch | " + " | ".join(r["model"] for r in runs) + " |")
        lines.append("|---" * (len(runs) + 1) + "|")
        for b in batches:
            cells = []
            for r in runs:
                acc = {rec["batch"]: rec["accuracy"] for rec in r.get("batches", [])}.get(b)
                cells.append("-" if acc is None else _pct(acc))
            lines.append(f"| {b} | " + " | ".join(cells) + " |")
            table["rows"].append({"batch": b, **{r["model"]: c for r, c in zip(runs, cells)}})
    else:
        names = runs[0]["class_names"]
        last = "average" if task == "mixtures" else "total"
        lines.append("| model | " + " | ".join(names) + f" | {last} |")
        lines.append("|---" * (len(names) + 2) + "|")
        for r in runs:
            acc = r.get("average_accuracy", r["total_accuracy"])
            cells = [_pct(r["per_class_accuracy"][n]) for n in names] + [_pct(acc)]
            lines.append(f"| {r['model']} | " + " | ".join(cells) + " |")
            table["rows"].append({"model": r["model"], **dict(zip([*names, last], cells))})
    return "\n".join(lines) + "\n", table


def cmd_report(args) -> int:
    if not args.metrics:
        raise UsageError("report needs at least one metrics file")
    runs = [_load_metrics(Path(p)) for p in args.metrics]
    text, table = render_report(runs)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.json:
        _write_json(Path(args.json), table)
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic IR dataset as CSV")
    g.add_argument("--task", choices=TASKS, default="ir-synth")
    g.add_argument("--leak", type=int, default=8000)
    g.add_argument("--clean", type=int, default=8000)
    g.add_argument("--length", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--name", default="ir_synth")
    g.add_argument("--out-dir", default="data/ir-synth")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and evaluate one model")
    t.add_argument("--task", choices=TASKS, required=True)
    t.add_argument("--model", required=True, help=f"one of {', '.join(MODELS)}")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--dropout", type=float)
    t.add_argument("--noise-std", type=float)
    t.add_argument("--adversarial-epochs", type=int)
    t.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    t.add_argument("--out-dir")
    t.add_argument("--train-data", help="ir-synth: training CSV (default: generate)")
    t.add_argument("--test-data", help="ir-synth: test CSV (default: generate)")
    t.add_argument("--leak", type=int, default=8000)
    t.add_argument("--clean", type=int, default=8000)
    t.add_argument("--test-leak", type=int, default=4000)
    t.add_argument("--test-clean", type=int, default=4000)
    t.add_argument("--data-dir", help="mixtures/drift: directory with the recordings")
    t.add_argument("--holdout-trials", type=int, default=4)
    t.add_argument("--val-size", type=int, default=35)
    t.add_argument("--train-batches", default="1,2")
    t.add_argument("--test-batches", default="3..10")
    t.add_argument("--adapt-epochs", type=int, default=0, help="drift: pseudo-label epochs on test batches")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("prune", help="sign-retaining pruning sweep of a trained model")
    r.add_argument("--model-file", required=True)
    r.add_argument("--spec-file")
    r.add_argument("--rates", help="comma-separated percentages (default: 0,16.1,19.7,67.4,76.8,86.6)")
    r.add_argument("--magnitude", choices=("mean", "unit"), default="mean")
    r.add_argument("--test-data")
    r.add_argument("--test-leak", type=int, default=4000)
    r.add_argument("--test-clean", type=int, default=4000)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out-dir", default="runs/prune")
    r.set_defaults(func=cmd_prune)

    m = sub.add_parser("report", help="merge metrics files into a comparison table")
    m.add_argument("metrics", nargs="*")
    m.add_argument("--out")
    m.add_argument("--json")
    m.set_defaults(func=cmd_report)
    return p


def exit_code(exc: BaseException) -> int:
    from .errors import BatchError, DataError, LabelError, ShapeError, SpecError

    if isinstance(exc, (ParameterError, SpecError)):
        return EXIT_ARGS
    if isinstance(exc, ParseError):
        return EXIT_PARSE
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (DataError, LabelError, BatchError, ShapeError)):
        return EXIT_TRAIN
    return EXIT_INTERNAL


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MdnetError, OSError) as exc:
        code = exit_code(exc)
        if isinstance(exc, InternalError):
            code = EXIT_INTERNAL
        print(f"mdnet: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
