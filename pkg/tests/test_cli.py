import json

import numpy as np
import pytest

from mdnet import cli
from mdnet import data as D
from mdnet.tensor import make_rng


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def ir_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("ir")
    assert run("gen-data", "--leak", 30, "--clean", 30, "--seed", 7, "--out-dir", root / "data") == 0
    out = root / "run"
    code = run("train", "--task", "ir-synth", "--model", "addnet", "--train-data", root / "data/ir_synth.csv",
               "--test-leak", 20, "--test-clean", 20, "--epochs", 2, "--out-dir", out)
    assert code == 0
    return root, out


def write_drift_fixture(path, n=12, seed=0):
    rng = make_rng(seed)
    centers = rng.normal(0, 100, size=(6, 128))
    for b in range(1, 11):
        y = np.arange(n) % 6
        X = centers[y] + rng.normal(0, 5, size=(n, 128))
        D.write_drift_file(D.LabeledSet(X, y, 6), path / f"batch{b}.dat")


def write_mixture_fixture(path, intervals=24):
    # 1 Hz recordings: alternating single-gas intervals of 115 s separated by 5 s of air
    for stem, gases in (("ethylene_CO", ("CO", "ethylene")), ("ethylene_methane", ("methane", "ethylene"))):
        rows = []
        t = 0
        rng = make_rng(len(stem))
        for k in range(intervals):
            on = k % 2
            for s in range(120):
                active = s < 115
                c1 = 50.0 if active and on == 0 else 0.0
                c2 = 20.0 if active and on == 1 else 0.0
                level = 1.0 + (c1 if gases[0] != "methane" else 2 * c1) / 10 + c2 / 5
                sensors = level * np.linspace(1, 2, 16) + rng.normal(0, 0.05, 16)
                rows.append([t, c1, c2, *sensors])
                t += 1
        with open(path / f"{stem}.txt", "w") as fh:
            fh.write("Time (seconds), gas 1 (ppm), gas 2 (ppm), 16 sensors\n")
            for r in rows:
                fh.write(" ".join(f"{v:.4f}" for v in r) + "\n")


def test_gen_data(tmp_path, caplog):
    assert run("gen-data", "--leak", 50, "--clean", 80, "--seed", 7, "--out-dir", tmp_path / "a") == 0
    assert run("gen-data", "--leak", 50, "--clean", 80, "--seed", 7, "--out-dir", tmp_path / "b") == 0
    a = (tmp_path / "a/ir_synth.csv").read_bytes()
    assert a == (tmp_path / "b/ir_synth.csv").read_bytes()
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()
    assert len(a.splitlines()) == 130
    manifest = json.loads((tmp_path / "a/manifest.json").read_text())
    assert manifest["seed"] == 7 and "ir_synth.csv" in manifest["outputs"]
    assert run("gen-data", "--leak", 0, "--clean", 5, "--out-dir", tmp_path / "c") == 0
    assert "clean-only" in caplog.text
    assert {l.split(",")[0] for l in (tmp_path / "c/ir_synth.csv").read_text().splitlines()} == {"0"}
    assert run("gen-data", "--task", "drift", "--out-dir", tmp_path / "d") == cli.EXIT_ARGS


def test_train_outputs(ir_run):
    _, out = ir_run
    for name in ("state.bin", "spec.json", "metrics.json", "confusion.csv", "loss.csv", "manifest.json"):
        assert (out / name).exists()
    m = json.loads((out / "metrics.json").read_text())
    assert m["task"] == "ir-synth" and m["model"] == "addnet"
    assert np.sum(m["confusion_matrix"]) == 40
    assert len(m["loss_history"]) == 2


def test_train_is_byte_identical(ir_run, tmp_path):
    root, out = ir_run
    code = run("train", "--task", "ir-synth", "--model", "addnet", "--train-data", root / "data/ir_synth.csv",
               "--test-leak", 20, "--test-clean", 20, "--epochs", 2, "--out-dir", tmp_path / "again")
    assert code == 0
    for name in ("state.bin", "metrics.json", "confusion.csv", "loss.csv", "manifest.json"):
        assert (out / name).read_bytes() == (tmp_path / "again" / name).read_bytes(), name


def test_train_argument_errors(tmp_path, capsys):
    assert run("train", "--task", "ir-synth", "--model", "resnet", "--out-dir", tmp_path) == cli.EXIT_ARGS
    err = capsys.readouterr().err
    assert "convnet" in err and "addnet" in err
    assert run("train", "--task", "mixtures", "--model", "mlp", "--out-dir", tmp_path) == cli.EXIT_ARGS
    assert run("train", "--task", "nope", "--model", "mlp") == cli.EXIT_ARGS


def test_train_missing_data_is_io_error(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("MDNET_DRIFT_DIR", raising=False)
    monkeypatch.delenv("MDNET_DATA_DIR", raising=False)
    assert run("train", "--task", "drift", "--model", "mlp", "--out-dir", tmp_path) == cli.EXIT_IO
    assert "MDNET_DRIFT_DIR" in capsys.readouterr().err
    code = run("train", "--task", "ir-synth", "--model", "convnet", "--train-data", tmp_path / "none.csv",
               "--out-dir", tmp_path)
    assert code == cli.EXIT_IO


def test_train_drift_per_batch_records(tmp_path, monkeypatch):
    write_drift_fixture(tmp_path)
    monkeypatch.setenv("MDNET_DRIFT_DIR", str(tmp_path))
    out = tmp_path / "run"
    code = run("train", "--task", "drift", "--model", "mlp", "--train-batches", "1,2", "--test-batches", "3..10",
               "--epochs", 2, "--out-dir", out)
    assert code == 0
    m = json.loads((out / "metrics.json").read_text())
    assert [r["batch"] for r in m["batches"]] == list(range(3, 11))
    assert all(0 <= r["accuracy"] <= 1 for r in m["batches"])
    assert m["train_batches"] == [1, 2]


def test_train_mixtures_holdout(tmp_path):
    write_mixture_fixture(tmp_path)
    out = tmp_path / "run"
    code = run("train", "--task", "mixtures", "--model", "addnet", "--data-dir", tmp_path,
               "--holdout-trials", 4, "--epochs", 1, "--out-dir", out)
    assert code == 0
    m = json.loads((out / "metrics.json").read_text())
    assert len(m["trials"]) == 4
    assert all(np.sum(t["confusion_matrix"]) == 35 for t in m["trials"])
    assert np.sum(m["confusion_matrix"]) == 140
    assert sum(m["class_counts"]) == 48


def test_prune_sweep(ir_run, tmp_path):
    _, out = ir_run
    code = run("prune", "--model-file", out / "state.bin", "--test-leak", 20, "--test-clean", 20,
               "--out-dir", tmp_path / "p")
    assert code == 0
    rows = (tmp_path / "p/prune.csv").read_text().splitlines()
    assert len(rows) == 7
    assert [r.split(",")[0] for r in rows[1:]] == ["0.0", "16.1", "19.7", "67.4", "76.8", "86.6"]
    assert (tmp_path / "p/quantized.json").exists()
    assert run("prune", "--model-file", out / "state.bin", "--rates", "97", "--out-dir", tmp_path / "q") == cli.EXIT_ARGS
    assert run("prune", "--model-file", tmp_path / "missing.bin", "--out-dir", tmp_path / "q") == cli.EXIT_IO


def test_prune_rate_zero_matches_unpruned_accuracy(ir_run, tmp_path):
    root, out = ir_run
    code = run("prune", "--model-file", out / "state.bin", "--test-data", root / "data/ir_synth.csv",
               "--rates", "0", "--out-dir", tmp_path / "p")
    assert code == 0
    acc = float((tmp_path / "p/prune.csv").read_text().splitlines()[1].split(",")[3])
    from mdnet import compress, layers, training
    spec = layers.NetworkSpec.from_dict(json.loads((out / "spec.json").read_text()))
    data = D.read_set_csv(root / "data/ir_synth.csv", (50, 1))
    assert acc == training.evaluate(spec, compress.load_state(out / "state.bin"), data).total_accuracy


def test_report(ir_run, tmp_path, capsys):
    _, out = ir_run
    other = json.loads((out / "metrics.json").read_text())
    other["model"] = "convnet"
    (tmp_path / "b.json").write_text(json.dumps(other))
    assert run("report", out / "metrics.json", tmp_path / "b.json", "--json", tmp_path / "t.json") == 0
    text = capsys.readouterr().out
    assert "| addnet |" in text and "| convnet |" in text
    assert len(json.loads((tmp_path / "t.json").read_text())["rows"]) == 2

    other["task"] = "mixtures"
    (tmp_path / "c.json").write_text(json.dumps(other))
    assert run("report", out / "metrics.json", tmp_path / "c.json") == cli.EXIT_ARGS
    assert "mixtures" in capsys.readouterr().err

    (tmp_path / "empty.json").write_text("")
    assert run("report", tmp_path / "empty.json") == cli.EXIT_PARSE
    assert "empty.json" in capsys.readouterr().err
    assert run("report") == cli.EXIT_ARGS


def test_parse_batches():
    assert cli.parse_batches("3..10") == list(range(3, 11))
    assert cli.parse_batches("1,2") == [1, 2]
    with pytest.raises(cli.UsageError):
        cli.parse_batches("0..3")
    with pytest.raises(cli.UsageError):
        cli.parse_batches("a")


def test_derive_seed_is_stable():
    assert cli.derive_seed(0, 1) == cli.derive_seed(0, 1)
    assert cli.derive_seed(0, 1) != cli.derive_seed(0, 2)
