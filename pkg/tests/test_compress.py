import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mdnet import compress as C
from mdnet import layers as L
from mdnet import mdop, presets
from mdnet.errors import ParameterError, ParseError
from mdnet.tensor import make_rng

SMALL = L.NetworkSpec((4,), [L.dense(4), L.activation("relu")], 2)


def small_state(w):
    state = L.init_network(SMALL, make_rng(0))
    state["0.W"] = np.asarray(w, dtype=np.float32).reshape(4, 1).repeat(4, axis=1).T.copy()
    return state


def test_prune_hand_example():
    spec = L.NetworkSpec((4,), [L.dense(1), L.activation("relu")], 1)
    state = L.init_network(spec, make_rng(0))
    state["0.W"] = np.array([[0.5, -0.1, 2.0, -3.0]], dtype=np.float32)
    cs = C.prune_sign_retain(state, 0.5, spec)
    cl = cs.layers["0.W"]
    assert cl.kept.tolist() == [False, False, True, True]
    m = np.float32(0.3)
    assert cl.magnitude == pytest.approx(0.3)
    assert cs.reconstruct()["0.W"].tolist() == [[m, -m, 2.0, -3.0]]
    unit = C.prune_sign_retain(state, 0.5, spec, magnitude="unit").reconstruct()["0.W"]
    assert unit.tolist() == [[1.0, -1.0, 2.0, -3.0]]


def test_prune_leaves_bias_and_output_layer():
    spec = presets.ir_convnet(md=True)
    state = L.init_network(spec, make_rng(0))
    for k in state:
        if k.endswith(".b"):
            state[k] = make_rng(1).normal(size=state[k].shape).astype(np.float32)
    rec = C.prune_sign_retain(state, 1.0, spec).reconstruct()
    out_key = f"{spec.output_index}.W"
    assert np.array_equal(rec[out_key], state[out_key])
    for k in state:
        if not k.endswith(".W"):
            assert np.array_equal(rec[k], state[k]), k
    for k in C.prunable_keys(spec, state):
        assert len(np.unique(np.abs(rec[k]))) == 1


def test_ties_go_to_lower_index():
    spec = L.NetworkSpec((4,), [L.dense(1)], 1)
    state = L.init_network(spec, make_rng(0))
    state["0.W"] = np.array([[1.0, -1.0, 1.0, 5.0]], dtype=np.float32)
    cl = C.prune_sign_retain(state, 0.5, spec).layers["0.W"]
    assert cl.kept.tolist() == [False, False, True, True]


def test_fraction_zero_is_bit_identical():
    spec = presets.ir_convnet(md=True)
    state = L.init_network(spec, make_rng(0))
    x = make_rng(1).random((8, 32, 1)).astype(np.float32)
    ref, _ = L.forward(spec, state, x, "eval")
    out = C.forward_compressed(spec, C.prune_sign_retain(state, 0.0, spec), x)
    assert out.tobytes() == ref.tobytes()


def test_zero_input_md_stack_gives_zero_logits():
    spec = L.NetworkSpec((6,), [L.dense(5, md=True), L.activation("relu"), L.dense(4, md=True)], 2)
    state = L.init_network(spec, make_rng(0))
    for f in (0.0, 0.5, 1.0):
        out = C.forward_compressed(spec, C.prune_sign_retain(state, f, spec), np.zeros((3, 6), np.float32))
        assert not out.any()


def test_bad_fraction():
    state = L.init_network(SMALL, make_rng(0))
    for f in (-0.1, 1.1):
        with pytest.raises(ParameterError):
            C.prune_sign_retain(state, f, SMALL)
    with pytest.raises(ParameterError):
        C.prune_sign_retain(state, 0.5, SMALL, magnitude="median")


def test_compression_rate_examples():
    assert C.compression_rate(0.0) == 0.0
    assert C.compression_rate(1.0) == 31 / 32
    assert C.compression_rate(0.5) == pytest.approx(0.484375)
    assert C.fraction_for_rate(0.484375) == pytest.approx(0.5)
    with pytest.raises(ParameterError):
        C.fraction_for_rate(0.97)


@given(st.floats(0, 1), st.floats(0, 1))
def test_compression_rate_monotone(a, b):
    lo, hi = sorted((a, b))
    assert C.compression_rate(lo) <= C.compression_rate(hi)
    assert 0 <= C.compression_rate(hi) < 1


weights = arrays(np.float32, st.integers(1, 40), elements=st.floats(-4, 4, width=32))


@settings(max_examples=80, deadline=None)
@given(weights, st.floats(0, 1))
def test_partition_and_idempotence(w, f):
    spec = L.NetworkSpec((len(w),), [L.dense(1)], 1)
    state = L.init_network(spec, make_rng(0))
    state["0.W"] = w.reshape(1, -1)
    cl = C.prune_sign_retain(state, f, spec).layers["0.W"]
    assert cl.kept.sum() + cl.n_binarized == w.size
    assert cl.n_binarized == int(np.floor(f * w.size + 1e-9))
    # every binarized |w| is <= every kept |w|
    if cl.n_binarized and cl.kept.any():
        assert np.abs(w[~cl.kept]).max() <= np.abs(w[cl.kept]).min()
    rec = C.prune_sign_retain(state, f, spec).reconstruct()
    again = C.prune_sign_retain(rec, f, spec).layers["0.W"]
    if cl.magnitude <= np.abs(w[cl.kept]).min(initial=np.inf):
        assert np.array_equal(again.kept, cl.kept)


@settings(max_examples=40, deadline=None)
@given(weights, st.floats(0, 1), st.sampled_from(["mean", "unit"]))
def test_codec_roundtrip_property(tmp_path_factory, w, f, mode):
    spec = L.NetworkSpec((len(w),), [L.dense(3), L.activation("relu")], 1)
    state = L.init_network(spec, make_rng(0))
    state["0.W"][0] = w
    cs = C.prune_sign_retain(state, f, spec, magnitude=mode)
    path = tmp_path_factory.mktemp("codec") / "w.bin"
    C.write_weights(path, cs)
    back = C.read_weights(path)
    a, b = cs.reconstruct(), back.reconstruct()
    assert list(a) == list(b)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert back.layers["0.W"].kept.tolist() == cs.layers["0.W"].kept.tolist()
    C.write_weights(path.with_suffix(".2"), back)
    assert path.read_bytes() == path.with_suffix(".2").read_bytes()


def test_codec_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOPE" + bytes(10))
    with pytest.raises(ParseError):
        C.read_weights(p)


def test_state_save_load(tmp_path):
    spec = presets.mixtures_convnet(md=True)
    state = L.init_network(spec, make_rng(2))
    C.save_state(tmp_path / "s.bin", state)
    back = C.load_state(tmp_path / "s.bin")
    assert sorted(back) == sorted(state)
    assert all(back[k].tobytes() == state[k].tobytes() for k in state)


def test_quantize_examples():
    spec = L.NetworkSpec((3,), [L.dense(2, md=True)], 1)
    state = L.init_network(spec, make_rng(0))
    state["0.W"] = np.array([[3.0, -127.0, 0.0], [5.0, 1.0, -2.0]], dtype=np.float32)
    qs = C.quantize_q8(state, spec)
    q, s = qs.q8[0]
    assert s == 1.0 and q.dtype == np.int8
    assert np.array_equal(qs.dequantized()["0.W"], state["0.W"])
    state["0.W"] = np.array([[0.5, -0.25, 0.1], [0.0, 0.2, -0.3]], dtype=np.float32)
    q, s = C.quantize_q8(state, spec).q8[0]
    assert q[0, 0] == 127 and s == pytest.approx(0.5 / 127)
    state["0.W"][:] = 0
    assert C.quantize_q8(state, spec).q8[0][1] == 1.0


def test_q8_forward_agrees_with_float_forward():
    spec = presets.ir_convnet(md=True)
    state = L.init_network(spec, make_rng(0))
    x = make_rng(1).random((200, 32, 1)).astype(np.float32)
    ref, _ = L.forward(spec, state, x, "eval")
    out = C.forward_q8(spec, C.quantize_q8(state, spec), x)
    assert np.mean((ref[:, 0] > 0) == (out[:, 0] > 0)) >= 0.99


def test_md_dot_with_unit_magnitude_is_sign_logic_plus_addition():
    x = make_rng(0).normal(size=50)
    s = np.sign(make_rng(1).normal(size=50))
    expected = np.sum(np.sign(s * x) * (np.abs(x) + 1.0))
    assert mdop.md_dot(s, x) == pytest.approx(expected)
