import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays, array_shapes

from mdnet.errors import ParameterError, ShapeError
from mdnet.tensor import (
    elementwise, gaussian, make_rng, matmul, read_tensor, write_tensor, zeros,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def test_zeros():
    z = zeros([2, 3])
    assert z.shape == (2, 3) and not z.any()
    assert zeros([1]).tolist() == [0.0]


@pytest.mark.parametrize("shape", [[0], [], [2, 0]])
def test_zeros_rejects_bad_shapes(shape):
    with pytest.raises(ShapeError):
        zeros(shape)


def test_gaussian_degenerate_and_determinism():
    assert np.all(gaussian([5], 3.0, 0.0, make_rng(0)) == 3.0)
    a = gaussian([100], 0, 1, make_rng(42))
    b = gaussian([100], 0, 1, make_rng(42))
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ParameterError):
        gaussian([3], 0, -1, make_rng(0))


def test_gaussian_large_sample_moments():
    x = gaussian([10_000], 0.0, 1.0, make_rng(7))
    assert abs(x.mean()) < 0.05
    assert abs(x.std() - 1.0) < 0.05


def test_elementwise_examples():
    assert elementwise("sqrt-signed", [4.0, -9.0, 0.0]).tolist() == [2.0, -3.0, 0.0]
    assert elementwise("sign", [-2.0, 0.0, 5.0]).tolist() == [-1.0, 0.0, 1.0]
    assert elementwise("add", [1, 2], [3, 4]).tolist() == [4, 6]
    with pytest.raises(ShapeError):
        elementwise("add", [1, 2], [1, 2, 3])


def test_matmul_examples():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(np.eye(2), m), m)
    assert matmul([[1, 2]], [[3], [4]]).tolist() == [[11]]
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@given(arrays(np.float64, array_shapes(max_dims=3, max_side=5), elements=finite))
def test_add_zero_identity(a):
    assert np.array_equal(elementwise("add", a, np.zeros_like(a)), a)


def test_matmul_associative():
    rng = make_rng(3)
    for _ in range(20):
        a, b, c = (rng.normal(size=s) for s in [(3, 4), (4, 5), (5, 2)])
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        assert np.allclose(left, right, rtol=1e-9, atol=1e-12)


@given(arrays(np.float32, array_shapes(max_dims=4, max_side=4),
              elements=st.floats(-1e3, 1e3, width=32)))
def test_tensor_codec_roundtrip(a):
    buf = io.BytesIO()
    write_tensor(buf, a)
    raw = buf.getvalue()
    # header: rank then dims as u64 LE
    assert int.from_bytes(raw[:8], "little") == a.ndim
    buf.seek(0)
    back = read_tensor(buf)
    assert back.shape == a.shape and back.tobytes() == a.tobytes()
