import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from nnfabric import tensor as T
from nnfabric.errors import AxisError, GraphError, ShapeError, TensorIndexError


def tv(x):
    return T.tensor(np.asarray(x, dtype=np.float32))


# -- oracles -----------------------------------------------------------------


def matmul_oracle(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def softmax_oracle(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def layer_norm_oracle(x, g, b, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def finite_diff(f, x, eps=1e-3):
    """Central differences of scalar f at x (float64 evaluation of f32 ops)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[idx] += eps
        dn[idx] -= eps
        grad[idx] = (f(up) - f(dn)) / (2 * eps)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)


# -- elementwise ----------------------------------------------------------------


def test_add_componentwise():
    assert T.add(tv([1, 2]), tv([3, 4])).tolist() == [4, 6]


def test_mul_by_ones_is_identity(rng):
    x = tv(rng.normal(size=(3, 4)))
    assert T.bits_equal(T.mul(x, T.ones_like(x)), x)


def test_gelu_zero():
    assert T.gelu(tv([0.0])).tolist() == [0.0]


def test_elementwise_dispatch_and_broadcast():
    a = tv([[1, 2], [3, 4]])
    assert T.elementwise("sub", a, tv([1, 1])).tolist() == [[0, 1], [2, 3]]
    assert T.elementwise("div", a, T.scalar(2.0)).tolist() == [[0.5, 1], [1.5, 2]]
    assert T.elementwise("relu", tv([-1, 2])).tolist() == [0, 2]


def test_incompatible_shapes_raise():
    with pytest.raises(ShapeError):
        T.add(tv([1, 2, 3]), tv([1, 2]))


def test_gelu_matches_erf_definition(rng):
    x = rng.normal(size=50)
    ref = 0.5 * x * (1 + np.array([math.erf(v / math.sqrt(2)) for v in x]))
    np.testing.assert_allclose(T.gelu(tv(x)).data, ref, atol=1e-6)


# -- matmul ---------------------------------------------------------------------


def test_matmul_identity():
    m = [[1, 2], [3, 4]]
    assert T.matmul(tv(np.eye(2)), tv(m)).tolist() == m


def test_matmul_selector_row():
    assert T.matmul(tv([[1, 0]]), tv([[5], [7]])).tolist() == [[5]]


def test_matmul_vs_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)).astype(np.float32), rng.normal(size=(4, 2)).astype(np.float32)
    np.testing.assert_allclose(T.matmul(tv(a), tv(b)).data, matmul_oracle(a, b), atol=1e-6)


def test_matmul_batched_leading_axes(rng):
    a, b = rng.normal(size=(2, 3, 4)).astype(np.float32), rng.normal(size=(4, 5)).astype(np.float32)
    out = T.matmul(tv(a), tv(b))
    assert out.shape == (2, 3, 5)
    for i in range(2):
        np.testing.assert_allclose(out.data[i], matmul_oracle(a[i], b), atol=1e-6)


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(T.zeros((2, 3)), T.zeros((2, 3)))


# -- softmax --------------------------------------------------------------------


def test_softmax_symmetric():
    assert T.softmax(tv([0, 0]), 0).tolist() == [0.5, 0.5]


def test_softmax_stable_for_large_inputs():
    out = T.softmax(tv([1000, 1000]))
    assert out.tolist() == [0.5, 0.5]


def test_softmax_vs_64bit_reference(rng):
    x = rng.normal(size=17) * 4
    np.testing.assert_allclose(T.softmax(tv(x)).data, softmax_oracle(x.astype(np.float32)), atol=1e-6)


def test_softmax_bad_axis():
    with pytest.raises(AxisError):
        T.softmax(T.zeros((2, 2)), 2)


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-1e4, 1e4, width=32)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(T.tensor(x), -1).data.astype(np.float64)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


# -- layer norm -----------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(T.full((1, 4), 3.0), T.ones((4,)), T.zeros((4,)))
    assert out.tolist() == [[0, 0, 0, 0]]


def test_layer_norm_zero_gain_gives_bias(rng):
    bias = tv([1, 2, 3])
    out = T.layer_norm(tv(rng.normal(size=(2, 3))), T.zeros((3,)), bias)
    assert out.tolist() == [[1, 2, 3], [1, 2, 3]]


def test_layer_norm_vs_64bit_reference(rng):
    x, g, b = rng.normal(size=(3, 8)), rng.normal(size=8), rng.normal(size=8)
    x32, g32, b32 = (v.astype(np.float32) for v in (x, g, b))
    out = T.layer_norm(tv(x32), tv(g32), tv(b32))
    np.testing.assert_allclose(out.data, layer_norm_oracle(x32, g32, b32), atol=1e-5)


def test_layer_norm_unit_moments(rng):
    out = T.layer_norm(tv(rng.normal(size=(4, 32)) * 3 + 1), T.ones((32,)), T.zeros((32,))).data
    np.testing.assert_allclose(out.mean(-1), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(-1), 1, atol=1e-3)


def test_layer_norm_gain_shape_error():
    with pytest.raises(ShapeError):
        T.layer_norm(T.zeros((2, 3)), T.ones((2,)), T.zeros((3,)))


# -- indexing -------------------------------------------------------------------


def test_index_get_row():
    assert T.index_get(tv([[1, 2], [3, 4]]), [1, slice(None)]).tolist() == [3, 4]


def test_index_set_identity(rng):
    x = tv(rng.normal(size=(2, 3)))
    assert T.bits_equal(T.index_set(x, [slice(None), slice(None)], x), x)


def test_index_set_int_terms():
    a = T.zeros((2, 2))
    out = T.index_set(a, [0, 1], T.scalar(5))
    assert out.tolist() == [[0, 5], [0, 0]]
    assert a.tolist() == [[0, 0], [0, 0]]  # functional


def test_index_list_term_and_negative():
    x = tv(np.arange(12).reshape(3, 4))
    assert T.index_get(x, [slice(None), [0, 3]]).tolist() == [[0, 3], [4, 7], [8, 11]]
    assert T.index_get(x, [-1]).tolist() == [8, 9, 10, 11]


def test_index_out_of_bounds():
    with pytest.raises(TensorIndexError):
        T.index_get(T.zeros((2, 2)), [2])
    with pytest.raises(IndexError):
        T.index_get(T.zeros((2, 2)), [slice(None), [0, 5]])


def test_index_set_non_broadcastable():
    with pytest.raises(ShapeError):
        T.index_set(T.zeros((2, 3)), [slice(None)], T.zeros((3, 2)))


@st.composite
def _index_case(draw):
    shape = draw(st.lists(st.integers(1, 5), min_size=1, max_size=3))
    terms = []
    for d in shape[: draw(st.integers(0, len(shape)))]:
        kind = draw(st.sampled_from(["int", "slice", "list"]))
        if kind == "int":
            terms.append(draw(st.integers(-d, d - 1)))
        elif kind == "slice":
            a = draw(st.integers(0, d))
            b = draw(st.integers(a, d))
            terms.append(slice(a, b))
        else:
            terms.append(draw(st.lists(st.integers(0, d - 1), min_size=1, max_size=3, unique=True)))
    return shape, terms


@given(_index_case(), st.floats(-10, 10, width=32))
def test_index_set_get_round_trip(case, fill):
    shape, terms = case
    a = T.tensor(np.arange(np.prod(shape), dtype=np.float32).reshape(shape))
    region = T.index_shape(shape, terms)
    v = T.tensor(np.full(region, fill, np.float32))
    got = T.index_get(T.index_set(a, terms, v), terms)
    assert got.shape == region
    assert np.array_equal(got.data, np.broadcast_to(v.data, region))


# -- reductions -----------------------------------------------------------------


def test_argmax_tie_breaks_low():
    assert T.argmax(tv([0.1, 0.9, 0.9]), 0).item() == 1


def test_sum_ones():
    assert T.sum(T.ones((3,)), 0).item() == 3


def test_mean_vs_64bit(rng):
    x = rng.normal(size=(5, 7)).astype(np.float32)
    np.testing.assert_allclose(T.mean(tv(x), 1).data, x.astype(np.float64).mean(1), atol=1e-6)


def test_reduce_rank_and_axis_errors():
    assert T.sum(T.zeros((2, 3, 4)), 1).shape == (2, 4)
    assert T.argmax(T.zeros((2, 3)), -1).shape == (2,)
    with pytest.raises(AxisError):
        T.mean(T.zeros((2, 3)), 2)


# -- autodiff -------------------------------------------------------------------


def test_backward_sum():
    x = T.tensor([1.0, 2.0, 3.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(x)
    assert T.backward(loss, tape)[x].tolist() == [1, 1, 1]


def test_backward_square():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(T.mul(x, x))
    assert T.backward(loss, tape)[x].tolist() == [2, 4]


def test_backward_errors():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(x, x)
    with pytest.raises(GraphError):
        T.backward(y, tape)  # not scalar
    with pytest.raises(GraphError):
        T.backward(T.scalar(1.0), tape)  # not on tape


def test_no_recording_without_requires_grad():
    with T.Tape() as tape:
        T.add(T.ones((2,)), T.ones((2,)))
    assert len(tape) == 0


def _check_grad(build, *shapes, rng, tol=2e-2):
    """``build`` maps input tensors to a scalar tensor."""
    xs = [rng.normal(size=s) for s in shapes]
    leaves = [T.tensor(x.astype(np.float32), requires_grad=True) for x in xs]
    with T.Tape() as tape:
        loss = build(*leaves)
    grads = T.backward(loss, tape)
    for i, x in enumerate(xs):
        def f(v, i=i):
            args = [T.tensor(a.astype(np.float32)) for a in xs]
            args[i] = T.tensor(v.astype(np.float32))
            return float(build(*args).data)
        fd = finite_diff(f, x.astype(np.float32))
        assert rel_err(grads[leaves[i]].data, fd) <= tol, f"input {i}"


def _weighted(t):
    # fixed random weights keep the loss sensitive to every output element
    w = np.random.default_rng(sum(t.shape) + 7 * t.ndim).normal(size=t.shape)
    return T.sum(T.mul(t, T.tensor(w.astype(np.float32))))


@pytest.mark.parametrize("name,build,shapes", [
    ("add", lambda a, b: _weighted(T.add(a, b)), [(3, 4), (4,)]),
    ("sub", lambda a, b: _weighted(T.sub(a, b)), [(3, 4), (3, 4)]),
    ("mul", lambda a, b: _weighted(T.mul(a, b)), [(3, 4), (3, 1)]),
    ("div", lambda a, b: _weighted(T.div(a, T.add(T.mul(b, b), T.scalar(1.0)))), [(3, 4), (3, 4)]),
    ("gelu", lambda a: _weighted(T.gelu(a)), [(3, 4)]),
    ("relu", lambda a: _weighted(T.relu(T.add(a, T.scalar(0.05)))), [(3, 4)]),
    ("matmul", lambda a, b: _weighted(T.matmul(a, b)), [(2, 3, 4), (4, 5)]),
    ("softmax", lambda a: _weighted(T.softmax(a, -1)), [(3, 5)]),
    ("layer_norm", lambda a, g, b: _weighted(T.layer_norm(a, g, b)), [(3, 5), (5,), (5,)]),
    ("index_get", lambda a: _weighted(T.index_get(a, [slice(None), [0, 2]])), [(3, 4)]),
    ("index_set", lambda a, v: _weighted(T.index_set(a, [slice(None), 1], v)), [(3, 4), (3,)]),
    ("sum_axis", lambda a: _weighted(T.sum(a, 0)), [(3, 4)]),
    ("mean", lambda a: _weighted(T.mean(a, 1)), [(3, 4)]),
    ("reshape", lambda a: _weighted(T.reshape(a, (4, 3))), [(3, 4)]),
    ("transpose", lambda a: _weighted(T.transpose(a, (1, 0))), [(4, 3)]),
])
def test_gradients_vs_finite_differences(name, build, shapes):
    _check_grad(build, *shapes, rng=np.random.default_rng(hash(name) % 2**32))


def test_embedding_and_masked_fill_gradients():
    rng = np.random.default_rng(3)
    ids = np.array([[1, 0, 2]])
    mask = np.array([[False, True, False]])
    _check_grad(lambda tab: _weighted(T.masked_fill(T.embedding(tab, ids), mask[..., None], 0.0)),
                (4, 5), rng=rng)


# -- misc -----------------------------------------------------------------------


def test_forward_determinism(rng):
    a, b = tv(rng.normal(size=(4, 8))), tv(rng.normal(size=(8, 3)))
    assert T.bits_equal(T.gelu(T.matmul(a, b)), T.gelu(T.matmul(a, b)))


def test_tensor_is_immutable():
    t = T.ones((2,))
    with pytest.raises(ValueError):
        t.data[0] = 5


def test_scalar_and_item():
    s = T.scalar(2.5)
    assert s.shape == () and s.item() == 2.5
    with pytest.raises(ShapeError):
        T.ones((2,)).item()
