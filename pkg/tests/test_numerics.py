import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from styleflow import msm
from styleflow.numerics import (
    DimensionError,
    GradCheckError,
    NonFiniteError,
    ParamStore,
    UsageError,
    add,
    backward,
    concat,
    constant,
    gelu,
    grad_check,
    layer_norm,
    linear,
    load_params,
    matmul,
    mse,
    mul,
    no_grad,
    reshape,
    rows,
    save_params,
    softmax,
    tensor_sum,
    transpose,
)
from styleflow.tokenizer import ModelConfig, TokenSequence


def triple_loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def two_pass_layer_norm(row, eps):
    n = len(row)
    mu = 0.0
    for v in row:
        mu += v
    mu /= n
    var = 0.0
    for v in row:
        var += (v - mu) ** 2
    var /= n
    return [(v - mu) / np.sqrt(var + eps) for v in row]


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    a = np.random.default_rng(0).standard_normal((3, 3))
    np.testing.assert_array_equal(matmul(constant(np.eye(3)), constant(a)).data, a)


def test_matmul_hand_case():
    out = matmul(constant(np.array([[1.0, 2.0], [3.0, 4.0]])), constant(np.array([[0.0], [1.0]])))
    np.testing.assert_array_equal(out.data, [[2.0], [4.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    np.testing.assert_allclose(matmul(constant(a), constant(b)).data, triple_loop_matmul(a, b),
                               rtol=0, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(constant(np.ones((2, 3))), constant(np.ones((2, 3))))


# ---------------------------------------------------------------- softmax

def test_softmax_examples():
    np.testing.assert_allclose(softmax(constant(np.array([0.0, 0.0]))).data, [0.5, 0.5])
    np.testing.assert_allclose(softmax(constant(np.array([np.log(2.0), 0.0]))).data, [2 / 3, 1 / 3],
                               rtol=1e-12)
    big = softmax(constant(np.array([1000.0, 0.0]))).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [1.0, 0.0], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    p = softmax(constant(x)).data
    assert np.all(np.abs(p.sum(axis=-1) - 1.0) < 1e-6)
    assert np.all(p > 0)


# ---------------------------------------------------------------- layer_norm

def test_layer_norm_constant_row():
    out = layer_norm(constant(np.full((1, 4), 3.0)), constant(np.ones(4)), constant(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_unit_row():
    out = layer_norm(constant(np.array([[1.0, -1.0]])), constant(np.ones(2)), constant(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], rtol=1e-15)


def test_layer_norm_two_pass_oracle():
    row = np.random.default_rng(2).standard_normal(9) * 3 + 1
    out = layer_norm(constant(row[None, :]), constant(np.ones(9)), constant(np.zeros(9))).data[0]
    np.testing.assert_allclose(out, two_pass_layer_norm(row, 1e-5), rtol=0, atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 6), elements=st.floats(-100, 100)))
def test_layer_norm_pre_affine_moments(x):
    x = x + np.arange(6) * 1e-1  # keep rows non-constant
    y = layer_norm(constant(x)).data
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-6)
    var = x.var(axis=-1)
    expected = var / (var + 1e-5)
    np.testing.assert_allclose(y.var(axis=-1), expected, atol=1e-9)
    assert np.all(np.abs(y.var(axis=-1)[var > 0.1] - 1.0) < 1e-4)


# ---------------------------------------------------------------- linear

def test_linear_identity_and_zero_input():
    x = np.random.default_rng(3).standard_normal((4, 3))
    b = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(linear(constant(x), constant(np.eye(3)), constant(np.zeros(3))).data, x)
    out = linear(constant(np.zeros((4, 3))), constant(np.eye(3)), constant(b)).data
    np.testing.assert_array_equal(out, np.tile(b, (4, 1)))


def test_linear_matches_composition():
    rng = np.random.default_rng(4)
    x, W, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 6)), rng.standard_normal(6)
    expected = add(matmul(constant(x), constant(W)), constant(b)).data
    np.testing.assert_array_equal(linear(constant(x), constant(W), constant(b)).data, expected)


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    store = ParamStore(np.float64, seed=0)
    W = store.normal("W", (3, 4))
    backward(tensor_sum(W))
    np.testing.assert_array_equal(W.grad, np.ones((3, 4)))


def test_backward_squared_norm():
    store = ParamStore(np.float64, seed=1)
    x = store.normal("x", (5,), std=1.0)
    backward(tensor_sum(mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-15)


def test_backward_reused_parent_accumulates():
    store = ParamStore(np.float64)
    x = store.add("x", [[1.0, 2.0]])
    backward(tensor_sum(add(x, x)))
    np.testing.assert_array_equal(x.grad, [[2.0, 2.0]])


def test_backward_requires_scalar_and_forward():
    store = ParamStore(np.float64)
    W = store.ones("W", (2, 2))
    with pytest.raises(UsageError):
        backward(W)
    with pytest.raises(UsageError):
        backward(add(W, W))


def test_no_grad_records_nothing():
    store = ParamStore(np.float64)
    W = store.ones("W", (2,))
    with no_grad():
        out = tensor_sum(mul(W, W))
    assert out._backward is None and not out.requires_grad


def test_non_finite_detected():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        mul(constant(np.array([1e200])), constant(np.array([1e200])))


# ---------------------------------------------------------------- grad_check

def test_grad_check_single_linear():
    store = ParamStore(np.float64, seed=5)
    store.normal("W", (4, 3), std=1.0)
    store.normal("b", (3,), std=1.0)
    x = constant(np.random.default_rng(5).standard_normal((6, 4)))
    t = np.random.default_rng(6).standard_normal((6, 3))
    report = grad_check(lambda: mse(linear(x, store["W"], store["b"]), constant(t)), store, tol=1e-6)
    assert report.passed(1e-6)


def test_grad_check_composite_ops():
    """Every primitive on one tape: transpose, reshape, concat, rows, gelu, softmax, layer_norm."""
    store = ParamStore(np.float64, seed=7)
    store.normal("A", (4, 6), std=1.0)
    store.normal("B", (6, 4), std=1.0)
    store.ones("g", (6,))
    store.zeros("b", (6,))

    def loss():
        a = layer_norm(store["A"], store["g"], store["b"])
        m = matmul(gelu(a), store["B"])
        j = concat([m, transpose(m)])
        r = rows(reshape(j, (4, 8)), 1, 3)
        return tensor_sum(mul(softmax(r), r))

    assert grad_check(loss, store, tol=1e-6).passed(1e-6)


def test_grad_check_msm_module():
    cfg = ModelConfig(d=8, heads=2, n_patches=3)
    store = ParamStore(np.float64, seed=8)
    msm.init_params(store, cfg)
    for name, t in store:  # enlarge weights so the check is not dominated by tiny values
        if name.endswith(("W1", "W2", "Wq", "Wk", "Wv")):
            t.data *= 10
    rng = np.random.default_rng(8)
    glob = TokenSequence(constant(rng.standard_normal((4, 8))), "style-global")
    locs = [TokenSequence(constant(rng.standard_normal((4, 8))), "style-local") for _ in range(3)]
    target = constant(rng.standard_normal((8, 8)))
    report = grad_check(lambda: mse(msm.msm_forward(glob, locs, store, 2).tokens, target), store, tol=1e-4)
    assert report.max_error() < 1e-4


def test_grad_check_detects_corrupted_gradient():
    store = ParamStore(np.float64, seed=9)
    store.normal("W", (3, 3), std=1.0)
    x = constant(np.random.default_rng(9).standard_normal((2, 3)))

    def loss():
        return tensor_sum(mul(matmul(x, store["W"]), matmul(x, store["W"])))

    backward(loss())
    doubled = 2 * store.flat_grad()
    store.zero_grad()
    with pytest.raises(GradCheckError):
        grad_check(loss, store, analytic=doubled)
    report = grad_check(loss, store, analytic=doubled, raise_on_fail=False)
    assert report.max_error() > 0.4


def test_grad_check_rejects_32_bit():
    store = ParamStore(np.float32)
    store.ones("W", (2,))
    with pytest.raises(UsageError):
        grad_check(lambda: tensor_sum(store["W"]), store)


# ---------------------------------------------------------------- ParamStore / checkpoint

def test_param_store_flat_roundtrip():
    store = ParamStore(np.float64, seed=10)
    store.normal("a", (2, 3))
    store.zeros("b", (4,))
    vec = np.arange(store.size, dtype=np.float64)
    store.set_flat(vec)
    np.testing.assert_array_equal(store.flat(), vec)
    assert store.locate(7) == ("b", (1,))
    with pytest.raises(DimensionError):
        store.set_flat(np.zeros(3))


def test_param_store_seeded_init_is_deterministic():
    a, b = ParamStore(seed=3), ParamStore(seed=3)
    for s in (a, b):
        s.normal("w", (5, 5))
    np.testing.assert_array_equal(a.flat(), b.flat())


def test_checkpoint_roundtrip(tmp_path):
    store = ParamStore(np.float32, seed=11)
    store.normal("embed.W", (4, 3))
    store.ones("ln.g", (3,))
    store.add("scalar", 2.5)
    path = tmp_path / "p.bin"
    save_params(store, path)
    loaded = load_params(path)
    assert loaded.names() == store.names()
    np.testing.assert_array_equal(loaded.flat(), store.flat())
    raw = path.read_bytes()
    assert raw[:4] == b"USTY"
    path.write_bytes(raw + b"x")
    with pytest.raises(ValueError):
        load_params(path)
