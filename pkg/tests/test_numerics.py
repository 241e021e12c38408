import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from timeexpert.errors import InvalidArgument, InvalidShape, NonFinite, NonFiniteLoss
from timeexpert.numerics import (
    ParamStore,
    Rng,
    Tensor,
    concat,
    exp,
    gelu,
    grad_check,
    layer_norm,
    linear_forward,
    log,
    precision,
    softmax,
    softplus,
    stable_softmax,
    top_k_indices,
    top_k_mask,
)
from timeexpert.numerics.rng import splitmix64

from oracles import finite_difference, softmax_list, topk_bruteforce

finite_floats = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# ---- softmax ----------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(stable_softmax([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(stable_softmax([math.log(2), 0.0]), [2 / 3, 1 / 3], atol=1e-12)
    np.testing.assert_allclose(stable_softmax([5.0]), [1.0])


def test_softmax_empty_axis():
    with pytest.raises(InvalidShape):
        stable_softmax(np.zeros((3, 0)), axis=-1)


def test_softmax_large_logits_stay_finite():
    out = stable_softmax([1000.0, 999.0])
    np.testing.assert_allclose(out, softmax_list([1000.0, 999.0]))


@settings(max_examples=200, deadline=None)
@given(st.lists(finite_floats, min_size=1, max_size=64))
def test_softmax_sums_to_one(xs):
    out = stable_softmax(xs)
    assert abs(out.sum() - 1.0) <= 1e-6
    assert np.all(out > 0) and np.all(out <= 1)


def test_masked_softmax_zeroes_masked_entries():
    y = softmax(Tensor([1.0, 2.0, 3.0]), mask=np.array([True, False, True]))
    assert y.data[1] == 0.0
    np.testing.assert_allclose(y.data[[0, 2]], softmax_list([1.0, 3.0]), rtol=1e-6)


# ---- top-k ------------------------------------------------------------------

def test_top_k_examples():
    assert list(top_k_indices([0.2, 0.9, 0.9, -1.0], 2)) == [1, 2]
    assert list(top_k_indices([0.5, 0.5, 0.1], 1)) == [0]
    assert list(top_k_indices([3.0, 1.0, 2.0], 3)) == [0, 1, 2]
    assert list(top_k_indices([3.0, 1.0], 10)) == [0, 1]


def test_top_k_zero_rejected():
    with pytest.raises(InvalidArgument):
        top_k_indices([1.0], 0)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=32), st.integers(1, 32))
def test_top_k_matches_bruteforce(xs, k):
    # small integer range forces plenty of ties
    scores = [float(x) for x in xs]
    assert list(top_k_indices(scores, k)) == topk_bruteforce(scores, k)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32))
def test_top_k_mask_rows_match_scalar_version(n, k, seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(-2, 3, size=(3, n, n)).astype(float)
    cand = np.tril(np.ones((n, n), bool))
    mask = top_k_mask(scores, k, cand)
    for b in range(3):
        for t in range(n):
            expect = topk_bruteforce(list(scores[b, t, : t + 1]), k)
            assert list(np.flatnonzero(mask[b, t])) == expect


# ---- linear / layer norm ------------------------------------------------------

def test_linear_forward_examples():
    w = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose(linear_forward(Tensor(np.eye(2)), w, Tensor([0.0, 0.0])).data, [[1, 2], [3, 4]])
    np.testing.assert_allclose(linear_forward(Tensor([[1.0, 1.0]]), w, Tensor([1.0, 1.0])).data, [[5, 7]])


def test_linear_gradient_against_finite_differences():
    x = np.array([[1.0, 1.0]])
    with precision(np.float64):
        w = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        linear_forward(Tensor(x), w, Tensor([1.0, 1.0])).sum().backward()
    numeric = finite_difference(lambda wv: float((x @ wv + 1.0).sum()), [[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose(w.grad, [[1.0, 1.0], [1.0, 1.0]])
    np.testing.assert_allclose(w.grad, numeric, atol=1e-6)


def test_linear_shape_mismatch():
    with pytest.raises(InvalidShape):
        linear_forward(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_layer_norm_examples():
    ones, zeros = Tensor([1.0, 1.0]), Tensor([0.0, 0.0])
    np.testing.assert_allclose(layer_norm(Tensor([4.0, 4.0]), ones, zeros).data, [0.0, 0.0])
    np.testing.assert_allclose(layer_norm(Tensor([1.0, 3.0]), ones, zeros).data, [-1.0, 1.0], atol=1e-3)
    np.testing.assert_allclose(layer_norm(Tensor([1.0, 3.0]), zeros, Tensor([5.0, 5.0])).data, [5.0, 5.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=32).filter(lambda v: np.std(v) > 0.1))
def test_layer_norm_moments(xs):
    # variance target holds once var >> eps (eps=1e-5 shrinks it by var/(var+eps))
    with precision(np.float64):
        y = layer_norm(Tensor(xs), Tensor(np.ones(len(xs))), Tensor(np.zeros(len(xs)))).data
    assert abs(y.mean()) <= 1e-5
    assert abs(y.var() - 1.0) <= 1e-3


# ---- gradient checks per op ------------------------------------------------------

def _rand_store(seed, **shapes):
    rng = np.random.default_rng(seed)
    return ParamStore({n: Tensor(rng.normal(size=s), dtype=np.float64) for n, s in shapes.items()})


def test_grad_check_quadratic_is_exact():
    p = _rand_store(0, a=(3, 4), b=(5,))
    assert grad_check(lambda s: (s["a"] * s["a"]).sum() + (s["b"] * s["b"]).sum(), p) <= 1e-6


@pytest.mark.parametrize("name,fn", [
    ("exp", lambda s: exp(s["a"] * 0.3).sum()),
    ("log", lambda s: log(s["a"] * s["a"] + 1.0).sum()),
    ("softplus", lambda s: softplus(s["a"]).sum()),
    ("gelu", lambda s: gelu(s["a"]).sum()),
    ("div", lambda s: (s["a"] / (s["b"] * s["b"] + 1.0)).sum()),
    ("softmax", lambda s: (softmax(s["a"], axis=-1) * s["b"]).sum()),
    ("masked_softmax", lambda s: (softmax(s["a"], -1, np.tril(np.ones((3, 4), bool))) * s["b"]).sum()),
    ("layer_norm", lambda s: (layer_norm(s["a"], s["c"], s["d"]) * s["b"]).sum()),
    ("matmul_batched", lambda s: (s["e"] @ s["a"].reshape(1, 3, 4)).sum()),
    ("transpose", lambda s: (s["a"].transpose(1, 0) @ s["b"]).sum()),
    ("getitem", lambda s: (s["a"][1:, ::2] * s["b"][:2, :2]).sum()),
    ("fancy_index", lambda s: s["a"][:, np.array([[0, 1], [1, 2]])].sum() * s["a"][0, 0]),
    ("concat", lambda s: (concat([s["a"], s["b"]], 0) * concat([s["b"], s["a"]], 0)).sum()),
    ("mean_axis", lambda s: (s["a"].mean(axis=0) * s["c"]).sum()),
])
def test_each_op_passes_grad_check(name, fn):
    p = _rand_store(1, a=(3, 4), b=(3, 4), c=(4,), d=(4,), e=(2, 5, 3))
    assert grad_check(fn, p, h=1e-5) <= 1e-4, name


def test_non_finite_is_eager():
    with pytest.raises(NonFinite):
        exp(Tensor([1000.0]))
    with pytest.raises(NonFinite):
        log(Tensor([0.0]))


def test_grad_check_non_finite_objective():
    p = _rand_store(0, a=(2,))
    with pytest.raises(NonFiniteLoss):
        grad_check(lambda s: exp(s["a"] * 1e4).sum(), p)


# ---- rng ------------------------------------------------------------------------

def test_rng_reference_vectors():
    # splitmix64(0) and xoshiro256** from state {1,2,3,4}, as published with the generators
    assert splitmix64(0)[1] == 0xE220A8397B1DCDAF
    r = Rng(0)
    r._s = [1, 2, 3, 4]
    assert [r.next_u64() for _ in range(4)] == [11520, 0, 1509978240, 1215971899390074240]


def test_rng_deterministic_and_seed_sensitive():
    a, b, c = Rng(42), Rng(42), Rng(43)
    assert [a.next_u64() for _ in range(5)] == [b.next_u64() for _ in range(5)]
    np.testing.assert_array_equal(Rng(7).uniform((100,)), Rng(7).uniform((100,)))
    assert not np.array_equal(Rng(7).uniform((10,)), c.uniform((10,)))


def test_rng_distributions():
    r = Rng(3)
    u = r.uniform((20000,))
    assert 0.0 <= u.min() and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01
    z = r.normal((20000,))
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1.0) < 0.03
    perm = r.permutation(50)
    assert sorted(perm) == list(range(50))
    pick = r.choice(10, 4)
    assert len(set(pick.tolist())) == 4


def test_forward_bit_identical_across_runs():
    from timeexpert.model import Model, ModelConfig, PatchConfig
    from timeexpert.attention import TmoeConfig

    cfg = ModelConfig(patch=PatchConfig(16, 4, 4), tmoe=TmoeConfig(8, 2, 2), horizon=4)
    x = Rng(5).normal((16, 2))
    a = Model.create(cfg, 11).predict(x)
    b = Model.create(cfg, 11).predict(x)
    assert a.tobytes() == b.tobytes()
