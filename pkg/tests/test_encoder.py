import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgquant.encoder import (
    BatchEncoder,
    EncoderParams,
    Gradients,
    as_complex,
    encode,
    encode_backward,
    encode_real,
    init_params,
)
from kgquant.quantize import EntityCode, codes_to_matrix


def random_params(seed, d=3, hidden=5, l=6):
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(l, 2 * d))
    params = EncoderParams(rng.normal(size=(2 * d, hidden)), rng.normal(size=hidden),
                           rng.normal(size=(hidden, 2 * d)), rng.normal(size=2 * d))
    return table, params


def test_empty_code_is_bias_path():
    table, p = random_params(0)
    out = encode_real(EntityCode(np.zeros(0), np.zeros(0), 6), table, p)[0]
    np.testing.assert_allclose(out, np.maximum(p.b1, 0) @ p.w2 + p.b2, rtol=0, atol=0)


def test_identity_params():
    d = 2
    table = np.array([[0.5, -1.0, 2.0, -0.25]])
    eye = np.eye(2 * d)
    p = EncoderParams(eye, np.zeros(2 * d), eye, np.zeros(2 * d))
    out = encode_real(EntityCode(np.array([0]), np.ones(1), 1), table, p)[0]
    np.testing.assert_array_equal(out, np.maximum(table[0], 0))
    np.testing.assert_array_equal(encode(EntityCode(np.array([0]), np.ones(1), 1), table, p),
                                  [0.5 + 2j, 0 + 0j])


def test_permutation_invariance_bitwise():
    table, p = random_params(1)
    a = EntityCode.from_pairs([4, 1, 3], [0.3, 2.0, 0.7], 6)
    b = EntityCode.from_pairs([3, 4, 1], [0.7, 0.3, 2.0], 6)
    assert encode_real(a, table, p)[0].tobytes() == encode_real(b, table, p)[0].tobytes()


def test_weight_scale_invariance():
    table, p = random_params(2)
    a = encode_real(EntityCode(np.array([0, 2]), np.array([2.0, 2.0]), 6), table, p)[0]
    b = encode_real(EntityCode(np.array([0, 2]), np.array([1.0, 1.0]), 6), table, p)[0]
    np.testing.assert_allclose(a, b, rtol=1e-15)


def test_index_out_of_range():
    table, p = random_params(3, l=2)
    with pytest.raises(IndexError):
        encode_real(EntityCode(np.array([4]), np.ones(1), 6), table, p)


def test_zero_upstream_zero_grads():
    table, p = random_params(4)
    _, cache = encode_real(EntityCode(np.array([1, 5]), np.ones(2), 6), table, p)
    g = encode_backward(cache, p, np.zeros(6), Gradients.zeros_like(table, p))
    assert all(not np.any(a) for a in (g.table, g.w1, g.b1, g.w2, g.b2))


def numeric_grads(code, table, p, upstream, step=1e-6):
    arrays = {"table": table, **p.arrays()}
    out = {}
    for name, arr in arrays.items():
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = encode_real(code, table, p)[0] @ upstream
            flat[i] = orig - step
            down = encode_real(code, table, p)[0] @ upstream
            flat[i] = orig
            num.reshape(-1)[i] = (up - down) / (2 * step)
        out[name] = num
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6))


def test_single_codeword_finite_differences():
    table, p = random_params(5)
    code = EntityCode(np.array([2]), np.ones(1), 6)
    upstream = np.random.default_rng(5).normal(size=6)
    _, cache = encode_real(code, table, p)
    g = encode_backward(cache, p, upstream, Gradients.zeros_like(table, p))
    num = numeric_grads(code, table, p, upstream)
    for name in num:
        assert rel_err(getattr(g, name), num[name]) <= 1e-6, name
    untouched = np.delete(np.arange(6), 2)
    assert not np.any(g.table[untouched])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 4), hidden=st.integers(1, 8), size=st.integers(1, 3))
def test_random_small_instances(seed, d, hidden, size):
    rng = np.random.default_rng(seed)
    table, p = random_params(seed, d, hidden, 5)
    code = EntityCode.from_pairs(rng.choice(5, size, replace=False), rng.uniform(0.1, 1, size), 5)
    upstream = rng.normal(size=2 * d)
    _, cache = encode_real(code, table, p)
    g = encode_backward(cache, p, upstream, Gradients.zeros_like(table, p))
    num = numeric_grads(code, table, p, upstream, step=1e-5)
    for name in num:
        assert rel_err(getattr(g, name), num[name]) <= 1e-5, name


def test_shared_codeword_gradients_add():
    table, p = random_params(6)
    codes = [EntityCode(np.array([1, 3]), np.ones(2), 6), EntityCode(np.array([3]), np.ones(1), 6)]
    rng = np.random.default_rng(6)
    ups = rng.normal(size=(2, 6))
    total = Gradients.zeros_like(table, p)
    singles = []
    for c, u in zip(codes, ups):
        _, cache = encode_real(c, table, p)
        encode_backward(cache, p, u, total)
        singles.append(encode_backward(cache, p, u, Gradients.zeros_like(table, p)).table[3])
    np.testing.assert_allclose(total.table[3], singles[0] + singles[1], rtol=1e-14)


def test_batch_matches_single():
    table, p = random_params(7)
    codes = [EntityCode.from_pairs([0, 4], [0.2, 0.9], 6), EntityCode(np.zeros(0), np.zeros(0), 6),
             EntityCode(np.array([3]), np.ones(1), 6)]
    enc = BatchEncoder(codes_to_matrix(codes, 6))
    batch = enc.forward(table, p)
    ups = np.random.default_rng(7).normal(size=batch.shape)
    acc = Gradients.zeros_like(table, p)
    for i, c in enumerate(codes):
        out, cache = encode_real(c, table, p)
        np.testing.assert_allclose(batch[i], out, rtol=1e-13, atol=1e-14)
        encode_backward(cache, p, ups[i], acc)
    g = enc.backward(p, ups)
    for name in ("table", "w1", "b1", "w2", "b2"):
        np.testing.assert_allclose(getattr(g, name), getattr(acc, name), rtol=1e-12, atol=1e-13)


class TestInit:
    def test_deterministic(self):
        a, pa = init_params(3, 4, 8, 10)
        b, pb = init_params(3, 4, 8, 10)
        np.testing.assert_array_equal(a, b)
        for x, y in zip(pa.arrays().values(), pb.arrays().values()):
            np.testing.assert_array_equal(x, y)

    def test_bounds_and_zero_biases(self):
        table, p = init_params(0, 3, 7, 11)
        for arr, (fi, fo) in ((table, (11, 6)), (p.w1, (6, 7)), (p.w2, (7, 6))):
            assert np.all(np.abs(arr) <= np.sqrt(6 / (fi + fo)))
        assert not np.any(p.b1) and not np.any(p.b2)
        assert p.hidden == 7 and p.dim == 3

    def test_default_hidden(self):
        assert init_params(0, 5)[1].hidden == 10

    def test_mean_near_zero(self):
        table, _ = init_params(1, 500, 1, 1000)  # 1000 x 1000 table
        bound = np.sqrt(6 / 2000)
        sigma = bound / np.sqrt(3) / np.sqrt(table.size)
        assert abs(table.mean()) <= 3 * sigma

    def test_complex_view(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_array_equal(as_complex(x), [1 + 3j, 2 + 4j])
