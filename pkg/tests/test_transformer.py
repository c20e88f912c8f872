import numpy as np
import pytest

from tabgen.transformer import Transformer, _softmax


def tiny_model(depth=1, d=8, n_heads=2, seed=0):
    return Transformer(d=d, depth=depth, n_heads=n_heads,
                       rng=np.random.default_rng(seed), dtype=np.float64)


def test_width_must_divide_heads():
    with pytest.raises(ValueError):
        Transformer(d=10, depth=1, n_heads=4, rng=np.random.default_rng(0))


def test_depth_zero_is_identity():
    model = tiny_model(depth=0)
    tokens = np.random.default_rng(1).normal(size=(5, 8))
    z, _ = model.forward(tokens)
    np.testing.assert_array_equal(z, tokens[1:])


def test_dimension_mismatch_errors():
    model = tiny_model()
    with pytest.raises(ValueError, match="width"):
        model.forward(np.zeros((4, 7)))


def test_identical_masked_rows_identical_outputs():
    # zeroed input rows are indistinguishable to a position-agnostic encoder
    model = tiny_model(depth=3)
    rng = np.random.default_rng(2)
    tokens = rng.normal(size=(6, 8))
    tokens[2] = 0.0
    tokens[4] = 0.0
    z, _ = model.forward(tokens)
    assert z[1].tobytes() == z[3].tobytes()


def test_softmax_rows_sum_to_one():
    model = tiny_model(depth=2, d=8, n_heads=2)
    rng = np.random.default_rng(3)
    tokens = rng.normal(size=(4, 6, 8))
    _, trace = model.forward(tokens)
    for c in trace.blocks:
        sums = c["attn"].sum(axis=-1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)


def test_singleton_softmax_is_one():
    w = _softmax(np.array([[3.7]]))
    assert w[0, 0] == 1.0


def test_determinism():
    model = tiny_model(depth=2)
    tokens = np.random.default_rng(4).normal(size=(3, 5, 8))
    z1, _ = model.forward(tokens)
    z2, _ = model.forward(tokens)
    assert z1.tobytes() == z2.tobytes()


def test_zero_seed_gives_zero_grads():
    model = tiny_model(depth=2)
    tokens = np.random.default_rng(5).normal(size=(2, 4, 8))
    z, trace = model.forward(tokens)
    dtok, grads = model.backward(trace, np.zeros_like(z))
    assert np.all(dtok == 0.0)
    for g in grads.values():
        assert np.all(g == 0.0)


def test_backward_linear_in_seed():
    model = tiny_model(depth=1)
    tokens = np.random.default_rng(6).normal(size=(2, 4, 8))
    z, trace = model.forward(tokens)
    rng = np.random.default_rng(7)
    s1 = rng.normal(size=z.shape)
    s2 = rng.normal(size=z.shape)
    d1, g1 = model.backward(trace, s1)
    d2, g2 = model.backward(trace, s2)
    d12, g12 = model.backward(trace, s1 + s2)
    np.testing.assert_allclose(d12, d1 + d2, rtol=1e-10, atol=1e-12)
    for k in g1:
        np.testing.assert_allclose(g12[k], g1[k] + g2[k], rtol=1e-10, atol=1e-12)


def test_backward_shape_mismatch_errors():
    model = tiny_model(depth=1)
    tokens = np.random.default_rng(8).normal(size=(2, 4, 8))
    z, trace = model.forward(tokens)
    with pytest.raises(ValueError, match="shape"):
        model.backward(trace, np.zeros((2, 5, 8)))


def test_gradients_match_finite_differences():
    model = tiny_model(depth=1, d=8, n_heads=2, seed=11)
    rng = np.random.default_rng(12)
    # inflate the 0.02-scale init so every gradient is far above the
    # finite-difference noise floor
    for name, arr in model.named_parameters():
        if name.endswith(("Wq", "Wk", "Wv", "Wo", "W1", "W2")):
            arr *= 25.0
        elif name.endswith(("b1", "b2", "ln1_b", "ln2_b")):
            arr += rng.normal(0.0, 0.3, size=arr.shape)
    tokens = rng.normal(size=(2, 4, 8))
    seed_w = rng.normal(size=(2, 3, 8))

    def loss():
        z, _ = model.forward(tokens)
        return float((z * seed_w).sum())

    z, trace = model.forward(tokens)
    dtok, grads = model.backward(trace, seed_w)

    eps = 1e-5
    for name, arr in model.named_parameters():
        g = grads[name]
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            old = arr[ix]
            arr[ix] = old + eps
            up = loss()
            arr[ix] = old - eps
            dn = loss()
            arr[ix] = old
            fd = (up - dn) / (2 * eps)
            rel = abs(g[ix] - fd) / (abs(fd) + 1e-8)
            assert rel <= 1e-4, f"{name}[{ix}]: analytic {g[ix]}, fd {fd}"

    # input gradient too
    it = np.nditer(tokens, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        old = tokens[ix]
        tokens[ix] = old + eps
        up = loss()
        tokens[ix] = old - eps
        dn = loss()
        tokens[ix] = old
        fd = (up - dn) / (2 * eps)
        rel = abs(dtok[ix] - fd) / (abs(fd) + 1e-8)
        assert rel <= 1e-4
