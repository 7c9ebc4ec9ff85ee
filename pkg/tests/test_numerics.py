import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from alsuv.numerics import (
    DegenerateEmbeddingError,
    Layer,
    Mlp,
    cosine_similarity,
    cosine_similarity_grad,
    dual_layer_forward,
    finite_difference_grad,
    layer_forward,
    mlp_forward,
    mlp_from_json,
    mlp_grad_input,
    mlp_to_json,
    random_mlp,
)

finite_vec = arrays(np.float64, st.integers(2, 6), elements=st.floats(-10, 10))


def naive_forward(net, x):
    """Loop-based reference forward pass."""
    h = list(x)
    for layer in net.layers:
        out = []
        for i in range(layer.out_dim):
            a = layer.bias[i]
            for j in range(layer.in_dim):
                a += layer.weight[i, j] * h[j]
            if layer.activation == "tanh":
                a = np.tanh(a)
            elif layer.activation == "relu":
                a = max(a, 0.0)
            out.append(a)
        h = out
    h = np.array(h)
    return h / np.linalg.norm(h) if net.normalize_output else h


def linear(w, b=None, act="identity", normalize=False):
    w = np.array(w, dtype=float)
    b = np.zeros(w.shape[0]) if b is None else np.array(b, dtype=float)
    return Mlp((Layer(w, b, act),), normalize)


class TestForward:
    def test_identity_layer(self):
        np.testing.assert_array_equal(mlp_forward(linear(np.eye(2)), [3.0, 4.0]), [3.0, 4.0])

    def test_normalized(self):
        np.testing.assert_allclose(mlp_forward(linear(np.eye(2), normalize=True), [3.0, 4.0]),
                                   [0.6, 0.8], atol=1e-15)

    def test_matches_naive_loop(self, rng):
        net = random_mlp(rng, [5, 7, 6, 4])
        x = rng.standard_normal(5)
        np.testing.assert_allclose(mlp_forward(net, x), naive_forward(net, x), rtol=0, atol=1e-12)

    def test_batch_rows_match_single(self, rng):
        net = random_mlp(rng, [3, 5, 2], normalize_output=True)
        X = rng.standard_normal((4, 3))
        for x, y in zip(X, mlp_forward(net, X)):
            np.testing.assert_allclose(mlp_forward(net, x), y, atol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            mlp_forward(linear(np.eye(2)), [1.0, 2.0, 3.0])

    def test_degenerate_embedding(self):
        with pytest.raises(DegenerateEmbeddingError, match="degenerate embedding"):
            mlp_forward(linear(np.eye(2), normalize=True), [0.0, 0.0])

    def test_unit_norm_outputs(self, rng):
        net = random_mlp(rng, [4, 8, 3], normalize_output=True)
        norms = np.linalg.norm(mlp_forward(net, rng.standard_normal((50, 4))), axis=1)
        assert np.all(np.abs(norms - 1) <= 1e-9)

    def test_layers_must_chain(self):
        with pytest.raises(ValueError, match="chain"):
            Mlp((Layer(np.eye(2), np.zeros(2)), Layer(np.eye(3), np.zeros(3))))

    def test_rejects_bad_activation(self):
        with pytest.raises(ValueError):
            Layer(np.eye(2), np.zeros(2), "sigmoid")

    def test_weights_read_only(self):
        layer = Layer(np.eye(2), np.zeros(2))
        with pytest.raises(ValueError):
            layer.weight[0, 0] = 5.0


class TestGradInput:
    def test_identity(self):
        np.testing.assert_array_equal(mlp_grad_input(linear(np.eye(2)), [0.3, 0.1], [1.0, 0.0]),
                                      [1.0, 0.0])

    def test_linear_transpose(self):
        g = mlp_grad_input(linear([[2, 0], [0, 3]]), [1.0, 1.0], [1.0, 1.0])
        np.testing.assert_array_equal(g, [2.0, 3.0])

    @pytest.mark.parametrize("normalize", [False, True])
    @pytest.mark.parametrize("act", ["tanh", "identity"])
    def test_matches_finite_differences(self, rng, act, normalize):
        net = random_mlp(rng, [4, 6, 5, 3], activation=act, normalize_output=normalize)
        x, u = rng.standard_normal(4), rng.standard_normal(3)
        fd = finite_difference_grad(lambda z: mlp_forward(net, z) @ u, x, h=1e-5)
        g = mlp_grad_input(net, x, u)
        assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) <= 1e-5

    def test_relu_away_from_kinks(self, rng):
        net = random_mlp(rng, [4, 8, 3], activation="relu")
        while True:
            x = rng.standard_normal(4)
            pre = net.layers[0].weight @ x + net.layers[0].bias
            if np.min(np.abs(pre)) >= 1e-4:
                break
        u = rng.standard_normal(3)
        fd = finite_difference_grad(lambda z: mlp_forward(net, z) @ u, x, h=1e-6)
        np.testing.assert_allclose(mlp_grad_input(net, x, u), fd, rtol=1e-5, atol=1e-8)

    def test_upstream_mismatch(self):
        with pytest.raises(ValueError):
            mlp_grad_input(linear(np.eye(2)), [1.0, 1.0], [1.0, 1.0, 1.0])


class TestCosine:
    @pytest.mark.parametrize("a,b,want", [([1, 0], [1, 0], 1.0), ([1, 0], [0, 1], 0.0),
                                          ([1, 2], [2, 4], 1.0)])
    def test_examples(self, a, b, want):
        assert cosine_similarity(a, b) == pytest.approx(want, abs=1e-15)

    def test_zero_vector(self):
        with pytest.raises(ValueError):
            cosine_similarity([0, 0], [1, 0])

    def test_grad_examples(self):
        np.testing.assert_array_equal(cosine_similarity_grad([1.0, 0.0], [1.0, 0.0]), [0.0, 0.0])
        np.testing.assert_array_equal(cosine_similarity_grad([0.0, 1.0], [1.0, 0.0]), [1.0, 0.0])

    def test_grad_matches_fd(self, rng):
        a, b = rng.standard_normal((2, 5))
        fd = finite_difference_grad(lambda x: cosine_similarity(x, b), a)
        np.testing.assert_allclose(cosine_similarity_grad(a, b), fd, atol=1e-6)

    @given(finite_vec)
    def test_self_similarity(self, a):
        if np.linalg.norm(a) < 1e-3:
            return
        assert cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-12)

    @given(finite_vec, st.floats(1e-3, 1e3))
    def test_positive_scale_invariance(self, a, c):
        if np.linalg.norm(a) < 1e-3:
            return
        b = np.roll(a, 1) + 0.5
        if np.linalg.norm(b) < 1e-3:
            return
        assert cosine_similarity(a, c * b) == pytest.approx(cosine_similarity(a, b), abs=1e-12)


class TestFiniteDifference:
    def test_square(self):
        g = finite_difference_grad(lambda x: x[0] ** 2, np.array([3.0]), h=1e-5)
        assert abs(g[0] - 6.0) <= 1e-6

    def test_constant(self):
        np.testing.assert_array_equal(finite_difference_grad(lambda x: 2.0, np.ones(3)), 0.0)

    def test_bad_step(self):
        with pytest.raises(ValueError):
            finite_difference_grad(lambda x: 0.0, np.ones(2), h=0.0)


class TestDuality:
    def test_identity_bitwise(self):
        x = np.array([5.0, 7.0])
        np.testing.assert_array_equal(dual_layer_forward(np.eye(2), np.zeros(2), x),
                                      np.tanh(x))

    def test_bias_only(self):
        out = dual_layer_forward(np.zeros((2, 3)), np.ones(2), np.array([1.0, -2.0, 4.0]))
        np.testing.assert_array_equal(out, np.tanh([1.0, 1.0]))

    def test_random_layer(self, rng):
        w, b, x = rng.standard_normal((4, 3)), rng.standard_normal(4), rng.standard_normal(3)
        layer = Layer(w, b, "tanh")
        assert np.max(np.abs(dual_layer_forward(w, b, x) - layer_forward(layer, x))) <= 1e-12

    def test_mismatch(self):
        with pytest.raises(ValueError):
            dual_layer_forward(np.eye(2), np.zeros(2), np.ones(3))


class TestSerialization:
    def test_round_trip_bit_exact(self, rng):
        net = random_mlp(rng, [3, 7, 2], normalize_output=True)
        back = mlp_from_json(mlp_to_json(net))
        assert back.normalize_output and back.dims == net.dims
        for a, b in zip(net.layers, back.layers):
            assert a.activation == b.activation
            np.testing.assert_array_equal(a.weight, b.weight)
            np.testing.assert_array_equal(a.bias, b.bias)

    def test_document_shape(self, rng):
        doc = json.loads(mlp_to_json(random_mlp(rng, [2, 3])))
        assert set(doc) == {"version", "dims", "layers", "normalize_output"}
        assert set(doc["layers"][0]) == {"w", "b", "act"}

    def test_rejects_version(self, rng):
        doc = json.loads(mlp_to_json(random_mlp(rng, [2, 3])))
        doc["version"] = 99
        with pytest.raises(ValueError):
            mlp_from_json(json.dumps(doc))
