import numpy as np
import pytest

from cande.errors import ShapeError
from cande.film import (FiLMGenerator, FiLMPair, film_apply, film_backward, film_params, identity_film,
                        init_film)
from cande.models import build_autoencoder
from cande.nn import DenseLayer, GradientTape, Network, grad_check, mse_loss


def random_pair(rng, p, q):
    return FiLMPair(rng.normal(size=(p, q)), rng.normal(size=q), rng.normal(size=(p, q)), rng.normal(size=q))


class TestFilmParams:
    def test_identity_generator(self):
        gen = identity_film(4, {0: 3})
        gamma, beta = film_params(gen, np.array([0.3, -2.0, 5.0, 1.0], dtype=np.float32), 0)
        np.testing.assert_array_equal(gamma, np.ones(3))
        np.testing.assert_array_equal(beta, np.zeros(3))

    def test_onehot_selects_row(self):
        rng = np.random.default_rng(0)
        gen = FiLMGenerator(4, {2: random_pair(rng, 4, 3)})
        pair = gen.pairs[2]
        for j in range(4):
            h = np.zeros(4)
            h[j] = 1.0
            gamma, beta = film_params(gen, h, 2)
            np.testing.assert_array_equal(gamma, pair.gamma_weight[j] + pair.gamma_bias)
            np.testing.assert_array_equal(beta, pair.beta_weight[j] + pair.beta_bias)

    def test_matvec_oracle(self):
        rng = np.random.default_rng(1)
        pair = random_pair(rng, 4, 3)
        gen = FiLMGenerator(4, {0: pair})
        h = rng.normal(size=4)
        gamma, beta = film_params(gen, h, 0)
        for j in range(3):
            g = sum(h[i] * pair.gamma_weight[i, j] for i in range(4)) + pair.gamma_bias[j]
            b = sum(h[i] * pair.beta_weight[i, j] for i in range(4)) + pair.beta_bias[j]
            assert gamma[j] == pytest.approx(g, rel=1e-13)
            assert beta[j] == pytest.approx(b, rel=1e-13)

    def test_batched_rows(self):
        rng = np.random.default_rng(2)
        gen = FiLMGenerator(3, {0: random_pair(rng, 3, 5)})
        hs = rng.normal(size=(4, 3))
        gamma, _ = film_params(gen, hs, 0)
        for i in range(4):
            np.testing.assert_allclose(gamma[i], film_params(gen, hs[i], 0)[0], rtol=1e-12, atol=1e-14)

    def test_wrong_context_length(self):
        with pytest.raises(ShapeError):
            film_params(identity_film(4, {0: 3}), np.zeros(5), 0)

    def test_unknown_layer(self):
        with pytest.raises(KeyError):
            film_params(identity_film(4, {0: 3}), np.zeros(4), 1)

    def test_init_starts_at_unit_scale_zero_shift(self):
        gen = init_film(np.random.default_rng(3), 5, {0: 4, 1: 2})
        for pair in gen.pairs.values():
            assert np.all(pair.gamma_bias == 1) and np.all(pair.beta_bias == 0)
            assert pair.gamma_weight.any()


class TestFilmApply:
    def test_identity(self):
        z = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(film_apply(z, np.ones(3), np.zeros(3)), z)

    def test_zero_scale_returns_shift(self):
        beta = np.array([0.5, -1.0, 2.0])
        np.testing.assert_array_equal(film_apply(np.array([9.0, 8.0, 7.0]), np.zeros(3), beta), beta)

    def test_elementwise_arithmetic(self):
        out = film_apply(np.array([1.0, -2.0, 3.0]), np.array([2.0, 0.5, -1.0]), np.array([0.0, 1.0, 1.0]))
        np.testing.assert_array_equal(out, [2.0, 0.0, -2.0])

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            film_apply(np.zeros(3), np.ones(2), np.zeros(3))


class TestFilmBackward:
    def test_identity_pass_through(self):
        rng = np.random.default_rng(4)
        pair = FiLMPair(np.zeros((2, 3)), np.ones(3), np.zeros((2, 3)), np.zeros(3))
        up = rng.normal(size=(5, 3))
        g = film_backward(up, rng.normal(size=(5, 3)), np.ones((5, 3)), rng.normal(size=(5, 2)), pair)
        np.testing.assert_array_equal(g.z, up)

    def test_shift_gradient_is_masked_upstream(self):
        rng = np.random.default_rng(5)
        layer = DenseLayer(rng.normal(size=(3, 4)), rng.normal(size=4), "relu")
        gen = init_film(rng, 2, {0: 4}, np.float64)
        net = Network([layer], gen)
        x, h = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
        tape = GradientTape()
        net.forward(x, h, tape=tape)
        mask = tape.modulated[0] > 0
        up = rng.normal(size=(6, 4))
        grads = net.backward(tape, up)
        np.testing.assert_allclose(grads["film.0.beta_bias"], (up * mask).sum(axis=0), rtol=1e-13)

    def test_context_gradient_computed(self):
        rng = np.random.default_rng(6)
        pair = random_pair(rng, 3, 4)
        up, z, h = rng.normal(size=(2, 4)), rng.normal(size=(2, 4)), rng.normal(size=(2, 3))
        gamma = h @ pair.gamma_weight + pair.gamma_bias
        g = film_backward(up, z, gamma, h, pair)
        expect = (up * z) @ pair.gamma_weight.T + up @ pair.beta_weight.T
        np.testing.assert_allclose(g.h, expect, rtol=1e-13)

    def test_conditioned_layer_vs_finite_differences(self):
        rng = np.random.default_rng(7)
        layer = DenseLayer(rng.normal(size=(4, 3)), rng.normal(size=3), "relu")
        net = Network([layer, DenseLayer(rng.normal(size=(3, 4)), rng.normal(size=4), "sigmoid")],
                      init_film(rng, 3, {0: 3}, np.float64))
        x = rng.uniform(size=(5, 4))
        h = rng.normal(size=(5, 3))
        assert grad_check(net, x, lambda o: mse_loss(x, o), h) < 1e-4


def test_identity_film_makes_cande_equal_plain():
    rng = np.random.default_rng(8)
    cande = build_autoencoder(12, (8, 4), encodings={0: np.eye(3)[0], 1: np.eye(3)[1], 2: np.eye(3)[2]}, seed=3)
    cande.network.film = identity_film(3, cande.network.film.widths())
    plain = build_autoencoder(12, (8, 4), seed=3)
    plain.network.set_params({k: v for k, v in cande.network.params().items() if k.startswith("layers.")})
    x = rng.uniform(size=(20, 12)).astype(np.float32)
    for c in range(3):
        assert cande.reconstruct(x, contexts=np.full(20, c)).tobytes() == plain.reconstruct(x).tobytes()


def test_every_hidden_layer_is_conditioned():
    model = build_autoencoder(10, (8, 6, 4), encodings={0: np.eye(2)[0], 1: np.eye(2)[1]})
    n_layers = len(model.network.layers)
    assert model.network.film.layers == list(range(n_layers - 1))
    assert len(model.network.film.pairs) == n_layers - 1
