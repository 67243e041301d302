"""Autodiff core, layers, optimisers and finite-difference gradient checks."""

import math

import numpy as np
import pytest

from models.errors import NonFiniteError, ShapeError
from models.tensor_nn import (
    LSTM,
    SGD,
    Adam,
    AdamState,
    Attention,
    Dense,
    Embedding,
    LstmParams,
    Module,
    Parameter,
    Tensor,
    adam_step,
    attention,
    clip_grad_norm,
    concat,
    cross_entropy,
    dense,
    dropout,
    embedding_lookup,
    grad_check,
    lstm_step,
    masked_softmax,
    matmul,
    mse_loss,
    relu,
    sigmoid,
    softmax,
    stack,
    tanh,
)


def _param(rng, *shape, scale=0.5):
    return Parameter(rng.normal(0.0, scale, size=shape))


def _lstm_params(rng, hidden, inp, scale=0.5, bias=None):
    W = [_param(rng, hidden, hidden + inp, scale=scale) for _ in range(4)]
    if bias is None:
        b = [_param(rng, hidden, scale=scale) for _ in range(4)]
    else:
        b = [Parameter(np.full(hidden, v)) for v in bias]
    return LstmParams(*W, *b, hidden_size=hidden)


def _zero_lstm(hidden, inp):
    W = [Parameter(np.zeros((hidden, hidden + inp))) for _ in range(4)]
    b = [Parameter(np.zeros(hidden)) for _ in range(4)]
    return LstmParams(*W, *b, hidden_size=hidden)


class TestTensor:
    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])
        with pytest.raises(NonFiniteError):
            Tensor([1.0]) / Tensor([0.0])

    def test_broadcast_gradient(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.arange(4.0), requires_grad=True)
        (a * b).sum().backward()
        np.testing.assert_array_equal(a.grad, np.tile(np.arange(4.0), (3, 1)))
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))

    def test_shared_node_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x + x
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [5.0])

    def test_no_graph_without_grad(self):
        a = Tensor(np.ones(3))
        out = a * 2.0
        assert not out.requires_grad
        assert out._prev == ()

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestGradients:
    def test_quadratic_exact(self, rng):
        x = _param(rng, 5)
        assert grad_check(lambda: (x * x).sum() * 3.0, [x]) < 1e-8

    @pytest.mark.parametrize("op", [sigmoid, tanh, lambda t: softmax(t, axis=-1)])
    def test_elementwise(self, rng, op):
        x = _param(rng, 3, 4)
        w = Tensor(rng.normal(size=(3, 4)))
        assert grad_check(lambda: (op(x) * w).sum(), [x]) < 1e-6

    def test_relu_away_from_kink(self, rng):
        x = Parameter(rng.choice([-1.0, 1.0], size=(4, 3)) * rng.uniform(0.1, 1.0, size=(4, 3)))
        assert grad_check(lambda: (relu(x) * relu(x)).sum(), [x]) < 1e-6

    def test_dense_and_mse(self, rng):
        x = Tensor(rng.normal(size=(6, 4)))
        W, b = _param(rng, 4, 3), _param(rng, 3)
        y = rng.normal(size=(6, 3))
        assert grad_check(lambda: mse_loss(dense(x, W, b), y), [W, b]) < 1e-6

    def test_indexing_concat_stack(self, rng):
        x = _param(rng, 4, 5)
        y = _param(rng, 4, 2)

        def fn():
            z = concat([x[:, 1:4], y], axis=1)
            s = stack([z[0], z[2] * 2.0, z[1, ::-1]], axis=0)
            return (s * s).mean() + x[np.array([0, 0, 3]), 2].sum()
        assert grad_check(fn, [x, y]) < 1e-6

    def test_division_power_transpose(self, rng):
        a = Parameter(rng.uniform(0.5, 2.0, size=(3, 2)))
        b = Parameter(rng.uniform(0.5, 2.0, size=(3, 2)))
        assert grad_check(lambda: ((a / b) ** 3).T.sum() + (1.0 - a).reshape(6).sum(), [a, b]) < 1e-6

    def test_embedding_lookup(self, rng):
        table = _param(rng, 5, 3)
        ids = np.array([[0, 4, 4], [2, 0, 1]])
        w = Tensor(rng.normal(size=(2, 3, 3)))
        assert grad_check(lambda: (embedding_lookup(table, ids) * w).sum(), [table]) < 1e-6

    def test_cross_entropy(self, rng):
        logits = _param(rng, 5, 7)
        targets = rng.integers(0, 7, size=5)
        assert grad_check(lambda: cross_entropy(logits, targets), [logits]) < 1e-6

    def test_masked_softmax(self, rng):
        x = _param(rng, 3, 6)
        mask = np.array([[False, True, True, True, False, True],
                         [True] * 6,
                         [False] * 5 + [True]])
        w = Tensor(rng.normal(size=(3, 6)))
        assert grad_check(lambda: (masked_softmax(x, mask) * w).sum(), [x]) < 1e-6

    def test_attention(self, rng):
        seq = _param(rng, 2, 5, 4)
        score = _param(rng, 4)
        mask = np.array([[False, False, True, True, True], [True] * 5])
        w = Tensor(rng.normal(size=(2, 5, 4)))
        assert grad_check(lambda: (attention(seq, mask, score)[0] * w).sum(), [seq, score]) < 1e-4

    @pytest.mark.parametrize("act", ["tanh", "relu"])
    def test_lstm_step(self, rng, act):
        params = _lstm_params(rng, 3, 2)
        x = _param(rng, 4, 2)
        h0, c0 = _param(rng, 4, 3), _param(rng, 4, 3)
        target = rng.normal(size=(4, 3))

        def fn():
            h, c = lstm_step(params, x, h0, c0, act)
            return mse_loss(h, target) + (c * c).mean()
        tensors = [params.W_f, params.W_i, params.W_C, params.W_o,
                   params.b_f, params.b_i, params.b_C, params.b_o, x, h0, c0]
        assert grad_check(fn, tensors) < 1e-4

    @pytest.mark.parametrize("act", ["tanh", "relu"])
    def test_lstm_over_padded_sequence(self, rng, act):
        lstm = LSTM(3, 4, rng, activation_name=act)
        seq = _param(rng, 2, 5, 3)
        mask = np.array([[False, False, True, True, True], [False, True, True, True, True]])
        target = rng.normal(size=(2, 4))
        assert grad_check(lambda: mse_loss(lstm(seq, mask), target), lstm.trainable_parameters() + [seq]) < 1e-4

    def test_no_gradient_through_masked_steps(self, rng):
        lstm = LSTM(3, 4, rng, activation_name="tanh")
        seq = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
        mask = np.array([[False, False, True, True, True], [False, True, True, True, True]])
        lstm(seq, mask).sum().backward()
        assert not seq.grad[0, :2].any()
        assert not seq.grad[1, :1].any()
        assert seq.grad[0, 2:].any()


class TestLstmStep:
    def test_zero_weights_zero_state(self):
        h, c = lstm_step(_zero_lstm(3, 2), np.ones((1, 2)), np.zeros((1, 3)), np.zeros((1, 3)))
        assert not h.data.any() and not c.data.any()

    def test_zero_weights_closed_form(self):
        v = np.array([[0.3, -1.2, 2.0]])
        h, c = lstm_step(_zero_lstm(3, 2), np.ones((1, 2)), np.zeros((1, 3)), v)
        np.testing.assert_allclose(c.data, 0.5 * v, rtol=1e-15)
        np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * v), rtol=1e-15)

    def test_matches_scalar_loop(self, rng):
        hidden, inp = 4, 3
        p = _lstm_params(rng, hidden, inp)
        x, h0, c0 = rng.normal(size=(1, inp)), rng.normal(size=(1, hidden)), rng.normal(size=(1, hidden))
        h, c = lstm_step(p, x, h0, c0)

        z = list(h0[0]) + list(x[0])
        sig = lambda a: 1.0 / (1.0 + math.exp(-a))

        def gate(W, b, u):
            return sum(W.data[u, j] * z[j] for j in range(len(z))) + b.data[u]
        for u in range(hidden):
            f = sig(gate(p.W_f, p.b_f, u))
            i = sig(gate(p.W_i, p.b_i, u))
            cand = math.tanh(gate(p.W_C, p.b_C, u))
            o = sig(gate(p.W_o, p.b_o, u))
            c_u = f * c0[0, u] + i * cand
            assert c.data[0, u] == pytest.approx(c_u, abs=1e-12)
            assert h.data[0, u] == pytest.approx(o * math.tanh(c_u), abs=1e-12)

    @pytest.mark.parametrize("act", ["tanh", "relu"])
    def test_gating_carousel(self, rng, act):
        p = _lstm_params(rng, 5, 3, scale=0.1, bias=[100.0, -100.0, 0.0, 0.0])
        c0 = rng.normal(size=(2, 5))
        _, c = lstm_step(p, rng.normal(size=(2, 3)), rng.normal(size=(2, 5)), c0, act)
        np.testing.assert_array_equal(c.data, c0)

    def test_masked_rows_carry_state(self, rng):
        p = _lstm_params(rng, 3, 2)
        h0, c0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        h, c = lstm_step(p, rng.normal(size=(2, 2)), h0, c0, step_mask=np.array([False, True]))
        np.testing.assert_array_equal(h.data[0], h0[0])
        np.testing.assert_array_equal(c.data[0], c0[0])
        assert not np.array_equal(h.data[1], h0[1])

    def test_shape_checks(self, rng):
        with pytest.raises(ShapeError):
            lstm_step(_lstm_params(rng, 3, 2), np.ones((1, 4)), np.zeros((1, 3)), np.zeros((1, 3)))
        with pytest.raises(ShapeError):
            LstmParams(*[Parameter(np.zeros((3, 3)))] * 4, *[Parameter(np.zeros(3))] * 4, hidden_size=3)


class TestAttentionAndSoftmax:
    def test_identical_steps_uniform(self, rng):
        seq = Tensor(np.tile(rng.normal(size=4), (1, 5, 1)))
        _, w = attention(seq, np.ones((1, 5), dtype=bool), Tensor(rng.normal(size=4)))
        np.testing.assert_allclose(w.data, 0.2, rtol=1e-12)

    def test_single_valid_step(self, rng):
        mask = np.array([[False, False, False, True]])
        weighted, w = attention(Tensor(rng.normal(size=(1, 4, 3))), mask, Tensor(rng.normal(size=3)))
        assert w.data.tolist() == [[0.0, 0.0, 0.0, 1.0]]
        assert not weighted.data[0, :3].any()

    def test_matches_direct_softmax(self, rng):
        seq = rng.normal(size=(5, 4))
        score = rng.normal(size=4)
        _, w = attention(Tensor(seq[None]), np.ones((1, 5), dtype=bool), Tensor(score))
        s = seq @ score
        expected = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
        np.testing.assert_allclose(w.data[0], expected, rtol=1e-12)
        assert w.data.sum() == pytest.approx(1.0, abs=1e-12)

    def test_all_masked(self, rng):
        with pytest.raises(ShapeError):
            Attention(3, rng)(Tensor(rng.normal(size=(1, 2, 3))), np.zeros((1, 2), dtype=bool))

    def test_softmax_properties(self):
        np.testing.assert_allclose(softmax(Tensor(np.zeros((2, 4)))).data, 0.25)
        np.testing.assert_allclose(softmax(Tensor([[1000.0, 0.0]])).data, [[1.0, 0.0]], atol=1e-300)
        p = softmax(Tensor(np.random.default_rng(0).normal(size=(10, 6)) * 20)).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


class TestDropout:
    def test_identity_cases(self, rng):
        x = Tensor(rng.normal(size=(3, 3)))
        assert dropout(x, 0.0, training=True, rng=rng) is x
        assert dropout(x, 0.7, training=False) is x

    def test_expectation(self, rng):
        out = dropout(Tensor(np.ones(100_000)), 0.5, training=True, rng=rng).data
        assert set(np.unique(out)) <= {0.0, 2.0}
        assert out.mean() == pytest.approx(1.0, rel=0.02)

    def test_bad_probability(self, rng):
        with pytest.raises(ValueError):
            dropout(Tensor(np.ones(3)), 1.0, training=True, rng=rng)


class TestAdam:
    def test_zero_gradient_first_step(self):
        p = np.array([1.0, -2.0])
        (new,) = adam_step(AdamState(), [p], [np.zeros(2)])
        np.testing.assert_array_equal(new, p)

    def test_constant_gradient_first_step(self):
        (new,) = adam_step(AdamState(lr=1e-3), [np.array([0.5])], [np.array([1.0])])
        assert new[0] == pytest.approx(0.5 - 1e-3 / (1.0 + 1e-8), abs=1e-15)

    def test_two_steps_match_scalar_reference(self, rng):
        p0 = rng.normal(size=4)
        g1, g2 = rng.normal(size=4), rng.normal(size=4)
        state = AdamState(lr=0.01)
        (p1,) = adam_step(state, [p0], [g1])
        (p2,) = adam_step(state, [p1], [g2])

        for j in range(4):
            p, m, v = p0[j], 0.0, 0.0
            for t, g in ((1, g1[j]), (2, g2[j])):
                m = 0.9 * m + 0.1 * g
                v = 0.999 * v + 0.001 * g * g
                p = p - 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            assert p2[j] == pytest.approx(p, abs=1e-12)
        assert state.step == 2

    def test_non_finite_gradient_aborts(self):
        state = AdamState()
        with pytest.raises(NonFiniteError):
            adam_step(state, [np.zeros(2)], [np.array([np.inf, 0.0])])
        assert state.step == 0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step(AdamState(), [np.zeros(2)], [np.zeros(3)])

    def test_optimizer_minimises_quadratic(self, rng):
        x = _param(rng, 3, scale=2.0)
        opt = Adam([x], lr=0.05)
        for _ in range(500):
            opt.zero_grad()
            (x * x).sum().backward()
            opt.step()
        np.testing.assert_allclose(x.data, 0.0, atol=1e-2)


class TestModules:
    class _Tiny(Module):
        def __init__(self, rng):
            super().__init__()
            self.emb = Embedding(4, 2, rng, trainable=False)
            self.out = Dense(2, 1, rng)

        def forward(self, ids):
            return self.out(self.emb(ids))

    def test_named_parameters(self, rng):
        net = self._Tiny(rng)
        assert [n for n, _ in net.named_parameters()] == ["emb.weight", "out.weight", "out.bias"]
        assert len(net.trainable_parameters()) == 2

    def test_frozen_parameters_get_no_gradient(self, rng):
        net = self._Tiny(rng)
        net(np.array([0, 3])).sum().backward()
        assert net.emb.weight.grad is None
        assert net.out.weight.grad is not None

    def test_state_dict_round_trip(self, rng):
        a, b = self._Tiny(rng), self._Tiny(np.random.default_rng(99))
        b.load_state_dict(a.state_dict())
        ids = np.array([1, 2])
        np.testing.assert_array_equal(a(ids).data, b(ids).data)

    def test_state_dict_key_mismatch(self, rng):
        net = self._Tiny(rng)
        state = net.state_dict()
        state.pop("out.bias")
        with pytest.raises(ShapeError):
            net.load_state_dict(state)

    def test_train_eval_flags(self, rng):
        net = self._Tiny(rng)
        net.eval()
        assert not net.training and not net.out.training
        net.train()
        assert net.emb.training

    def test_sgd_momentum(self):
        x = Parameter(np.array([1.0]))
        opt = SGD([x], lr=0.1, momentum=0.5)
        for _ in range(2):
            opt.zero_grad()
            (x * 1.0).sum().backward()
            opt.step()
        # v1 = -0.1, v2 = 0.5 * -0.1 - 0.1
        assert x.data[0] == pytest.approx(1.0 - 0.1 - 0.15)

    def test_clip_grad_norm(self):
        a, b = Parameter(np.zeros(2)), Parameter(np.zeros(1))
        a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
        assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
        total = math.sqrt(float(np.sum(a.grad ** 2) + np.sum(b.grad ** 2)))
        assert total == pytest.approx(1.0, rel=1e-9)
