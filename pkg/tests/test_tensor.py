import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magegraph.errors import DataError, GradientStateError, ParameterError, ShapeError
from magegraph.model import ModelConfig, forward, init_parameters
from magegraph.tensor import (
    Tape,
    Tensor,
    add,
    concat,
    dropout,
    grad_check,
    matmul,
    mul,
    relu,
    sigmoid,
    take,
    tsum,
    weighted_bce_with_logits,
)


def central_diff(f, x, eps=1e-5):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(a, b).data, [[1, 2], [3, 4]])

    def test_row_times_column(self):
        assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_gradient_of_sum(self):
        b = np.array([[2.0, 3.0], [4.0, 5.0]])
        a = Tensor(np.eye(2), requires_grad=True)
        tsum(matmul(a, Tensor(b))).backward()
        fd = central_diff(lambda x: float((x @ b).sum()), np.eye(2))
        np.testing.assert_allclose(fd, [[5, 9], [5, 9]], atol=1e-8)
        np.testing.assert_allclose(a.grad, fd, atol=1e-8)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestRelu:
    def test_values(self):
        assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_all_negative(self):
        x = Tensor([-3.0, -1.0], requires_grad=True)
        y = relu(x)
        tsum(y).backward()
        assert y.data.tolist() == [0.0, 0.0]
        assert x.grad.tolist() == [0.0, 0.0]

    def test_gradient_at_three(self):
        x = Tensor([3.0], requires_grad=True)
        tsum(relu(x)).backward()
        assert x.grad[0] == 1.0
        assert central_diff(lambda v: float(np.maximum(v, 0).sum()), [3.0])[0] == pytest.approx(1.0)


class TestSigmoid:
    def test_zero(self):
        assert sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_saturation(self):
        v = sigmoid(Tensor([50.0, 700.0, -700.0])).data
        # 1 - 1e-20 rounds to 1.0 in float64, so the lower bound is inclusive
        assert 1 - 1e-20 <= v[0] <= 1.0
        assert v[2] >= 0.0
        assert np.all(np.isfinite(v))

    def test_gradient_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        tsum(sigmoid(x)).backward()
        assert x.grad[0] == pytest.approx(0.25, abs=1e-15)


class TestConcat:
    def test_values(self):
        assert concat(Tensor([[1.0]]), Tensor([[2.0, 3.0]])).data.tolist() == [[1.0, 2.0, 3.0]]

    def test_empty_right(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(concat(a, Tensor(np.zeros((2, 0)))).data, a.data)

    def test_backward_splits(self):
        a = Tensor([[1.0]], requires_grad=True)
        b = Tensor([[2.0, 3.0]], requires_grad=True)
        tsum(concat(a, b)).backward()
        assert a.grad.tolist() == [[1.0]]
        assert b.grad.tolist() == [[1.0, 1.0]]

    def test_leading_mismatch(self):
        with pytest.raises(ShapeError):
            concat(Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1))))


class TestDropout:
    def test_eval_is_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert dropout(x, 0.5, False, None) is x

    def test_p_zero(self):
        x = Tensor(np.arange(6.0))
        np.testing.assert_array_equal(dropout(x, 0.0, True, np.random.default_rng(0)).data, x.data)

    def test_mean_preserved(self):
        out = dropout(Tensor(np.ones(10**6)), 0.2, True, np.random.default_rng(123)).data
        assert 0.99 <= out.mean() <= 1.01
        assert set(np.unique(out)) <= {0.0, 1.25}

    def test_rejects_p_one(self):
        with pytest.raises(ParameterError):
            dropout(Tensor([1.0]), 1.0, True, np.random.default_rng(0))


class TestWeightedBCE:
    def test_confident_correct(self):
        assert weighted_bce_with_logits(Tensor([40.0]), [1], (1, 1)).item() < 1e-15

    def test_zero_logit(self):
        assert weighted_bce_with_logits(Tensor([0.0]), [1], (1, 1)).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_weighted(self):
        # 3 ln 2 by direct evaluation
        assert weighted_bce_with_logits(Tensor([0.0]), [1], (1, 3)).item() == pytest.approx(2.0794415416798357,
                                                                                              abs=1e-12)

    def test_non_binary_label(self):
        with pytest.raises(DataError):
            weighted_bce_with_logits(Tensor([0.0]), [0.5], (1, 1))

    @given(st.lists(st.floats(-500, 500), min_size=1, max_size=20), st.data())
    @settings(max_examples=50, deadline=None)
    def test_finite_over_range(self, logits, data):
        labels = data.draw(st.lists(st.sampled_from([0, 1]), min_size=len(logits), max_size=len(logits)))
        x = Tensor(logits, requires_grad=True)
        loss = weighted_bce_with_logits(x, labels, (0.7, 2.5))
        loss.backward()
        assert math.isfinite(loss.item())
        assert np.all(np.isfinite(x.grad))

    def test_gradient_matches_fd(self):
        y = np.array([0, 1, 1, 0.0])

        def f(t):
            return weighted_bce_with_logits(t, y, (0.6, 3.0))

        assert grad_check(f, np.array([-2.0, 0.3, 4.0, 1.5])) < 1e-8


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        tsum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        tsum(mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])
        np.testing.assert_allclose(central_diff(lambda v: float((v * v).sum()), [1.0, 2.0]), [2.0, 4.0], atol=1e-8)

    def test_accumulates_over_uses(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        tsum(add(mul(x, 3.0), mul(x, 4.0))).backward()
        np.testing.assert_allclose(x.grad, [7.0, 7.0])

    def test_shared_subexpression_equals_unrolled(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=(3, 3))
        xv = rng.normal(size=(2, 3))
        x = Tensor(xv, requires_grad=True)
        h = relu(matmul(x, Tensor(w)))
        tsum(mul(h, h) + h).backward()
        # unrolled: a fresh copy of the subexpression per use
        x2 = Tensor(xv, requires_grad=True)
        h1 = relu(matmul(x2, Tensor(w)))
        h2 = relu(matmul(x2, Tensor(w)))
        h3 = relu(matmul(x2, Tensor(w)))
        tsum(mul(h1, h2) + h3).backward()
        np.testing.assert_allclose(x.grad, x2.grad, rtol=1e-12)

    def test_twice_is_error(self):
        x = Tensor([1.0], requires_grad=True)
        loss = tsum(mul(x, x))
        loss.backward()
        with pytest.raises(GradientStateError):
            loss.backward()

    def test_stale_grad_is_error(self):
        x = Tensor([1.0], requires_grad=True)
        tsum(x).backward()
        with pytest.raises(GradientStateError):
            tsum(mul(x, 2.0)).backward()
        x.zero_grad()
        tsum(mul(x, 2.0)).backward()
        assert x.grad[0] == 2.0

    def test_non_scalar(self):
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0], requires_grad=True).backward()

    def test_tape_is_topological(self):
        x = Tensor([[1.0, 2.0]], requires_grad=True)
        w = Tensor([[1.0], [1.0]], requires_grad=True)
        out = tsum(sigmoid(matmul(x, w)))
        tape = Tape.from_output(out)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        for n in tape.nodes:
            for p in n._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(n)]
        assert len(tape) == 5

    def test_take_scatter(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        tsum(take(x, [0, 0, 2])).backward()
        assert x.grad.tolist() == [2.0, 0.0, 1.0]


class TestGradCheck:
    def test_sum_of_squares(self):
        assert grad_check(lambda t: tsum(mul(t, t)), np.array([0.3, -1.2, 2.0]), 1e-5) < 1e-6

    def test_linear(self):
        c = np.array([[1.5, -2.0], [0.25, 3.0]])
        assert grad_check(lambda t: tsum(mul(t, Tensor(c))), np.ones((2, 2))) < 1e-10

    @pytest.mark.parametrize("seed", range(5))
    def test_every_op_random(self, seed):
        rng = np.random.default_rng(seed)
        m, k, n = rng.integers(1, 9, size=3)
        b = Tensor(rng.normal(size=(k, n)))
        c = Tensor(rng.normal(size=(m, 3)))
        bias = Tensor(rng.normal(size=n))
        y = rng.integers(0, 2, size=m * n)
        x0 = rng.normal(size=(m, k))
        # nudge away from relu kinks
        checks = {
            "matmul": lambda t: tsum(matmul(t, b)),
            "relu": lambda t: tsum(mul(relu(t), relu(t))),
            "sigmoid": lambda t: tsum(sigmoid(t)),
            "concat": lambda t: tsum(mul(concat(t, c), concat(t, c))),
            "bias": lambda t: tsum(sigmoid(add(matmul(t, b), bias))),
            "bce": lambda t: weighted_bce_with_logits(matmul(t, b).reshape(m * n), y, (0.8, 1.7)),
        }
        x0 = np.where(np.abs(x0) < 1e-3, 0.5, x0)
        for name, f in checks.items():
            assert grad_check(f, x0) < 1e-4, name

    def test_mlp_forward(self):
        rng = np.random.default_rng(0)
        w1, w2 = rng.normal(size=(4, 6)), rng.normal(size=(6, 1))
        err = grad_check(lambda t: tsum(sigmoid(matmul(relu(matmul(t, Tensor(w1))), Tensor(w2)))),
                         rng.normal(size=(5, 4)))
        assert err < 1e-4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_is_an_error():
    from magegraph.errors import NumericError

    with pytest.raises(NumericError):
        add(Tensor([np.inf]), Tensor([-np.inf]))


def test_determinism_forward_backward():
    cfg = ModelConfig(input_dim=3, num_layers=2, width=8)
    x = np.random.default_rng(1).normal(size=(6, 3))
    op = Tensor(np.full((6, 6), 1 / 6))

    def run():
        p = init_parameters(cfg, 4)
        res = forward(x, op, p, cfg, training=True, rng=np.random.default_rng(9))
        weighted_bce_with_logits(res.logits, [0, 1, 0, 1, 1, 0], (1, 1)).backward()
        return res.logits.data.tobytes(), b"".join(t.grad.tobytes() for t in p.values())

    assert run() == run()
