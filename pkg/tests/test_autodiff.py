import numpy as np
import pytest

from rftag import autodiff as ad
from rftag.autodiff import (
    AdamState,
    BatchNormState,
    Tape,
    Tensor,
    adam_step,
    add,
    backward,
    batchnorm2d,
    bce_with_logits,
    conv2d,
    linear,
    mul,
    pool2d,
    relu,
    reshape,
    sigmoid,
    sum_all,
)

from oracles import (
    finite_difference_grads,
    max_relative_error,
    naive_conv2d,
    naive_matmul,
)


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        out = conv2d(x, w)
        np.testing.assert_array_equal(out.data, x.data)

    def test_all_ones_sum_oracle(self):
        x = np.ones((1, 1, 4, 4))
        w = np.ones((1, 1, 3, 3))
        out = conv2d(Tensor(x), Tensor(w))
        assert out.shape == (1, 1, 2, 2)
        np.testing.assert_allclose(out.data, 9.0)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w))

    def test_shape_formula(self):
        x = Tensor(np.zeros((2, 3, 8, 8)))
        w = Tensor(np.zeros((4, 3, 3, 3)))
        out = conv2d(x, w, stride=(2, 2), padding=(1, 1))
        assert out.shape == (2, 4, 4, 4)

    def test_matches_naive_oracle_random(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 6, 5))
        w = rng.standard_normal((4, 3, 3, 2))
        b = rng.standard_normal(4)
        got = conv2d(t64(x), t64(w), t64(b), stride=(2, 1), padding=(1, 1))
        want = naive_conv2d(x, w, b, stride=(2, 1), padding=(1, 1))
        np.testing.assert_allclose(got.data, want, rtol=1e-12)

    def test_channel_mismatch_names_both_shapes(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        w = Tensor(np.zeros((1, 3, 3, 3)))
        with pytest.raises(ValueError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
            conv2d(x, w)

    def test_kernel_exceeds_padded_extent(self):
        with pytest.raises(ValueError, match="exceeds"):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_linearity(self):
        rng = np.random.default_rng(1)
        w = t64(rng.standard_normal((2, 2, 3, 3)))
        x = rng.standard_normal((1, 2, 6, 6))
        y = rng.standard_normal((1, 2, 6, 6))
        a, b = 1.7, -0.4
        lhs = conv2d(t64(a * x + b * y), w, padding=(1, 1)).data
        rhs = a * conv2d(t64(x), w, padding=(1, 1)).data + b * conv2d(t64(y), w, padding=(1, 1)).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestBatchNorm:
    def test_constant_input_zero_output(self):
        x = Tensor(np.full((2, 3, 4, 4), 5.0))
        state = BatchNormState()
        out = batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), state)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_affine_definition(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 2, 3, 3))
        eps = 1e-5
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        want = 2.0 * (x - mu[None, :, None, None]) / np.sqrt(var[None, :, None, None] + eps) + 1.0
        out = batchnorm2d(t64(x), t64(2 * np.ones(2)), t64(np.ones(2)), BatchNormState(), eps=eps)
        np.testing.assert_allclose(out.data, want, rtol=1e-10)

    def test_moment_check(self):
        rng = np.random.default_rng(3)
        x = t64(rng.standard_normal((2, 3, 4, 4)) * 3 + 1)
        gamma = t64(np.array([1.0, 2.0, 0.5]))
        beta = t64(np.array([0.0, 1.0, -1.0]))
        out = batchnorm2d(x, gamma, beta, BatchNormState()).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), beta.data, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), gamma.data ** 2, atol=1e-4)

    def test_eval_without_stats_errors(self):
        x = Tensor(np.zeros((1, 2, 2, 2)))
        with pytest.raises(ValueError, match="running statistics"):
            batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), BatchNormState(), mode="eval")

    def test_eval_uses_running_stats(self):
        state = BatchNormState.identity(2)
        x = Tensor(np.ones((1, 2, 2, 2)))
        out = batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), state, eps=1e-5, mode="eval")
        np.testing.assert_allclose(out.data, 1.0 / np.sqrt(1 + 1e-5), rtol=1e-6)


class TestElementwise:
    def test_relu(self):
        out = relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_zero(self):
        assert sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_ln3(self):
        out = sigmoid(t64([np.log(3.0)]))
        np.testing.assert_allclose(out.data, 0.75, rtol=1e-12)

    def test_sigmoid_extremes_finite(self):
        out = sigmoid(Tensor([-1e4, 1e4])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-12)


class TestPool:
    def test_global_avg_constant(self):
        out = pool2d(Tensor(np.full((1, 2, 3, 3), 4.25)), "global_avg")
        assert out.shape == (1, 2, 1, 1)
        np.testing.assert_allclose(out.data, 4.25)

    def test_max_pool(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = pool2d(x, "max", kernel=(2, 2), stride=(2, 2))
        assert out.data.reshape(-1)[0] == 4.0

    def test_avg_pool(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = pool2d(x, "avg", kernel=(2, 2), stride=(2, 2))
        assert out.data.reshape(-1)[0] == 2.5

    def test_kernel_too_large_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            pool2d(Tensor(np.zeros((1, 1, 2, 2))), "max", kernel=(3, 3))


class TestLinear:
    def test_identity(self):
        x = np.arange(6, dtype=np.float64).reshape(2, 3)
        out = linear(t64(x), t64(np.eye(3)), t64(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_worked_example(self):
        out = linear(t64([[1.0, 2.0]]), t64([[1.0], [1.0]]), t64([3.0]))
        np.testing.assert_array_equal(out.data, [[6.0]])

    def test_matches_naive_matmul(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((3, 5))
        b = rng.standard_normal((5, 2))
        out = linear(t64(a), t64(b))
        np.testing.assert_allclose(out.data, naive_matmul(a, b), atol=1e-12)

    def test_extent_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestBCE:
    def test_zero_logits(self):
        z = t64(np.zeros((2, 3)))
        y = t64(np.random.default_rng(5).uniform(size=(2, 3)))
        out = bce_with_logits(z, y)
        np.testing.assert_allclose(out.data, np.log(2.0), rtol=1e-12)

    def test_confident_correct(self):
        out = bce_with_logits(t64([[10.0]]), t64([[1.0]]))
        np.testing.assert_allclose(out.data, np.log1p(np.exp(-10.0)), rtol=1e-10)
        assert abs(out.item() - 4.54e-5) < 1e-6

    def test_symmetric_target_zero_grad(self):
        z = t64([[0.0]], requires_grad=True)
        with Tape():
            loss = bce_with_logits(z, t64([[0.5]]))
        backward(loss)
        np.testing.assert_allclose(z.grad, 0.0, atol=1e-15)

    def test_target_out_of_range_rejected(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            bce_with_logits(Tensor([[0.0]]), Tensor([[1.5]]))

    def test_nonnegative_and_converges_to_zero(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            z = t64(rng.standard_normal((3, 4)) * 5)
            y = t64(rng.uniform(size=(3, 4)))
            assert bce_with_logits(z, y).item() >= 0.0
        big = bce_with_logits(t64([[30.0, -30.0]]), t64([[1.0, 0.0]]))
        assert big.item() < 1e-12


class TestBackward:
    def test_sum_gives_ones(self):
        x = t64(np.random.default_rng(7).standard_normal((2, 3)), requires_grad=True)
        with Tape():
            loss = sum_all(x)
        backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_sum_of_squares(self):
        x = t64([1.0, -2.0], requires_grad=True)
        with Tape():
            loss = sum_all(mul(x, x))
        backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, -4.0], rtol=1e-12)

    def test_non_scalar_rejected(self):
        x = t64([1.0, 2.0], requires_grad=True)
        with Tape():
            y = mul(x, x)
        with pytest.raises(ValueError, match="scalar"):
            backward(y)

    def test_disconnected_loss_rejected(self):
        with pytest.raises(ValueError, match="tape"):
            backward(Tensor([1.0]))

    def test_accumulation_across_calls(self):
        x = t64([3.0], requires_grad=True)
        for _ in range(2):
            with Tape():
                loss = sum_all(mul(x, x))
            backward(loss)
        np.testing.assert_allclose(x.grad, [12.0])
        x.zero_grad()
        assert x.grad is None

    def test_tape_topological_order(self):
        x = t64([1.0], requires_grad=True)
        with Tape() as tape:
            y = mul(x, x)
            z = add(y, x)
            loss = sum_all(z)
        positions = {id(r.output): r.index for r in tape.records}
        for rec in tape.records:
            for tin in rec.inputs:
                if id(tin) in positions:
                    assert positions[id(tin)] < rec.index
        assert loss._record.index == len(tape) - 1

    def test_diamond_graph_visits_each_node_once(self):
        # d(x*x + x*x)/dx = 4x; double-counting a shared node would give 8x
        x = t64([2.0], requires_grad=True)
        with Tape():
            y = mul(x, x)
            loss = sum_all(add(y, y))
        backward(loss)
        np.testing.assert_allclose(x.grad, [8.0])  # d(2*x^2)/dx = 4x = 8

    def test_eval_mode_records_nothing(self):
        x = t64([1.0], requires_grad=True)
        y = mul(x, x)  # no active tape
        assert y._record is None and not y.requires_grad


class TestGradcheck:
    """Finite-difference checks for every differentiable op (64-bit)."""

    def check(self, make_loss, params, tol=1e-4, step=1e-5):
        for p in params:
            p.zero_grad()
        with Tape():
            loss = make_loss()
        backward(loss)
        numeric = finite_difference_grads(lambda: float(make_loss().data), params, step=step)
        for p, num in zip(params, numeric):
            err = max_relative_error(p.grad, num)
            assert err < tol, f"gradient mismatch: rel err {err:.2e}"

    def test_conv2d_grads(self):
        rng = np.random.default_rng(10)
        x = t64(rng.standard_normal((2, 2, 5, 5)), requires_grad=True)
        w = t64(rng.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True)
        b = t64(rng.standard_normal(3), requires_grad=True)
        tgt = t64(rng.uniform(size=(2, 3, 3, 3)))

        def loss():
            out = conv2d(x, w, b, stride=(2, 2), padding=(1, 1))
            return bce_with_logits(out, tgt)

        self.check(loss, [x, w, b])

    def test_batchnorm_grads(self):
        rng = np.random.default_rng(11)
        x = t64(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        gamma = t64(rng.uniform(0.5, 1.5, size=2), requires_grad=True)
        beta = t64(rng.standard_normal(2), requires_grad=True)

        def loss():
            state = BatchNormState()
            out = batchnorm2d(x, gamma, beta, state, eps=1e-3)
            return sum_all(mul(out, out))

        self.check(loss, [x, gamma, beta])

    def test_pool_grads(self):
        rng = np.random.default_rng(12)
        x = t64(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
        for kind in ("max", "avg"):
            def loss(kind=kind):
                out = pool2d(x, kind, kernel=(2, 2), stride=(2, 2))
                return sum_all(mul(out, out))
            self.check(loss, [x])

    def test_global_pool_linear_sigmoid_grads(self):
        rng = np.random.default_rng(13)
        x = t64(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        w = t64(rng.standard_normal((3, 2)), requires_grad=True)
        b = t64(rng.standard_normal(2), requires_grad=True)

        def loss():
            pooled = pool2d(x, "global_avg")
            flat = reshape(pooled, (2, 3))
            out = sigmoid(linear(flat, w, b))
            return sum_all(mul(out, out))

        self.check(loss, [x, w, b])

    def test_relu_grads(self):
        rng = np.random.default_rng(14)
        # keep values away from the kink at 0
        x = t64(np.sign(rng.standard_normal((3, 4))) * rng.uniform(0.5, 2.0, (3, 4)),
                requires_grad=True)

        def loss():
            return sum_all(mul(relu(x), relu(x)))

        self.check(loss, [x])

    def test_composed_networks_many_seeds(self):
        # three few-layer networks, >= 10 seeds total
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            x = t64(rng.standard_normal((2, 1, 6, 6)), requires_grad=True)
            w1 = t64(rng.standard_normal((2, 1, 3, 3)) * 0.5, requires_grad=True)
            b1 = t64(rng.standard_normal(2) * 0.1, requires_grad=True)
            gamma = t64(rng.uniform(0.8, 1.2, 2), requires_grad=True)
            beta = t64(rng.standard_normal(2) * 0.1, requires_grad=True)
            w2 = t64(rng.standard_normal((2, 3)) * 0.5, requires_grad=True)
            b2 = t64(rng.standard_normal(3) * 0.1, requires_grad=True)
            tgt = t64(rng.uniform(size=(2, 3)))
            params = [x, w1, b1, gamma, beta, w2, b2]

            def loss():
                h = conv2d(x, w1, b1, padding=(1, 1))
                h = batchnorm2d(h, gamma, beta, BatchNormState(), eps=1e-3)
                h = relu(h)
                h = pool2d(h, "avg", kernel=(2, 2), stride=(2, 2))
                h = pool2d(h, "global_avg")
                h = reshape(h, (2, 2))
                z = linear(h, w2, b2)
                return bce_with_logits(z, tgt)

            self.check(loss, params)


class TestDeterminism:
    def test_forward_bit_identical(self):
        rng = np.random.default_rng(20)
        x = rng.standard_normal((2, 2, 5, 5)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        a = conv2d(Tensor(x.copy()), Tensor(w.copy()), padding=(1, 1)).data
        b = conv2d(Tensor(x.copy()), Tensor(w.copy()), padding=(1, 1)).data
        assert np.array_equal(a, b)


class TestAdam:
    def test_zero_grad_no_change(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        state = AdamState()
        adam_step({"p": p}, {"p": np.zeros(2)}, state, lr=1e-3)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])
        assert state.t == 1

    def test_first_step_is_signed_lr(self):
        for g in (0.37, -2.2, 100.0):
            p = t64([0.0], requires_grad=True)
            state = AdamState()
            adam_step({"p": p}, {"p": np.array([g])}, state, lr=1e-2)
            assert abs(p.data[0] - (-1e-2 * np.sign(g))) < 1e-6 * 1e-2

    def test_identical_params_stay_identical(self):
        rng = np.random.default_rng(21)
        init = rng.standard_normal(4)
        pa, pb = t64(init.copy(), True), t64(init.copy(), True)
        state = AdamState()
        for step in range(20):
            g = rng.standard_normal(4)
            adam_step({"a": pa, "b": pb}, {"a": g.copy(), "b": g.copy()}, state, lr=1e-3)
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_nonpositive_lr_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            adam_step({}, {}, AdamState(), lr=0.0)
