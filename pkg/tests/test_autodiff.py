"""Tape engine: forward correctness against scalar oracles, gradients
against central finite differences, and the reversal-node contract."""

import math

import numpy as np
import pytest

from langsep import autodiff as ad
from langsep.errors import ContractError, NumericError, ShapeError


def triple_loop_matmul(a, b):
    """Naive O(n^3) reference multiply."""
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def grad_of(build, arrays):
    """Run build(tensors) -> scalar on a fresh tape, return (value, grads)."""
    tape = ad.Tape()
    tensors = {name: tape.watch(arr) for name, arr in arrays.items()}
    loss = build(tensors)
    gmap = ad.backward(tape, loss)
    return loss.item(), {name: gmap.get(t.node, np.zeros_like(t.data))
                         for name, t in tensors.items()}


class TestMatmul:
    def test_identity_right(self):
        a = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(a, ad.Tensor(np.eye(2)))
        assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_identity_left(self):
        out = ad.matmul(ad.Tensor(np.eye(2)), ad.Tensor([[5.0], [7.0]]))
        assert np.array_equal(out.data, [[5.0], [7.0]])

    def test_random_case_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(42)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        out = ad.matmul(ad.Tensor(a), ad.Tensor(b)).data
        assert np.allclose(out, triple_loop_matmul(a, b), atol=1e-12)
        # golden entries frozen from the oracle
        assert out[0, 0] == pytest.approx(0.63688722, abs=1e-8)
        assert out[2, 1] == pytest.approx(-0.16799613, abs=1e-8)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


class TestForwardOracles:
    def test_row_softmax_uniform(self):
        out = ad.row_softmax(ad.Tensor(np.full((1, 4), 3.7)))
        assert np.allclose(out.data, 0.25, atol=1e-15)

    def test_row_std_constant_row_hits_eps_guard(self):
        out = ad.row_std(ad.Tensor([[1.0, 1.0, 1.0, 1.0]]), eps=1e-8)
        assert out.data[0, 0] == pytest.approx(math.sqrt(1e-8), rel=1e-12)

    def test_tanh_matches_scalar_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3))
        out = ad.tanh(ad.Tensor(x)).data
        for i in range(2):
            for j in range(3):
                assert out[i, j] == pytest.approx(math.tanh(x[i, j]), abs=1e-15)

    def test_l2_normalize_zero_row_is_finite(self):
        out = ad.l2_normalize(ad.Tensor(np.zeros((1, 3))), eps=1e-8)
        assert np.all(np.isfinite(out.data))
        assert np.allclose(out.data, 0.0)

    def test_concat_rows_stacks(self):
        out = ad.concat_rows([ad.Tensor([[1.0, 2.0]]), ad.Tensor([[3.0, 4.0]])])
        assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


class TestBackwardTrivials:
    def test_sum_gradient_is_ones(self):
        _, grads = grad_of(lambda t: ad.sum_all(t["x"]),
                           {"x": np.arange(6.0).reshape(2, 3)})
        assert np.array_equal(grads["x"], np.ones((2, 3)))

    def test_dot_self_gradient_is_2x(self):
        x = np.arange(1.0, 7.0).reshape(2, 3)
        _, grads = grad_of(lambda t: ad.dot(t["x"], t["x"]), {"x": x.copy()})
        assert np.allclose(grads["x"], 2.0 * x, atol=1e-15)

    def test_non_scalar_loss_rejected(self):
        tape = ad.Tape()
        x = tape.watch(np.ones((2, 2)))
        y = ad.tanh(x)
        with pytest.raises(ContractError):
            ad.backward(tape, y)

    def test_reused_input_accumulates(self):
        # f(x) = sum(x) + sum(x) so df/dx = 2
        def build(t):
            return ad.add(ad.sum_all(t["x"]), ad.sum_all(t["x"]))
        _, grads = grad_of(build, {"x": np.ones((2, 2))})
        assert np.array_equal(grads["x"], np.full((2, 2), 2.0))


def _fd(build, arrays, step=1e-5):
    def loss_fn(params):
        return grad_of(build, params)
    return ad.finite_difference_check(loss_fn, arrays, step)


# each primitive wrapped into a scalar loss; inputs are kept away from
# kinks (relu, abs) so the finite differences are valid
PRIMITIVE_CASES = {
    "matmul": lambda t: ad.sum_all(ad.tanh(ad.matmul(t["a"], t["b"]))),
    "add": lambda t: ad.dot(ad.add(t["a2"], t["b2"]), t["c2"]),
    "sub": lambda t: ad.dot(ad.sub(t["a2"], t["b2"]), t["c2"]),
    "scale": lambda t: ad.sum_all(ad.tanh(ad.scale(t["a2"], 1.7))),
    "add_row_vector": lambda t: ad.sum_all(ad.tanh(ad.add_row_vector(t["a2"], t["row"]))),
    "elementwise_mul": lambda t: ad.sum_all(ad.tanh(ad.elementwise_mul(t["a2"], t["b2"]))),
    "elementwise_div": lambda t: ad.sum_all(ad.tanh(ad.elementwise_div(t["a2"], t["pos"]))),
    "mul_scalar": lambda t: ad.sum_all(ad.tanh(ad.mul_scalar(t["a2"], t["s"]))),
    "add_scalar": lambda t: ad.sum_all(ad.tanh(ad.add_scalar(t["a2"], t["s"]))),
    "tanh": lambda t: ad.sum_all(ad.elementwise_mul(ad.tanh(t["a2"]), t["b2"])),
    "relu": lambda t: ad.sum_all(ad.elementwise_mul(ad.relu(t["offkink"]), t["b2"])),
    "absolute": lambda t: ad.sum_all(ad.elementwise_mul(ad.absolute(t["offkink"]), t["b2"])),
    "transpose": lambda t: ad.sum_all(ad.tanh(ad.transpose(t["a2"]))),
    "row_sum": lambda t: ad.sum_all(ad.tanh(ad.row_sum(t["a2"]))),
    "row_mean": lambda t: ad.sum_all(ad.tanh(ad.row_mean(t["a2"]))),
    "row_std": lambda t: ad.sum_all(ad.tanh(ad.row_std(t["a2"]))),
    "col_mean": lambda t: ad.sum_all(ad.tanh(ad.col_mean(t["a2"]))),
    "col_std": lambda t: ad.sum_all(ad.tanh(ad.col_std(t["a2"]))),
    "row_softmax": lambda t: ad.sum_all(ad.elementwise_mul(ad.row_softmax(t["a2"]), t["b2"])),
    "dot": lambda t: ad.dot(t["a2"], t["b2"]),
    "l2_normalize": lambda t: ad.sum_all(ad.elementwise_mul(ad.l2_normalize(t["a2"]), t["b2"])),
    "mean_all": lambda t: ad.mean_all(ad.elementwise_mul(t["a2"], t["a2"])),
    "concat_rows": lambda t: ad.sum_all(ad.tanh(ad.concat_rows([t["a2"], t["b2"]]))),
    "gradient_reversal": lambda t: ad.sum_all(
        ad.tanh(ad.gradient_reversal(t["a2"], active=False))),
    "softmax_cross_entropy": lambda t: ad.softmax_cross_entropy(t["a2"], [2, 0, 1]),
}


def _primitive_arrays(rng):
    a2 = rng.normal(size=(3, 4))
    return {
        "a": rng.normal(size=(3, 4)),
        "b": rng.normal(size=(4, 2)),
        "a2": a2,
        "b2": rng.normal(size=(3, 4)),
        "c2": rng.normal(size=(3, 4)),
        "pos": rng.uniform(0.5, 2.0, size=(3, 4)),
        "offkink": np.where(np.abs(a2) < 0.1, a2 + 0.3, a2),
        "row": rng.normal(size=(1, 4)),
        "s": rng.normal(size=(1, 1)),
    }


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    for seed in range(3):
        rng = np.random.default_rng((1000, seed))
        arrays = _primitive_arrays(rng)
        err = _fd(PRIMITIVE_CASES[name], arrays)
        assert err < 1e-4, f"{name} seed {seed}: fd error {err}"


class TestGradientReversal:
    def test_forward_is_identity(self):
        x = np.array([[1.0, 2.0, 3.0]])
        assert np.array_equal(ad.gradient_reversal(ad.Tensor(x), True).data, x)
        assert np.array_equal(ad.gradient_reversal(ad.Tensor(x), False).data, x)

    def _upstream(self, active):
        # loss = dot(grl(x), c): upstream gradient into x is +-c
        tape = ad.Tape()
        x = tape.watch(np.array([[0.5, -1.0, 2.0]]))
        c = ad.Tensor([[0.5, -1.0, 2.0]])
        loss = ad.dot(ad.gradient_reversal(x, active=active), c)
        return ad.backward(tape, loss)[x.node]

    def test_backward_sign_flip(self):
        assert np.array_equal(self._upstream(True), [[-0.5, 1.0, -2.0]])

    def test_backward_inactive_identity(self):
        assert np.array_equal(self._upstream(False), [[0.5, -1.0, 2.0]])

    def test_active_equals_minus_inactive_bitwise(self):
        rng = np.random.default_rng(7)
        x_val = rng.normal(size=(2, 5))
        w = rng.normal(size=(5, 3))

        def run(active):
            tape = ad.Tape()
            x = tape.watch(x_val)
            h = ad.tanh(ad.matmul(ad.gradient_reversal(x, active), ad.Tensor(w)))
            loss = ad.mean_all(ad.elementwise_mul(h, h))
            return ad.backward(tape, loss)[x.node]

        assert np.array_equal(run(True), -run(False))


class TestFiniteDifferenceCheck:
    def test_quadratic_is_nearly_exact(self):
        def loss_fn(params):
            return grad_of(lambda t: ad.dot(t["x"], t["x"]), params)
        rng = np.random.default_rng(3)
        err = ad.finite_difference_check(loss_fn, {"x": rng.normal(size=(2, 3))})
        assert err < 1e-6

    def test_composite_mlp(self):
        rng = np.random.default_rng(11)
        arrays = {
            "x": rng.normal(size=(4, 3)),
            "w1": rng.normal(size=(3, 5)),
            "b1": rng.normal(size=(1, 5)),
            "w2": rng.normal(size=(5, 2)),
        }

        def build(t):
            h = ad.tanh(ad.add_row_vector(ad.matmul(t["x"], t["w1"]), t["b1"]))
            return ad.softmax_cross_entropy(ad.matmul(h, t["w2"]), [0, 1, 1, 0])

        assert _fd(build, arrays) < 1e-4

    def test_grl_wrapped_ce_is_exact_negation(self):
        rng = np.random.default_rng(13)
        x_val = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 3))

        def run(active):
            tape = ad.Tape()
            x = tape.watch(x_val)
            logits = ad.matmul(ad.gradient_reversal(x, active), ad.Tensor(w))
            loss = ad.softmax_cross_entropy(logits, [0, 2, 1])
            return ad.backward(tape, loss)[x.node]

        assert np.array_equal(run(True), -run(False))

    def test_nonpositive_step_rejected(self):
        with pytest.raises(ContractError):
            ad.finite_difference_check(lambda p: (0.0, {}), {"x": np.ones((1, 1))},
                                       step=0.0)

    def test_non_finite_loss_rejected(self):
        def loss_fn(params):
            return float("nan"), {}
        with pytest.raises(NumericError):
            ad.finite_difference_check(loss_fn, {"x": np.ones((1, 1))})


class TestDeterminism:
    def test_forward_replay_bit_identical(self):
        def run():
            rng = np.random.default_rng(99)
            tape = ad.Tape()
            x = tape.watch(rng.normal(size=(3, 4)))
            w = tape.watch(rng.normal(size=(4, 4)))
            h = ad.row_softmax(ad.matmul(ad.tanh(x), w))
            loss = ad.mean_all(h)
            grads = ad.backward(tape, loss)
            return h.data.copy(), grads[w.node].copy()

        h1, g1 = run()
        h2, g2 = run()
        assert np.array_equal(h1, h2)
        assert np.array_equal(g1, g2)

    def test_mixed_tapes_rejected(self):
        t1, t2 = ad.Tape(), ad.Tape()
        with pytest.raises(ContractError):
            ad.add(t1.watch(np.ones((1, 1))), t2.watch(np.ones((1, 1))))
