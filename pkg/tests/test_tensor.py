import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deskformer import tensor as T
from deskformer.gradcheck import finite_diff_check
from deskformer.tensor import DimensionError, GradientRecord, Tensor


def numeric_grad(f, x, h=1e-6):
    """Plain central differences on a numpy array, independent of the tape."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)

    def test_hand_product(self):
        out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]]))
        np.testing.assert_array_equal(out.data, [[17], [39]])

    def test_zero_annihilates(self):
        rng = np.random.default_rng(0)
        out = T.matmul(Tensor(rng.normal(size=(3, 4))), Tensor(np.zeros((4, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((3, 2)))

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_associativity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b, c = (Tensor(rng.normal(size=(4, 4))) for _ in range(3))
            left = T.matmul(T.matmul(a, b), c).data
            right = T.matmul(a, T.matmul(b, c)).data
            np.testing.assert_allclose(left, right, atol=1e-9, rtol=0)


class TestRelu:
    def test_sign_cases(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_all_negative(self):
        np.testing.assert_array_equal(T.relu(Tensor([-3.0, -0.5])).data, [0, 0])

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
    def test_idempotent(self, xs):
        x = Tensor(xs)
        np.testing.assert_array_equal(T.relu(T.relu(x)).data, T.relu(x).data)

    def test_gradient_at_zero_is_zero(self):
        x = Tensor([0.0, 1.0, -1.0], requires_grad=True)
        T.backward(T.relu(x).sum())
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])

    def test_large_logits_do_not_overflow(self):
        out = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)

    def test_log_ratios(self):
        out = T.softmax_rows(Tensor([[np.log(1), np.log(2), np.log(3)]])).data
        np.testing.assert_allclose(out, [[1 / 6, 2 / 6, 3 / 6]], rtol=1e-14)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            out = T.softmax_rows(Tensor(rng.uniform(-50, 50, size=(7, 9)))).data
            assert np.all(out >= 0)
            np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        T.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_matmul_weight_grad_matches_differences(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 4))
        w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        T.backward(T.matmul(Tensor(x), w).sum())
        expected = numeric_grad(lambda wv: float((x @ wv).sum()), w.data.copy())
        np.testing.assert_allclose(w.grad, expected, rtol=1e-7, atol=1e-9)
        np.testing.assert_allclose(w.grad, x.T @ np.ones((3, 2)), rtol=1e-12)

    def test_unreachable_leaf_gets_zeros(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([[3.0]], requires_grad=True)
        T.backward((x * x).sum(), params=[x, y])
        np.testing.assert_array_equal(y.grad, np.zeros((1, 1)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            T.backward(x * 2)

    def test_record_visits_each_op_once(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        h = x * x
        loss = (h + h).sum()
        record = GradientRecord.trace(loss)
        ids = [id(n) for n in record.nodes]
        assert len(ids) == len(set(ids))
        assert record.nodes[-1] is loss
        assert record.leaves == [x]
        T.backward(loss, record)
        np.testing.assert_array_equal(x.grad, 4 * x.data)

    def test_shared_subexpression_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        T.backward((y * y).sum())  # x^4
        np.testing.assert_allclose(x.grad, [4 * 27.0])

    def test_no_grad_builds_no_graph(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * 2
        assert not y.requires_grad and y.is_leaf

    def test_broadcast_gradient_reduces(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        T.backward((a * b).sum())
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


class TestFiniteDiffCheck:
    def test_quadratic_is_exact(self):
        p = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
        report = finite_diff_check(lambda: (p * p * 3.0 + p).sum(), [p], epsilon=1e-5)
        assert report.passed
        assert report.max_rel_error < 1e-8

    def test_zero_gradient_uses_absolute_fallback(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        q = Tensor([5.0], requires_grad=True)
        report = finite_diff_check(lambda: (p * p).sum() + (q * 0.0).sum(), {"p": p, "q": q})
        assert report.passed
        assert report.params[1].max_abs_error == 0.0

    def test_detects_wrong_gradient(self):
        p = Tensor([1.0, 2.0], requires_grad=True)

        def f():
            out = (p * p).sum()
            # sabotage the recorded derivative
            out._backward = lambda g: (g * 0.5,)
            return out

        assert not finite_diff_check(f, [p]).passed

    def test_kink_crossing_is_skipped(self):
        p = Tensor([1e-8, 1.0], requires_grad=True)
        report = finite_diff_check(lambda: T.relu(p).sum(), [p], epsilon=1e-6)
        assert report.params[0].skipped == 1
        assert report.passed

    @pytest.mark.parametrize("seed", range(10))
    def test_every_elementary_op(self, seed):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        c = Tensor(rng.uniform(0.5, 2.0, size=(3, 5)), requires_grad=True)
        v = Tensor(rng.normal(size=5), requires_grad=True)
        ids = rng.integers(0, 3, size=(2, 2))

        def f():
            h = T.matmul(a, b) + v
            s = T.softmax_rows(h) * c
            ls = T.log_softmax_rows(h).sum() * 0.1
            r = T.relu(h) * T.exp(h * 0.1) + T.power(c, 1.5) + T.log(c) + T.reciprocal(c)
            cat = T.concat([r, s], axis=0)
            picked = T.take_rows(a, ids).sum() + a[1:, ::2].sum()
            tr = T.transpose(cat).reshape(-1, 2).mean(axis=0).sum()
            sp = T.softplus(h).sum() + T.abs_(h).sum() * 0.3
            ce = T.cross_entropy(h, [0, 2, 4])
            w = T.where(h.data > 0.2, h, c).sum()
            return tr + picked + ls + sp + ce + w + (s.sum(axis=1) * s.sum(axis=1)).sum()

        report = finite_diff_check(f, {"a": a, "b": b, "c": c, "v": v}, seed=seed)
        assert report.passed, report.summary()


def test_forward_is_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        loss = T.softmax_rows(T.relu(x @ w)).sum() + (x @ w).mean()
        T.backward(loss)
        return loss.data.tobytes() + w.grad.tobytes()

    assert run() == run()
