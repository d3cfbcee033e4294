import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal
from scipy.special import log_softmax, softmax

from mmtcbn import numcore as nc
from mmtcbn.errors import (
    DeterminismError,
    EmptySupportError,
    ParameterError,
    ShapeError,
    VocabularyError,
)


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def check_grad(op, *shapes, seed=0, positive=False, tol=1e-6):
    """Compare the backward pass of ``sum(op(*xs) * w)`` to central differences."""
    nc.set_precision("double")
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    ts = [nc.Tensor(x, requires_grad=True) for x in xs]
    out = op(*ts)
    w = rng.normal(size=out.shape)
    nc.sum(out * nc.Tensor(w)).backward()
    for x, t in zip(xs, ts):
        num = numeric_grad(lambda: float((op(*[nc.Tensor(v) for v in xs]).data * w).sum()), x)
        np.testing.assert_allclose(t.grad, num, rtol=tol, atol=tol)


class TestPrecision:
    def test_default_single(self):
        assert nc.get_dtype() is np.float32
        assert nc.tensor([1.0, 2.0]).data.dtype == np.float32

    def test_double_context_restores(self):
        with nc.precision("double"):
            assert nc.tensor([1.0]).data.dtype == np.float64
        assert nc.precision_name() == "single"

    def test_unknown_mode(self):
        with pytest.raises(ParameterError):
            nc.set_precision("half")

    def test_no_grad_records_nothing(self):
        a = nc.Tensor(np.ones(3), requires_grad=True)
        with nc.no_grad():
            b = nc.tanh(a) * 2.0
        assert not b.requires_grad
        assert nc.grad_enabled()


class TestBroadcast:
    def test_vector_on_last_axis(self):
        out = nc.add(np.ones((2, 3)), np.arange(3.0))
        assert out.shape == (2, 3)

    def test_scalar(self):
        assert nc.mul(np.ones((2, 3)), 2.0).shape == (2, 3)

    def test_size_one_expansion(self):
        assert nc.add(np.ones((2, 1, 4)), np.ones((2, 3, 4))).shape == (2, 3, 4)

    def test_incompatible_raises(self):
        with pytest.raises(ShapeError):
            nc.add(np.ones((2, 3)), np.ones((3, 2)))

    def test_leading_axis_vector_rejected(self):
        with pytest.raises(ShapeError):
            nc.add(np.ones((2, 3)), np.ones(2))

    def test_inputs_never_mutated(self):
        a = np.ones((2, 3))
        t = nc.Tensor(a.copy(), requires_grad=True)
        before = t.data.copy()
        nc.sum(nc.tanh(t) * t).backward()
        np.testing.assert_array_equal(t.data, before)


class TestGradients:
    @pytest.mark.parametrize("op", [nc.add, nc.sub, nc.mul])
    def test_binary_same_shape(self, op):
        check_grad(op, (3, 4), (3, 4))

    @pytest.mark.parametrize("op", [nc.add, nc.mul, nc.div])
    def test_binary_broadcast(self, op):
        check_grad(op, (2, 3, 4), (4,), positive=True)
        check_grad(op, (2, 3, 4), (2, 1, 4), positive=True)

    @pytest.mark.parametrize("op", [nc.tanh, nc.sigmoid, nc.exp, nc.neg])
    def test_unary(self, op):
        check_grad(op, (3, 5))

    def test_log(self):
        check_grad(nc.log, (3, 4), positive=True)

    def test_relu_away_from_kink(self):
        nc.set_precision("double")
        x = np.array([[-1.0, 0.5], [2.0, -0.3]])
        t = nc.Tensor(x, requires_grad=True)
        nc.sum(nc.relu(t)).backward()
        np.testing.assert_array_equal(t.grad, (x > 0).astype(float))

    def test_matmul_2d_and_batched(self):
        check_grad(nc.matmul, (3, 4), (4, 2))
        check_grad(nc.matmul, (2, 3, 4), (4, 5))
        check_grad(nc.matmul, (2, 3, 4), (2, 4, 5))

    def test_reductions_and_views(self):
        check_grad(lambda a: nc.sum(a, axis=1), (3, 4))
        check_grad(lambda a: nc.mean(a, axis=0, keepdims=True), (3, 4))
        check_grad(lambda a: nc.reshape(a, (4, 3)), (3, 4))
        check_grad(lambda a: nc.transpose(a, (1, 0, 2)), (2, 3, 4))
        check_grad(lambda a: a[:, 1:3], (3, 4))

    def test_concat_and_stack(self):
        check_grad(lambda a, b: nc.concat([a, b], axis=-1), (2, 3), (2, 2))
        check_grad(lambda a, b: nc.stack([a, b], axis=1), (2, 3), (2, 3))

    def test_layer_norm(self):
        check_grad(lambda x, g, b: nc.layer_norm(x, g, b, 1e-5), (4, 6), (6,), (6,), tol=1e-5)

    def test_batch_normalize(self):
        check_grad(lambda x: nc.batch_normalize(x, 1e-5)[0], (2, 3, 3, 4), tol=1e-5)

    def test_conv2d(self):
        for stride in (1, 2):
            for pad in ("same", "valid"):
                check_grad(lambda x, k: nc.conv2d(x, k, stride, pad), (2, 5, 5, 2), (3, 3, 2, 3))

    def test_max_pools(self):
        check_grad(lambda x: nc.max_pool2d(x, 3, 2), (2, 5, 5, 2))
        check_grad(nc.global_max_pool, (2, 4, 4, 3))

    def test_softmax_masked(self):
        mask = np.array([[1, 1, 0, 1], [1, 0, 0, 0.0]])
        check_grad(lambda s: nc.softmax_masked(s, mask), (2, 4))

    def test_ratio_normalize(self):
        check_grad(lambda s: nc.ratio_normalize(s, np.ones((2, 3))), (2, 3))

    def test_embedding_accumulates_repeated_ids(self):
        nc.set_precision("double")
        table = nc.Tensor(np.zeros((4, 2)), requires_grad=True)
        nc.sum(nc.embedding(table, np.array([[1, 1, 3]]))).backward()
        np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])

    def test_cross_entropy_matches_reference(self):
        nc.set_precision("double")
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(2, 3, 5))
        y = rng.integers(5, size=(2, 3))
        w = np.array([[1, 1, 0], [1, 0, 0.0]])
        t = nc.Tensor(logits, requires_grad=True)
        loss = nc.cross_entropy(t, y, w)
        ref = -(np.take_along_axis(log_softmax(logits, -1), y[..., None], -1)[..., 0] * w).sum() / w.sum()
        assert float(loss.data) == pytest.approx(ref, rel=1e-12)
        loss.backward()
        onehot = np.eye(5)[y]
        np.testing.assert_allclose(t.grad, (softmax(logits, -1) - onehot) * w[..., None] / w.sum(), atol=1e-12)

    def test_shared_subexpression_gradients_add(self):
        nc.set_precision("double")
        a = nc.Tensor(np.array([1.5, -2.0]), requires_grad=True)
        b = nc.tanh(a)
        nc.sum(b * b + b).backward()
        t = np.tanh(a.data)
        np.testing.assert_allclose(a.grad, (2 * t + 1) * (1 - t ** 2))


class TestOpsForward:
    def test_conv2d_matches_scipy_correlate(self, double):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 6, 6, 2))
        k = rng.normal(size=(3, 3, 2, 4))
        out = nc.conv2d(x, k, 1, "same").data
        for o in range(4):
            ref = sum(signal.correlate2d(x[0, :, :, c], k[:, :, c, o], mode="same") for c in range(2))
            np.testing.assert_allclose(out[0, :, :, o], ref, atol=1e-12)

    def test_conv_output_size(self):
        assert nc.conv_output_size(224, 7, 2, "same") == 112
        assert nc.conv_output_size(7, 3, 1, "valid") == 5
        assert nc.conv_output_size(7, 3, 2, "same") == 4

    def test_max_pool_values(self):
        x = np.arange(16.0).reshape(1, 4, 4, 1)
        out = nc.max_pool2d(x, 2, 2, "valid").data[0, :, :, 0]
        np.testing.assert_array_equal(out, [[5, 7], [13, 15]])

    def test_softmax_masked_zeros_and_sums(self):
        s = np.array([[1.0, 2.0, 3.0]])
        w = nc.softmax_masked(s, np.array([[1, 0, 1.0]])).data
        assert w[0, 1] == 0.0
        assert w.sum() == pytest.approx(1.0, abs=1e-6)

    def test_softmax_large_scores_stable(self):
        w = nc.softmax_masked(np.array([[1e4, 1e4 - 1.0]]), np.ones((1, 2))).data
        assert np.isfinite(w).all()

    def test_softmax_all_masked_raises(self):
        with pytest.raises(EmptySupportError):
            nc.softmax_masked(np.ones((1, 3)), np.zeros((1, 3)))

    def test_embedding_out_of_range(self):
        with pytest.raises(VocabularyError):
            nc.embedding(np.zeros((3, 2)), np.array([3]))

    def test_dropout_inverted_scaling(self):
        rng = np.random.default_rng(0)
        out = nc.dropout(np.ones((200, 200)), 0.5, rng).data
        assert set(np.unique(out)) <= {0.0, 2.0}
        assert abs(out.mean() - 1.0) < 0.02
        np.testing.assert_array_equal(nc.dropout(np.ones(3), 0.5, None).data, np.ones(3))

    def test_cross_entropy_empty_support(self):
        with pytest.raises(EmptySupportError):
            nc.cross_entropy(np.zeros((1, 2, 3)), np.zeros((1, 2), int), np.zeros((1, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(2, 6), st.integers(0, 10 ** 6))
def test_softmax_masked_properties(B, N, seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=(B, N)) * 5
    mask = (rng.random((B, N)) < 0.7).astype(float)
    mask[:, 0] = 1.0
    w = nc.softmax_masked(scores, mask).data.astype(np.float64)
    assert np.all(w[mask == 0] == 0.0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
    shifted = nc.softmax_masked(scores + 3.25, mask).data
    np.testing.assert_allclose(shifted, w, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(0, 10 ** 6))
def test_matmul_gradient_property(m, k, seed):
    check_grad(nc.matmul, (m, k), (k, 2), seed=seed)


class TestParameters:
    def test_store_rejects_duplicates(self):
        store = nc.ParamStore()
        store.add("w", np.zeros(2))
        with pytest.raises(ParameterError):
            store.add("w", np.zeros(2))

    def test_trainable_flag_controls_grad(self):
        p = nc.Parameter("p", np.ones(2), trainable=False)
        assert not p.value.requires_grad
        p.trainable = True
        assert p.value.requires_grad

    def test_cast(self):
        store = nc.ParamStore()
        store.add("w", np.ones(2))
        store.cast(np.float64)
        assert store["w"].data.dtype == np.float64


class TestFiniteDifference:
    def _setup(self):
        nc.set_precision("double")
        p = nc.Parameter("w", np.array([0.3, -0.7, 1.1]))
        frozen = nc.Parameter("f", np.array([2.0]), trainable=False)
        return p, frozen

    def test_correct_gradient_passes(self):
        p, frozen = self._setup()
        rep = nc.finite_difference_check(lambda: nc.sum(nc.tanh(p.value) * frozen.value), [p, frozen])
        assert rep.passed(1e-6)
        assert "f" not in rep.per_param

    def test_sign_flip_detected(self, monkeypatch):
        p, _ = self._setup()
        orig = nc.tanh

        def bad_tanh(a):
            out = orig(a)
            inner = out._backward
            out._backward = lambda g: inner(-g)
            return out

        rep = nc.finite_difference_check(lambda: nc.sum(bad_tanh(p.value)), [p])
        assert not rep.passed(1e-4)

    def test_bad_eps(self):
        p, _ = self._setup()
        with pytest.raises(ParameterError):
            nc.finite_difference_check(lambda: nc.sum(p.value), [p], eps=0.0)

    def test_single_precision_rejected(self):
        p = nc.Parameter("w", np.ones(2, dtype=np.float32))
        with pytest.raises(ParameterError):
            nc.finite_difference_check(lambda: nc.sum(p.value), [p])

    def test_nondeterministic_rejected(self):
        p, _ = self._setup()
        rng = np.random.default_rng(0)
        with pytest.raises(DeterminismError):
            nc.finite_difference_check(lambda: nc.sum(p.value) + float(rng.normal()), [p])
