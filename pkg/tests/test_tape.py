"""Reverse-mode tape: gradient correctness, broadcasting, graph pruning."""

import numpy as np
import pytest

from gmil import tape
from gmil.backend import DIV_FORWARD_KL, DIV_REVERSE_KL, DIV_SQUARED_ERROR


def numeric_grad(fn, arrays, which, h=1e-6):
    """Central-difference gradient of scalar fn w.r.t. arrays[which]."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    grad = np.zeros_like(base[which])
    flat = grad.ravel()
    target = base[which].ravel()
    for i in range(target.size):
        orig = target[i]
        target[i] = orig + h
        up = fn(*base)
        target[i] = orig - h
        dn = fn(*base)
        target[i] = orig
        flat[i] = (up - dn) / (2 * h)
    return grad


def check_grads(build, arrays, rtol=1e-6, atol=1e-8):
    """build(params) returns a scalar Tensor; compare tape vs numeric."""
    params = [tape.parameter(a) for a in arrays]
    out = build(*params)
    assert out.data.shape == ()
    tape.backward(out)

    def scalar(*raw):
        fresh = [tape.parameter(a) for a in raw]
        return float(build(*fresh).data)

    for i, p in enumerate(params):
        num = numeric_grad(scalar, arrays, i)
        assert p.grad is not None, f"param {i} got no gradient"
        np.testing.assert_allclose(p.grad, num, rtol=rtol, atol=atol,
                                   err_msg=f"param {i}")


class TestElementwiseOps:
    def test_arithmetic_chain(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4)) + 3.0
        check_grads(lambda x, y: tape.sum_all((x * y - x) / y + (-x)), [a, b])

    def test_unary_ops(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(5,)) * 0.5
        check_grads(lambda x: tape.sum_all(tape.tanh(x)), [a])
        check_grads(lambda x: tape.sum_all(tape.sigmoid(x)), [a])
        check_grads(lambda x: tape.sum_all(tape.exp(x)), [a])
        check_grads(lambda x: tape.sum_all(tape.log(tape.exp(x))), [a])

    def test_broadcast_row_and_scalar(self):
        rng = np.random.default_rng(2)
        mat = rng.normal(size=(4, 3))
        row = rng.normal(size=(1, 3))
        check_grads(lambda m, r: tape.sum_all(m * r + r), [mat, row])
        check_grads(lambda m, s: tape.sum_all(m / s),
                    [mat, np.array(2.0)])

    def test_python_scalar_operands(self):
        a = tape.parameter(np.array([1.0, 2.0]))
        out = tape.sum_all(2.0 * a + 1.0 - a / 2.0)
        tape.backward(out)
        np.testing.assert_allclose(a.grad, [1.5, 1.5])


class TestMatmul:
    def test_rank_combinations(self):
        rng = np.random.default_rng(3)
        m23, m34 = rng.normal(size=(2, 3)), rng.normal(size=(3, 4))
        v3 = rng.normal(size=3)
        b1, b2 = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 3))
        check_grads(lambda a, b: tape.sum_all(a @ b), [m23, m34])
        check_grads(lambda a, b: tape.sum_all(a @ b), [m23, v3])
        check_grads(lambda a, b: tape.sum_all(tape.matmul(a, b)), [v3, v3])
        check_grads(lambda a, b: tape.sum_all(a @ b), [b1, b2])

    def test_unsupported_ranks_raise(self):
        a = tape.parameter(np.zeros((2, 2, 2)))
        b = tape.parameter(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            tape.matmul(a, b)


class TestShapeOps:
    def test_reductions(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(3, 5))
        check_grads(lambda x: tape.mean_all(x), [a])
        check_grads(lambda x: tape.sum_all(tape.sum_axis(x, 0)), [a])
        check_grads(lambda x: tape.sum_all(tape.mean_axis(x, 1) * [1., 2., 3.]),
                    [a])

    def test_reshape_transpose(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(2, 3, 4))
        w = rng.normal(size=(4, 3, 2))
        check_grads(
            lambda x: tape.sum_all(tape.transpose(x, (2, 1, 0)) * w), [a])
        check_grads(
            lambda x: tape.sum_all(tape.reshape(x, (6, 4))[::2]), [a])

    def test_concat_and_take(self):
        rng = np.random.default_rng(6)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
        check_grads(
            lambda x, y: tape.sum_all(tape.concat0([x, y])[1:5]), [a, b])

    def test_take_int_index_drops_axis(self):
        a = tape.parameter(np.arange(6.0).reshape(2, 3))
        out = tape.sum_all(a[1])
        tape.backward(out)
        np.testing.assert_allclose(a.grad, [[0, 0, 0], [1, 1, 1]])


class TestDenseLayers:
    def test_softmax_last(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(2, 5))
        w = rng.normal(size=(2, 5))
        check_grads(lambda x: tape.sum_all(tape.softmax_last(x) * w), [a])
        probs = tape.softmax_last(tape.constant(a)).data
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0)

    def test_layernorm(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 6))
        gain = rng.normal(size=6) + 1.0
        bias = rng.normal(size=6)
        w = rng.normal(size=(3, 6))
        check_grads(
            lambda a, g, b: tape.sum_all(tape.layernorm(a, g, b) * w),
            [x, gain, bias], rtol=1e-5, atol=1e-7)
        out = tape.layernorm(tape.constant(x), tape.constant(np.ones(6)),
                             tape.constant(np.zeros(6))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-4)

    def test_depthwise_conv1d_same(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(7, 3))
        w = rng.normal(size=(5, 3))
        mask = rng.normal(size=(7, 3))
        check_grads(
            lambda a, k: tape.sum_all(tape.depthwise_conv1d_same(a, k) * mask),
            [x, w])

    def test_depthwise_conv_rejects_even_kernel(self):
        with pytest.raises(ValueError):
            tape.depthwise_conv1d_same(tape.parameter(np.zeros((4, 2))),
                                       tape.parameter(np.zeros((2, 2))))

    def test_bce_with_logits_matches_reference(self):
        logits = np.array([-30.0, -1.0, 0.0, 2.0, 40.0])
        targets = np.array([0.0, 1.0, 1.0, 0.0, 1.0])
        out = tape.bce_with_logits(tape.constant(logits), targets).data
        p = 1.0 / (1.0 + np.exp(-np.clip(logits, -30, 30)))
        want = -(targets * np.log(np.clip(p, 1e-300, None))
                 + (1 - targets) * np.log(np.clip(1 - p, 1e-300, None)))
        np.testing.assert_allclose(out, want, rtol=1e-6, atol=1e-12)
        assert np.all(np.isfinite(out))
        check_grads(
            lambda x: tape.sum_all(tape.bce_with_logits(x, targets)),
            [np.array([-2.0, -1.0, 0.5, 2.0, 3.0])])


class TestSegmentOps:
    OFFSETS = np.array([0, 4, 5, 9], dtype=np.int64)

    def test_seg_softmax(self):
        rng = np.random.default_rng(10)
        scores = rng.normal(size=9)
        w = rng.normal(size=9)
        check_grads(
            lambda s: tape.sum_all(tape.seg_softmax(s, self.OFFSETS) * w),
            [scores])

    def test_seg_weighted_pool(self):
        rng = np.random.default_rng(11)
        feats = rng.normal(size=(9, 3))
        scores = rng.normal(size=9)
        w = rng.normal(size=(3, 3))

        def build(f, s):
            att = tape.seg_softmax(s, self.OFFSETS)
            return tape.sum_all(tape.seg_weighted_pool(f, att, self.OFFSETS) * w)

        check_grads(build, [feats, scores])

    def test_seg_colmax(self):
        rng = np.random.default_rng(12)
        feats = rng.normal(size=(9, 3))
        w = rng.normal(size=(3, 3))

        def build(f):
            out, _ = tape.seg_colmax(f, self.OFFSETS)
            return tape.sum_all(out * w)

        check_grads(build, [feats])

    def test_chain_smooth(self):
        rng = np.random.default_rng(13)
        feats = rng.normal(size=(9, 2))
        w = rng.normal(size=(9, 2))
        for rs in (False, True):
            def build(f, a):
                sm = tape.chain_smooth(f, a, self.OFFSETS, 3, rs)
                return tape.sum_all(sm * w)

            check_grads(build, [feats, np.array(0.4)])

    @pytest.mark.parametrize(
        "kind", [DIV_SQUARED_ERROR, DIV_FORWARD_KL, DIV_REVERSE_KL])
    def test_divergence_grad_hits_attention_only(self, kind):
        rng = np.random.default_rng(14)
        scores = rng.normal(size=9)
        ref = np.exp(rng.normal(size=9))
        for lo, hi in zip(self.OFFSETS[:-1], self.OFFSETS[1:]):
            ref[lo:hi] /= ref[lo:hi].sum()

        def build(s):
            att = tape.seg_softmax(s, self.OFFSETS)
            return tape.sum_all(
                tape.divergence(kind, ref, att, self.OFFSETS, 1e-12))

        check_grads(build, [scores], rtol=1e-5, atol=1e-7)


class TestGraphMechanics:
    def test_constants_never_accumulate(self):
        c = tape.constant(np.ones(3))
        p = tape.parameter(np.ones(3))
        out = tape.sum_all(c * p + c)
        tape.backward(out)
        assert c.grad is None
        np.testing.assert_allclose(p.grad, 1.0)

    def test_all_constant_graph_is_pruned(self):
        a = tape.constant(np.ones(4))
        out = tape.sum_all(tape.tanh(a) * a)
        assert not out.requires_grad and out.vjp is None

    def test_diamond_reuse_accumulates_once_per_path(self):
        p = tape.parameter(np.array(3.0))
        shared = p * p
        out = shared + shared
        tape.backward(out)
        # d/dp of 2 p^2 is 4p
        np.testing.assert_allclose(p.grad, 12.0)

    def test_deep_chain_no_recursion_limit(self):
        p = tape.parameter(np.array(1.0))
        node = p
        for _ in range(5000):
            node = node + 0.0
        tape.backward(node)
        np.testing.assert_allclose(p.grad, 1.0)

    def test_backward_seeds_with_ones(self):
        p = tape.parameter(np.array([1.0, 2.0, 3.0]))
        out = p * 2.0
        tape.backward(out)
        np.testing.assert_allclose(out.grad, 1.0)
        np.testing.assert_allclose(p.grad, 2.0)

    def test_grad_reuse_across_two_backward_calls_accumulates(self):
        p = tape.parameter(np.array(2.0))
        tape.backward(p * 3.0)
        first = float(p.grad)
        tape.backward(p * 3.0)
        assert float(p.grad) == pytest.approx(2 * first)
