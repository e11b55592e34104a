"""Gradient and tape tests: every primitive against central differences."""
import numpy as np
import pytest

from rmsda.engine import GradTape, Tensor, gradcheck
from rmsda.engine import ops
from rmsda.engine.tensor import active_tape
from rmsda.errors import ContractError

TOL = 1e-3
H = 1e-5


def r64(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape).astype(np.float64))


def check(fn, points, tol=TOL, h=H, **kw):
    report = gradcheck(fn, points, h=h, tol=tol, **kw)
    assert report.passed, str(report) + f" worst={report.worst[:3]}"
    return report


class TestTapeSemantics:
    def test_no_tape_records_nothing(self):
        assert active_tape() is None
        out = ops.relu(Tensor(np.ones((1, 1, 1, 1), np.float32)))
        assert out.data[0, 0, 0, 0] == 1.0

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones((1, 1, 2, 2), np.float32))
        with GradTape() as tape:
            y = ops.relu(x)
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.full((1, 1, 1, 1), 3.0, np.float64))
        with GradTape() as tape:
            y = ops.mul(x, x)
            z = ops.add(y, x)
            loss = ops.sum_all(z)
        g = tape.backward(loss)[x.uid]
        np.testing.assert_allclose(g.reshape(()), 2 * 3.0 + 1.0)

    def test_untouched_tensor_absent_from_grads(self):
        x = Tensor(np.ones((1, 1, 1, 1), np.float64))
        unused = Tensor(np.ones((1, 1, 1, 1), np.float64))
        with GradTape() as tape:
            loss = ops.sum_all(ops.mul(x, x))
        grads = tape.backward(loss)
        assert x.uid in grads and unused.uid not in grads

    def test_nested_tapes_record_to_innermost(self):
        x = Tensor(np.full((1, 1, 1, 1), 2.0, np.float64))
        with GradTape() as outer:
            _ = ops.mul(x, x)
            with GradTape() as inner:
                loss = ops.sum_all(ops.mul(x, x))
            assert len(inner.nodes) == 2
        g = inner.backward(loss)[x.uid]
        np.testing.assert_allclose(g.reshape(()), 4.0)
        assert len(outer.nodes) == 1


class TestElementwiseGrads:
    def test_add_mul_div_broadcast(self):
        rng = np.random.default_rng(1)
        a = r64(rng, (2, 3, 3, 3))
        b = r64(rng, (1, 3, 1, 1), 0.5, 2.0)
        check(lambda p: ops.sum_all(ops.mul(ops.add(p[0], p[1]), p[0])), [a, b])
        check(lambda p: ops.sum_all(ops.div(p[0], p[1])), [a, b])

    def test_affine_log_pow(self):
        rng = np.random.default_rng(2)
        x = r64(rng, (1, 2, 4, 4), 0.2, 3.0)
        check(lambda p: ops.sum_all(ops.affine(p[0], -2.5, 0.7)), [x])
        check(lambda p: ops.sum_all(ops.log(p[0])), [x])
        check(lambda p: ops.sum_all(ops.pow_const(p[0], 2.0)), [x])
        check(lambda p: ops.sum_all(ops.pow_const(p[0], 0.5)), [x])

    def test_relu_sigmoid_clamp_away_from_kinks(self):
        rng = np.random.default_rng(3)
        x = Tensor(np.concatenate([
            rng.uniform(-2.0, -0.1, size=100),
            rng.uniform(0.1, 2.0, size=100),
        ]).reshape(1, 1, 10, 20))
        check(lambda p: ops.sum_all(ops.relu(p[0])), [x])
        check(lambda p: ops.sum_all(ops.sigmoid(p[0])), [x])
        check(lambda p: ops.sum_all(ops.clamp(p[0], -1.5, 1.5)), [x])

    def test_mean_and_weighted_sum(self):
        rng = np.random.default_rng(4)
        x = r64(rng, (2, 2, 3, 5))
        w = r64(rng, (2, 2, 3, 5))
        check(lambda p: ops.mean_all(ops.mul(p[0], p[1])), [x, w])


class TestStructuralGrads:
    def test_concat_channels(self):
        rng = np.random.default_rng(5)
        a = r64(rng, (2, 2, 3, 3))
        b = r64(rng, (2, 3, 3, 3))
        c = r64(rng, (2, 1, 3, 3))
        weight = Tensor(rng.uniform(-1, 1, (2, 6, 3, 3)))

        def fn(p):
            cat = ops.concat_channels([p[0], p[1], p[2]])
            return ops.sum_all(ops.mul(cat, Tensor(weight.data)))

        check(fn, [a, b, c])

    def test_dense(self):
        rng = np.random.default_rng(6)
        x = r64(rng, (3, 5, 1, 1))
        w = r64(rng, (4, 5, 1, 1))
        b = r64(rng, (1, 4, 1, 1))
        check(lambda p: ops.sum_all(ops.pow_const(
            ops.add(ops.dense(p[0], p[1], p[2]),
                    Tensor(np.full((3, 4, 1, 1), 3.0))), 2.0)), [x, w, b])

    def test_pooling(self):
        rng = np.random.default_rng(7)
        for h, w in ((4, 4), (5, 3)):
            x = r64(rng, (2, 2, h, w))
            check(lambda p: ops.sum_all(ops.pow_const(
                ops.add(ops.avg_pool2x2(p[0]), Tensor(np.full(
                    (2, 2, (h + 1) // 2, (w + 1) // 2), 2.0))), 2.0)), [x])
        x = r64(rng, (2, 3, 4, 4))
        check(lambda p: ops.sum_all(ops.pow_const(
            ops.add(ops.global_avg_pool(p[0]),
                    Tensor(np.full((2, 3, 1, 1), 2.0))), 2.0)), [x])

    def test_bilinear_upsample(self):
        rng = np.random.default_rng(8)
        x = r64(rng, (1, 2, 3, 4))
        ref = Tensor(rng.uniform(-1, 1, (1, 2, 7, 9)))
        check(lambda p: ops.sum_all(ops.mul(
            ops.bilinear_upsample(p[0], 7, 9), Tensor(ref.data))), [x])


class TestConvAndBatchNormGrads:
    def test_conv2d_all_configs(self):
        rng = np.random.default_rng(9)
        for k, stride in ((1, 1), (1, 2), (3, 1), (3, 2), (5, 1), (5, 2)):
            x = r64(rng, (2, 2, 6, 5))
            w = r64(rng, (3, 2, k, k), -0.5, 0.5)
            b = r64(rng, (1, 3, 1, 1))
            ref_shape = ops.conv2d(x, w, b, stride).shape
            ref = Tensor(rng.uniform(-1, 1, ref_shape))
            check(lambda p: ops.sum_all(ops.mul(
                ops.conv2d(p[0], p[1], p[2], stride), Tensor(ref.data))),
                [x, w, b], h=1e-4)

    def test_conv2d_chunked_backward(self, monkeypatch):
        rng = np.random.default_rng(10)
        monkeypatch.setattr(ops, "_COL_BUDGET", 128)
        x = r64(rng, (1, 2, 9, 7))
        w = r64(rng, (2, 2, 3, 3), -0.5, 0.5)
        b = r64(rng, (1, 2, 1, 1))
        ref = Tensor(rng.uniform(-1, 1, (1, 2, 9, 7)))
        check(lambda p: ops.sum_all(ops.mul(
            ops.conv2d(p[0], p[1], p[2], 1), Tensor(ref.data))),
            [x, w, b], h=1e-4)

    def test_batch_norm_train_mode(self):
        rng = np.random.default_rng(11)
        x = r64(rng, (3, 2, 4, 4), -2, 2)
        gamma = r64(rng, (1, 2, 1, 1), 0.5, 1.5)
        beta = r64(rng, (1, 2, 1, 1))
        rm = Tensor(np.zeros((1, 2, 1, 1), np.float64))
        rv = Tensor(np.ones((1, 2, 1, 1), np.float64))
        ref = Tensor(rng.uniform(-1, 1, (3, 2, 4, 4)))

        def fn(p):
            y = ops.batch_norm2d(p[0], p[1], p[2], rm, rv, training=True,
                                 update_running=False)
            return ops.sum_all(ops.mul(y, Tensor(ref.data)))

        check(fn, [x, gamma, beta], h=1e-4)

    def test_batch_norm_infer_mode(self):
        rng = np.random.default_rng(12)
        x = r64(rng, (2, 2, 3, 3))
        gamma = r64(rng, (1, 2, 1, 1), 0.5, 1.5)
        beta = r64(rng, (1, 2, 1, 1))
        rm = Tensor(rng.uniform(-0.5, 0.5, (1, 2, 1, 1)))
        rv = Tensor(rng.uniform(0.5, 1.5, (1, 2, 1, 1)))
        ref = Tensor(rng.uniform(-1, 1, (2, 2, 3, 3)))

        def fn(p):
            y = ops.batch_norm2d(p[0], p[1], p[2], rm, rv, training=False)
            return ops.sum_all(ops.mul(y, Tensor(ref.data)))

        check(fn, [x, gamma, beta], h=1e-4)


class TestGradcheckHarness:
    def test_detects_corrupted_conv_backward(self, monkeypatch):
        """A sign flip in the conv input gradient must fail the check."""
        true_bwd = ops._conv2d_backward

        def corrupted(x, weight, stride, pads, g):
            gx, gw, gb = true_bwd(x, weight, stride, pads, g)
            return -gx, gw, gb

        monkeypatch.setattr(ops, "_conv2d_backward", corrupted)
        rng = np.random.default_rng(13)
        x = r64(rng, (1, 2, 5, 5))
        w = r64(rng, (2, 2, 3, 3), -0.5, 0.5)
        b = r64(rng, (1, 2, 1, 1))
        report = gradcheck(
            lambda p: ops.sum_all(ops.pow_const(ops.add(
                ops.conv2d(p[0], p[1], p[2], 1),
                Tensor(np.full((1, 2, 5, 5), 2.0))), 2.0)),
            [x, w, b], h=1e-4, tol=TOL)
        assert not report.passed

    def test_detects_wrong_scale(self):
        x = Tensor(np.full((1, 1, 1, 1), 1.5, np.float64))
        report = gradcheck(
            lambda p: ops.affine(ops.pow_const(p[0], 2.0), 1.0, 0.0),
            [x], h=1e-5, tol=1e-4)
        assert report.passed
        report2 = gradcheck(
            lambda p: ops.affine(ops.pow_const(p[0], 2.0), 1.0, 0.0),
            [Tensor(np.full((1, 1, 1, 1), 1.5, np.float64))],
            h=0.5, tol=1e-6)
        assert report2.n_checked == 1
