"""Unit tests for the reverse-mode engine and its finite-difference checker."""

import math

import numpy as np
import pytest

from fstal import autodiff as ad


def run_graph(build, point):
    """Forward + backward once; returns (loss value, grads by name)."""
    tape = ad.Tape()
    nodes = {k: tape.leaf(v, requires_grad=True) for k, v in point.items()}
    loss = build(tape, nodes)
    tape.backward(loss)
    return float(loss.value[0, 0]), {k: n.grad for k, n in nodes.items()}


class TestMatmul:
    def test_identity(self):
        m = np.array([[2.0, -1.0], [0.5, 3.0]])
        tape = ad.Tape()
        out = ad.matmul(tape.leaf(np.eye(2)), tape.leaf(m))
        np.testing.assert_array_equal(out.value, m)

    def test_hand_checked_product(self):
        tape = ad.Tape()
        a = tape.leaf(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = tape.leaf(np.array([[1.0], [1.0]]))
        out = ad.matmul(a, b)
        np.testing.assert_array_equal(out.value, [[3.0], [7.0]])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        # brute-force triple loop
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        tape = ad.Tape()
        out = ad.matmul(tape.leaf(a), tape.leaf(b))
        np.testing.assert_allclose(out.value, expected, rtol=0, atol=1e-12)
        report = ad.grad_check(
            lambda t, n: ad.sum_all(ad.mul(ad.matmul(n["a"], n["b"]), n["m"])),
            {"a": a, "b": b, "m": rng.normal(size=(3, 2))})
        assert report.passed

    def test_shape_mismatch_reports_shapes(self):
        tape = ad.Tape()
        a = tape.leaf(np.zeros((2, 3)))
        b = tape.leaf(np.zeros((2, 3)))
        with pytest.raises(ad.TapeError, match=r"\(2, 3\)"):
            ad.matmul(a, b)


class TestRowSoftmax:
    def test_uniform_on_constant_row(self):
        tape = ad.Tape()
        out = ad.row_softmax(tape.leaf(np.zeros((1, 3))))
        np.testing.assert_allclose(out.value, [[1 / 3] * 3], atol=1e-15)

    def test_large_logit_no_overflow(self):
        tape = ad.Tape()
        out = ad.row_softmax(tape.leaf(np.array([[1000.0, 0.0]])))
        assert np.all(np.isfinite(out.value))
        assert out.value[0, 0] > 1.0 - 1e-12
        assert out.value[0, 1] < 1e-12

    def test_direct_exponential_evaluation(self):
        tape = ad.Tape()
        out = ad.row_softmax(tape.leaf(np.array([[1.0, 2.0, 3.0]])))
        ex = [math.exp(v) for v in (1.0, 2.0, 3.0)]
        expected = [v / sum(ex) for v in ex]
        np.testing.assert_allclose(out.value[0], expected, atol=1e-12)
        np.testing.assert_allclose(out.value[0], [0.09003, 0.24473, 0.66524],
                                   atol=1e-5)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            x = rng.normal(scale=5.0, size=(4, 7))
            tape = ad.Tape()
            out = ad.row_softmax(tape.leaf(x))
            np.testing.assert_allclose(out.value.sum(axis=1), 1.0, atol=1e-12)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        tape = ad.Tape()
        out = ad.layer_norm(tape.leaf(np.full((1, 3), 5.0)),
                            tape.leaf(np.ones((1, 3))),
                            tape.leaf(np.zeros((1, 3))))
        np.testing.assert_array_equal(out.value, np.zeros((1, 3)))

    def test_two_point_row(self):
        tape = ad.Tape()
        out = ad.layer_norm(tape.leaf(np.array([[1.0, 3.0]])),
                            tape.leaf(np.ones((1, 2))),
                            tape.leaf(np.zeros((1, 2))))
        # population variance = 1, so normalization gives exactly +-1
        # modulo the stabilizer
        np.testing.assert_allclose(out.value, [[-1.0, 1.0]], atol=1e-5)

    def test_moments_after_affine(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 64))
        tape = ad.Tape()
        out = ad.layer_norm(tape.leaf(x),
                            tape.leaf(np.full((1, 64), 2.0)),
                            tape.leaf(np.full((1, 64), 1.0)))
        row = out.value[0]
        assert abs(row.mean() - 1.0) < 1e-9
        assert abs(row.std() - 2.0) < 1e-3   # stabilizer tolerance

    def test_output_moments_invariant(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            x = rng.normal(scale=3.0, size=(5, 16))
            tape = ad.Tape()
            out = ad.layer_norm(tape.leaf(x), tape.leaf(np.ones((1, 16))),
                                tape.leaf(np.zeros((1, 16))))
            means = out.value.mean(axis=1)
            variances = out.value.var(axis=1)
            assert np.all(np.abs(means) < 1e-9)
            assert np.all(np.abs(variances - 1.0) < 1e-3)


class TestSigmoid:
    def test_zero(self):
        tape = ad.Tape()
        out = ad.sigmoid(tape.leaf(np.array([[0.0]])))
        assert out.value[0, 0] == 0.5

    def test_extreme_negative_stays_positive(self):
        tape = ad.Tape()
        out = ad.sigmoid(tape.leaf(np.array([[-10000.0]])))
        assert out.value[0, 0] > 0.0
        # the clamp keeps a later log finite
        assert math.isfinite(math.log(out.value[0, 0]))

    def test_scalar_value(self):
        tape = ad.Tape()
        out = ad.sigmoid(tape.leaf(np.array([[7.0711]])))
        assert abs(out.value[0, 0] - 0.99915) < 1e-5

    def test_open_interval(self):
        tape = ad.Tape()
        out = ad.sigmoid(tape.leaf(np.array([[-800.0, 0.0, 800.0]])))
        assert np.all(out.value > 0.0)
        assert np.all(out.value < 1.0)


class TestCosineRows:
    def test_parallel_is_one(self):
        v = np.array([[1.0, 2.0, -1.0]])
        tape = ad.Tape()
        out = ad.cosine_rows(tape.leaf(v), tape.leaf(v))
        assert abs(out.value[0, 0] - 1.0) < 1e-8

    def test_orthogonal_is_zero(self):
        tape = ad.Tape()
        out = ad.cosine_rows(tape.leaf(np.array([[1.0, 0.0]])),
                             tape.leaf(np.array([[0.0, 1.0]])))
        assert abs(out.value[0, 0]) < 1e-12

    def test_scalar_value(self):
        tape = ad.Tape()
        out = ad.cosine_rows(tape.leaf(np.array([[1.0, 0.0]])),
                             tape.leaf(np.array([[1.0, 1.0]])))
        assert abs(out.value[0, 0] - 0.70711) < 1e-5

    def test_zero_row_stabilized(self):
        tape = ad.Tape()
        out = ad.cosine_rows(tape.leaf(np.array([[0.0, 0.0], [1.0, 0.0]])),
                             tape.leaf(np.array([[1.0, 1.0]])))
        assert abs(out.value[0, 0]) < 1e-7
        assert np.all(np.isfinite(out.value))

    def test_range(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(50, 6))
        w = rng.normal(size=(1, 6))
        tape = ad.Tape()
        out = ad.cosine_rows(tape.leaf(a), tape.leaf(w))
        assert np.all(out.value >= -1.0) and np.all(out.value <= 1.0)


class TestBackward:
    def test_sum_gradient_all_ones(self):
        w = np.random.default_rng(0).normal(size=(3, 4))
        _, grads = run_graph(lambda t, n: ad.sum_all(n["w"]), {"w": w})
        np.testing.assert_array_equal(grads["w"], np.ones((3, 4)))

    def test_linear_matmul_gradient_pattern(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(3, 2))
        _, grads = run_graph(
            lambda t, n: ad.sum_all(ad.matmul(n["a"], n["b"])),
            {"a": a, "b": b})
        np.testing.assert_allclose(grads["a"], np.ones((2, 2)) @ b.T,
                                   atol=1e-12)
        np.testing.assert_allclose(grads["b"], a.T @ np.ones((2, 2)),
                                   atol=1e-12)

    def test_composed_chain_matches_finite_differences(self):
        rng = np.random.default_rng(2)

        def build(tape, nodes):
            h = ad.matmul(nodes["a"], nodes["b"])
            s = ad.row_softmax(h)
            c = ad.cosine_rows(s, nodes["w"])
            p = ad.sigmoid(ad.scale(c, 3.0))
            return ad.sum_all(ad.log(p))

        report = ad.grad_check(build, {
            "a": rng.normal(size=(3, 4)),
            "b": rng.normal(size=(4, 3)),
            "w": rng.normal(size=(1, 3)),
        }, step=1e-5, tolerance=1e-6)
        assert report.passed
        assert report.max_rel_error < 1e-6

    def test_second_backward_rejected(self):
        tape = ad.Tape()
        loss = ad.sum_all(tape.leaf(np.ones((2, 2)), requires_grad=True))
        tape.backward(loss)
        with pytest.raises(ad.TapeError, match="already ran"):
            tape.backward(loss)

    def test_non_scalar_loss_rejected(self):
        tape = ad.Tape()
        node = tape.leaf(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ad.TapeError, match="1x1"):
            tape.backward(node)

    def test_cross_tape_mixing_rejected(self):
        t1, t2 = ad.Tape(), ad.Tape()
        a = t1.leaf(np.ones((2, 2)))
        b = t2.leaf(np.ones((2, 2)))
        with pytest.raises(ad.TapeError, match="different tapes"):
            ad.add(a, b)

    def test_gradient_accumulates_on_reuse(self):
        x = np.array([[2.0]])
        _, grads = run_graph(lambda t, n: ad.sum_all(ad.mul(n["x"], n["x"])),
                             {"x": x})
        np.testing.assert_allclose(grads["x"], [[4.0]], atol=1e-12)


class TestGradCheck:
    def test_identity_sum_error_exactly_zero(self):
        # dyadic values and a power-of-two step make the central
        # difference of a linear map exact in float64
        point = {"x": np.array([[0.5, 0.25, 1.0], [0.75, 1.5, 0.125]])}
        report = ad.grad_check(lambda t, n: ad.sum_all(n["x"]), point,
                               step=2.0 ** -17)
        assert report.max_rel_error == 0.0
        assert report.passed

    def test_softmax_matmul_chain_passes(self):
        rng = np.random.default_rng(4)
        report = ad.grad_check(
            lambda t, n: ad.sum_all(ad.mul(
                ad.row_softmax(ad.matmul(n["a"], n["b"])), n["m"])),
            {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(3, 4)),
             "m": rng.normal(size=(2, 4))})
        assert report.passed
        assert report.max_rel_error < 1e-6

    def test_corrupted_gradient_rule_fails(self):
        def broken_scale(a, c):
            # wrong backward on purpose: claims d/da (c*a) = 2c
            return a.tape.record(a.value * c, (a,),
                                 lambda g: (g * (2.0 * c),), name="broken")

        report = ad.grad_check(
            lambda t, n: ad.sum_all(broken_scale(n["x"], 3.0)),
            {"x": np.random.default_rng(5).normal(size=(2, 2))})
        assert not report.passed

    def test_loose_tolerance_cannot_mask_a_real_error(self):
        def broken_scale(a, c):
            return a.tape.record(a.value * c, (a,),
                                 lambda g: (g * (c + 0.01),), name="broken")

        build = lambda t, n: ad.sum_all(broken_scale(n["x"], 3.0))
        point = {"x": np.random.default_rng(6).normal(size=(2, 2))}
        loose = ad.grad_check(build, point, tolerance=1e-3)
        tight = ad.grad_check(build, point, tolerance=1e-6)
        # the ~1e-2 error is reported identically either way and fails both
        assert abs(loose.max_rel_error - tight.max_rel_error) < 1e-12
        assert not loose.passed and not tight.passed

    def test_nonfinite_evaluation_reported(self):
        def build(tape, nodes):
            return ad.sum_all(ad.log(nodes["x"]))

        # log crosses zero under perturbation -> the failure must surface
        with pytest.raises(ad.TapeError):
            ad.grad_check(build, {"x": np.array([[1e-6]])}, step=1e-5)


class TestProperties:
    def test_hundred_random_compositions_gradcheck(self):
        rng = np.random.default_rng(42)
        used = set()
        for trial in range(100):
            build, point = _random_composition(rng, used)
            report = ad.grad_check(build, point, step=1e-5, tolerance=1e-6)
            assert report.passed, f"trial {trial}: {report.per_input}"
        assert used >= {"matmul", "row_softmax", "layer_norm", "sigmoid",
                        "cosine_rows", "add", "sub", "mul", "scale",
                        "transpose", "concat_cols", "log", "dropout"}

    def test_primitives_deterministic(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 5))
        w = rng.normal(size=(1, 5))

        def snapshot():
            tape = ad.Tape()
            xn, wn = tape.leaf(x), tape.leaf(w)
            outs = [
                ad.row_softmax(xn).value,
                ad.layer_norm(xn, tape.leaf(np.ones((1, 5))),
                              tape.leaf(np.zeros((1, 5)))).value,
                ad.sigmoid(xn).value,
                ad.cosine_rows(xn, wn).value,
                ad.matmul(xn, ad.transpose(wn)).value,
            ]
            return [o.tobytes() for o in outs]

        assert snapshot() == snapshot()


def _random_composition(rng, used):
    """A random chain over the primitive set, ending in a scalar."""
    rows = int(rng.integers(2, 5))
    cols = int(rng.integers(2, 5))
    point = {
        "x": rng.normal(size=(rows, cols)),
        "y": rng.normal(size=(rows, cols)),
        "w": rng.normal(size=(1, cols)),
        "g": rng.normal(size=(1, cols)),
        "b": rng.normal(size=(1, cols)),
    }
    ops = [op for op in ("matmul", "row_softmax", "layer_norm", "sigmoid",
                         "add", "sub", "mul", "scale", "transpose",
                         "concat_cols", "log_sigmoid", "cosine")
           ]
    chosen = list(rng.choice(ops, size=4, replace=True))
    mask = (rng.random((rows, 2 * cols)) < 0.8) / 0.8

    def build(tape, nodes):
        cur = nodes["x"]
        for op in chosen:
            if op == "matmul":
                cur = ad.matmul(cur, ad.transpose(nodes["y"]))
                cur = ad.scale(ad.matmul(cur, nodes["y"]), 0.3)
                used.add("matmul")
                used.add("transpose")
            elif op == "row_softmax":
                cur = ad.row_softmax(cur)
                used.add("row_softmax")
            elif op == "layer_norm":
                cur = ad.layer_norm(cur, nodes["g"], nodes["b"])
                used.add("layer_norm")
            elif op == "sigmoid":
                cur = ad.sigmoid(cur)
                used.add("sigmoid")
            elif op == "add":
                cur = ad.add(cur, nodes["y"])
                used.add("add")
            elif op == "sub":
                cur = ad.sub(cur, nodes["y"])
                used.add("sub")
            elif op == "mul":
                cur = ad.mul(cur, nodes["y"])
                used.add("mul")
            elif op == "scale":
                cur = ad.scale(cur, 0.7)
                used.add("scale")
            elif op == "transpose":
                cur = ad.transpose(ad.transpose(cur))
                used.add("transpose")
            elif op == "concat_cols":
                cur = ad.matmul(ad.concat_cols([cur, cur]),
                                tape.leaf(np.full((2 * cols, cols), 0.5)))
                used.add("concat_cols")
            elif op == "log_sigmoid":
                cur = ad.log(ad.sigmoid(cur))
                used.add("log")
            elif op == "cosine":
                cos = ad.cosine_rows(cur, nodes["w"])
                cur = ad.matmul(cos, ad.matmul(ad.transpose(cos), cur))
                used.add("cosine_rows")
        cur = ad.dropout_mask(ad.concat_cols([cur, cur]), mask)
        used.add("dropout")
        used.add("concat_cols")
        return ad.sum_all(cur)

    return build, point
