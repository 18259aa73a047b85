"""Engine tests: recording, worked gradient examples, finite differences,
reverse-over-reverse, determinism."""

import numpy as np
import pytest

from aspectgrad import autodiff as ad


class TestTensor:
    def test_shape_and_values(self):
        arr = ad.tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        assert arr.shape == (2, 3)
        assert arr.size == 6

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            ad.tensor([1.0, float("nan")])

    def test_rejects_inf(self):
        with pytest.raises(ValueError):
            ad.tensor(float("inf"))

    def test_scalar_is_zero_d(self):
        assert ad.tensor(3.0).shape == ()


class TestRecord:
    def test_add_value_cached(self):
        t = ad.Tape()
        a, b = t.constant(2.0), t.constant(3.0)
        node = t.record("add", [a, b])
        assert float(node.value) == 5.0
        assert node.input_ids == (a.id, b.id)

    def test_matmul_shape_rule(self):
        t = ad.Tape()
        a = t.constant(np.ones((2, 3)))
        b = t.constant(np.ones((3, 1)))
        node = t.record("matmul", [a, b])
        assert node.shape == (2, 1)

    def test_add_shape_mismatch(self):
        t = ad.Tape()
        a = t.constant(np.ones((2, 3)))
        b = t.constant(np.ones((3, 2)))
        with pytest.raises(ad.ShapeError):
            t.record("add", [a, b])

    def test_unknown_op(self):
        t = ad.Tape()
        with pytest.raises(ad.UnknownOpError):
            t.record("convolve", [t.constant(1.0)])

    def test_inputs_recorded_before_node(self):
        t = ad.Tape()
        a = t.constant(1.0)
        b = t.constant(2.0)
        c = ad.add(a, b)
        assert all(i < c.id for i in c.input_ids)

    def test_cross_tape_input_rejected(self):
        t1, t2 = ad.Tape(), ad.Tape()
        a = t1.constant(1.0)
        b = t2.constant(2.0)
        with pytest.raises(ValueError):
            t1.record("add", [a, b])

    def test_replay_is_bit_identical(self):
        t = ad.Tape()
        x = t.variable(np.array([0.3, -1.2, 0.7]))
        y = ad.reduce_sum(ad.mul(ad.tanh(x), ad.exp(x)))
        ad.grad(y, [x])
        t.replay()  # raises on any mismatch

    def test_dump_lists_every_node(self):
        t = ad.Tape()
        x = t.variable(np.ones(2))
        ad.reduce_sum(ad.tanh(x))
        lines = t.dump().splitlines()
        assert len(lines) == len(t.nodes)
        assert "tanh" in lines[1]


class TestGradWorkedExamples:
    def test_square(self):
        t = ad.Tape()
        x = t.variable(3.0)
        (g,) = ad.grad(ad.mul(x, x), [x])
        assert float(g) == 6.0

    def test_second_derivative_of_cube(self):
        t = ad.Tape()
        x = t.variable(2.0)
        y = ad.mul(ad.mul(x, x), x)
        (g1,) = ad.grad(y, [x], create_graph=True)
        (g2,) = ad.grad(g1, [x])
        assert float(g2) == pytest.approx(12.0, abs=1e-12)

    def test_softmax_cross_entropy_at_uniform_logits(self):
        from aspectgrad.model import nll_from_logits

        t = ad.Tape()
        z = t.variable(np.zeros(3))
        loss = nll_from_logits(z, 0)
        (g,) = ad.grad(loss, [z])
        np.testing.assert_allclose(g, [-2 / 3, 1 / 3, 1 / 3], atol=1e-12)

    def test_target_must_be_scalar(self):
        t = ad.Tape()
        x = t.variable(np.ones(3))
        with pytest.raises(ad.ShapeError):
            ad.grad(ad.tanh(x), [x])

    def test_unreachable_wrt_gives_zeros(self):
        t = ad.Tape()
        x = t.variable(2.0)
        other = t.variable(np.ones(4))
        (g,) = ad.grad(ad.mul(x, x), [other])
        np.testing.assert_array_equal(g, np.zeros(4))

    def test_create_graph_matches_plain_values(self):
        t = ad.Tape()
        x = t.variable(np.array([0.5, -0.25, 2.0]))
        y = ad.reduce_sum(ad.mul(ad.tanh(x), x))
        (plain,) = ad.grad(y, [x])

        t2 = ad.Tape()
        x2 = t2.variable(np.array([0.5, -0.25, 2.0]))
        y2 = ad.reduce_sum(ad.mul(ad.tanh(x2), x2))
        (node,) = ad.grad(y2, [x2], create_graph=True)
        np.testing.assert_array_equal(plain, node.value)

    def test_generation_counter_separates_backward_nodes(self):
        t = ad.Tape()
        x = t.variable(1.5)
        y = ad.mul(x, x)
        assert y.generation == 0
        (g,) = ad.grad(y, [x], create_graph=True)
        assert g.generation == 1

    def test_abs_subgradient_zero_at_kink(self):
        t = ad.Tape()
        x = t.variable(0.0)
        (g,) = ad.grad(ad.absolute(x), [x])
        assert float(g) == 0.0


class TestCheckGradient:
    def test_square(self):
        err = ad.check_gradient(lambda x: ad.mul(x, x), 3.0, 1e-5)
        assert err < 1e-6

    def test_sum_tanh_random_vector(self):
        rng = np.random.default_rng(0)
        err = ad.check_gradient(lambda x: ad.reduce_sum(ad.tanh(x)),
                                rng.standard_normal(4), 1e-5)
        assert err < 1e-5

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError):
            ad.check_gradient(lambda x: ad.mul(x, x), 1.0, 0.0)


def _random_args(op, rng):
    """Sample a scalar-valued builder and an input point for one primitive."""
    if op in ("tanh", "relu", "exp", "abs"):
        fn = {"tanh": ad.tanh, "relu": ad.relu, "exp": ad.exp, "abs": ad.absolute}[op]
        point = rng.standard_normal(5)
        if op in ("relu", "abs"):
            point = point + np.sign(point) * 0.1  # keep away from the kink
        return (lambda x: ad.reduce_sum(fn(x))), point
    if op == "log":
        return (lambda x: ad.reduce_sum(ad.log(x))), rng.uniform(0.2, 3.0, 5)
    if op == "softmax":
        w = rng.standard_normal(5)
        return (lambda x: ad.dot(ad.softmax(x), x.tape.constant(w))), rng.standard_normal(5)
    if op == "mean":
        return (lambda x: ad.reduce_mean(ad.mul(x, x))), rng.standard_normal(6)
    if op == "sum_axis0":
        w = rng.standard_normal(3)
        return (lambda x: ad.dot(ad.reduce_sum(ad.reshape(x, (2, 3)), axis=0),
                                 x.tape.constant(w))), rng.standard_normal(6)
    if op == "div":
        c = rng.uniform(0.5, 2.0, 4)
        return (lambda x: ad.reduce_sum(ad.div(x, x.tape.constant(c)))), rng.standard_normal(4)
    if op == "matmul":
        b = rng.standard_normal((3, 2))
        return (lambda x: ad.reduce_sum(ad.matmul(ad.reshape(x, (2, 3)),
                                                  x.tape.constant(b)))), rng.standard_normal(6)
    if op == "dot":
        w = rng.standard_normal(4)
        return (lambda x: ad.dot(x, x.tape.constant(w))), rng.standard_normal(4)
    if op == "gather":
        def fn_gather(x):
            row = ad.gather(ad.reshape(x, (3, 2)), 1)
            return ad.reduce_sum(ad.mul(row, row))
        return fn_gather, rng.standard_normal(6)
    if op == "concat_slice":
        def fn_slice(x):
            seg = ad.narrow(ad.concat([x, x]), 1, 5)
            return ad.reduce_sum(ad.mul(seg, seg))
        return fn_slice, rng.standard_normal(3)
    if op == "scalar_mix":
        return (lambda x: ad.mul(ad.reduce_sum(ad.scale(x, 0.7)),
                                 ad.reduce_mean(x))), rng.standard_normal(4)
    raise AssertionError(op)


PRIMITIVES = ["tanh", "relu", "exp", "abs", "log", "softmax", "mean", "sum_axis0",
              "div", "matmul", "dot", "gather", "concat_slice", "scalar_mix"]


class TestPrimitiveGradients:
    """Analytic gradients match central differences over many random seeds."""

    @pytest.mark.parametrize("op", PRIMITIVES)
    def test_matches_finite_differences(self, op):
        rng = np.random.default_rng(abs(hash(op)) % (2**32))
        for _ in range(10):
            fn, point = _random_args(op, rng)
            assert ad.check_gradient(fn, point, 1e-5) < 1e-5

    def test_hundred_random_seeds_across_ops(self):
        count = 0
        for seed in range(112):
            rng = np.random.default_rng(seed)
            fn, point = _random_args(PRIMITIVES[seed % len(PRIMITIVES)], rng)
            assert ad.check_gradient(fn, point, 1e-5) < 1e-5
            count += 1
        assert count >= 100


class TestReverseOverReverse:
    def test_grad_of_gradient_matches_finite_differences(self):
        """h(theta) = sum((df/dx) * c): d h / d theta checked numerically."""
        rng = np.random.default_rng(42)
        c = rng.standard_normal(3)

        def first_order(theta_values, x_values):
            t = ad.Tape()
            theta = t.variable(theta_values)
            x = t.variable(x_values)
            f = ad.reduce_sum(ad.tanh(ad.mul(theta, x)))
            (gx,) = ad.grad(f, [x], create_graph=True)
            return t, theta, gx

        theta0 = rng.standard_normal(3)
        x0 = rng.standard_normal(3)

        t, theta, gx = first_order(theta0, x0)
        h = ad.dot(gx, t.constant(c))
        (analytic,) = ad.grad(h, [theta])

        step = 1e-6
        numeric = np.zeros(3)
        for i in range(3):
            for sign in (1.0, -1.0):
                shifted = theta0.copy()
                shifted[i] += sign * step
                t2, _, gx2 = first_order(shifted, x0)
                numeric[i] += sign * float(np.dot(gx2.value, c)) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        assert np.max(np.abs(analytic - numeric) / denom) < 1e-4


class TestDeterminism:
    def test_identical_tapes_give_bit_identical_gradients(self):
        def run():
            t = ad.Tape()
            x = t.variable(np.array([0.11, -0.93, 1.7, 0.004]))
            w = t.variable(np.arange(8.0).reshape(4, 2) / 7.0)
            y = ad.reduce_sum(ad.tanh(ad.matmul(ad.reshape(x, (1, 4)), w)))
            return ad.grad(y, [x, w])

        g1, g2 = run(), run()
        np.testing.assert_array_equal(g1[0], g2[0])
        np.testing.assert_array_equal(g1[1], g2[1])

    def test_parallel_tapes_are_independent(self):
        import threading

        results = {}

        def work(key, seed):
            rng = np.random.default_rng(seed)
            t = ad.Tape()
            x = t.variable(rng.standard_normal(16))
            (g,) = ad.grad(ad.reduce_sum(ad.mul(ad.tanh(x), x)), [x])
            results[key] = g

        threads = [threading.Thread(target=work, args=(i, 5)) for i in range(4)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        for i in range(1, 4):
            np.testing.assert_array_equal(results[0], results[i])
