"""Autodiff: forward oracles, analytic gradients, finite differences."""

import numpy as np
import pytest

from segdiscover import autodiff as ad


def finite_difference(f, params, coords, step=1e-4):
    """Central finite differences of a scalar function at chosen entries.

    ``coords`` is a list of (param, flat_index); the function is re-run
    with the entry nudged both ways. Independent of the tape machinery.
    """
    grads = []
    for p, flat in coords:
        original = p.data.flat[flat]
        p.data.flat[flat] = original + step
        up = f()
        p.data.flat[flat] = original - step
        down = f()
        p.data.flat[flat] = original
        grads.append((up - down) / (2.0 * step))
    return np.array(grads)


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-4)


class TestForward:
    def test_identity_linear_layer(self):
        w = ad.constant(np.eye(2))
        b = ad.constant(np.zeros((2, 1)))
        x = ad.constant(np.array([[3.0], [4.0]]))
        y = ad.add(ad.matmul(w, x), b)
        np.testing.assert_array_equal(y.data, [[3.0], [4.0]])

    def test_softmax_symmetry(self):
        y = ad.softmax_cols(ad.constant(np.zeros((3, 1))))
        np.testing.assert_allclose(y.data, np.full((3, 1), 1.0 / 3.0), atol=1e-15)

    def test_two_layer_net_matches_straight_line_oracle(self):
        rng = np.random.default_rng(0)
        w1 = rng.normal(size=(4, 3))
        b1 = rng.normal(size=(4, 1))
        w2 = rng.normal(size=(2, 4))
        b2 = rng.normal(size=(2, 1))
        x = np.array([[1.0], [2.0], [3.0]])

        # straight-line re-implementation of the same arithmetic
        h = np.maximum(w1 @ x + b1, 0.0)
        expected = w2 @ h + b2

        out = ad.add(
            ad.matmul(ad.constant(w2), ad.relu(ad.add(ad.matmul(ad.constant(w1), ad.constant(x)), ad.constant(b1)))),
            ad.constant(b2),
        )
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=0)

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(3)
        w = ad.parameter(rng.normal(size=(5, 5)), "w")
        x = ad.constant(rng.normal(size=(5, 7)))
        a = ad.softmax_cols(ad.matmul(w, x)).data
        b = ad.softmax_cols(ad.matmul(w, x)).data
        assert np.array_equal(a, b)

    def test_matmul_shape_mismatch_names_node(self):
        w = ad.parameter(np.zeros((2, 3)), "enc.w")
        x = ad.constant(np.zeros((2, 4)), name="x")
        with pytest.raises(ad.ShapeError, match="enc.w"):
            ad.matmul(w, x)


class TestBackward:
    def test_sum_of_linear_map(self):
        w = ad.parameter(np.array([[1.0, 2.0], [3.0, 4.0]]), "w")
        x = ad.constant(np.array([[1.0], [1.0]]))
        loss = ad.sum_all(ad.matmul(w, x))
        ad.backward(loss)
        np.testing.assert_array_equal(w.grad, [[1.0, 1.0], [1.0, 1.0]])

    def test_softmax_cross_entropy_analytic_gradient(self):
        # d(CE)/dlogits = softmax(logits) - target
        logits = ad.parameter(np.array([[0.0], [0.0]]), "logits")
        target = np.array([[1.0], [0.0]])
        pred = ad.softmax_cols(logits)
        loss = ad.mul(ad.sum_all(ad.mul(ad.constant(target), ad.log(pred, floor=1e-12))), -1.0)
        ad.backward(loss)
        np.testing.assert_allclose(logits.grad, [[-0.5], [0.5]], atol=1e-12)

    def test_non_scalar_output_rejected(self):
        w = ad.parameter(np.ones((2, 2)), "w")
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(ad.matmul(w, ad.constant(np.ones((2, 2)))))

    def test_unused_parameter_gradient_stays_zero(self):
        used = ad.parameter(np.ones((2, 2)), "used")
        unused = ad.parameter(np.ones((2, 2)), "unused")
        loss = ad.sum_all(ad.matmul(used, ad.constant(np.ones((2, 1)))))
        ad.backward(loss)
        assert np.array_equal(unused.grad, np.zeros((2, 2)))

    def test_gradient_accumulates_over_reuse(self):
        w = ad.parameter(np.array([[2.0]]), "w")
        y = ad.mul(w, w)  # w^2, d/dw = 2w = 4
        ad.backward(ad.sum_all(y))
        np.testing.assert_allclose(w.grad, [[4.0]])


def _random_three_layer(rng):
    params = {
        "w1": ad.parameter(rng.normal(size=(6, 4)) * 0.7, "w1"),
        "b1": ad.parameter(rng.normal(size=(6, 1)) * 0.1, "b1"),
        "w2": ad.parameter(rng.normal(size=(5, 6)) * 0.7, "w2"),
        "b2": ad.parameter(rng.normal(size=(5, 1)) * 0.1, "b2"),
        "w3": ad.parameter(rng.normal(size=(3, 5)) * 0.7, "w3"),
    }
    x = rng.normal(size=(4, 8))
    t = rng.random((3, 8))
    t /= t.sum(axis=0)

    def forward():
        h1 = ad.relu(ad.add(ad.matmul(params["w1"], ad.constant(x)), params["b1"]))
        h2 = ad.l2_normalize_cols(ad.add(ad.matmul(params["w2"], h1), params["b2"]))
        logits = ad.matmul(params["w3"], h2)
        pred = ad.softmax_cols(logits)
        return ad.mul(ad.sum_all(ad.mul(ad.constant(t), ad.log(pred, floor=1e-12))), -1.0 / 8)

    return params, forward


class TestFiniteDifferences:
    def test_three_layer_net_gradients(self):
        rng = np.random.default_rng(7)
        params, forward = _random_three_layer(rng)
        loss = forward()
        ad.backward(loss)

        coords = []
        for p in params.values():
            for flat in rng.choice(p.data.size, size=min(2, p.data.size), replace=False):
                coords.append((p, int(flat)))
        fd = finite_difference(lambda: float(forward().data[0, 0]), params, coords)
        analytic = np.array([p.grad.flat[flat] for p, flat in coords])
        assert relative_error(analytic, fd).max() < 1e-3

    def test_randomized_cases_match_finite_differences(self):
        # spec-level property: 100 randomized op compositions
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(100):
            params, forward = _random_three_layer(rng)
            ad.zero_grads(params.values())
            loss = forward()
            ad.backward(loss)
            p = params["w2"]
            flat = int(rng.integers(p.data.size))
            fd = finite_difference(lambda: float(forward().data[0, 0]), params, [(p, flat)])
            worst = max(worst, float(relative_error(np.array([p.grad.flat[flat]]), fd)[0]))
        assert worst < 1e-3

    def test_gather_and_concat_gradients(self):
        rng = np.random.default_rng(13)
        w = ad.parameter(rng.normal(size=(3, 4)), "w")
        x = rng.normal(size=(4, 6))

        def forward():
            y = ad.matmul(w, ad.constant(x))
            parts = ad.concat_cols([ad.gather_cols(y, [0, 2, 2]), ad.gather_cols(y, [5])])
            return ad.mean_all(ad.mul(parts, parts))

        loss = forward()
        ad.backward(loss)
        coords = [(w, i) for i in range(w.data.size)]
        fd = finite_difference(lambda: float(forward().data[0, 0]), {"w": w}, coords)
        analytic = np.array([w.grad.flat[i] for _, i in coords])
        assert relative_error(analytic, fd).max() < 1e-3


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        params = {
            "enc.w": rng.normal(size=(3, 4)),
            "enc.b": rng.normal(size=(3, 1)),
            "head.p": rng.normal(size=(4, 2)),
        }
        path = tmp_path / "model.ckpt"
        ad.save_checkpoint(path, params)
        loaded = ad.load_checkpoint(path)
        assert set(loaded) == set(params)
        for name in params:
            np.testing.assert_array_equal(loaded[name], params[name])

    def test_header_layout(self, tmp_path):
        path = tmp_path / "m.ckpt"
        ad.save_checkpoint(path, {"a": np.zeros((1, 1))})
        blob = path.read_bytes()
        assert blob[:4] == b"NOPS"
        assert int.from_bytes(blob[4:8], "little") == 1

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"JUNKxxxxxxxx")
        with pytest.raises(ValueError, match="magic"):
            ad.load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        ad.save_checkpoint(path, {"a": np.arange(6.0).reshape(2, 3)})
        good = path.read_bytes()
        path.write_bytes(good[:-5])
        with pytest.raises(ValueError, match="truncated"):
            ad.load_checkpoint(path)
