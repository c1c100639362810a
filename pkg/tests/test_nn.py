import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unregscore import nn
from unregscore.errors import DataError, NumericalError, ShapeError, StaleCacheError


def _randomize(params, rng):
    for d in params.layers:
        for k in ("b", "beta"):
            if k in d:
                d[k] = rng.standard_normal(d[k].shape)
        if "gamma" in d:
            d["gamma"] = rng.uniform(0.5, 1.5, d["gamma"].shape)


def fd_check(stack, x, rng, h=1e-5):
    """Max relative error between backward() and central differences of <out, G>."""
    params = nn.init_params(stack, rng)
    _randomize(params, rng)
    out, cache = nn.forward(stack, params, x, "train", update_stats=False)
    G = rng.standard_normal(out.shape)

    def f():
        return float(np.sum(nn.forward(stack, params, x, "train", update_stats=False)[0] * G))

    gx, gp = nn.backward(cache, G)
    errs = []
    targets = [(gp[i][name], w) for i, name, w in params.trainable(stack)] + [(gx, x)]
    for analytic, w in targets:
        num = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            old = w[idx]
            w[idx] = old + h
            fp = f()
            w[idx] = old - h
            fm = f()
            w[idx] = old
            num[idx] = (fp - fm) / (2 * h)
        errs.append(np.linalg.norm(analytic - num) / max(np.linalg.norm(num), np.linalg.norm(analytic), 1e-6))
    return max(errs)


class TestForward:
    def test_relu(self):
        out, _ = nn.forward([nn.relu()], nn.ParamStore([{}]), np.array([[-1.0, 0.0, 2.0]]))
        np.testing.assert_array_equal(out, [[0.0, 0.0, 2.0]])

    def test_dense_identity(self):
        params = nn.ParamStore([{"W": np.eye(3), "b": np.zeros(3)}])
        v = np.array([[0.3, -1.2, 4.0]])
        out, _ = nn.forward([nn.dense(3, 3)], params, v)
        np.testing.assert_array_equal(out, v)

    def test_conv_output_size(self):
        stack = [nn.conv2d(1, 2)]
        params = nn.init_params(stack, np.random.default_rng(0))
        out, _ = nn.forward(stack, params, np.zeros((1, 1, 32, 32)))
        assert out.shape == (1, 2, 16, 16)
        assert nn.output_shape(stack, (1, 32, 32)) == (2, 16, 16)

    def test_deconv_inverts_conv_geometry(self):
        assert nn.output_shape([nn.deconv2d(4, 1)], (4, 16, 16)) == (1, 32, 32)

    def test_conv_matches_direct_loop(self):
        rng = np.random.default_rng(3)
        stack = [nn.conv2d(2, 3)]
        params = nn.init_params(stack, rng)
        params.layers[0]["b"] = rng.standard_normal(3)
        x = rng.standard_normal((2, 2, 6, 6))
        out, _ = nn.forward(stack, params, x)
        W, b = params.layers[0]["W"], params.layers[0]["b"]
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 3, 3, 3))
        for n in range(2):
            for o in range(3):
                for i in range(3):
                    for j in range(3):
                        ref[n, o, i, j] = np.sum(xp[n, :, 2 * i : 2 * i + 4, 2 * j : 2 * j + 4] * W[o]) + b[o]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_deconv_is_adjoint_of_conv(self):
        rng = np.random.default_rng(4)
        conv, dec = nn.conv2d(2, 3), nn.deconv2d(3, 2)
        W = rng.standard_normal((3, 2, 4, 4))
        pc = nn.ParamStore([{"W": W, "b": np.zeros(3)}])
        pd = nn.ParamStore([{"W": W.copy(), "b": np.zeros(2)}])
        x = rng.standard_normal((1, 2, 8, 8))
        y = rng.standard_normal((1, 3, 4, 4))
        cx, _ = nn.forward([conv], pc, x)
        dy, _ = nn.forward([dec], pd, y)
        assert np.sum(cx * y) == pytest.approx(np.sum(x * dy), rel=1e-12)

    def test_shape_mismatch(self):
        stack = [nn.dense(4, 2)]
        params = nn.init_params(stack, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            nn.forward(stack, params, np.zeros((1, 3)))

    def test_conv_geometry_must_tile(self):
        with pytest.raises(ShapeError):
            nn.output_shape([nn.conv2d(1, 1)], (1, 7, 7))

    def test_non_finite_activation(self):
        params = nn.ParamStore([{"W": np.array([[np.inf]]), "b": np.zeros(1)}])
        with pytest.raises(NumericalError):
            nn.forward([nn.dense(1, 1)], params, np.ones((1, 1)))

    def test_eval_is_pure(self):
        rng = np.random.default_rng(5)
        stack = [nn.conv2d(1, 4), nn.batchnorm(4), nn.relu(), nn.reshape(64), nn.dense(64, 3)]
        params = nn.init_params(stack, rng)
        nn.forward(stack, params, rng.standard_normal((8, 1, 8, 8)), "train")
        before = params.copy()
        x = rng.standard_normal((3, 1, 8, 8))
        a, _ = nn.forward(stack, params, x)
        b, _ = nn.forward(stack, params, x)
        assert np.array_equal(a, b)
        for d0, d1 in zip(before.layers, params.layers):
            for k in d0:
                assert np.array_equal(d0[k], d1[k])

    def test_batchnorm_train_normalizes(self):
        rng = np.random.default_rng(6)
        stack = [nn.batchnorm(3)]
        params = nn.init_params(stack, rng)
        x = 50.0 * rng.standard_normal((16, 3, 5, 5)) + 7.0
        out, _ = nn.forward(stack, params, x, "train")
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-6)

    def test_batchnorm_running_stats(self):
        rng = np.random.default_rng(7)
        stack = [nn.batchnorm(2)]
        params = nn.init_params(stack, rng)
        x = rng.standard_normal((10, 2)) * 3 + 1
        nn.forward(stack, params, x, "train")
        rm = params.layers[0]["running_mean"]
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(params.layers[0]["running_var"], 0.9 + 0.1 * x.var(axis=0, ddof=1))
        assert np.all(params.layers[0]["running_var"] >= 0)

    def test_recalibrate_averages_batches(self):
        rng = np.random.default_rng(8)
        stack = [nn.batchnorm(2)]
        params = nn.init_params(stack, rng)
        batches = [rng.standard_normal((6, 2)) + i for i in range(3)]
        nn.recalibrate_batchnorm(stack, params, batches)
        expected = np.mean([b.mean(axis=0) for b in batches], axis=0)
        np.testing.assert_allclose(params.layers[0]["running_mean"], expected, rtol=1e-12)


class TestBackward:
    def test_dense_linear_map(self):
        rng = np.random.default_rng(0)
        W = rng.standard_normal((2, 3))
        params = nn.ParamStore([{"W": W, "b": np.zeros(2)}])
        x = rng.standard_normal((1, 3))
        _, cache = nn.forward([nn.dense(3, 2)], params, x, "train")
        g = rng.standard_normal((1, 2))
        gx, gp = nn.backward(cache, g)
        np.testing.assert_allclose(gp[0]["W"], g.T @ x)
        np.testing.assert_allclose(gx, g @ W)

    def test_relu_dead_unit(self):
        _, cache = nn.forward([nn.relu()], nn.ParamStore([{}]), np.array([[-1.0, 2.0]]), "train")
        gx, _ = nn.backward(cache, np.ones((1, 2)))
        np.testing.assert_array_equal(gx, [[0.0, 1.0]])

    @pytest.mark.parametrize(
        "stack, shape",
        [
            ([nn.dense(3, 4)], (5, 3)),
            ([nn.conv2d(2, 3)], (2, 2, 8, 8)),
            ([nn.deconv2d(2, 3)], (2, 2, 4, 4)),
            ([nn.batchnorm(3)], (4, 3, 2, 2)),
            ([nn.batchnorm(3)], (6, 3)),
            ([nn.relu()], (4, 5)),
            ([nn.conv2d(1, 2), nn.batchnorm(2), nn.relu(), nn.reshape(32), nn.dense(32, 3)], (3, 1, 8, 8)),
        ],
    )
    def test_finite_differences(self, stack, shape):
        rng = np.random.default_rng(11)
        x = rng.standard_normal(shape)
        if stack[0].kind == "relu":
            x[np.abs(x) < 1e-3] = 0.5
        assert fd_check(stack, x, rng) < 1e-4

    @settings(max_examples=15, deadline=None)
    @given(
        kind=st.sampled_from(["dense", "conv2d", "deconv2d", "batchnorm"]),
        b=st.integers(2, 4),
        c_in=st.integers(1, 3),
        c_out=st.integers(1, 3),
        side=st.sampled_from([2, 4, 6, 8]),
        seed=st.integers(0, 2**16),
    )
    def test_finite_differences_random_shapes(self, kind, b, c_in, c_out, side, seed):
        rng = np.random.default_rng(seed)
        if kind == "dense":
            stack, shape = [nn.dense(c_in * side, c_out * side)], (b, c_in * side)
        elif kind == "conv2d":
            stack, shape = [nn.conv2d(c_in, c_out)], (b, c_in, side, side)
        elif kind == "deconv2d":
            stack, shape = [nn.deconv2d(c_in, c_out)], (b, c_in, side // 2, side // 2)
        else:
            stack, shape = [nn.batchnorm(c_in)], (b, c_in, side, side)
        assert fd_check(stack, rng.standard_normal(shape), rng) < 1e-4

    def test_stale_cache(self):
        stack = [nn.dense(2, 2)]
        params = nn.init_params(stack, np.random.default_rng(0))
        _, cache = nn.forward(stack, params, np.ones((1, 2)), "train")
        params.bump()
        with pytest.raises(StaleCacheError):
            nn.backward(cache, np.ones((1, 2)))


class TestAdam:
    def _scalar(self, w0):
        stack = [nn.dense(1, 1)]
        params = nn.ParamStore([{"W": np.array([[w0]]), "b": np.zeros(1)}])
        return stack, params

    def test_zero_gradient_is_identity(self):
        stack, params = self._scalar(0.7)
        state = nn.AdamState(weight_decay=0.0)
        nn.adam_step(stack, params, [{"W": np.zeros((1, 1)), "b": np.zeros(1)}], state)
        assert params.layers[0]["W"][0, 0] == 0.7
        assert params.layers[0]["b"][0] == 0.0

    def test_first_step_moves_by_alpha(self):
        stack, params = self._scalar(1.0)
        state = nn.AdamState(weight_decay=0.0)
        nn.adam_step(stack, params, [{"W": np.ones((1, 1)), "b": np.zeros(1)}], state)
        assert params.layers[0]["W"][0, 0] == pytest.approx(0.999, abs=1e-9)
        assert state.t == 1

    def test_weight_decay_is_l2_in_gradient(self):
        stack, params = self._scalar(2.0)
        state = nn.AdamState(weight_decay=0.5)
        nn.adam_step(stack, params, [{"W": np.zeros((1, 1)), "b": np.zeros(1)}], state)
        # effective gradient 0.5 * 2.0 > 0 -> first step moves by -alpha
        assert params.layers[0]["W"][0, 0] == pytest.approx(2.0 - 1e-3, abs=1e-9)
        assert state.m[(0, "W")][0, 0] == pytest.approx(0.1 * 1.0)

    def test_quadratic_descent(self):
        stack, params = self._scalar(1.0)
        state = nn.AdamState(alpha=1e-2, weight_decay=0.0)
        path = []
        for _ in range(100):
            w = params.layers[0]["W"]
            nn.adam_step(stack, params, [{"W": 2 * w, "b": np.zeros(1)}], state)
            path.append(abs(params.layers[0]["W"][0, 0]))
        tail = np.array(path[10:])
        assert np.all(np.diff(tail) < 0)
        assert path[-1] < 0.5

    def test_second_moments_nonnegative(self):
        rng = np.random.default_rng(0)
        stack, params = self._scalar(1.0)
        state = nn.AdamState()
        for _ in range(5):
            nn.adam_step(stack, params, [{"W": rng.standard_normal((1, 1)), "b": rng.standard_normal(1)}], state)
        assert all(np.all(v >= 0) for v in state.v.values())

    def test_non_finite_gradient(self):
        stack, params = self._scalar(1.0)
        with pytest.raises(NumericalError):
            nn.adam_step(stack, params, [{"W": np.full((1, 1), np.nan), "b": np.zeros(1)}], nn.AdamState())


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        stack = [nn.conv2d(1, 2), nn.batchnorm(2), nn.relu(), nn.reshape(128), nn.dense(128, 4)]
        params = nn.init_params(stack, rng)
        params.layers[1]["running_var"] = rng.uniform(0.1, 2.0, 2)
        path = tmp_path / "p.bin"
        nn.save_params(path, stack, params)
        kinds, loaded = nn.load_params(path, stack)
        assert kinds == [s.kind for s in stack]
        for d0, d1 in zip(params.layers, loaded.layers):
            assert d0.keys() == d1.keys()
            for k in d0:
                assert d0[k].tobytes() == d1[k].tobytes()

    def test_header(self, tmp_path):
        stack = [nn.dense(2, 1)]
        buf = nn.params_to_bytes(stack, nn.init_params(stack, np.random.default_rng(0)))
        assert buf[:8] == b"USNNCKPT"
        assert int.from_bytes(buf[8:12], "little") == 1
        assert int.from_bytes(buf[12:16], "little") == 1

    def test_rejects_bad_magic_and_truncation(self):
        stack = [nn.dense(2, 1)]
        buf = nn.params_to_bytes(stack, nn.init_params(stack, np.random.default_rng(0)))
        with pytest.raises(DataError, match="magic"):
            nn.params_from_bytes(b"XXXXXXXX" + buf[8:])
        with pytest.raises(DataError, match="offset"):
            nn.params_from_bytes(buf[:-3])

    def test_architecture_mismatch(self):
        stack = [nn.dense(2, 1)]
        buf = nn.params_to_bytes(stack, nn.init_params(stack, np.random.default_rng(0)))
        with pytest.raises(DataError):
            nn.params_from_bytes(buf, [nn.dense(3, 1)])
