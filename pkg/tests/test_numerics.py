"""Tests for the autodiff tensor core, layers, Adam and parameter files."""

from __future__ import annotations

import json

import numpy as np
import pytest

from marlcomm.numerics import tensor as T
from marlcomm.numerics.layers import (
    GRUParams,
    SpectralState,
    conv2d,
    gru_step,
    init_gru,
    linear,
    spectral_normalize,
)
from marlcomm.numerics.optim import Adam, AdamState, adam_step
from marlcomm.numerics.serialize import (
    MANIFEST_NAME,
    load_params,
    save_params,
)
from marlcomm.numerics.tensor import GradTape, Tensor, backward

# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class TestBackward:
    def test_square(self):
        tape = GradTape()
        x = tape.watch(3.0, "x")
        assert backward(x * x)["x"] == pytest.approx(6.0)

    def test_sigmoid_at_zero(self):
        tape = GradTape()
        x = tape.watch(0.0, "x")
        assert tape.backward(T.sigmoid(x))["x"] == pytest.approx(0.25)

    def test_untracked_tensor_gets_no_gradient(self):
        tape = GradTape()
        w = tape.watch(np.array([1.0, 2.0]), "w")
        c = Tensor(np.array([3.0, 4.0]))
        grads = tape.backward(T.sum(w * c))
        assert set(grads) == {"w"}
        np.testing.assert_array_equal(grads["w"], [3.0, 4.0])

    def test_detached_path_is_constant(self):
        tape = GradTape()
        w = tape.watch(np.array([2.0]), "w")
        grads = tape.backward(T.sum(T.detach(w) * w))
        np.testing.assert_array_equal(grads["w"], [2.0])

    def test_unused_leaf_gets_zeros(self):
        tape = GradTape()
        a = tape.watch(np.ones(3), "a")
        tape.watch(np.ones((2, 2)), "b")
        grads = tape.backward(T.sum(a))
        np.testing.assert_array_equal(grads["b"], np.zeros((2, 2)))

    def test_non_scalar_rejected(self):
        tape = GradTape()
        x = tape.watch(np.ones(3), "x")
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(x * 2.0)

    def test_consumed_tape_rejected(self):
        tape = GradTape()
        x = tape.watch(1.0, "x")
        loss = x * x
        tape.backward(loss)
        assert tape.consumed
        with pytest.raises(RuntimeError, match="consumed"):
            tape.backward(loss)

    def test_duplicate_leaf_name_rejected(self):
        tape = GradTape()
        tape.watch(1.0, "x")
        with pytest.raises(ValueError, match="already watched"):
            tape.watch(2.0, "x")

    def test_repeated_index_accumulates(self):
        tape = GradTape()
        x = tape.watch(np.array([1.0, 2.0]), "x")
        grads = tape.backward(T.sum(x[np.array([0, 0, 1])]))
        np.testing.assert_array_equal(grads["x"], [2.0, 1.0])

    def test_three_layer_network_matches_finite_differences(self, rng, check_gradients):
        params = {
            "w0": rng.normal(size=(5, 4)),
            "b0": rng.normal(size=5),
            "w1": rng.normal(size=(6, 5)),
            "b1": rng.normal(size=6),
            "w2": rng.normal(size=(3, 6)),
            "b2": rng.normal(size=3),
        }
        x = Tensor(rng.normal(size=(2, 4)))

        def build(w):
            h = T.tanh(linear(x, w["w0"], w["b0"]))
            h = T.sigmoid(linear(h, w["w1"], w["b1"]))
            return T.sum(T.log_softmax(linear(h, w["w2"], w["b2"]))[:, 0])

        check_gradients(build, params)

    def test_elementwise_ops_match_finite_differences(self, rng, check_gradients):
        params = {"a": rng.uniform(0.5, 2.0, size=(3, 4)), "b": rng.normal(size=4)}

        def build(w):
            ratio = T.log(w["a"]) / (1.0 + T.square(w["b"]))
            y = T.sqrt(w["a"]) * T.exp(w["b"]) - ratio
            z = T.l2_normalize(y, axis=-1)
            return T.mean(T.abs(z) + T.softmax(y, axis=0)) + T.sum(T.concat([y, z]))

        check_gradients(build, params)

    def test_masked_logsumexp_matches_finite_differences(self, rng, check_gradients):
        mask = np.array(
            [[True, False, True], [False, False, False], [True, True, True]]
        )
        params = {"a": rng.normal(size=(3, 3))}

        def build(w):
            lse = T.masked_logsumexp(w["a"], mask, axis=1)
            return T.sum(lse * np.array([1.0, 2.0, 3.0]))

        check_gradients(build, params)

    def test_masked_logsumexp_value(self):
        a = Tensor(np.log(np.array([[1.0, 2.0, 3.0]])))
        out = T.masked_logsumexp(a, np.array([[True, False, True]]), axis=1)
        assert out.data[0] == pytest.approx(np.log(4.0))

    def test_forward_is_deterministic(self, rng):
        w = rng.normal(size=(4, 3))
        x = rng.normal(size=(5, 3))
        a = linear(Tensor(x), Tensor(w), Tensor(np.zeros(4))).data
        b = linear(Tensor(x), Tensor(w), Tensor(np.zeros(4))).data
        assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class TestLinear:
    def test_identity(self):
        y = linear(Tensor([1.0, 2.0]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(y.data, [1.0, 2.0])

    def test_zero_weight(self):
        y = linear(Tensor([7.0, -3.0]), Tensor(np.zeros((1, 2))), Tensor([5.0]))
        np.testing.assert_array_equal(y.data, [5.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            linear(Tensor(np.ones(3)), Tensor(np.ones((2, 2))), Tensor(np.zeros(2)))

    def test_gradients(self, rng, check_gradients):
        x = rng.normal(size=(3, 4))
        params = {"w": rng.normal(size=(2, 4)), "b": rng.normal(size=2), "x": x}
        check_gradients(
            lambda w: T.sum(T.square(linear(w["x"], w["w"], w["b"]))), params
        )


def _naive_conv(x: np.ndarray, k: np.ndarray, b: np.ndarray) -> np.ndarray:
    channels, height, width = x.shape
    filters = k.shape[0]
    out = np.zeros((filters, height, width))
    for f in range(filters):
        for r in range(height):
            for c in range(width):
                acc = b[f]
                for ch in range(channels):
                    for i in range(3):
                        for j in range(3):
                            rr, cc = r + i - 1, c + j - 1
                            if 0 <= rr < height and 0 <= cc < width:
                                acc += k[f, ch, i, j] * x[ch, rr, cc]
                out[f, r, c] = acc
    return out


class TestConv2d:
    def test_delta_kernel_sums_channels(self, rng):
        x = rng.normal(size=(2, 4, 5))
        k = np.zeros((1, 2, 3, 3))
        k[0, :, 1, 1] = 1.0
        y = conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1)))
        np.testing.assert_allclose(y.data[0], x.sum(axis=0), atol=1e-12)

    def test_zero_kernels_give_bias(self, rng):
        x = rng.normal(size=(3, 3, 3))
        y = conv2d(Tensor(x), Tensor(np.zeros((2, 3, 3, 3))), Tensor([1.5, -2.0]))
        np.testing.assert_array_equal(y.data[0], np.full((3, 3), 1.5))
        np.testing.assert_array_equal(y.data[1], np.full((3, 3), -2.0))

    def test_matches_nested_loop_reference(self, rng):
        x = rng.normal(size=(2, 4, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        y = conv2d(Tensor(x), Tensor(k), Tensor(b))
        np.testing.assert_allclose(y.data, _naive_conv(x, k, b), atol=1e-12)

    def test_batched_equals_unbatched(self, rng):
        x = rng.normal(size=(2, 3, 3, 3))
        k = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        batched = conv2d(Tensor(x), Tensor(k), Tensor(b)).data
        for i in range(2):
            np.testing.assert_allclose(
                batched[i], conv2d(Tensor(x[i]), Tensor(k), Tensor(b)).data, atol=1e-12
            )

    def test_gradients(self, rng, check_gradients):
        params = {
            "x": rng.normal(size=(2, 2, 3, 3)),
            "k": rng.normal(size=(2, 2, 3, 3)),
            "b": rng.normal(size=2),
        }
        check_gradients(lambda w: T.sum(T.tanh(conv2d(w["x"], w["k"], w["b"]))), params)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="channels"):
            conv2d(
                Tensor(rng.normal(size=(2, 3, 3))),
                Tensor(np.zeros((1, 3, 3, 3))),
                Tensor(np.zeros(1)),
            )


class TestGRU:
    def test_zero_parameters_halve_state(self, rng):
        h = rng.normal(size=4)
        params = GRUParams(
            w_ih=Tensor(np.zeros((12, 3))),
            w_hh=Tensor(np.zeros((12, 4))),
            b_ih=Tensor(np.zeros(12)),
            b_hh=Tensor(np.zeros(12)),
        )
        out = gru_step(Tensor(rng.normal(size=3)), Tensor(h), params)
        np.testing.assert_allclose(out.data, 0.5 * h, atol=1e-15)

    def test_zero_input_and_state_stay_zero(self, rng):
        raw = init_gru(rng, 3, 4)
        params = GRUParams(**{k: Tensor(v) for k, v in raw.items()})
        out = gru_step(Tensor(np.zeros(3)), Tensor(np.zeros(4)), params)
        np.testing.assert_array_equal(out.data, np.zeros(4))

    def test_gradients(self, rng, check_gradients):
        params = {k: rng.normal(size=v.shape) for k, v in init_gru(rng, 3, 4).items()}
        params["x"] = rng.normal(size=(2, 3))
        params["h"] = rng.normal(size=(2, 4))

        def build(w):
            gru = GRUParams(w["w_ih"], w["w_hh"], w["b_ih"], w["b_hh"])
            return T.sum(T.square(gru_step(w["x"], w["h"], gru)))

        check_gradients(build, params)

    def test_state_shape_mismatch(self, rng):
        raw = init_gru(rng, 3, 4)
        params = GRUParams(**{k: Tensor(v) for k, v in raw.items()})
        with pytest.raises(ValueError, match="does not match"):
            gru_step(Tensor(np.zeros(3)), Tensor(np.zeros(5)), params)


class TestSpectralNormalize:
    def test_identity_unchanged(self, rng):
        out = spectral_normalize(Tensor(np.eye(3)), SpectralState.init(rng, 3))
        np.testing.assert_allclose(out.data, np.eye(3), atol=1e-12)

    def test_diagonal_converges_to_exact_svd(self, rng):
        state = SpectralState.init(rng, 2)
        out = spectral_normalize(Tensor(np.diag([3.0, 1.0])), state, iters=100)
        np.testing.assert_allclose(out.data, np.diag([1.0, 1.0 / 3.0]), atol=1e-8)

    def test_scale_invariance_at_convergence(self, rng):
        w = rng.normal(size=(5, 4))
        u0 = SpectralState.init(rng, 5)
        a = spectral_normalize(Tensor(w), u0.copy(), iters=200).data
        b = spectral_normalize(Tensor(7.5 * w), u0.copy(), iters=200).data
        np.testing.assert_allclose(a, b, atol=1e-8)

    def test_top_singular_value_near_one(self, rng):
        w = rng.normal(size=(8, 4))
        out = spectral_normalize(Tensor(w), SpectralState.init(rng, 8), iters=50)
        top = np.linalg.svd(out.data, compute_uv=False)[0]
        assert top == pytest.approx(1.0, abs=1e-3)

    def test_state_stays_unit_norm(self, rng):
        state = SpectralState.init(rng, 6)
        w = Tensor(rng.normal(size=(6, 3)))
        for _ in range(5):
            spectral_normalize(w, state)
            assert np.linalg.norm(state.u) == pytest.approx(1.0, abs=1e-12)

    def test_no_update_leaves_state(self, rng):
        state = SpectralState.init(rng, 4)
        before = state.u.copy()
        spectral_normalize(Tensor(rng.normal(size=(4, 4))), state, update=False)
        np.testing.assert_array_equal(state.u, before)

    def test_zero_matrix_returned_unchanged(self, rng):
        out = spectral_normalize(Tensor(np.zeros((3, 2))), SpectralState.init(rng, 3))
        np.testing.assert_array_equal(out.data, np.zeros((3, 2)))

    def test_rejects_non_matrix(self, rng):
        with pytest.raises(ValueError, match="matrix"):
            spectral_normalize(Tensor(np.ones(3)), SpectralState.init(rng, 3))

    def test_rejects_zero_iterations(self, rng):
        with pytest.raises(ValueError, match="iters"):
            spectral_normalize(Tensor(np.eye(2)), SpectralState.init(rng, 2), iters=0)

    def test_gradients_at_convergence(self, rng, check_gradients):
        # singular values 3, 1, 0.5: power iteration converges to machine precision
        q1, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        q2, _ = np.linalg.qr(rng.normal(size=(4, 3)))
        params = {"w": q1 @ np.diag([3.0, 1.0, 0.5]) @ q2.T}
        state = SpectralState.init(rng, 3)

        def build(w):
            normalized = spectral_normalize(
                w["w"], state.copy(), iters=200, update=False
            )
            return T.sum(T.tanh(normalized))

        check_gradients(build, params)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class TestAdam:
    def test_zero_gradient_keeps_parameter(self):
        p = np.array([1.0, -2.0])
        out = adam_step(p, np.zeros(2), AdamState.zeros_like(p))
        np.testing.assert_array_equal(out, p)

    def test_first_step_hand_value(self):
        p = np.array([0.0])
        out = adam_step(p, np.array([1.0]), AdamState.zeros_like(p), lr=3e-4, eps=1e-3)
        assert out[0] == pytest.approx(-3e-4 / 1.001, rel=1e-12)
        assert out[0] == pytest.approx(-2.997e-4, rel=1e-3)

    def test_opposite_gradients_opposite_updates(self, rng):
        p = rng.normal(size=4)
        g = rng.normal(size=4)
        up = adam_step(p, g, AdamState.zeros_like(p)) - p
        down = adam_step(p, -g, AdamState.zeros_like(p)) - p
        np.testing.assert_allclose(up, -down, atol=1e-15)

    def test_step_counter_advances(self):
        p = np.zeros(2)
        state = AdamState.zeros_like(p)
        for t in range(1, 4):
            p = adam_step(p, np.ones(2), state)
            assert state.t == t

    def test_shape_mismatch(self):
        p = np.zeros(2)
        with pytest.raises(ValueError, match="shape"):
            adam_step(p, np.zeros(3), AdamState.zeros_like(p))

    def test_optimizer_updates_dict(self):
        params = {"a": np.zeros(2), "b": np.ones((2, 2))}
        opt = Adam(params, lr=0.1, eps=1e-8)
        opt.step(params, {"a": np.ones(2), "b": np.zeros((2, 2))})
        np.testing.assert_allclose(params["a"], [-0.1, -0.1], rtol=1e-6)
        np.testing.assert_array_equal(params["b"], np.ones((2, 2)))


# ---------------------------------------------------------------------------
# Parameter files
# ---------------------------------------------------------------------------


class TestSerialize:
    def test_round_trip_is_bit_exact(self, rng, tmp_path):
        params = {
            "enc.w": rng.normal(size=(3, 4)),
            "enc.b": rng.normal(size=3),
            "scalar": np.array(np.pi),
            "tiny": np.array([5e-324, -0.0, np.inf]),
        }
        save_params(params, tmp_path / "p", {"agent": 2})
        loaded, metadata = load_params(tmp_path / "p")
        assert list(loaded) == list(params)
        for name, value in params.items():
            assert loaded[name].shape == value.shape
            assert loaded[name].tobytes() == value.tobytes()
        assert metadata == {"agent": 2}

    def test_manifest_layout(self, tmp_path):
        save_params({"a": np.zeros((2, 3)), "b": np.zeros(4)}, tmp_path)
        manifest = json.loads((tmp_path / MANIFEST_NAME).read_text())
        assert manifest["dtype"] == "<f8"
        a, b = manifest["parameters"]
        assert (a["name"], a["shape"], a["offset"], a["nbytes"]) == ("a", [2, 3], 0, 48)
        assert (b["offset"], b["nbytes"]) == (48, 32)

    def test_inconsistent_manifest_rejected(self, tmp_path):
        save_params({"a": np.zeros(3)}, tmp_path)
        manifest = json.loads((tmp_path / MANIFEST_NAME).read_text())
        manifest["parameters"][0]["shape"] = [4]
        (tmp_path / MANIFEST_NAME).write_text(json.dumps(manifest))
        with pytest.raises(ValueError, match="does not fit"):
            load_params(tmp_path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_params(tmp_path / "nope")
