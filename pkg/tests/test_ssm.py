import math

import numpy as np
import pytest

from diarkit.ssm import (
    MambaBlockParams,
    SsmParams,
    SsmSequenceInputs,
    bimamba_forward,
    finite_difference_check,
    mamba_block_forward,
    softplus,
    ssm_forward_scan,
    ssm_forward_sequential,
    ssm_loss_gradients,
    ssm_states,
    swish,
)


def straight_line_ssm(params, inputs):
    """Independent oracle: scalar loops, no shared code with the kernel."""
    T, d_model = inputs.u.shape
    d_state = inputs.B.shape[1]
    out = np.zeros((T, d_model))
    for c in range(d_model):
        h = [0.0] * d_state
        for t in range(T):
            z = 0.0
            for n in range(d_state):
                a_bar = math.exp(inputs.delta[t, c] * params.A[c, n])
                b_bar = inputs.delta[t, c] * inputs.B[t, n]
                h[n] = a_bar * h[n] + b_bar * inputs.u[t, c]
                z += inputs.C[t, n] * h[n]
            out[t, c] = z + params.D[c] * inputs.u[t, c]
    return out


class TestSequential:
    def test_feedthrough_limit(self):
        rng = np.random.default_rng(0)
        params = SsmParams(3, 4, -rng.uniform(0.5, 2, (3, 4)), rng.standard_normal(3))
        u = rng.standard_normal((10, 3))
        inputs = SsmSequenceInputs(
            u=u, B=rng.standard_normal((10, 4)), C=rng.standard_normal((10, 4)),
            delta=np.full((10, 3), 1e-9),
        )
        out = ssm_forward_sequential(params, inputs)
        np.testing.assert_allclose(out, params.D * u, atol=1e-7)

    def test_integrator_accumulates(self):
        params = SsmParams(1, 1, np.array([[-1e-9]]), np.array([0.0]))
        inputs = SsmSequenceInputs(
            u=np.ones((3, 1)), B=np.ones((3, 1)), C=np.ones((3, 1)), delta=np.ones((3, 1))
        )
        np.testing.assert_allclose(
            ssm_forward_sequential(params, inputs).ravel(), [1.0, 2.0, 3.0], rtol=1e-8
        )

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            d_model = int(rng.integers(1, 4))
            d_state = int(rng.integers(1, 6))
            params = SsmParams.random(d_model, d_state, rng)
            inputs = SsmSequenceInputs.random(64, d_model, d_state, rng)
            np.testing.assert_allclose(
                ssm_forward_sequential(params, inputs),
                straight_line_ssm(params, inputs),
                atol=1e-12,
            )

    def test_rejects_nonpositive_delta(self):
        with pytest.raises(ValueError, match="delta"):
            SsmSequenceInputs(
                u=np.ones((2, 1)), B=np.ones((2, 1)), C=np.ones((2, 1)),
                delta=np.array([[1.0], [0.0]]),
            )

    def test_rejects_nan_input(self):
        with pytest.raises(ValueError, match="non-finite"):
            SsmSequenceInputs(
                u=np.array([[np.nan]]), B=np.ones((1, 1)), C=np.ones((1, 1)),
                delta=np.ones((1, 1)),
            )

    def test_rejects_nonnegative_state_matrix(self):
        with pytest.raises(ValueError, match="strictly negative"):
            SsmParams(1, 1, np.array([[0.0]]), np.array([0.0]))


class TestScan:
    def test_equals_sequential_power_of_two(self):
        rng = np.random.default_rng(2)
        params = SsmParams.random(2, 3, rng)
        inputs = SsmSequenceInputs.random(128, 2, 3, rng)
        np.testing.assert_allclose(
            ssm_forward_scan(params, inputs),
            ssm_forward_sequential(params, inputs),
            atol=1e-6,
        )

    def test_single_frame_exact(self):
        rng = np.random.default_rng(3)
        params = SsmParams.random(2, 2, rng)
        inputs = SsmSequenceInputs.random(1, 2, 2, rng)
        np.testing.assert_array_equal(
            ssm_forward_scan(params, inputs), ssm_forward_sequential(params, inputs)
        )

    def test_equals_sequential_many_lengths(self):
        rng = np.random.default_rng(4)
        for frames in (2, 3, 7, 33, 100, 257):
            params = SsmParams.random(2, 4, rng)
            inputs = SsmSequenceInputs.random(frames, 2, 4, rng)
            np.testing.assert_allclose(
                ssm_forward_scan(params, inputs),
                ssm_forward_sequential(params, inputs),
                atol=1e-6,
            )

    def test_bounded_output_for_stable_dynamics(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            params = SsmParams.random(2, 3, rng)
            inputs = SsmSequenceInputs.random(200, 2, 3, rng)
            out = ssm_forward_scan(params, inputs)
            assert np.isfinite(out).all()
            a_bar_max = float(np.exp(inputs.delta.min() * params.A.max()))
            assert a_bar_max < 1.0


class TestStability:
    def test_state_bound_on_constant_inputs(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            params = SsmParams.random(2, 3, rng)
            T = 200
            inputs = SsmSequenceInputs(
                u=np.tile(rng.standard_normal(2), (T, 1)),
                B=np.tile(rng.standard_normal(3), (T, 1)),
                C=rng.standard_normal((T, 3)),
                delta=np.tile(rng.uniform(0.05, 0.5, 2), (T, 1)),
            )
            states = ssm_states(params, inputs)
            a_bar = np.exp(inputs.delta[0][:, None] * params.A)
            b_u = (inputs.delta[0] * inputs.u[0])[:, None] * inputs.B[0][None, :]
            bound = np.abs(b_u).max() / (1.0 - a_bar.max())
            assert np.abs(states).max() <= bound + 1e-9


class TestTimeInvariantConvolution:
    def test_output_equals_impulse_response_convolution(self):
        rng = np.random.default_rng(7)
        for T in (16, 64, 128):
            d_model, d_state = 2, 3
            params = SsmParams.random(d_model, d_state, rng)
            B = rng.standard_normal(d_state)
            C = rng.standard_normal(d_state)
            delta = rng.uniform(0.05, 0.4, d_model)
            inputs = SsmSequenceInputs(
                u=rng.standard_normal((T, d_model)),
                B=np.tile(B, (T, 1)),
                C=np.tile(C, (T, 1)),
                delta=np.tile(delta, (T, 1)),
            )
            out = ssm_forward_sequential(params, inputs)

            a_bar = np.exp(delta[:, None] * params.A)  # (d_model, d_state)
            b_bar = delta[:, None] * B[None, :]
            expected = np.zeros((T, d_model))
            for c in range(d_model):
                kernel = np.array(
                    [float(C @ (a_bar[c] ** j * b_bar[c])) for j in range(T)]
                )
                for t in range(T):
                    expected[t, c] = (
                        kernel[: t + 1] @ inputs.u[t::-1, c] + params.D[c] * inputs.u[t, c]
                    )
            np.testing.assert_allclose(out, expected, atol=1e-8)


class TestGradients:
    def test_feedthrough_gradient_exact(self):
        rng = np.random.default_rng(8)
        params = SsmParams.random(3, 2, rng)
        inputs = SsmSequenceInputs(
            u=rng.standard_normal((12, 3)),
            B=rng.standard_normal((12, 2)),
            C=np.zeros((12, 2)),
            delta=rng.uniform(0.05, 0.5, (12, 3)),
        )
        grads = ssm_loss_gradients(params, inputs)
        np.testing.assert_allclose(grads["u"], np.tile(params.D, (12, 1)), atol=1e-12)

    def test_finite_difference_agreement(self):
        rng = np.random.default_rng(9)
        params = SsmParams.random(3, 4, rng)
        inputs = SsmSequenceInputs.random(16, 3, 4, rng)
        assert finite_difference_check(ssm_forward_sequential, params, inputs, 1e-5) < 1e-4

    def test_scan_gradients_agree_too(self):
        rng = np.random.default_rng(10)
        params = SsmParams.random(2, 3, rng)
        inputs = SsmSequenceInputs.random(16, 2, 3, rng)
        assert finite_difference_check(ssm_forward_scan, params, inputs, 1e-5) < 1e-4

    def test_state_matrix_gradient_matches_impulse_response_derivative(self):
        rng = np.random.default_rng(11)
        d_model, d_state, T = 2, 3, 12
        params = SsmParams.random(d_model, d_state, rng)
        B = rng.standard_normal(d_state)
        C = rng.standard_normal(d_state)
        delta = rng.uniform(0.05, 0.4, d_model)
        inputs = SsmSequenceInputs(
            u=rng.standard_normal((T, d_model)),
            B=np.tile(B, (T, 1)),
            C=np.tile(C, (T, 1)),
            delta=np.tile(delta, (T, 1)),
        )
        grads = ssm_loss_gradients(params, inputs)

        # z[t,c] = sum_j C_n exp(j delta_c A_cn) delta_c B_n u[t-j,c] + D_c u[t,c]
        # d/dA_cn of the j-term multiplies by j delta_c (zero for j = 0).
        expected = np.zeros_like(params.A)
        for c in range(d_model):
            for n in range(d_state):
                total = 0.0
                for t in range(T):
                    for j in range(1, t + 1):
                        total += (
                            C[n]
                            * j * delta[c]
                            * math.exp(j * delta[c] * params.A[c, n])
                            * delta[c] * B[n]
                            * inputs.u[t - j, c]
                        )
                expected[c, n] = total
        np.testing.assert_allclose(grads["A"], expected, rtol=1e-9, atol=1e-10)

    def test_epsilon_validated(self):
        rng = np.random.default_rng(12)
        params = SsmParams.random(1, 1, rng)
        inputs = SsmSequenceInputs.random(4, 1, 1, rng)
        with pytest.raises(ValueError):
            finite_difference_check(ssm_forward_sequential, params, inputs, 1e-2)


class TestMambaBlock:
    def test_zero_input_maps_to_zero(self):
        rng = np.random.default_rng(13)
        params = MambaBlockParams.random(4, d_state=4, rng=rng)
        out = mamba_block_forward(params, np.zeros((8, 4)))
        np.testing.assert_array_equal(out, np.zeros((8, 4)))

    def test_identity_configuration_reduces_to_projections(self):
        rng = np.random.default_rng(14)
        d_model, d_state, expand, width = 3, 4, 2, 4
        d_inner = d_model * expand
        base = MambaBlockParams.random(d_model, d_state, expand, width, rng=rng)
        conv_kernel = np.zeros((width, d_inner))
        conv_kernel[width - 1] = 1.0  # pass-through tap on the current frame
        gate_bias_value = 1.2784645427610738  # swish(x) == 1 at this x
        params = MambaBlockParams(
            d_model=d_model, d_state=d_state, expand=expand, conv_width=width,
            w_in=base.w_in, w_gate=np.zeros((d_model, d_inner)), w_out=base.w_out,
            conv_kernel=conv_kernel, conv_bias=np.zeros(d_inner),
            w_b=base.w_b, w_c=base.w_c,
            w_delta=np.zeros((d_inner, d_inner)), b_delta=np.full(d_inner, -30.0),
            b_gate=np.full(d_inner, gate_bias_value),
            ssm=SsmParams(d_inner, d_state, base.ssm.A, np.ones(d_inner)),
        )
        x = rng.standard_normal((10, d_model))
        out = mamba_block_forward(params, x)
        normed = (x - x.mean(axis=1, keepdims=True)) / np.sqrt(
            x.var(axis=1, keepdims=True) + 1e-5
        )
        hidden = normed @ params.w_in
        expected = np.where(hidden > 0, hidden, hidden / (1 + np.exp(-np.abs(hidden))))
        expected = swish(hidden) @ params.w_out
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_random_parameters_finite(self):
        rng = np.random.default_rng(15)
        for seed in range(20):
            params = MambaBlockParams.random(4, d_state=6, rng=np.random.default_rng(seed))
            x = rng.standard_normal((32, 4))
            out = mamba_block_forward(params, x)
            assert out.shape == (32, 4)
            assert np.isfinite(out).all()

    def test_shape_mismatch_rejected(self):
        params = MambaBlockParams.random(4, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            mamba_block_forward(params, np.zeros((5, 3)))


class TestBiMamba:
    def _zeroed_output(self, params):
        return MambaBlockParams(
            d_model=params.d_model, d_state=params.d_state, expand=params.expand,
            conv_width=params.conv_width, w_in=params.w_in, w_gate=params.w_gate,
            w_out=np.zeros_like(np.asarray(params.w_out)), conv_kernel=params.conv_kernel,
            conv_bias=params.conv_bias, w_b=params.w_b, w_c=params.w_c,
            w_delta=params.w_delta, b_delta=params.b_delta, b_gate=params.b_gate,
            ssm=params.ssm,
        )

    def test_zero_blocks_reduce_to_identity(self):
        rng = np.random.default_rng(16)
        fwd = self._zeroed_output(MambaBlockParams.random(3, rng=rng))
        bwd = self._zeroed_output(MambaBlockParams.random(3, rng=rng))
        x = rng.standard_normal((9, 3))
        np.testing.assert_array_equal(bimamba_forward(fwd, bwd, x), x)

    def test_time_reversal_symmetry(self):
        rng = np.random.default_rng(17)
        fwd = MambaBlockParams.random(3, rng=np.random.default_rng(1))
        bwd = MambaBlockParams.random(3, rng=np.random.default_rng(2))
        x = rng.standard_normal((14, 3))
        flipped = bimamba_forward(bwd, fwd, x[::-1])
        np.testing.assert_allclose(bimamba_forward(fwd, bwd, x), flipped[::-1], atol=1e-10)

    def test_single_frame_directions_coincide(self):
        rng = np.random.default_rng(18)
        params = MambaBlockParams.random(3, rng=rng)
        x = rng.standard_normal((1, 3))
        np.testing.assert_allclose(
            bimamba_forward(params, params, x),
            2 * mamba_block_forward(params, x) + x,
            atol=1e-12,
        )

    def test_dimension_mismatch_rejected(self):
        fwd = MambaBlockParams.random(3, rng=np.random.default_rng(0))
        bwd = MambaBlockParams.random(4, rng=np.random.default_rng(0))
        with pytest.raises(ValueError, match="d_model"):
            bimamba_forward(fwd, bwd, np.zeros((2, 3)))


def test_softplus_positive_and_swish_shapes():
    x = np.linspace(-20, 20, 101)
    assert (softplus(x) > 0).all()
    assert swish(np.array([0.0])) == 0.0
