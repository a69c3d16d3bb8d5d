"""Selective state-space model forward kernel and bidirectional block.

The continuous system h'(t) = A h(t) + B(t) u(t), z(t) = C(t) h(t) + D u(t)
is discretized per frame with a step delta_t: the state matrix becomes
Abar = exp(delta * A) elementwise (A is diagonal per channel) and the input
matrix Bbar = delta * B (Euler rule). B, C, and delta vary per frame, which
makes the recurrence input-selective. Everything here is float64 and pure
numpy; a parallel-scan formulation and a reverse-accumulation gradient are
provided for verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SsmParams",
    "SsmSequenceInputs",
    "MambaBlockParams",
    "ssm_forward_sequential",
    "ssm_forward_scan",
    "ssm_states",
    "ssm_loss_gradients",
    "finite_difference_check",
    "mamba_block_forward",
    "bimamba_forward",
    "swish",
    "softplus",
]


@dataclass(frozen=True)
class SsmParams:
    """Static SSM parameters: per-channel diagonal state dynamics.

    ``A`` has shape (d_model, d_state) with strictly negative entries so
    that exp(delta * A) stays in (0, 1); ``D`` is the per-channel
    feedthrough gain.
    """

    d_model: int
    d_state: int
    A: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = np.ascontiguousarray(np.asarray(self.A, dtype=np.float64))
        D = np.ascontiguousarray(np.asarray(self.D, dtype=np.float64))
        if A.shape != (self.d_model, self.d_state):
            raise ValueError(f"A must have shape ({self.d_model}, {self.d_state}), got {A.shape}")
        if D.shape != (self.d_model,):
            raise ValueError(f"D must have shape ({self.d_model},), got {D.shape}")
        if not np.isfinite(A).all() or not np.isfinite(D).all():
            raise ValueError("SSM parameters must be finite")
        if not (A < 0).all():
            raise ValueError("all entries of A must be strictly negative")
        A.setflags(write=False)
        D.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "D", D)

    @classmethod
    def random(cls, d_model: int, d_state: int, rng: np.random.Generator) -> "SsmParams":
        A = -rng.uniform(0.2, 2.0, size=(d_model, d_state))
        D = rng.standard_normal(d_model)
        return cls(d_model, d_state, A, D)


@dataclass(frozen=True)
class SsmSequenceInputs:
    """Per-frame inputs: u (T, d_model), B and C (T, d_state), delta (T, d_model) > 0."""

    u: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("u", "B", "C", "delta"):
            value = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.float64))
            if value.ndim != 2:
                raise ValueError(f"{name} must be 2-D, got shape {value.shape}")
            if not np.isfinite(value).all():
                raise ValueError(f"{name} contains non-finite values")
            arrays[name] = value
        T = arrays["u"].shape[0]
        for name in ("B", "C", "delta"):
            if arrays[name].shape[0] != T:
                raise ValueError(f"{name} has {arrays[name].shape[0]} frames, u has {T}")
        if arrays["B"].shape[1] != arrays["C"].shape[1]:
            raise ValueError("B and C must share the state dimension")
        if arrays["delta"].shape[1] != arrays["u"].shape[1]:
            raise ValueError("delta must match u's channel dimension")
        if arrays["delta"].size and arrays["delta"].min() <= 0:
            raise ValueError("delta must be strictly positive everywhere")
        for name, value in arrays.items():
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def num_frames(self) -> int:
        return self.u.shape[0]

    @classmethod
    def random(
        cls, num_frames: int, d_model: int, d_state: int, rng: np.random.Generator
    ) -> "SsmSequenceInputs":
        return cls(
            u=rng.standard_normal((num_frames, d_model)),
            B=rng.standard_normal((num_frames, d_state)),
            C=rng.standard_normal((num_frames, d_state)),
            delta=rng.uniform(0.01, 0.5, size=(num_frames, d_model)),
        )


def _check_compatible(params: SsmParams, inputs: SsmSequenceInputs):
    if inputs.u.shape[1] != params.d_model:
        raise ValueError(f"u has {inputs.u.shape[1]} channels, params declare {params.d_model}")
    if inputs.B.shape[1] != params.d_state:
        raise ValueError(f"B has state size {inputs.B.shape[1]}, params declare {params.d_state}")


def _discretize(params: SsmParams, inputs: SsmSequenceInputs) -> tuple[np.ndarray, np.ndarray]:
    """Abar[t, c, n] = exp(delta[t, c] * A[c, n]); Bu[t, c, n] = delta[t, c] * B[t, n] * u[t, c]."""
    a_bar = np.exp(inputs.delta[:, :, np.newaxis] * params.A[np.newaxis, :, :])
    b_u = (inputs.delta * inputs.u)[:, :, np.newaxis] * inputs.B[:, np.newaxis, :]
    return a_bar, b_u


def ssm_forward_sequential(params: SsmParams, inputs: SsmSequenceInputs) -> np.ndarray:
    """Run the discretized recurrence step by step; output (T, d_model).

    h_t = Abar_t * h_{t-1} + Bbar_t * u_t with h_0 = 0, and
    z_t = <C_t, h_t> + D * u_t per channel.
    """
    _check_compatible(params, inputs)
    a_bar, b_u = _discretize(params, inputs)
    T = inputs.num_frames
    h = np.zeros((params.d_model, params.d_state))
    out = np.empty((T, params.d_model))
    for t in range(T):
        h = a_bar[t] * h + b_u[t]
        out[t] = h @ inputs.C[t] + params.D * inputs.u[t]
    return out


def ssm_forward_scan(params: SsmParams, inputs: SsmSequenceInputs) -> np.ndarray:
    """Same recurrence via associative prefix composition of affine maps.

    Each step is h -> a*h + b; composing left-to-right with
    (a1, b1) then (a2, b2) gives (a2*a1, a2*b1 + b2), which is associative,
    so the prefix states follow from log2(T) doubling rounds.
    """
    _check_compatible(params, inputs)
    a_bar, b_u = _discretize(params, inputs)
    T = inputs.num_frames
    if T == 0:
        return np.empty((0, params.d_model))

    a = a_bar.copy()
    b = b_u.copy()
    offset = 1
    while offset < T:
        prev_a = a[:-offset]
        a_new = a.copy()
        b_new = b.copy()
        a_new[offset:] = a[offset:] * prev_a
        b_new[offset:] = a[offset:] * b[:-offset] + b[offset:]
        a, b = a_new, b_new
        offset *= 2

    # h_0 = 0, so the state at t is just the accumulated offset term.
    out = np.einsum("tcn,tn->tc", b, inputs.C) + params.D[np.newaxis, :] * inputs.u
    return out


def ssm_states(params: SsmParams, inputs: SsmSequenceInputs) -> np.ndarray:
    """All intermediate states h_t, shape (T, d_model, d_state)."""
    _check_compatible(params, inputs)
    a_bar, b_u = _discretize(params, inputs)
    T = inputs.num_frames
    states = np.empty((T, params.d_model, params.d_state))
    h = np.zeros((params.d_model, params.d_state))
    for t in range(T):
        h = a_bar[t] * h + b_u[t]
        states[t] = h
    return states


def ssm_loss_gradients(params: SsmParams, inputs: SsmSequenceInputs) -> dict[str, np.ndarray]:
    """Gradients of sum(output) by reverse accumulation through the recurrence.

    Returns gradients with respect to u, B, C, delta, A, and D.
    """
    _check_compatible(params, inputs)
    a_bar, _ = _discretize(params, inputs)
    states = ssm_states(params, inputs)
    T = inputs.num_frames

    grad_u = np.tile(params.D, (T, 1))
    grad_B = np.zeros_like(inputs.B)
    grad_C = states.sum(axis=1)
    grad_delta = np.zeros_like(inputs.delta)
    grad_A = np.zeros_like(params.A)
    grad_D = inputs.u.sum(axis=0)

    grad_h = np.zeros((params.d_model, params.d_state))
    for t in range(T - 1, -1, -1):
        # dloss/dz[t, c] = 1; z depends on h through C.
        grad_h = grad_h + np.broadcast_to(inputs.C[t], (params.d_model, params.d_state))
        h_prev = states[t - 1] if t > 0 else np.zeros_like(grad_h)
        grad_a_bar = h_prev * grad_h
        grad_b_u = grad_h
        grad_u[t] += (grad_b_u * inputs.delta[t][:, np.newaxis] * inputs.B[t]).sum(axis=1)
        grad_B[t] = (grad_b_u * (inputs.delta[t] * inputs.u[t])[:, np.newaxis]).sum(axis=0)
        grad_delta[t] = (
            grad_a_bar * params.A * a_bar[t] + grad_b_u * inputs.B[t][np.newaxis, :] * inputs.u[t][:, np.newaxis]
        ).sum(axis=1)
        grad_A += grad_a_bar * inputs.delta[t][:, np.newaxis] * a_bar[t]
        grad_h = a_bar[t] * grad_h

    return {
        "u": grad_u,
        "B": grad_B,
        "C": grad_C,
        "delta": grad_delta,
        "A": grad_A,
        "D": grad_D,
    }


def finite_difference_check(
    forward=ssm_forward_sequential,
    params: SsmParams | None = None,
    inputs: SsmSequenceInputs | None = None,
    epsilon: float = 1e-5,
) -> float:
    """Largest relative mismatch between analytic and central-difference gradients.

    Perturbs every coordinate of u, B, C, delta, and A; the loss is the sum
    of all outputs. Relative error is measured against the larger gradient
    magnitude, floored at 1e-2 so that near-zero gradients compare on an
    absolute scale.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    if params is None or inputs is None:
        raise ValueError("params and inputs are required")

    analytic = ssm_loss_gradients(params, inputs)

    def loss(p: SsmParams, i: SsmSequenceInputs) -> float:
        return float(forward(p, i).sum())

    def rebuild_inputs(name: str, array: np.ndarray) -> SsmSequenceInputs:
        fields = {"u": inputs.u, "B": inputs.B, "C": inputs.C, "delta": inputs.delta}
        fields[name] = array
        return SsmSequenceInputs(**fields)

    worst = 0.0
    for name in ("u", "B", "C", "delta"):
        base = np.asarray(getattr(inputs, name))
        for index in np.ndindex(base.shape):
            plus = base.copy()
            minus = base.copy()
            plus[index] += epsilon
            minus[index] -= epsilon
            numeric = (
                loss(params, rebuild_inputs(name, plus))
                - loss(params, rebuild_inputs(name, minus))
            ) / (2 * epsilon)
            exact = analytic[name][index]
            worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-2))

    for index in np.ndindex(params.A.shape):
        plus = params.A.copy()
        minus = params.A.copy()
        plus[index] += epsilon
        minus[index] -= epsilon
        numeric = (
            loss(SsmParams(params.d_model, params.d_state, plus, params.D), inputs)
            - loss(SsmParams(params.d_model, params.d_state, minus, params.D), inputs)
        ) / (2 * epsilon)
        exact = analytic["A"][index]
        worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-2))
    return worst


# --- Mamba block ------------------------------------------------------------

def swish(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(x, 0.0)


def _layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


@dataclass(frozen=True)
class MambaBlockParams:
    """Weights of one Mamba block.

    The block widens d_model by ``expand`` on two parallel paths: the SSM
    path (input projection, depthwise causal conv, Swish, per-frame B/C/
    delta prediction, selective SSM) and a Swish gate path; their product
    is projected back to d_model. ``conv_kernel[k-1]`` multiplies the
    current frame, earlier taps reach back in time.
    """

    d_model: int
    d_state: int
    expand: int
    conv_width: int
    w_in: np.ndarray        # (d_model, d_inner)
    w_gate: np.ndarray      # (d_model, d_inner)
    w_out: np.ndarray       # (d_inner, d_model)
    conv_kernel: np.ndarray  # (conv_width, d_inner), depthwise taps
    conv_bias: np.ndarray   # (d_inner,)
    w_b: np.ndarray         # (d_inner, d_state)
    w_c: np.ndarray         # (d_inner, d_state)
    w_delta: np.ndarray     # (d_inner, d_inner)
    b_delta: np.ndarray     # (d_inner,)
    b_gate: np.ndarray      # (d_inner,)
    ssm: SsmParams = None  # type: ignore[assignment]

    @property
    def d_inner(self) -> int:
        return self.d_model * self.expand

    def __post_init__(self):
        if self.expand < 1:
            raise ValueError(f"expand must be at least 1, got {self.expand}")
        if self.conv_width < 1:
            raise ValueError(f"conv_width must be at least 1, got {self.conv_width}")
        d_inner = self.d_inner
        expected = {
            "w_in": (self.d_model, d_inner),
            "w_gate": (self.d_model, d_inner),
            "w_out": (d_inner, self.d_model),
            "conv_kernel": (self.conv_width, d_inner),
            "conv_bias": (d_inner,),
            "w_b": (d_inner, self.d_state),
            "w_c": (d_inner, self.d_state),
            "w_delta": (d_inner, d_inner),
            "b_delta": (d_inner,),
            "b_gate": (d_inner,),
        }
        for name, shape in expected.items():
            value = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.float64))
            if value.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {value.shape}")
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        if self.ssm is None or self.ssm.d_model != d_inner or self.ssm.d_state != self.d_state:
            raise ValueError("inner SSM must have d_model = d_model * expand and matching d_state")

    @classmethod
    def random(
        cls,
        d_model: int,
        d_state: int = 8,
        expand: int = 2,
        conv_width: int = 4,
        rng: np.random.Generator | None = None,
    ) -> "MambaBlockParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        d_inner = d_model * expand

        def weight(shape):
            return rng.standard_normal(shape) / math.sqrt(shape[0])

        return cls(
            d_model=d_model,
            d_state=d_state,
            expand=expand,
            conv_width=conv_width,
            w_in=weight((d_model, d_inner)),
            w_gate=weight((d_model, d_inner)),
            w_out=weight((d_inner, d_model)),
            conv_kernel=weight((conv_width, d_inner)),
            conv_bias=np.zeros(d_inner),
            w_b=weight((d_inner, d_state)),
            w_c=weight((d_inner, d_state)),
            w_delta=weight((d_inner, d_inner)) * 0.1,
            b_delta=np.full(d_inner, -1.0),
            b_gate=np.zeros(d_inner),
            ssm=SsmParams.random(d_inner, d_state, rng),
        )


def _depthwise_causal_conv(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Per-channel causal convolution, left-padded with zeros."""
    width = kernel.shape[0]
    padded = np.concatenate([np.zeros((width - 1, x.shape[1])), x], axis=0)
    out = np.zeros_like(x)
    for tap in range(width):
        out += kernel[tap] * padded[tap:tap + x.shape[0]]
    return out + bias


def mamba_block_forward(params: MambaBlockParams, x: np.ndarray) -> np.ndarray:
    """One Mamba block over a (T, d_model) sequence."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_model:
        raise ValueError(f"input must be (frames, {params.d_model}), got shape {x.shape}")

    normed = _layer_norm(x)
    u = normed @ params.w_in
    u = swish(_depthwise_causal_conv(u, params.conv_kernel, params.conv_bias))

    inputs = SsmSequenceInputs(
        u=u,
        B=u @ params.w_b,
        C=u @ params.w_c,
        delta=softplus(u @ params.w_delta + params.b_delta),
    )
    ssm_out = ssm_forward_scan(params.ssm, inputs)

    gate = swish(normed @ params.w_gate + params.b_gate)
    return (ssm_out * gate) @ params.w_out


def bimamba_forward(
    fwd: MambaBlockParams, bwd: MambaBlockParams, x: np.ndarray
) -> np.ndarray:
    """Bidirectional composition: forward block + time-flipped backward block + skip."""
    if fwd.d_model != bwd.d_model:
        raise ValueError(f"d_model mismatch: forward {fwd.d_model} vs backward {bwd.d_model}")
    x = np.asarray(x, dtype=np.float64)
    forward_out = mamba_block_forward(fwd, x)
    backward_out = mamba_block_forward(bwd, x[::-1])[::-1]
    return forward_out + backward_out + x
