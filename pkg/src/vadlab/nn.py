"""Minimal differentiable MLP stack on numpy.

Forward evaluation, exact reverse-mode parameter and input gradients, the
second-order gradients needed by the critic's gradient-norm penalty, and a
bias-corrected Adam optimizer. All computation is float64 in memory; the
checkpoint container stores float32 payloads.

Conventions: weight matrices are (out, in); batches are row-major (N, in);
the leaky-rectifier derivative at 0 is the negative-side slope.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, FormatError, ValidationError

RELU = "relu"
LEAKY_RELU = "leaky_relu"
IDENTITY = "identity"
SIGMOID = "sigmoid"

HIDDEN_ACTIVATIONS = (RELU, LEAKY_RELU)
OUTPUT_ACTIVATIONS = (IDENTITY, SIGMOID)

INIT_HE_UNIFORM = "he_uniform"
INIT_ZERO_LAST_LAYER = "zero_last_layer"

GRAD_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class MlpSpec:
    """Architecture: layer sizes (input first) plus activation choices."""

    layer_sizes: tuple[int, ...]
    hidden_activation: str = RELU
    leaky_slope: float = 0.2
    output_activation: str = IDENTITY

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValidationError(
                f"layer_sizes needs >= 2 positive entries, got {self.layer_sizes}"
            )
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValidationError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValidationError(f"unknown output activation {self.output_activation!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "MlpParams":
        return MlpParams(
            spec=self.spec,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def num_parameters(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def init_mlp(spec: MlpSpec, mode: str = INIT_HE_UNIFORM, seed=0) -> MlpParams:
    """He-uniform weights with zero biases; optionally zero the final layer.

    `zero_last_layer` draws the same weights as `he_uniform` and then zeroes
    the last layer, so the hidden layers match across modes for equal seeds.
    Used for residual adaptors that must start as the identity map.
    """
    if mode not in (INIT_HE_UNIFORM, INIT_ZERO_LAST_LAYER):
        raise ValidationError(f"unknown init mode {mode!r}")
    from .seeding import child_rng

    rng = child_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    if mode == INIT_ZERO_LAST_LAYER:
        weights[-1] = np.zeros_like(weights[-1])
        biases[-1] = np.zeros_like(biases[-1])
    return MlpParams(spec=spec, weights=weights, biases=biases)


def _activate(pre: np.ndarray, kind: str, slope: float) -> np.ndarray:
    if kind == RELU:
        return np.maximum(pre, 0.0)
    if kind == LEAKY_RELU:
        return np.where(pre > 0.0, pre, slope * pre)
    if kind == IDENTITY:
        return pre
    if kind == SIGMOID:
        return 1.0 / (1.0 + np.exp(-pre))
    raise ContractError(f"unknown activation {kind!r}")


def _activation_deriv(pre: np.ndarray, kind: str, slope: float) -> np.ndarray:
    if kind == RELU:
        return (pre > 0.0).astype(np.float64)
    if kind == LEAKY_RELU:
        return np.where(pre > 0.0, 1.0, slope)
    if kind == IDENTITY:
        return np.ones_like(pre)
    if kind == SIGMOID:
        s = 1.0 / (1.0 + np.exp(-pre))
        return s * (1.0 - s)
    raise ContractError(f"unknown activation {kind!r}")


@dataclass
class ForwardTrace:
    """Everything the backward pass needs: per-layer inputs and pre-activations."""

    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    output: np.ndarray


def _as_batch(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"expected a 2-D batch, got shape {x.shape}")
    if x.shape[1] != params.spec.in_dim:
        raise ValidationError(
            f"input width {x.shape[1]} != network fan-in {params.spec.in_dim}"
        )
    return x


def forward_trace(params: MlpParams, x: np.ndarray) -> ForwardTrace:
    spec = params.spec
    z = _as_batch(params, x)
    inputs, pres = [], []
    last = spec.num_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(z)
        pre = z @ w.T + b
        pres.append(pre)
        kind = spec.output_activation if l == last else spec.hidden_activation
        z = _activate(pre, kind, spec.leaky_slope)
    return ForwardTrace(inputs=inputs, pre=pres, output=z)


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Batch forward pass; pure function of (params, x)."""
    return forward_trace(params, x).output


def backward_from_trace(
    params: MlpParams, trace: ForwardTrace, upstream: np.ndarray
) -> tuple[MlpGrads, np.ndarray]:
    """Reverse pass from d(loss)/d(output); returns (parameter grads, input grads)."""
    spec = params.spec
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != trace.output.shape:
        raise ValidationError(
            f"upstream shape {upstream.shape} != output shape {trace.output.shape}"
        )
    n_layers = spec.num_layers
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    delta = upstream * _activation_deriv(
        trace.pre[-1], spec.output_activation, spec.leaky_slope
    )
    for l in range(n_layers - 1, -1, -1):
        gw[l] = delta.T @ trace.inputs[l]
        gb[l] = delta.sum(axis=0)
        carried = delta @ params.weights[l]
        if l > 0:
            delta = carried * _activation_deriv(
                trace.pre[l - 1], spec.hidden_activation, spec.leaky_slope
            )
    return MlpGrads(weights=gw, biases=gb), carried


def param_gradients(params: MlpParams, x: np.ndarray, upstream: np.ndarray) -> MlpGrads:
    """Exact reverse-mode gradients of sum(upstream * output) w.r.t. parameters."""
    trace = forward_trace(params, x)
    grads, _ = backward_from_trace(params, trace, upstream)
    return grads


def _require_scalar_output(params: MlpParams) -> None:
    if params.spec.out_dim != 1:
        raise ContractError(
            f"operation requires a scalar-output network, got out_dim {params.spec.out_dim}"
        )


def input_gradients(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Per-row gradient of the scalar output w.r.t. each input row (N, d)."""
    _require_scalar_output(params)
    trace = forward_trace(params, x)
    return input_gradients_from_trace(params, trace)


def input_gradients_from_trace(params: MlpParams, trace: ForwardTrace) -> np.ndarray:
    spec = params.spec
    _require_scalar_output(params)
    delta = _activation_deriv(trace.pre[-1], spec.output_activation, spec.leaky_slope)
    for l in range(spec.num_layers - 1, -1, -1):
        carried = delta @ params.weights[l]
        if l > 0:
            delta = carried * _activation_deriv(
                trace.pre[l - 1], spec.hidden_activation, spec.leaky_slope
            )
    return carried


def input_gradient(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Gradient of the scalar output w.r.t. a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError(f"expected a single input vector, got shape {x.shape}")
    return input_gradients(params, x[None, :])[0]


def penalty_gradients(
    critic: MlpParams, xhat_batch: np.ndarray, lambda_gp: float
) -> tuple[float, MlpGrads]:
    """Gradient-norm penalty value and its exact critic-parameter gradients.

    value = lambda_gp * mean_i (||grad_x critic(x_i)|| - 1)^2 over the batch.

    Differentiating through the input-gradient computation is done with the
    activation masks held fixed: piecewise-linear activations have zero second
    derivative almost everywhere, which also makes all bias gradients exactly
    zero. Requires a scalar identity-output critic with rectifier or
    leaky-rectifier hidden layers.
    """
    spec = critic.spec
    _require_scalar_output(critic)
    if spec.output_activation != IDENTITY:
        raise ContractError("penalty requires an identity-output critic")
    if spec.hidden_activation not in HIDDEN_ACTIVATIONS:
        raise ContractError("penalty requires piecewise-linear hidden activations")
    if lambda_gp < 0:
        raise ValidationError(f"lambda_gp must be >= 0, got {lambda_gp}")
    x = _as_batch(critic, xhat_batch)
    n = x.shape[0]
    if n < 1:
        raise ValidationError("penalty batch must be non-empty")

    n_layers = spec.num_layers
    trace = forward_trace(critic, x)
    masks = [
        _activation_deriv(trace.pre[l], spec.hidden_activation, spec.leaky_slope)
        for l in range(n_layers - 1)
    ]

    # Reverse pass for per-row input gradients, keeping every delta.
    deltas: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    deltas[-1] = np.ones((n, 1))
    for l in range(n_layers - 1, 0, -1):
        deltas[l - 1] = (deltas[l] @ critic.weights[l]) * masks[l - 1]
    grads_x = deltas[0] @ critic.weights[0]

    norms = np.sqrt(np.sum(grads_x * grads_x, axis=1))
    value = lambda_gp * float(np.mean((norms - 1.0) ** 2))

    # d(value)/d(grads_x), rows scaled by the norm derivative.
    coef = (2.0 * lambda_gp / n) * (norms - 1.0) / np.maximum(norms, GRAD_NORM_FLOOR)
    tangent = coef[:, None] * grads_x

    # Forward tangent pass through the mask-linearized network; each weight
    # appears once in the input-gradient expression, so its derivative is the
    # outer product of that layer's delta and incoming tangent.
    gw: list[np.ndarray] = []
    gb: list[np.ndarray] = []
    for l in range(n_layers):
        gw.append(deltas[l].T @ tangent)
        gb.append(np.zeros(spec.layer_sizes[l + 1]))
        if l < n_layers - 1:
            tangent = masks[l] * (tangent @ critic.weights[l].T)
    return value, MlpGrads(weights=gw, biases=gb)


def add_grads(*grads: MlpGrads) -> MlpGrads:
    first = grads[0]
    weights = [w.copy() for w in first.weights]
    biases = [b.copy() for b in first.biases]
    for g in grads[1:]:
        for l in range(len(weights)):
            weights[l] += g.weights[l]
            biases[l] += g.biases[l]
    return MlpGrads(weights=weights, biases=biases)


@dataclass
class AdamState:
    """First/second moment accumulators shaped like the parameters."""

    m_weights: list[np.ndarray]
    m_biases: list[np.ndarray]
    v_weights: list[np.ndarray]
    v_biases: list[np.ndarray]
    t: int
    alpha: float
    beta1: float
    beta2: float
    eps: float


def init_adam(
    params: MlpParams,
    alpha: float = 1e-4,
    beta1: float = 0.0,
    beta2: float = 0.9,
    eps: float = 1e-8,
) -> AdamState:
    return AdamState(
        m_weights=[np.zeros_like(w) for w in params.weights],
        m_biases=[np.zeros_like(b) for b in params.biases],
        v_weights=[np.zeros_like(w) for w in params.weights],
        v_biases=[np.zeros_like(b) for b in params.biases],
        t=0,
        alpha=alpha,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def _adam_update(p, g, m, v, t, alpha, beta1, beta2, eps):
    m_new = beta1 * m + (1.0 - beta1) * g
    v_new = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m_new / (1.0 - beta1**t)
    v_hat = v_new / (1.0 - beta2**t)
    p_new = p - alpha * m_hat / (np.sqrt(v_hat) + eps)
    return p_new, m_new, v_new


def adam_step(
    params: MlpParams, grads: MlpGrads, state: AdamState
) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update; pure, returns fresh params and state."""
    if len(grads.weights) != len(params.weights):
        raise ValidationError("gradient layer count does not match parameters")
    for w, g in zip(params.weights, grads.weights):
        if w.shape != g.shape:
            raise ValidationError(
                f"gradient shape {g.shape} does not match weight shape {w.shape}"
            )
    t = state.t + 1
    new_w, new_b = [], []
    m_w, m_b, v_w, v_b = [], [], [], []
    for l in range(len(params.weights)):
        p, m, v = _adam_update(
            params.weights[l], grads.weights[l], state.m_weights[l],
            state.v_weights[l], t, state.alpha, state.beta1, state.beta2, state.eps,
        )
        new_w.append(p)
        m_w.append(m)
        v_w.append(v)
        p, m, v = _adam_update(
            params.biases[l], grads.biases[l], state.m_biases[l],
            state.v_biases[l], t, state.alpha, state.beta1, state.beta2, state.eps,
        )
        new_b.append(p)
        m_b.append(m)
        v_b.append(v)
    new_state = AdamState(
        m_weights=m_w, m_biases=m_b, v_weights=v_w, v_biases=v_b,
        t=t, alpha=state.alpha, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
    )
    return MlpParams(spec=params.spec, weights=new_w, biases=new_b), new_state


# Checkpoint container: magic "MLPW", version u32 LE, header length u32 LE,
# JSON header (architecture + optional provenance), float32 LE payload with
# each layer's weight matrix (row-major) followed by its bias vector.

MLP_MAGIC = b"MLPW"
MLP_VERSION = 1


def mlp_to_bytes(params: MlpParams, provenance: dict | None = None) -> bytes:
    header = {
        "layer_sizes": list(params.spec.layer_sizes),
        "hidden_activation": params.spec.hidden_activation,
        "leaky_slope": params.spec.leaky_slope,
        "output_activation": params.spec.output_activation,
    }
    if provenance is not None:
        header["provenance"] = provenance
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MLP_MAGIC, struct.pack("<II", MLP_VERSION, len(hjson)), hjson]
    for w, b in zip(params.weights, params.biases):
        chunks.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_mlp(params: MlpParams, path: str | Path, provenance: dict | None = None) -> None:
    Path(path).write_bytes(mlp_to_bytes(params, provenance))


def load_mlp(path: str | Path) -> tuple[MlpParams, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MLP_MAGIC:
        raise FormatError(f"{path}: not a network checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != MLP_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + hlen:
        raise FormatError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad checkpoint header: {exc}") from exc
    spec = MlpSpec(
        layer_sizes=tuple(header["layer_sizes"]),
        hidden_activation=header["hidden_activation"],
        leaky_slope=float(header["leaky_slope"]),
        output_activation=header["output_activation"],
    )
    sizes = spec.layer_sizes
    expected = sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:])) * 4
    payload = raw[12 + hlen :]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload size mismatch, expected {expected} bytes, got {len(payload)}"
        )
    weights, biases = [], []
    offset = 0
    buf = np.frombuffer(payload, dtype="<f4")
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = buf[offset : offset + fan_out * fan_in].reshape(fan_out, fan_in)
        offset += fan_out * fan_in
        b = buf[offset : offset + fan_out]
        offset += fan_out
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    params = MlpParams(spec=spec, weights=weights, biases=biases)
    return params, header.get("provenance", {})
