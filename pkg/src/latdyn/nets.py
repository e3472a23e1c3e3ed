"""Dense network substrate: MLP and stacked-LSTM forward passes plus Adam.

Parameters are plain ``torch.Tensor`` lists (float32 for training, float64 for
gradient checking), so downstream pruning/quantization/serialization can treat
every model as an ordered collection of named dense tensors. Autograd is
torch's reverse mode; ``backward`` below is the scalar-loss entry point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import ContractError, NumericError, ShapeError

Params = list[torch.Tensor]

_ACTIVATIONS = {
    "leaky_relu": lambda x: torch.nn.functional.leaky_relu(x, negative_slope=0.01),
    "relu": torch.relu,
    "tanh": torch.tanh,
    "identity": lambda x: x,
}


@dataclass(frozen=True)
class MlpSpec:
    """Fully-connected stack: affine+activation per hidden layer, affine head."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "leaky_relu"

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ContractError(f"all layer dims must be positive, got {dims}")
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def param_count(self) -> int:
        dims = self.layer_dims
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


@dataclass(frozen=True)
class LstmSpec:
    """Stacked LSTM with a linear readout of the final hidden state."""

    input_dim: int
    hidden_width: int
    depth: int
    output_dim: int
    timesteps: int

    def __post_init__(self):
        if self.hidden_width < 1 or self.depth < 1:
            raise ContractError(
                f"width/depth must be positive, got {self.hidden_width}/{self.depth}"
            )
        if self.input_dim < 1 or self.output_dim < 1 or self.timesteps < 1:
            raise ContractError("input_dim, output_dim and timesteps must be positive")

    def param_count(self) -> int:
        total = 0
        for layer in range(self.depth):
            in_dim = self.input_dim if layer == 0 else self.hidden_width
            total += 4 * self.hidden_width * (in_dim + self.hidden_width + 2)
        total += self.output_dim * (self.hidden_width + 1)
        return total


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product with explicit shape/dtype validation."""
    if a.dim() != 2 or b.dim() != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {tuple(a.shape)} x {tuple(b.shape)}")
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a @ b


def backward(loss: torch.Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; grads accumulate until reset."""
    if loss.numel() != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def zero_grads(params: Params) -> None:
    for p in params:
        if p.grad is not None:
            p.grad = None


def _uniform(shape, bound, generator, dtype):
    t = torch.empty(shape, dtype=dtype)
    t.uniform_(-bound, bound, generator=generator)
    return t


def init_mlp_params(
    spec: MlpSpec, generator: torch.Generator, dtype: torch.dtype = torch.float32
) -> Params:
    """Fan-in-scaled uniform init; layout [W0, b0, W1, b1, ...], W as [out, in]."""
    params: Params = []
    dims = spec.layer_dims
    for i in range(spec.n_layers):
        fan_in = dims[i]
        bound = 1.0 / math.sqrt(fan_in)
        params.append(_uniform((dims[i + 1], dims[i]), bound, generator, dtype))
        params.append(_uniform((dims[i + 1],), bound, generator, dtype))
    return params


def mlp_forward(spec: MlpSpec, params: Params, x: torch.Tensor) -> torch.Tensor:
    """Affine-activation chain; the output layer stays affine.

    Raises:
        ShapeError: input width or parameter layout disagrees with ``spec``.
        NumericError: non-finite activations, reported with the layer index.
    """
    if x.shape[-1] != spec.input_dim:
        raise ShapeError(
            f"mlp input width {x.shape[-1]} != spec input_dim {spec.input_dim}"
        )
    if len(params) != 2 * spec.n_layers:
        raise ShapeError(
            f"expected {2 * spec.n_layers} parameter tensors, got {len(params)}"
        )
    act = _ACTIVATIONS[spec.activation]
    h = x
    for i in range(spec.n_layers):
        w, b = params[2 * i], params[2 * i + 1]
        h = torch.nn.functional.linear(h, w, b)
        if i < spec.n_layers - 1:
            h = act(h)
        if not torch.isfinite(h).all():
            raise NumericError(f"non-finite activation in layer {i}")
    return h


def init_lstm_params(
    spec: LstmSpec, generator: torch.Generator, dtype: torch.dtype = torch.float32
) -> Params:
    """Per layer [W_ih, W_hh, b_ih, b_hh] (gate order i,f,g,o), then head [W, b]."""
    params: Params = []
    bound = 1.0 / math.sqrt(spec.hidden_width)
    for layer in range(spec.depth):
        in_dim = spec.input_dim if layer == 0 else spec.hidden_width
        params.append(_uniform((4 * spec.hidden_width, in_dim), bound, generator, dtype))
        params.append(_uniform((4 * spec.hidden_width, spec.hidden_width), bound, generator, dtype))
        params.append(_uniform((4 * spec.hidden_width,), bound, generator, dtype))
        params.append(_uniform((4 * spec.hidden_width,), bound, generator, dtype))
    params.append(_uniform((spec.output_dim, spec.hidden_width), bound, generator, dtype))
    params.append(_uniform((spec.output_dim,), bound, generator, dtype))
    return params


def lstm_forward(spec: LstmSpec, params: Params, seq: torch.Tensor) -> torch.Tensor:
    """Run the stacked cells over ``seq`` [batch, timesteps, input_dim].

    Returns the linear readout of the last layer's final hidden state. Hidden
    states are o*tanh(c), so every component stays strictly inside (-1, 1).
    """
    if seq.dim() != 3:
        raise ShapeError(f"lstm expects [batch, timesteps, features], got {tuple(seq.shape)}")
    batch, steps, feats = seq.shape
    if steps != spec.timesteps:
        raise ShapeError(f"sequence length {steps} != spec.timesteps {spec.timesteps}")
    if feats != spec.input_dim:
        raise ShapeError(f"feature width {feats} != spec.input_dim {spec.input_dim}")
    if len(params) != 4 * spec.depth + 2:
        raise ShapeError(f"expected {4 * spec.depth + 2} parameter tensors, got {len(params)}")

    hw = spec.hidden_width
    h = [seq.new_zeros(batch, hw) for _ in range(spec.depth)]
    c = [seq.new_zeros(batch, hw) for _ in range(spec.depth)]
    for t in range(steps):
        x = seq[:, t, :]
        for layer in range(spec.depth):
            w_ih, w_hh, b_ih, b_hh = params[4 * layer : 4 * layer + 4]
            gates = (
                torch.nn.functional.linear(x, w_ih, b_ih)
                + torch.nn.functional.linear(h[layer], w_hh, b_hh)
            )
            gi, gf, gg, go = gates.chunk(4, dim=1)
            i_t = torch.sigmoid(gi)
            f_t = torch.sigmoid(gf)
            g_t = torch.tanh(gg)
            o_t = torch.sigmoid(go)
            c[layer] = f_t * c[layer] + i_t * g_t
            h[layer] = o_t * torch.tanh(c[layer])
            x = h[layer]
    w_head, b_head = params[-2], params[-1]
    out = torch.nn.functional.linear(h[-1], w_head, b_head)
    if not torch.isfinite(out).all():
        raise NumericError("non-finite lstm output")
    return out


@dataclass
class OptimizerState:
    """Adam state: per-parameter moment accumulators plus the usual knobs."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Params = field(default_factory=list)
    v: Params = field(default_factory=list)


def optimizer_step(state: OptimizerState, params: Params, grads: list[torch.Tensor | None]) -> Params:
    """One bias-corrected adaptive-moment update, in place on ``params``.

    A ``None`` grad counts as zero. Non-finite grads reject the whole step
    (parameters and moments untouched).
    """
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} params but {len(grads)} grads")
    for g in grads:
        if g is not None and not torch.isfinite(g).all():
            raise NumericError("non-finite gradient; step rejected")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            m_hat = m / bc1
            v_hat = v / bc2
            p.add_(-state.learning_rate * m_hat / (v_hat.sqrt() + state.eps))
    return params


def require_grad(params: Params) -> Params:
    for p in params:
        p.requires_grad_(True)
    return params


def clone_params(params: Params) -> Params:
    return [p.detach().clone() for p in params]
