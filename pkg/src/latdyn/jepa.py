"""Latent-dynamics model: two encoders, an autoregressive predictor, decoders.

Information flow: the observation encoder maps a window of recent emissions to
a latent state s; the input encoder maps each exogenous input vector
(torque, speed, lambda) to a latent input z; the predictor consumes [s; z] and
emits the next latent state. Decoders map latents back to physical units and
are trained separately, never feeding gradients into the core.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import ContractError, ShapeError
from .nets import MlpSpec, Params, init_mlp_params, mlp_forward

TEACHER_FORCED = "teacher-forced"
CLOSED_LOOP = "closed-loop"

CORE_COMPONENTS = ("input_encoder", "obs_encoder", "predictor")
DECODER_COMPONENTS = ("emission_decoder", "input_decoder")
COMPONENTS = CORE_COMPONENTS + DECODER_COMPONENTS


@dataclass(frozen=True)
class JepaConfig:
    """Architecture blueprint; defaults match the reference configuration."""

    input_channels: int = 3
    emission_channels: int = 4
    latent_dim: int = 50
    t_past: int = 10
    t_future: int = 2
    encoder_hidden: tuple[int, ...] = (512, 256, 128)
    predictor_hidden: tuple[int, ...] = (512, 512, 512)

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ContractError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.t_past < 1:
            raise ContractError(f"t_past must be >= 1, got {self.t_past}")
        if self.t_future < 2:
            raise ContractError(
                f"t_future must be >= 2 (at least one predicted transition), got {self.t_future}"
            )
        if not self.encoder_hidden or not self.predictor_hidden:
            raise ContractError("encoder_hidden and predictor_hidden must be non-empty")

    def component_specs(self) -> dict[str, MlpSpec]:
        """Fresh per-component layer specs derived from the blueprint."""
        decoder_hidden = tuple(reversed(self.encoder_hidden))
        return {
            "input_encoder": MlpSpec(self.input_channels, self.encoder_hidden, self.latent_dim),
            "obs_encoder": MlpSpec(
                self.emission_channels * self.t_past, self.encoder_hidden, self.latent_dim
            ),
            "predictor": MlpSpec(2 * self.latent_dim, self.predictor_hidden, self.latent_dim),
            "emission_decoder": MlpSpec(self.latent_dim, decoder_hidden, self.emission_channels),
            "input_decoder": MlpSpec(self.latent_dim, decoder_hidden, self.input_channels),
        }

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "emission_channels": self.emission_channels,
            "latent_dim": self.latent_dim,
            "t_past": self.t_past,
            "t_future": self.t_future,
            "encoder_hidden": list(self.encoder_hidden),
            "predictor_hidden": list(self.predictor_hidden),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JepaConfig":
        d = dict(d)
        for key in ("encoder_hidden", "predictor_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class JepaModel:
    """Parameter store plus the forward operations of the architecture.

    ``specs`` may deviate from ``config.component_specs()`` after structured
    pruning; ``config`` keeps the data-facing dims (channels, horizons).
    """

    config: JepaConfig
    specs: dict[str, MlpSpec]
    params: dict[str, Params] = field(repr=False)

    @classmethod
    def init(cls, config: JepaConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> "JepaModel":
        gen = torch.Generator().manual_seed(seed)
        specs = config.component_specs()
        params = {name: init_mlp_params(spec, gen, dtype) for name, spec in specs.items()}
        return cls(config=config, specs=specs, params=params)

    @property
    def dtype(self) -> torch.dtype:
        return self.params["predictor"][0].dtype

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    # -- parameter access -------------------------------------------------

    def component_parameters(self, names) -> Params:
        out: Params = []
        for name in names:
            out.extend(self.params[name])
        return out

    def core_parameters(self) -> Params:
        return self.component_parameters(CORE_COMPONENTS)

    def decoder_parameters(self) -> Params:
        return self.component_parameters(DECODER_COMPONENTS)

    def named_parameters(self) -> list[tuple[str, torch.Tensor]]:
        """Canonical (name, tensor) order used by the archive format."""
        out = []
        for comp in COMPONENTS:
            for i, p in enumerate(self.params[comp]):
                kind = "w" if i % 2 == 0 else "b"
                out.append((f"{comp}.{kind}{i // 2}", p))
        return out

    def param_count(self) -> int:
        return sum(p.numel() for _, p in self.named_parameters())

    # -- forward operations ------------------------------------------------

    def _cast(self, x) -> torch.Tensor:
        t = torch.as_tensor(x)
        return t.to(self.dtype) if t.dtype != self.dtype else t

    def encode_inputs(self, u_future) -> torch.Tensor:
        """Per-timestep input embedding: [K, m_u] -> [K, D] (batched: [N, K, m_u])."""
        u = self._cast(u_future)
        if u.shape[-1] != self.config.input_channels:
            raise ShapeError(
                f"expected {self.config.input_channels} input channels, got {u.shape[-1]}"
            )
        if u.dim() not in (2, 3):
            raise ShapeError(f"expected [K, m_u] or [N, K, m_u], got {tuple(u.shape)}")
        return mlp_forward(self.specs["input_encoder"], self.params["input_encoder"], u)

    def encode_observations(self, p_past) -> torch.Tensor:
        """Emission-window embedding: [T_p, m_p] -> [D] (batched: [N, T_p, m_p]).

        The window is flattened time-major (oldest row first) before the MLP.
        """
        p = self._cast(p_past)
        cfg = self.config
        if p.dim() == 2:
            single = True
            p = p.unsqueeze(0)
        elif p.dim() == 3:
            single = False
        else:
            raise ShapeError(f"expected [T_p, m_p] or [N, T_p, m_p], got {tuple(p.shape)}")
        if p.shape[1] != cfg.t_past or p.shape[2] != cfg.emission_channels:
            raise ShapeError(
                f"expected window [{cfg.t_past}, {cfg.emission_channels}], got {tuple(p.shape[1:])}"
            )
        flat = p.reshape(p.shape[0], cfg.t_past * cfg.emission_channels)
        s = mlp_forward(self.specs["obs_encoder"], self.params["obs_encoder"], flat)
        return s[0] if single else s

    def predict_next(self, s, z) -> torch.Tensor:
        """One latent transition from the concatenation [s; z]."""
        s = self._cast(s)
        z = self._cast(z)
        d = self.latent_dim
        if s.shape[-1] != d or z.shape[-1] != d:
            raise ShapeError(
                f"state/input latents must have dim {d}, got {s.shape[-1]} and {z.shape[-1]}"
            )
        if s.shape != z.shape:
            raise ShapeError(f"state shape {tuple(s.shape)} != input shape {tuple(z.shape)}")
        return mlp_forward(
            self.specs["predictor"], self.params["predictor"], torch.cat([s, z], dim=-1)
        )

    def rollout(self, s, z_seq, horizon: int) -> torch.Tensor:
        """Autoregressive latent trajectory of length ``horizon``.

        Each step feeds the previous (predicted) state and the next latent
        input back into the predictor, so one input is consumed per step.
        """
        s = self._cast(s)
        z_seq = self._cast(z_seq)
        if z_seq.dim() not in (2, 3):
            raise ShapeError(f"expected [K, D] or [N, K, D] latent inputs, got {tuple(z_seq.shape)}")
        n_inputs = z_seq.shape[-2]
        if horizon < 1:
            raise ContractError(f"horizon must be >= 1, got {horizon}")
        if horizon > n_inputs:
            raise ContractError(f"horizon {horizon} exceeds the {n_inputs} available latent inputs")
        states = []
        cur = s
        for k in range(horizon):
            z_k = z_seq[..., k, :]
            cur = self.predict_next(cur, z_k)
            states.append(cur)
        return torch.stack(states, dim=-2)

    def decode_emissions(self, s) -> torch.Tensor:
        """Latent state -> normalized emission vector."""
        s = self._cast(s)
        if s.shape[-1] != self.latent_dim:
            raise ShapeError(f"latent dim {s.shape[-1]} != {self.latent_dim}")
        return mlp_forward(self.specs["emission_decoder"], self.params["emission_decoder"], s)

    def decode_inputs(self, z) -> torch.Tensor:
        """Latent input -> normalized input vector."""
        z = self._cast(z)
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"latent dim {z.shape[-1]} != {self.latent_dim}")
        return mlp_forward(self.specs["input_decoder"], self.params["input_decoder"], z)


def closed_loop_forecast(
    model: JepaModel,
    seed_window,
    u_future,
    mode: str = CLOSED_LOOP,
    measured=None,
) -> torch.Tensor:
    """Multi-step emission forecast from a seed window and an input schedule.

    In teacher-forced mode the rolling window is refilled with ``measured``
    emissions after each step (one-step fidelity diagnostics); in closed-loop
    mode the model's own decoded predictions are fed back, so the output
    depends only on the seed window and the inputs.

    Args:
        seed_window: [t_past, m_p] normalized emissions preceding the forecast.
        u_future:    [H, m_u] normalized inputs for the forecast horizon.
        mode:        ``"teacher-forced"`` or ``"closed-loop"``.
        measured:    [H, m_p] measured emissions; required for teacher forcing.

    Returns:
        [H, m_p] normalized emission predictions.
    """
    if mode not in (TEACHER_FORCED, CLOSED_LOOP):
        raise ContractError(f"unknown forecast mode {mode!r}")
    window = model._cast(seed_window)
    u = model._cast(u_future)
    cfg = model.config
    if window.shape != (cfg.t_past, cfg.emission_channels):
        raise ShapeError(
            f"seed window must be [{cfg.t_past}, {cfg.emission_channels}], got {tuple(window.shape)}"
        )
    if u.dim() != 2 or u.shape[0] < 1:
        raise ContractError(f"need at least one future input row, got shape {tuple(u.shape)}")
    horizon = u.shape[0]
    if mode == TEACHER_FORCED:
        if measured is None:
            raise ContractError("teacher-forced mode requires measured emissions")
        measured = model._cast(measured)
        if measured.shape != (horizon, cfg.emission_channels):
            raise ShapeError(
                f"measured emissions must be [{horizon}, {cfg.emission_channels}], "
                f"got {tuple(measured.shape)}"
            )
    preds = []
    with torch.no_grad():
        for t in range(horizon):
            s = model.encode_observations(window)
            z = model.encode_inputs(u[t : t + 1])[0]
            s_next = model.predict_next(s, z)
            p_next = model.decode_emissions(s_next)
            preds.append(p_next)
            next_row = measured[t] if mode == TEACHER_FORCED else p_next
            window = torch.cat([window[1:], next_row.unsqueeze(0)], dim=0)
    return torch.stack(preds, dim=0)
