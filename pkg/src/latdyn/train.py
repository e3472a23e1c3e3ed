"""Training loops and the run configuration surface.

JEPA training is two-phase: the core (both encoders + predictor) first, on the
composite latent loss; then the two decoders on plain MSE against detached
latents, so decoder updates can never move a core parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
import torch

from . import data as data_mod
from .errors import ContractError
from .jepa import JepaConfig, JepaModel
from .losses import LatentBatch, LossConfig, composite_loss, wmse
from .nets import (
    LstmSpec,
    OptimizerState,
    Params,
    clone_params,
    init_lstm_params,
    lstm_forward,
    optimizer_step,
    require_grad,
    zero_grads,
)


@dataclass(frozen=True)
class LstmConfig:
    """Recurrent baseline geometry; defaults match the reference configuration."""

    width: int = 512
    depth: int = 3
    timesteps: int = 10

    def to_spec(self, input_dim: int = 3, output_dim: int = 4) -> LstmSpec:
        return LstmSpec(
            input_dim=input_dim,
            hidden_width=self.width,
            depth=self.depth,
            output_dim=output_dim,
            timesteps=self.timesteps,
        )

    def to_dict(self) -> dict:
        return {"width": self.width, "depth": self.depth, "timesteps": self.timesteps}


@dataclass(frozen=True)
class RunConfig:
    """Everything a training run needs besides the dataset itself."""

    model: str = "jepa"
    jepa: JepaConfig = field(default_factory=JepaConfig)
    lstm: LstmConfig = field(default_factory=LstmConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    learning_rate: float = 1e-3
    epochs: int = 200
    decoder_epochs: int | None = None  # None: same as epochs
    batch_size: int = 64
    seed: int = 0
    data: str | None = None
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        if self.model not in ("jepa", "lstm"):
            raise ContractError(f"model must be 'jepa' or 'lstm', got {self.model!r}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ContractError("epochs must be >= 1 and batch_size >= 2")
        if self.decoder_epochs is not None and self.decoder_epochs < 1:
            raise ContractError("decoder_epochs must be >= 1 when given")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "jepa": self.jepa.to_dict(),
            "lstm": self.lstm.to_dict(),
            "loss": {
                "eps1": self.loss.eps1,
                "eps2": self.loss.eps2,
                "w_var": self.loss.w_var,
                "w_inv": self.loss.w_inv,
                "w_cov": self.loss.w_cov,
                "w_xcov": self.loss.w_xcov,
            },
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "decoder_epochs": self.decoder_epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "data": self.data,
            "split": list(self.split),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        """Build from a JSON-layer dict; unknown keys anywhere are rejected."""
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict = dict(raw)
        if "jepa" in kwargs:
            _reject_unknown(kwargs["jepa"], JepaConfig, "jepa")
            kwargs["jepa"] = JepaConfig.from_dict(kwargs["jepa"])
        if "lstm" in kwargs:
            _reject_unknown(kwargs["lstm"], LstmConfig, "lstm")
            kwargs["lstm"] = LstmConfig(**kwargs["lstm"])
        if "loss" in kwargs:
            _reject_unknown(kwargs["loss"], LossConfig, "loss")
            kwargs["loss"] = LossConfig(**kwargs["loss"])
        if "split" in kwargs:
            kwargs["split"] = tuple(kwargs["split"])
        return cls(**kwargs)


def _reject_unknown(raw: dict, cls, where: str) -> None:
    if not isinstance(raw, dict):
        raise ContractError(f"config section {where!r} must be an object")
    unknown = set(raw) - {f.name for f in fields(cls)}
    if unknown:
        raise ContractError(f"unknown config keys in {where!r}: {sorted(unknown)}")


@dataclass
class TrainResult:
    kind: str
    normalizer: data_mod.Normalizer
    train_log: list[tuple]  # jepa: (step, var, inv, cov, xcov, total); lstm: (step, wmse)
    decoder_log: list[tuple]  # (decoder, step, mse)
    diverged: bool
    jepa_model: JepaModel | None = None
    lstm_spec: LstmSpec | None = None
    lstm_params: Params | None = None


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        if len(idx) >= 2:  # batch statistics need at least two samples
            yield torch.from_numpy(idx.copy())


def _sliding_targets(model: JepaModel, p_full: torch.Tensor) -> torch.Tensor:
    """Encode each future step's trailing window: [N, T_p+T_f, m_p] -> [N, T_f, D]."""
    cfg = model.config
    windows = [p_full[:, k + 1 : k + 1 + cfg.t_past, :] for k in range(cfg.t_future)]
    stacked = torch.cat(windows, dim=0)  # [T_f*N, T_p, m_p]
    encoded = model.encode_observations(stacked)
    return torch.stack(encoded.chunk(cfg.t_future, dim=0), dim=1)  # [N, T_f, D]


def jepa_latent_batch(model: JepaModel, p_past, u_future, p_future) -> LatentBatch:
    """One forward pass over a training batch, producing all loss inputs."""
    cfg = model.config
    s_k = model.encode_observations(p_past)  # [N, D]
    p_full = torch.cat([model._cast(p_past), model._cast(p_future)], dim=1)
    s_targets = _sliding_targets(model, p_full)  # [N, T_f, D]
    z = model.encode_inputs(u_future)  # [N, T_f-1, D]
    s_preds = model.rollout(s_k, z, horizon=cfg.t_future - 1)  # [N, T_f-1, D]
    # State feeding transition k: the current state, then the encoded targets.
    states = torch.cat([s_k.unsqueeze(1), s_targets[:, : cfg.t_future - 2, :]], dim=1)
    return LatentBatch(targets=s_targets, predictions=s_preds, inputs_z=z, states=states)


def train_jepa(records: list[data_mod.EmissionRecord], cfg: RunConfig) -> TrainResult:
    """Two-phase JEPA training on a contiguous-split dataset.

    A non-finite loss aborts the phase and restores the last epoch-end
    snapshot (``diverged`` is set on the result).
    """
    train_records, _, _ = data_mod.split_records(records, cfg.split)
    train_arr = data_mod.records_to_array(train_records)
    normalizer = data_mod.Normalizer.fit(train_arr)
    windows = data_mod.window_dataset(
        normalizer.apply(train_arr), cfg.jepa.t_past, cfg.jepa.t_future
    )
    stacked = data_mod.stack_windows(windows)
    p_past = torch.from_numpy(stacked["p_past"]).float()
    u_future = torch.from_numpy(stacked["u_future"]).float()
    p_future = torch.from_numpy(stacked["p_future"]).float()

    model = JepaModel.init(cfg.jepa, seed=cfg.seed)
    core = require_grad(model.core_parameters())
    opt = OptimizerState(learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + 1)

    train_log: list[tuple] = []
    diverged = False
    step = 0
    snapshot = clone_params(core)
    for _ in range(cfg.epochs):
        for idx in _batches(p_past.shape[0], cfg.batch_size, rng):
            batch = jepa_latent_batch(model, p_past[idx], u_future[idx], p_future[idx])
            total, terms = composite_loss(batch, cfg.loss)
            if not torch.isfinite(total):
                diverged = True
                break
            zero_grads(core)
            total.backward()
            optimizer_step(opt, core, [p.grad for p in core])
            step += 1
            train_log.append(
                (
                    step,
                    terms["variance"].item(),
                    terms["invariance"].item(),
                    terms["covariance"].item(),
                    terms["cross_covariance"].item(),
                    total.item(),
                )
            )
        if diverged:
            with torch.no_grad():
                for p, snap in zip(core, snapshot):
                    p.copy_(snap)
            break
        snapshot = clone_params(core)

    decoder_log = [] if diverged else _train_decoders(model, cfg, p_past, u_future)
    return TrainResult(
        kind="jepa",
        normalizer=normalizer,
        train_log=train_log,
        decoder_log=decoder_log,
        diverged=diverged,
        jepa_model=model,
    )


def _train_decoders(
    model: JepaModel, cfg: RunConfig, p_past: torch.Tensor, u_future: torch.Tensor
) -> list[tuple]:
    """Phase two: decoders on frozen-core latents (detached, so core-isolated)."""
    log: list[tuple] = []
    with torch.no_grad():
        s_all = model.encode_observations(p_past)  # [N, D]
        u_rows = u_future.reshape(-1, model.config.input_channels)
        z_all = model.encode_inputs(u_rows)  # [M, D]
    em_target = p_past[:, -1, :]  # the window's current emission row
    rng = np.random.default_rng(cfg.seed + 2)

    for decoder, latents, target in (
        ("emission", s_all, em_target),
        ("input", z_all, u_rows),
    ):
        params = require_grad(model.params[f"{decoder}_decoder"])
        opt = OptimizerState(learning_rate=cfg.learning_rate)
        decode = model.decode_emissions if decoder == "emission" else model.decode_inputs
        step = 0
        healthy = True
        epochs = cfg.decoder_epochs if cfg.decoder_epochs is not None else cfg.epochs
        for _ in range(epochs):
            if not healthy:
                break
            for idx in _batches(latents.shape[0], cfg.batch_size, rng):
                pred = decode(latents[idx])
                loss = ((pred - target[idx]) ** 2).mean()
                if not torch.isfinite(loss):
                    healthy = False
                    break
                zero_grads(params)
                loss.backward()
                optimizer_step(opt, params, [p.grad for p in params])
                step += 1
                log.append((decoder, step, loss.item()))
    return log


def lstm_windows(data_norm: np.ndarray, timesteps: int) -> tuple[np.ndarray, np.ndarray]:
    """Input history windows and same-step emission targets.

    Window t covers inputs [t-timesteps+1 .. t]; the target is the emission
    row at t, i.e. the baseline maps the input sequence directly to the
    current emissions.
    """
    n = data_norm.shape[0]
    if n < timesteps:
        raise ContractError(f"series of length {n} shorter than {timesteps} timesteps")
    inputs = data_norm[:, data_mod.INPUT_COLS]
    emissions = data_norm[:, data_mod.EMISSION_COLS]
    u = np.stack([inputs[t - timesteps + 1 : t + 1] for t in range(timesteps - 1, n)])
    y = emissions[timesteps - 1 :]
    return u, y


def train_lstm(records: list[data_mod.EmissionRecord], cfg: RunConfig) -> TrainResult:
    """Weighted-MSE training of the monolithic recurrent baseline."""
    train_records, _, _ = data_mod.split_records(records, cfg.split)
    train_arr = data_mod.records_to_array(train_records)
    normalizer = data_mod.Normalizer.fit(train_arr)
    u_np, y_np = lstm_windows(normalizer.apply(train_arr), cfg.lstm.timesteps)
    u = torch.from_numpy(u_np).float()
    y = torch.from_numpy(y_np).float()

    spec = cfg.lstm.to_spec()
    gen = torch.Generator().manual_seed(cfg.seed)
    params = require_grad(init_lstm_params(spec, gen))
    opt = OptimizerState(learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + 1)

    train_log: list[tuple] = []
    diverged = False
    step = 0
    snapshot = clone_params(params)
    for _ in range(cfg.epochs):
        for idx in _batches(u.shape[0], cfg.batch_size, rng):
            pred = lstm_forward(spec, params, u[idx])
            loss = wmse(y[idx], pred)
            if not torch.isfinite(loss):
                diverged = True
                break
            zero_grads(params)
            loss.backward()
            optimizer_step(opt, params, [p.grad for p in params])
            step += 1
            train_log.append((step, loss.item()))
        if diverged:
            with torch.no_grad():
                for p, snap in zip(params, snapshot):
                    p.copy_(snap)
            break
        snapshot = clone_params(params)

    return TrainResult(
        kind="lstm",
        normalizer=normalizer,
        train_log=train_log,
        decoder_log=[],
        diverged=diverged,
        lstm_spec=spec,
        lstm_params=params,
    )
