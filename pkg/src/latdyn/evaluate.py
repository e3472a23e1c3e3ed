"""Cycle-level evaluation: one-step and closed-loop forecasts, baselines, reports.

All metrics are computed on the min-max-normalized scale using the model's own
training normalizer, so different models on the same cycle are directly
comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import data as data_mod
from .errors import ContractError
from .jepa import CLOSED_LOOP, TEACHER_FORCED, JepaModel, closed_loop_forecast
from .losses import per_channel_mse, wmse
from .nets import LstmSpec, Params, lstm_forward
from .train import lstm_windows

REPORT_COLUMNS = ["model", "mode", "wmse", "mse_nox", "mse_co2", "mse_co", "mse_thc"]


@dataclass
class EvalResult:
    """Predictions over a cycle plus the per-species/overall error summary."""

    name: str
    mode: str
    start: int  # first predicted timestep index within the cycle
    predictions: np.ndarray  # [H, 4] normalized
    targets: np.ndarray  # [H, 4] normalized
    per_species_mse: np.ndarray  # [4]
    wmse: float

    def report_row(self) -> dict:
        row = {"model": self.name, "mode": self.mode, "wmse": self.wmse}
        row.update(
            {f"mse_{sp}": float(m) for sp, m in zip(data_mod.SPECIES, self.per_species_mse)}
        )
        return row


def _finish(name: str, mode: str, start: int, preds: torch.Tensor, targets: np.ndarray) -> EvalResult:
    preds_np = preds.detach().cpu().numpy().astype(np.float64)
    t = torch.from_numpy(targets)
    p = torch.from_numpy(preds_np)
    return EvalResult(
        name=name,
        mode=mode,
        start=start,
        predictions=preds_np,
        targets=targets,
        per_species_mse=per_channel_mse(t, p).numpy(),
        wmse=float(wmse(t, p)),
    )


def evaluate_jepa(
    model: JepaModel,
    normalizer: data_mod.Normalizer,
    records: list[data_mod.EmissionRecord],
    mode: str = TEACHER_FORCED,
    name: str = "jepa",
) -> EvalResult:
    """One-step (teacher-forced) or feedback (closed-loop) cycle evaluation.

    Teacher-forced prediction of step t uses the measured window ending at
    t-1 plus the input at t; every step is independent, so it runs batched.
    Closed-loop runs sequentially, feeding decoded predictions back into the
    rolling window.
    """
    data_norm = normalizer.apply(data_mod.records_to_array(records))
    t_past = model.config.t_past
    n = data_norm.shape[0]
    if n <= t_past:
        raise ContractError(f"cycle of {n} steps too short for a {t_past}-step seed window")
    inputs = data_norm[:, data_mod.INPUT_COLS]
    emissions = data_norm[:, data_mod.EMISSION_COLS]
    targets = emissions[t_past:]

    if mode == TEACHER_FORCED:
        past = np.stack([emissions[t - t_past : t] for t in range(t_past, n)])
        with torch.no_grad():
            s = model.encode_observations(torch.from_numpy(past).float())
            z = model.encode_inputs(torch.from_numpy(inputs[t_past:]).float())
            preds = model.decode_emissions(model.predict_next(s, z))
    elif mode == CLOSED_LOOP:
        preds = closed_loop_forecast(
            model, emissions[:t_past], inputs[t_past:], mode=CLOSED_LOOP
        )
    else:
        raise ContractError(f"unknown evaluation mode {mode!r}")
    return _finish(name, mode, t_past, preds, targets)


def evaluate_lstm(
    spec: LstmSpec,
    params: Params,
    normalizer: data_mod.Normalizer,
    records: list[data_mod.EmissionRecord],
    name: str = "lstm",
    start: int | None = None,
) -> EvalResult:
    """Batched input-window evaluation of the recurrent baseline.

    The baseline consumes inputs only, so there is no emission feedback and
    teacher-forced and closed-loop evaluation coincide.
    """
    data_norm = normalizer.apply(data_mod.records_to_array(records))
    u_np, y_np = lstm_windows(data_norm, spec.timesteps)
    if start is None:
        start = spec.timesteps - 1
    if start < spec.timesteps - 1:
        raise ContractError(f"start {start} needs {spec.timesteps} input rows")
    offset = start - (spec.timesteps - 1)
    with torch.no_grad():
        preds = lstm_forward(spec, params, torch.from_numpy(u_np[offset:]).float())
    return _finish(name, TEACHER_FORCED, start, preds, y_np[offset:])


def evaluate_persistence(
    records: list[data_mod.EmissionRecord],
    normalizer: data_mod.Normalizer,
    start: int,
) -> EvalResult:
    """Hold-last-value baseline: prediction for step t is the measurement at t-1."""
    if start < 1:
        raise ContractError("persistence needs at least one preceding measurement")
    data_norm = normalizer.apply(data_mod.records_to_array(records))
    emissions = data_norm[:, data_mod.EMISSION_COLS]
    preds = torch.from_numpy(emissions[start - 1 : -1].copy())
    return _finish("persistence", TEACHER_FORCED, start, preds, emissions[start:])


def latent_rollout_mse(
    model: JepaModel,
    data_norm: np.ndarray,
    horizon: int,
) -> tuple[float, float]:
    """Latent-space rollout error over ``horizon`` steps vs the mean-latent floor.

    Builds extended windows (past window + ``horizon`` future steps), encodes
    the targets with the observation encoder, rolls the predictor forward
    autoregressively under teacher-forced inputs, and returns
    (rollout MSE, MSE of always predicting the batch-mean latent).
    """
    cfg = model.config
    windows = data_mod.window_dataset(data_norm, cfg.t_past, horizon + 1)
    if not windows:
        raise ContractError("series too short for the requested rollout horizon")
    stacked = data_mod.stack_windows(windows)
    p_past = torch.from_numpy(stacked["p_past"]).float()
    u_future = torch.from_numpy(stacked["u_future"]).float()
    p_full = torch.cat([p_past, torch.from_numpy(stacked["p_future"]).float()], dim=1)
    with torch.no_grad():
        s0 = model.encode_observations(p_past)
        z = model.encode_inputs(u_future)  # [N, horizon, D]
        preds = model.rollout(s0, z, horizon)  # [N, horizon, D]
        target_windows = torch.cat(
            [p_full[:, k + 1 : k + 1 + cfg.t_past, :] for k in range(horizon)], dim=0
        )
        targets = model.encode_observations(target_windows)
        targets = torch.stack(targets.chunk(horizon, dim=0), dim=1)  # [N, horizon, D]
        rollout_mse = ((preds - targets) ** 2).mean().item()
        mean_latent = targets.mean(dim=(0, 1), keepdim=True)
        baseline_mse = ((mean_latent - targets) ** 2).mean().item()
    return rollout_mse, baseline_mse


def encoded_latent_std(model: JepaModel, data_norm: np.ndarray) -> float:
    """Mean per-dimension std of encoded windows; the collapse diagnostic."""
    windows = data_mod.window_dataset(data_norm, model.config.t_past, model.config.t_future)
    stacked = data_mod.stack_windows(windows)
    with torch.no_grad():
        s = model.encode_observations(torch.from_numpy(stacked["p_past"]).float())
    return s.std(dim=0, unbiased=True).mean().item()
