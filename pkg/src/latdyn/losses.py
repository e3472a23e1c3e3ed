"""Latent-space training objectives and the evaluation metric.

Shapes follow the training batch layout: target embeddings are
[batch, future_steps, latent_dim]; predicted embeddings drop the final step
(one prediction per available future input), giving [batch, future_steps - 1,
latent_dim].
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ContractError, ShapeError


@dataclass(frozen=True)
class LossConfig:
    """Slack terms for the variance loss plus the four composite weights."""

    eps1: float = 1e-4
    eps2: float = 1e-4
    w_var: float = 1.0
    w_inv: float = 25.0
    w_cov: float = 1.0
    w_xcov: float = 1.0

    def __post_init__(self):
        if self.eps1 <= 0 or self.eps2 <= 0:
            raise ContractError("eps1 and eps2 must be positive")
        weights = (self.w_var, self.w_inv, self.w_cov, self.w_xcov)
        if any(w < 0 for w in weights):
            raise ContractError(f"loss weights must be non-negative, got {weights}")
        if self.w_inv <= 0:
            raise ContractError("w_inv must be positive (invariance is the predictive term)")


def _as_batch_steps_dim(s: torch.Tensor) -> torch.Tensor:
    if s.dim() == 2:
        return s.unsqueeze(1)
    if s.dim() != 3:
        raise ShapeError(f"expected [batch, steps, dim] or [batch, dim], got {tuple(s.shape)}")
    return s


def variance_loss(s: torch.Tensor, eps1: float, eps2: float) -> torch.Tensor:
    """Mean of 1/(sigma + eps2) with sigma = sqrt(unbiased batch var + eps1).

    Small per-dimension spread makes this large, so minimizing it keeps the
    batch from collapsing onto a single point.
    """
    s = _as_batch_steps_dim(s)
    n = s.shape[0]
    if n < 2:
        raise ContractError(f"variance_loss needs a batch of >= 2, got {n}")
    sigma = torch.sqrt(s.var(dim=0, unbiased=True) + eps1)  # [steps, dim]
    return (1.0 / (sigma + eps2)).mean()


def invariance_loss(s_target: torch.Tensor, s_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared latent-transition error, summed over the latent dimension."""
    s_target = _as_batch_steps_dim(s_target)
    s_pred = _as_batch_steps_dim(s_pred)
    if s_target.shape != s_pred.shape:
        raise ShapeError(
            f"target shape {tuple(s_target.shape)} != prediction shape {tuple(s_pred.shape)}"
        )
    n, steps, _ = s_target.shape
    return ((s_target - s_pred) ** 2).sum(dim=2).sum() / (steps * n)


def covariance_loss(s: torch.Tensor) -> torch.Tensor:
    """Squared off-diagonal entries of the per-step batch covariance.

    Features are centered over the batch; C = X^T X / (N-1); each unordered
    feature pair contributes C[i,j]^2 once and the result is averaged over the
    step axis only.
    """
    s = _as_batch_steps_dim(s)
    n, steps, dim = s.shape
    if n < 2:
        raise ContractError(f"covariance_loss needs a batch of >= 2, got {n}")
    x = s - s.mean(dim=0, keepdim=True)
    total = s.new_zeros(())
    for k in range(steps):
        cov = x[:, k, :].T @ x[:, k, :] / (n - 1)  # [dim, dim]
        off = cov**2
        total = total + off.sum() - off.diagonal().sum()
    return total / (2 * steps)  # each pair counted once


def cross_covariance_loss(z: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Squared Frobenius norm of the input/state cross-covariance, over dim."""
    if z.dim() != 2 or s.dim() != 2:
        raise ShapeError(f"expected [batch, dim] inputs, got {tuple(z.shape)}, {tuple(s.shape)}")
    if z.shape[0] != s.shape[0]:
        raise ShapeError(f"batch sizes disagree: {z.shape[0]} vs {s.shape[0]}")
    n, dim = z.shape
    if n < 2:
        raise ContractError(f"cross_covariance_loss needs a batch of >= 2, got {n}")
    zc = z - z.mean(dim=0, keepdim=True)
    sc = s - s.mean(dim=0, keepdim=True)
    xcov = zc.T @ sc / (n - 1)  # [dim_z, dim_s]
    return (xcov**2).sum() / dim


@dataclass(frozen=True)
class LatentBatch:
    """One forward pass worth of embeddings, ready for the composite loss.

    targets:     [N, T_f, D]      encoded future observation windows
    predictions: [N, T_f - 1, D]  autoregressive predictor outputs
    inputs_z:    [N, T_f - 1, D]  encoded future inputs, one per transition
    states:      [N, T_f - 1, D]  encoder state feeding each transition
                                  (current state, then encoded targets)
    """

    targets: torch.Tensor
    predictions: torch.Tensor
    inputs_z: torch.Tensor
    states: torch.Tensor


def composite_loss(batch: LatentBatch, cfg: LossConfig) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted sum of the four latent losses plus the per-term breakdown."""
    t_future = batch.targets.shape[1]
    l_var = variance_loss(batch.targets, cfg.eps1, cfg.eps2)
    l_inv = invariance_loss(batch.targets[:, : t_future - 1, :], batch.predictions)
    l_cov = covariance_loss(batch.targets)
    n_trans = batch.inputs_z.shape[1]
    l_xcov = sum(
        cross_covariance_loss(batch.inputs_z[:, k, :], batch.states[:, k, :])
        for k in range(n_trans)
    ) / n_trans
    total = cfg.w_var * l_var + cfg.w_inv * l_inv + cfg.w_cov * l_cov + cfg.w_xcov * l_xcov
    breakdown = {
        "variance": l_var,
        "invariance": l_inv,
        "covariance": l_cov,
        "cross_covariance": l_xcov,
        "total": total,
    }
    return total, breakdown


def per_channel_mse(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Per-channel mean squared error for [T, K] series."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if x.dim() != 2:
        raise ShapeError(f"expected [T, K], got {tuple(x.shape)}")
    return ((x - x_hat) ** 2).mean(dim=0)


def wmse(x: torch.Tensor, x_hat: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    """Weighted mean of per-channel MSEs; uniform weights when none given."""
    channel_mse = per_channel_mse(x, x_hat)
    if weights is None:
        weights = torch.ones_like(channel_mse)
    if weights.shape != channel_mse.shape:
        raise ShapeError(f"need {channel_mse.shape[0]} weights, got {tuple(weights.shape)}")
    if (weights < 0).any():
        raise ContractError("wmse weights must be non-negative")
    w_sum = weights.sum()
    if w_sum <= 0:
        raise ContractError("wmse weights sum to zero")
    return (weights * channel_mse).sum() / w_sum
