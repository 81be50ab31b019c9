"""Outcome model: time-varying propensity scores, stabilized inverse
probability of treatment weights, a stacked recurrent decoder, and the
weighted mean-squared-error objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

PROB_CLAMP = 1e-3


class OutcomeError(ValueError):
    pass


@dataclass
class PropensityOutput:
    probs: Tensor             # (batch, time, treatments), clamped to (0, 1)
    marginals: Tensor         # (treatments,) empirical assignment rates
    weights_per_step: Tensor  # (batch, time) stabilized step weights
    patient_weight: Tensor    # (batch,) truncated per-patient weights


class PropensityNetwork(nn.Module):
    """Recurrent propensity model: P(a_t | x_<=t, a_<t) per treatment channel."""

    def __init__(self, k_covariates: int, n_treatments: int, hidden: int = 32):
        super().__init__()
        self.n_treatments = n_treatments
        self.rnn = nn.GRU(k_covariates + n_treatments, hidden, batch_first=True)
        self.head = nn.Linear(hidden, n_treatments)

    def forward(self, covariates: Tensor, treatments: Tensor) -> Tensor:
        if covariates.ndim != 3 or treatments.ndim != 3:
            raise OutcomeError("propensity input must be padded (batch, time, feature)")
        prev_treat = torch.cat(
            [torch.zeros_like(treatments[:, :1]), treatments[:, :-1]], dim=1
        )
        feats = torch.cat([covariates, prev_treat], dim=2)
        hidden, _ = self.rnn(feats)
        probs = torch.sigmoid(self.head(hidden))
        return probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)


def treatment_marginals(treatments: Tensor, mask: Tensor) -> Tensor:
    """Per-treatment empirical assignment rate over observed steps."""
    m = mask[..., None].to(treatments.dtype)
    rate = (treatments * m).sum(dim=(0, 1)) / m.sum(dim=(0, 1)).clamp(min=1.0)
    return rate.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)


def stabilized_step_weights(
    probs: Tensor, treatments: Tensor, marginals: Tensor, mask: Tensor
) -> Tensor:
    """Per-step stabilized weight: prod_j marginal_j(a) / prob_j(a).

    Unobserved steps contribute weight 1 so downstream products ignore them.
    """
    lik_model = torch.where(treatments > 0.5, probs, 1.0 - probs)
    marg = marginals.expand_as(probs)
    lik_marg = torch.where(treatments > 0.5, marg, 1.0 - marg)
    log_ratio = (torch.log(lik_marg) - torch.log(lik_model)).sum(dim=2)
    return torch.exp(log_ratio * mask.to(log_ratio.dtype))

def truncate_weights(weights: Tensor, percentiles: tuple[float, float]) -> Tensor:
    """Clip weights into the batch percentile interval."""
    lo_q, hi_q = percentiles
    if not 0.0 <= lo_q < hi_q <= 100.0:
        raise OutcomeError(f"invalid percentile pair {percentiles}")
    lo = torch.quantile(weights, lo_q / 100.0)
    hi = torch.quantile(weights, hi_q / 100.0)
    return weights.clamp(lo, hi)


def propensity_forward(
    covariates: Tensor,
    treatments: Tensor,
    mask: Tensor,
    net: PropensityNetwork,
    marginals: Tensor | None = None,
    clip_percentiles: tuple[float, float] = (1.0, 99.0),
) -> PropensityOutput:
    """Propensity probabilities plus stabilized, truncated patient weights.

    Inputs are padded to a common length with ``mask`` marking real steps.
    """
    if covariates.shape[:2] != treatments.shape[:2] or mask.shape != covariates.shape[:2]:
        raise OutcomeError(
            f"inconsistent padded shapes: covariates {tuple(covariates.shape)}, "
            f"treatments {tuple(treatments.shape)}, mask {tuple(mask.shape)}"
        )
    probs = net(covariates, treatments)
    if marginals is None:
        marginals = treatment_marginals(treatments, mask)
    step_w = stabilized_step_weights(probs, treatments, marginals, mask)
    raw_patient = torch.exp(torch.log(step_w).sum(dim=1))
    patient = truncate_weights(raw_patient, clip_percentiles)
    return PropensityOutput(
        probs=probs, marginals=marginals, weights_per_step=step_w, patient_weight=patient
    )


def propensity_log_likelihood_loss(
    probs: Tensor, treatments: Tensor, mask: Tensor
) -> Tensor:
    """Masked Bernoulli negative log-likelihood of the observed assignments."""
    ll = treatments * torch.log(probs) + (1.0 - treatments) * torch.log(1.0 - probs)
    m = mask[..., None].to(ll.dtype)
    return -(ll * m).sum() / m.sum().clamp(min=1.0)


class OutcomeDecoder(nn.Module):
    """Two stacked recurrent layers and a linear head, one prediction per step."""

    def __init__(self, in_dim: int, hidden: tuple[int, int] = (64, 32)):
        super().__init__()
        self.lstm_a = nn.LSTM(in_dim, hidden[0], batch_first=True)
        self.lstm_b = nn.LSTM(hidden[0], hidden[1], batch_first=True)
        self.head = nn.Linear(hidden[1], 1)

    def forward(self, latent_traj: Tensor) -> Tensor:
        squeeze = latent_traj.ndim == 2
        x = latent_traj[None] if squeeze else latent_traj
        if x.ndim != 3:
            raise OutcomeError(
                f"latent trajectory must be (time, dim) or (batch, time, dim), "
                f"got {tuple(latent_traj.shape)}"
            )
        h, _ = self.lstm_a(x)
        h, _ = self.lstm_b(h)
        y = self.head(h)[..., 0]
        return y[0] if squeeze else y


def decode_outcomes(latent_traj: Tensor, decoder: OutcomeDecoder) -> Tensor:
    """One-step-ahead outcome prediction for every evaluated time."""
    return decoder(latent_traj)


def weighted_mse(
    y_hat: Tensor, y: Tensor, w: Tensor, mask: Tensor | None = None
) -> Tensor:
    """(1/N) sum_i w_i * mean_t (error_it^2) over each patient's observed steps."""
    if y_hat.shape != y.shape:
        raise OutcomeError(f"shape mismatch: y_hat {tuple(y_hat.shape)} vs y {tuple(y.shape)}")
    squeeze = y_hat.ndim == 1
    if squeeze:
        y_hat, y = y_hat[None], y[None]
        w = w.reshape(1)
        mask = None if mask is None else mask[None]
    if w.shape != (y_hat.shape[0],):
        raise OutcomeError(f"w must be per-patient, got {tuple(w.shape)}")
    if (w < 0).any():
        raise OutcomeError("weights must be non-negative")
    if mask is None:
        mask = torch.ones_like(y, dtype=torch.bool)
    m = mask.to(y.dtype)
    per_patient = ((y_hat - y) ** 2 * m).sum(dim=1) / m.sum(dim=1).clamp(min=1.0)
    return (w * per_patient).mean()
