"""Assembled treatment-effect network and its ablation variants.

The full architecture chains the spectral boundary branch (inferred
confounders), a recurrent history embedding feeding a controlled-ODE
integration over the true timestamps, a stacked recurrent outcome decoder,
and a propensity network for inverse-probability reweighting.

Variants:
    full          complete architecture
    wo_hc         boundary branch removed (inferred confounder identically 0)
    wo_lip        spectral projection of the confounder head disabled
    wo_high       high-frequency component zeroed before mixing
    wo_low        low-frequency component zeroed before mixing
    conf_baseline no-hidden-confounder baseline: recurrent decoder on the
                  embedded observed history, no boundary branch, no integrator
    oracle_conf   true simulated confounder fed in place of the inferred one
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .cde import CdeConfig, ControlPath, HistoryEmbedding, LipschitzRnnField, cde_solve
from .outcome import (
    OutcomeDecoder,
    PropensityNetwork,
    PropensityOutput,
    propensity_forward,
)
from .sim import TrajectoryRecord

VARIANTS = ("full", "wo_hc", "wo_lip", "wo_high", "wo_low", "conf_baseline", "oracle_conf")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    k_covariates: int
    n_treatments: int
    z_dim: int = 1
    rnn_hidden: int = 32
    cutoff_d0: float | None = None
    conv_kernel: int = 3
    cde: CdeConfig = field(default_factory=CdeConfig)
    decoder_hidden: tuple[int, int] = (64, 32)
    propensity_hidden: int = 32
    clip_percentiles: tuple[float, float] = (1.0, 99.0)

    def validate(self) -> None:
        if self.k_covariates < 1 or self.n_treatments < 1:
            raise ModelError("k_covariates and n_treatments must be >= 1")
        if self.z_dim < 1:
            raise ModelError("z_dim must be >= 1")
        self.cde.validate()


@dataclass
class PaddedBatch:
    """Observed rows of a set of trajectories, padded to a common length."""

    patient_ids: list[str]
    times: Tensor       # (B, K) strictly increasing per row (dummy tail)
    covariates: Tensor  # (B, K, k)
    treatments: Tensor  # (B, K, j)
    outcomes: Tensor    # (B, K)
    mask: Tensor        # (B, K) True on real steps
    lengths: Tensor     # (B,) number of real steps
    true_confounder: Tensor | None  # (B, K) or None
    full_lengths: Tensor  # (B,) trajectory length before missingness


def collate(
    records: Sequence[TrajectoryRecord], dtype: torch.dtype = torch.float32
) -> PaddedBatch:
    """Pad the observed view of each record into one batch."""
    if len(records) == 0:
        raise ModelError("cannot collate an empty batch")
    views = [r.observed_view() for r in records]
    for v in views:
        if len(v) < 2:
            raise ModelError(
                f"patient {v.patient_id}: needs >= 2 observed steps, has {len(v)}"
            )
    k = views[0].covariates.shape[1]
    j = views[0].treatments.shape[1]
    kmax = max(len(v) for v in views)
    b = len(views)
    times = torch.zeros(b, kmax, dtype=dtype)
    cov = torch.zeros(b, kmax, k, dtype=dtype)
    treat = torch.zeros(b, kmax, j, dtype=dtype)
    out = torch.zeros(b, kmax, dtype=dtype)
    mask = torch.zeros(b, kmax, dtype=torch.bool)
    has_z = all(v.true_confounder is not None for v in views)
    ztrue = torch.zeros(b, kmax, dtype=dtype) if has_z else None
    for i, v in enumerate(views):
        n = len(v)
        times[i, :n] = torch.as_tensor(v.times, dtype=dtype)
        # dummy strictly-increasing tail times; values there are never used
        if n < kmax:
            last = float(v.times[-1])
            times[i, n:] = last + torch.arange(1, kmax - n + 1, dtype=dtype)
        cov[i, :n] = torch.as_tensor(v.covariates, dtype=dtype)
        treat[i, :n] = torch.as_tensor(v.treatments, dtype=dtype)
        out[i, :n] = torch.as_tensor(v.outcome, dtype=dtype)
        mask[i, :n] = True
        if has_z:
            ztrue[i, :n] = torch.as_tensor(v.true_confounder, dtype=dtype)
    return PaddedBatch(
        patient_ids=[v.patient_id for v in views],
        times=times, covariates=cov, treatments=treat, outcomes=out,
        mask=mask, lengths=mask.sum(dim=1),
        true_confounder=ztrue,
        full_lengths=torch.tensor([len(r) for r in records], dtype=dtype),
    )


@dataclass
class ModelOutput:
    predictions: Tensor           # (B, K) one-step-ahead outcome estimates
    propensity: PropensityOutput
    z_hat: Tensor                 # (B, K, z_dim) inferred confounders (zeros when absent)
    mask: Tensor                  # (B, K)


class TreatmentEffectModel(nn.Module):
    def __init__(self, cfg: ModelConfig, variant: str = "full"):
        super().__init__()
        cfg.validate()
        if variant not in VARIANTS:
            raise ModelError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.cfg = cfg
        self.variant = variant
        k, j, z = cfg.k_covariates, cfg.n_treatments, cfg.z_dim
        latent = cfg.cde.latent_dim

        self.propensity = PropensityNetwork(k, j, cfg.propensity_hidden)
        self.embed = HistoryEmbedding(k, j, z, latent)
        self.decoder = OutcomeDecoder(latent, cfg.decoder_hidden)
        if variant in ("wo_hc", "conf_baseline", "oracle_conf"):
            self.boundary = None
        else:
            from .spectral import BoundaryBranch

            self.boundary = BoundaryBranch(
                k + j, z_dim=z, rnn_hidden=cfg.rnn_hidden,
                cutoff_d0=cfg.cutoff_d0, conv_kernel=cfg.conv_kernel,
            )
        self.cde_field = None if variant == "conf_baseline" else LipschitzRnnField(latent)

    def infer_confounders(self, batch: PaddedBatch, force_zero_z: bool = False) -> Tensor:
        """Per-step confounder input for the embedding, per variant."""
        b, kmax = batch.mask.shape
        dtype = batch.covariates.dtype
        z_hat = torch.zeros(b, kmax, self.cfg.z_dim, dtype=dtype)
        if self.variant == "oracle_conf":
            if batch.true_confounder is None:
                raise ModelError("oracle_conf requires true confounders in the data")
            return batch.true_confounder[..., None].expand(-1, -1, self.cfg.z_dim).to(dtype)
        if self.boundary is None or force_zero_z:
            return z_hat
        drop_high = self.variant == "wo_high"
        drop_low = self.variant == "wo_low"
        for i in range(b):
            n = int(batch.lengths[i])
            seq = torch.cat(
                [batch.covariates[i, :n], batch.treatments[i, :n]], dim=1
            )
            out = self.boundary(seq, drop_high=drop_high, drop_low=drop_low)
            z_hat[i, :n] = out.z_hat
        return z_hat

    def _embed_knots(self, batch: PaddedBatch, z_hat: Tensor) -> Tensor:
        b, kmax = batch.mask.shape
        prev = torch.zeros(b, self.embed.latent_dim, dtype=batch.covariates.dtype)
        knots = []
        for t in range(kmax):
            prev = self.embed(
                batch.covariates[:, t], batch.treatments[:, t], z_hat[:, t], prev
            )
            knots.append(prev)
        return torch.stack(knots, dim=1)  # (B, K, latent)

    def forward(
        self,
        batch: PaddedBatch,
        marginals: Tensor | None = None,
        force_zero_z: bool = False,
    ) -> ModelOutput:
        z_hat = self.infer_confounders(batch, force_zero_z=force_zero_z)
        knots = self._embed_knots(batch, z_hat)
        if self.variant == "conf_baseline":
            latent = knots
        else:
            path = ControlPath(
                batch.times, knots, scheme=self.cfg.cde.interp, knot_mask=batch.mask
            )
            eval_times = torch.unique(batch.times[batch.mask])
            traj = cde_solve(self.cde_field, knots[:, 0], path, eval_times, self.cfg.cde)
            idx = torch.searchsorted(eval_times, batch.times.reshape(-1)).reshape(
                batch.times.shape
            ).clamp(max=len(eval_times) - 1)
            latent = traj[torch.arange(len(batch.patient_ids))[:, None], idx]
            latent = latent * batch.mask[..., None].to(latent.dtype)
        preds = self.decoder(latent)
        prop = propensity_forward(
            batch.covariates, batch.treatments, batch.mask, self.propensity,
            marginals=marginals, clip_percentiles=self.cfg.clip_percentiles,
        )
        return ModelOutput(predictions=preds, propensity=prop, z_hat=z_hat, mask=batch.mask)

    def project_lipschitz_(self, iters: int | None = None) -> float | None:
        """Spectral projection of the confounder head (skipped for wo_lip)."""
        if self.boundary is None or self.variant == "wo_lip":
            return None
        return self.boundary.project_(iters=iters)

    @torch.no_grad()
    def predict_records(
        self,
        records: Sequence[TrajectoryRecord],
        marginals: Tensor | None = None,
        batch_size: int = 64,
        dtype: torch.dtype = torch.float32,
    ) -> list[dict]:
        """Per-record predictions on observed steps.

        Returns dicts with keys: patient_id, times, y_hat, y, z_hat, weight.
        """
        self.eval()
        out = []
        for lo in range(0, len(records), batch_size):
            chunk = records[lo : lo + batch_size]
            batch = collate(chunk, dtype=dtype)
            res = self(batch, marginals=marginals)
            for i, rec in enumerate(chunk):
                n = int(batch.lengths[i])
                out.append(
                    {
                        "patient_id": batch.patient_ids[i],
                        "times": batch.times[i, :n].numpy().copy(),
                        "y_hat": res.predictions[i, :n].numpy().copy(),
                        "y": batch.outcomes[i, :n].numpy().copy(),
                        "z_hat": res.z_hat[i, :n].numpy().copy(),
                        "weight": float(res.propensity.patient_weight[i]),
                        "full_length": float(batch.full_lengths[i]),
                    }
                )
        return out


def build_model(cfg: ModelConfig, variant: str, init_seed: int) -> TreatmentEffectModel:
    """Seeded construction so identical (cfg, variant, seed) give identical weights."""
    torch.manual_seed(init_seed)
    return TreatmentEffectModel(cfg, variant)
