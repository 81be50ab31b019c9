"""End-to-end training, evaluation, and per-run experiment driver."""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .cde import CdeConfig
from .metrics import MetricsReport, covsim, normalized_rmse_pct, rmse
from .model import (
    ModelConfig,
    ModelError,
    TreatmentEffectModel,
    VARIANTS,
    build_model,
    collate,
)
from .outcome import (
    propensity_log_likelihood_loss,
    treatment_marginals,
    weighted_mse,
)
from .sim import TrajectoryRecord


class TrainingError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    """Training loss became NaN/inf; carries the offending batch index."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 0.01
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    final_only: bool = False      # score only each patient's last observed step
    project_iters: int | None = 3  # power iterations per post-step projection

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError("epochs and batch_size must be >= 1")
        if abs(sum(self.split) - 1.0) > 1e-9 or any(f <= 0 for f in self.split):
            raise TrainingError(f"split fractions must be positive and sum to 1, got {self.split}")
        if self.lr <= 0:
            raise TrainingError("learning rate must be positive")


def default_model_config(records: Sequence[TrajectoryRecord], **overrides) -> ModelConfig:
    """Model hyperparameters inferred from the data shape.

    Training defaults to the cheap first-order solver at half-unit steps;
    accuracy-sensitive consumers pass an explicit CdeConfig instead.
    """
    k = records[0].covariates.shape[1]
    j = records[0].treatments.shape[1]
    cde = overrides.pop("cde", CdeConfig(latent_dim=16, solver="euler", step=0.5))
    return ModelConfig(k_covariates=k, n_treatments=j, cde=cde, **overrides)


def split_patients(
    n: int, fractions: tuple[float, float, float], seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffled train/validation/test patient indices."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(fractions[0] * n))
    n_val = int(np.floor(fractions[1] * n))
    train, val, test = order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]
    if min(len(train), len(val), len(test)) == 0:
        raise TrainingError(
            f"split {fractions} of {n} patients leaves an empty partition "
            f"({len(train)}/{len(val)}/{len(test)})"
        )
    return train, val, test


@dataclass
class TrainResult:
    model: TreatmentEffectModel
    history: list[dict]
    best_epoch: int
    marginals: torch.Tensor
    split: tuple[np.ndarray, np.ndarray, np.ndarray]
    variant: str
    train_cfg: TrainConfig
    model_cfg: ModelConfig
    wallclock_seconds: float = 0.0


def _loss_mask(batch, final_only: bool) -> torch.Tensor:
    if not final_only:
        return batch.mask
    last = (batch.lengths - 1).long()
    mask = torch.zeros_like(batch.mask)
    mask[torch.arange(len(batch.patient_ids)), last] = True
    return mask


def _batch_losses(model, batch, marginals, final_only):
    out = model(batch, marginals=marginals)
    mask = _loss_mask(batch, final_only)
    # weights are detached (the propensity model trains on its own likelihood)
    # and normalized to batch mean 1 so the loss scale is weight-independent
    w = out.propensity.patient_weight.detach()
    w = w / w.mean().clamp(min=1e-12)
    outcome_loss = weighted_mse(out.predictions, batch.outcomes, w, mask)
    prop_loss = propensity_log_likelihood_loss(
        out.propensity.probs, batch.treatments, batch.mask
    )
    return outcome_loss, prop_loss, out


def train(
    dataset: Sequence[TrajectoryRecord],
    variant: str,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
) -> TrainResult:
    """Fit one variant: Adam, per-step spectral projection, validation selection."""
    t_start = time.perf_counter()
    train_cfg.validate()
    if variant not in VARIANTS:
        raise TrainingError(f"unknown variant {variant!r}")
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    if model_cfg is None:
        model_cfg = default_model_config(dataset)

    tr_idx, va_idx, te_idx = split_patients(len(dataset), train_cfg.split, train_cfg.seed)
    train_recs = [dataset[i] for i in tr_idx]
    val_recs = [dataset[i] for i in va_idx]

    full_train_batch = collate(train_recs)
    marginals = treatment_marginals(full_train_batch.treatments, full_train_batch.mask)
    model = build_model(model_cfg, variant, init_seed=train_cfg.seed)
    model.project_lipschitz_()  # start inside the constraint set
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    shuffler = np.random.default_rng(train_cfg.seed + 1)

    history: list[dict] = []
    best_state, best_val, best_epoch = None, float("inf"), -1
    for epoch in range(train_cfg.epochs):
        model.train()
        order = shuffler.permutation(len(train_recs))
        epoch_losses = []
        for lo in range(0, len(order), train_cfg.batch_size):
            chunk = [train_recs[i] for i in order[lo : lo + train_cfg.batch_size]]
            batch = collate(chunk)
            optimizer.zero_grad()
            outcome_loss, prop_loss, _ = _batch_losses(
                model, batch, marginals, train_cfg.final_only
            )
            loss = outcome_loss + prop_loss
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite training loss at epoch {epoch}, batch {lo // train_cfg.batch_size}"
                )
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), max_norm=5.0)
            optimizer.step()
            if variant != "wo_lip":
                model.project_lipschitz_(iters=train_cfg.project_iters)
            epoch_losses.append(float(loss))

        model.eval()
        with torch.no_grad():
            val_batch = collate(val_recs)
            val_out = model(val_batch, marginals=marginals)
            vmask = _loss_mask(val_batch, train_cfg.final_only)
            val_loss = float(
                weighted_mse(
                    val_out.predictions, val_batch.outcomes,
                    torch.ones(len(val_recs)), vmask,
                )
            )
        history.append(
            {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)), "val_loss": val_loss}
        )
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.project_lipschitz_(iters=None)  # converged certificate projection
    model.eval()
    return TrainResult(
        model=model, history=history, best_epoch=best_epoch, marginals=marginals,
        split=(tr_idx, va_idx, te_idx), variant=variant, train_cfg=train_cfg,
        model_cfg=model_cfg, wallclock_seconds=time.perf_counter() - t_start,
    )


def _pooled_predictions(model, records, marginals=None):
    preds = model.predict_records(records, marginals=marginals)
    y_hat = np.concatenate([p["y_hat"] for p in preds])
    y = np.concatenate([p["y"] for p in preds])
    return y_hat, y, preds


def evaluate_rmse(
    model: TreatmentEffectModel,
    dataset: Sequence[TrajectoryRecord],
    normalized: bool = False,
) -> float:
    """Pooled one-step-ahead RMSE over observed steps (optionally std-normalized %)."""
    if len(dataset) == 0:
        raise TrainingError("empty evaluation set")
    y_hat, y, _ = _pooled_predictions(model, dataset)
    return normalized_rmse_pct(y_hat, y) if normalized else rmse(y_hat, y)


def evaluate_counterfactual(
    model: TreatmentEffectModel,
    factual_ds: Sequence[TrajectoryRecord],
    counterfactual_ds: Sequence[TrajectoryRecord],
) -> float:
    """RMSE of predictions under the zeroed-treatment world on its second half."""
    if len(factual_ds) != len(counterfactual_ds):
        raise TrainingError("factual/counterfactual patient sets differ in size")
    for f, c in zip(factual_ds, counterfactual_ds):
        if f.patient_id != c.patient_id or len(f) != len(c):
            raise TrainingError(
                f"patient mismatch between worlds: {f.patient_id} vs {c.patient_id}"
            )
    preds = model.predict_records(list(counterfactual_ds))
    y_hat, y = [], []
    for p in preds:
        sel = p["times"] >= p["full_length"] / 2.0
        y_hat.append(p["y_hat"][sel])
        y.append(p["y"][sel])
    return rmse(np.concatenate(y_hat), np.concatenate(y))


def confounder_representations(
    model: TreatmentEffectModel, dataset: Sequence[TrajectoryRecord]
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked (patient, time) inferred and true confounder matrices."""
    if any(r.true_confounder is None for r in dataset):
        raise TrainingError("true confounders missing; covsim unavailable")
    preds = model.predict_records(list(dataset))
    z_hat = np.concatenate([p["z_hat"] for p in preds], axis=0)
    z_true = np.concatenate(
        [r.observed_view().true_confounder for r in dataset], axis=0
    )[:, None]
    return z_hat, z_true


def run_experiment(
    factual: Sequence[TrajectoryRecord],
    counterfactual: Sequence[TrajectoryRecord] | None,
    variant: str,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    run_id: str = "run",
    record_timing: bool = False,
) -> tuple[MetricsReport, TrainResult]:
    """Train one variant and evaluate every metric on the test split."""
    result = train(factual, variant, train_cfg, model_cfg)
    test_recs = [factual[i] for i in result.split[2]]
    fit_rmse = evaluate_rmse(result.model, test_recs, normalized=False)
    fit_pct = evaluate_rmse(result.model, test_recs, normalized=True)
    cov = None
    if all(r.true_confounder is not None for r in test_recs):
        z_hat, z_true = confounder_representations(result.model, test_recs)
        if np.any(z_hat != 0.0):
            cov = covsim(z_hat, z_true)
    cf = None
    if counterfactual is not None:
        cf_test = [counterfactual[i] for i in result.split[2]]
        cf = evaluate_counterfactual(result.model, test_recs, cf_test)
    report = MetricsReport(
        run_id=run_id, variant=variant, seed=train_cfg.seed,
        rmse=fit_rmse, rmse_pct=fit_pct, covsim=cov, cf_rmse=cf,
        wallclock_seconds=round(result.wallclock_seconds, 3) if record_timing else None,
    )
    return report, result
