"""Evaluation metrics: factual/counterfactual RMSE and the covariance
similarity score between representation matrices.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


class MetricsError(ValueError):
    pass


def covsim(rep_a: np.ndarray, rep_b: np.ndarray) -> float:
    """Covariance similarity between two instance-by-feature representations.

    Each matrix is decomposed by SVD; the top components covering 99% of the
    eigenvalue (squared singular value) mass are kept, and the score is
    ||G_a^T G_b||_F / (||G_a||_F ||G_b||_F) with G = U diag(eigenvalues)^(1/2).
    Lies in [0, 1]; 1 for identical rank-1 structure, 0 for orthogonal spans.
    """
    a = np.asarray(rep_a, dtype=float)
    b = np.asarray(rep_b, dtype=float)
    if a.ndim != 2 or b.ndim != 2:
        raise MetricsError("representations must be 2-D (instances x features)")
    if a.shape[0] != b.shape[0]:
        raise MetricsError(
            f"instance counts differ: {a.shape[0]} vs {b.shape[0]}"
        )

    def scaled_basis(m: np.ndarray) -> np.ndarray:
        u, s, _ = np.linalg.svd(m, full_matrices=False)
        ev = s**2
        total = ev.sum()
        if total <= 0.0:
            raise MetricsError("zero representation matrix")
        r = int(np.searchsorted(np.cumsum(ev) / total, 0.99) + 1)
        r = min(r, len(ev))
        return u[:, :r] * np.sqrt(ev[:r])

    ga, gb = scaled_basis(a), scaled_basis(b)
    num = np.linalg.norm(ga.T @ gb)
    den = np.linalg.norm(ga) * np.linalg.norm(gb)
    return float(num / den)


def rmse(y_hat: np.ndarray, y: np.ndarray) -> float:
    y_hat, y = np.asarray(y_hat, float), np.asarray(y, float)
    if y_hat.shape != y.shape:
        raise MetricsError(f"shape mismatch {y_hat.shape} vs {y.shape}")
    if y.size == 0:
        raise MetricsError("empty evaluation set")
    return float(np.sqrt(np.mean((y_hat - y) ** 2)))


def normalized_rmse_pct(y_hat: np.ndarray, y: np.ndarray) -> float:
    """RMSE divided by the outcome standard deviation, in percent."""
    sd = float(np.std(np.asarray(y, float)))
    if sd == 0.0:
        raise MetricsError("outcome standard deviation is zero; cannot normalize")
    return 100.0 * rmse(y_hat, y) / sd


@dataclass
class MetricsReport:
    """Per-run evaluation summary; the serialized form is the metrics.json schema."""

    run_id: str
    variant: str
    seed: int
    rmse: float
    rmse_pct: float
    covsim: float | None = None
    cf_rmse: float | None = None
    wallclock_seconds: float | None = None

    def __post_init__(self) -> None:
        if self.rmse < 0:
            raise MetricsError("rmse must be non-negative")
        if self.covsim is not None and not -1e-10 <= self.covsim <= 1 + 1e-10:
            raise MetricsError(f"covsim out of range: {self.covsim}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"
