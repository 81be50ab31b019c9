"""Seeded synthetic generator for confounded longitudinal treatment data.

Produces autoregressive covariate/confounder trajectories with treatment
assignment driven by a mix of observed covariates and a hidden confounder,
plus a counterfactual-world oracle (all treatments forced to zero on the
second half of each trajectory) computed under common random numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

_SEED_MASK = (1 << 64) - 1
_INIT_SD = 0.1  # i.i.d. seed noise for the first order_p steps of X and Z


class SimulationError(ValueError):
    """Raised for invalid generator configuration or inputs."""


@dataclass(frozen=True)
class SimConfig:
    """All generator parameters. Defaults follow the reference benchmark protocol."""

    n_patients: int = 5000
    t_min: int = 20
    t_max: int = 30
    k_covariates: int = 3
    n_treatments: int = 3
    order_p: int = 5
    gamma_deg: float = 0.0
    lambda_treat: float = 15.0
    noise_eta_sd: float = 0.01
    noise_eps_sd: float = 0.01
    seed: int = 0
    # Advanced: decouple the confounding degree applied to treatment assignment
    # from the one applied to the outcome. None means "use gamma_deg".
    gamma_treat: float | None = None
    gamma_outcome: float | None = None

    def validate(self) -> None:
        if self.n_patients < 1:
            raise SimulationError(f"n_patients must be >= 1, got {self.n_patients}")
        if self.t_min > self.t_max:
            raise SimulationError(f"t_min ({self.t_min}) must be <= t_max ({self.t_max})")
        if self.t_min < 1:
            raise SimulationError(f"t_min must be >= 1, got {self.t_min}")
        if self.k_covariates < 1 or self.n_treatments < 1:
            raise SimulationError("k_covariates and n_treatments must be >= 1")
        if self.order_p < 1:
            raise SimulationError(f"order_p must be >= 1, got {self.order_p}")
        if self.order_p > self.t_min:
            raise SimulationError(
                f"order_p ({self.order_p}) must not exceed t_min ({self.t_min})"
            )
        for name, g in (
            ("gamma_deg", self.gamma_deg),
            ("gamma_treat", self.gamma_treat),
            ("gamma_outcome", self.gamma_outcome),
        ):
            if g is not None and not 0.0 <= g <= 1.0:
                raise SimulationError(f"{name} must lie in [0, 1], got {g}")
        if self.noise_eta_sd < 0 or self.noise_eps_sd < 0:
            raise SimulationError("noise standard deviations must be >= 0")

    @property
    def effective_gamma_treat(self) -> float:
        return self.gamma_deg if self.gamma_treat is None else self.gamma_treat

    @property
    def effective_gamma_outcome(self) -> float:
        return self.gamma_deg if self.gamma_outcome is None else self.gamma_outcome


@dataclass
class TrajectoryRecord:
    """One patient's irregular time series.

    ``outcome[t]`` is the one-step-ahead outcome generated at step ``t``
    (it depends on the covariates/confounder of step ``t + 1``).
    Rows with ``observed_mask[t] == False`` are withheld from model input but
    kept so oracle evaluation can still score them.
    """

    patient_id: str
    times: np.ndarray
    covariates: np.ndarray
    treatments: np.ndarray
    outcome: np.ndarray
    true_confounder: np.ndarray | None = None
    observed_mask: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=bool))

    def __post_init__(self) -> None:
        if self.observed_mask.size == 0:
            self.observed_mask = np.ones(len(self.times), dtype=bool)
        self.validate()

    def validate(self) -> None:
        n = len(self.times)
        if n == 0:
            raise SimulationError(f"patient {self.patient_id}: empty trajectory")
        if np.any(np.diff(self.times) <= 0):
            raise SimulationError(
                f"patient {self.patient_id}: times must be strictly increasing"
            )
        for name, arr in (
            ("covariates", self.covariates),
            ("treatments", self.treatments),
            ("outcome", self.outcome),
            ("observed_mask", self.observed_mask),
        ):
            if len(arr) != n:
                raise SimulationError(
                    f"patient {self.patient_id}: {name} length {len(arr)} != {n}"
                )
        if self.true_confounder is not None and len(self.true_confounder) != n:
            raise SimulationError(
                f"patient {self.patient_id}: true_confounder length mismatch"
            )
        if not np.isin(self.treatments, (0.0, 1.0)).all():
            raise SimulationError(
                f"patient {self.patient_id}: treatments must be binary"
            )

    def __len__(self) -> int:
        return len(self.times)

    @property
    def n_observed(self) -> int:
        return int(self.observed_mask.sum())

    def observed_view(self) -> "TrajectoryRecord":
        """Record restricted to observed rows (model-input view)."""
        m = self.observed_mask
        return TrajectoryRecord(
            patient_id=self.patient_id,
            times=self.times[m],
            covariates=self.covariates[m],
            treatments=self.treatments[m],
            outcome=self.outcome[m],
            true_confounder=None if self.true_confounder is None else self.true_confounder[m],
            observed_mask=np.ones(int(m.sum()), dtype=bool),
        )


@dataclass(frozen=True)
class SimDraws:
    """Every random draw used for one patient, fixed by (config seed, index).

    Factual and counterfactual propagation share the same draws, so the two
    worlds differ only through the forced treatment plan.
    """

    length: int
    x_ar_coef: np.ndarray      # (p, k) autoregressive covariate coefficients
    x_treat_coef: np.ndarray   # (p, k) treatment-to-covariate coefficients
    z_ar_coef: np.ndarray      # (p,)   autoregressive confounder coefficients
    z_treat_coef: np.ndarray   # (p, j) treatment-to-confounder coefficients
    init_x: np.ndarray         # (p, k) seed values for the first p steps
    init_z: np.ndarray         # (p,)
    eta: np.ndarray            # (length + 1,) per-step covariate noise
    eps: np.ndarray            # (length + 1,) per-step confounder noise
    treat_uniform: np.ndarray  # (length, j) uniforms behind the Bernoulli draws


def draw_patient(cfg: SimConfig, index: int) -> SimDraws:
    """Draw all randomness for one patient from its own child seed stream."""
    p, k, j = cfg.order_p, cfg.k_covariates, cfg.n_treatments
    ss = np.random.SeedSequence(cfg.seed & _SEED_MASK, spawn_key=(index,))
    rng = np.random.default_rng(ss)

    length = int(rng.integers(cfg.t_min, cfg.t_max + 1))
    # Lag i in 1..p has mean 1 - i/p and sd 1/p for the "persistence" families.
    lag_means = 1.0 - np.arange(1, p + 1) / p
    x_ar = rng.normal(0.0, 0.5, size=(p, k))
    x_treat = rng.normal(lag_means[:, None], 1.0 / p, size=(p, k))
    z_ar = rng.normal(lag_means, 1.0 / p, size=p)
    z_treat = rng.normal(0.0, 0.5, size=(p, j))
    init_x = rng.normal(0.0, _INIT_SD, size=(p, k))
    init_z = rng.normal(0.0, _INIT_SD, size=p)
    eta = rng.normal(0.0, cfg.noise_eta_sd, size=length + 1)
    eps = rng.normal(0.0, cfg.noise_eps_sd, size=length + 1)
    treat_uniform = rng.random(size=(length, j))
    return SimDraws(
        length=length,
        x_ar_coef=x_ar,
        x_treat_coef=x_treat,
        z_ar_coef=z_ar,
        z_treat_coef=z_treat,
        init_x=init_x,
        init_z=init_z,
        eta=eta,
        eps=eps,
        treat_uniform=treat_uniform,
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _propagate(
    cfg: SimConfig, all_draws: list[SimDraws], counterfactual: bool
) -> list[TrajectoryRecord]:
    """Run the autoregressive recurrence for a batch of patients.

    Vectorized across patients; every per-patient value is produced by the
    same elementwise operations regardless of batch composition, so output is
    bitwise independent of how patients are grouped.
    """
    p, k, j = cfg.order_p, cfg.k_covariates, cfg.n_treatments
    g_a = cfg.effective_gamma_treat
    g_y = cfg.effective_gamma_outcome
    n = len(all_draws)
    lengths = np.array([d.length for d in all_draws])
    t_top = int(lengths.max())

    x = np.zeros((n, t_top + 1, k))
    z = np.zeros((n, t_top + 1))
    a = np.zeros((n, t_top, j))
    eta = np.zeros((n, t_top + 1))
    eps = np.zeros((n, t_top + 1))
    uni = np.zeros((n, t_top, j))
    for i, d in enumerate(all_draws):
        x[i, :p] = d.init_x
        z[i, :p] = d.init_z
        eta[i, : d.length + 1] = d.eta
        eps[i, : d.length + 1] = d.eps
        uni[i, : d.length] = d.treat_uniform
    x_ar = np.stack([d.x_ar_coef for d in all_draws])        # (n, p, k)
    x_treat = np.stack([d.x_treat_coef for d in all_draws])  # (n, p, k)
    z_ar = np.stack([d.z_ar_coef for d in all_draws])        # (n, p)
    z_treat = np.stack([d.z_treat_coef for d in all_draws])  # (n, p, j)

    # Slices x[:, t-p:t] run over lags p..1; flip the coefficient lag axis once
    # so position 0 multiplies lag p.
    x_ar_r = x_ar[:, ::-1, :]
    x_treat_r = x_treat[:, ::-1, :]
    z_ar_r = z_ar[:, ::-1]
    z_treat_r = z_treat[:, ::-1, :]
    # Covariate channel c is driven by treatment channel c mod j; treatment
    # channel m reads the covariate sum of channel m mod k. Identity when k == j.
    x_from_a = np.arange(k) % j
    a_from_x = np.arange(j) % k
    # Counterfactual plan: zero every treatment from the midpoint onward.
    forced_zero = np.zeros((n, t_top), dtype=bool)
    if counterfactual:
        forced_zero = np.arange(t_top)[None, :] >= (lengths[:, None] / 2.0)

    for t in range(p, t_top + 1):
        xl = x[:, t - p : t, :]
        al = a[:, t - p : t, :]
        x[:, t] = (
            (x_ar_r * xl).sum(axis=1) + (x_treat_r * al[:, :, x_from_a]).sum(axis=1)
        ) / p + eta[:, t, None]
        z[:, t] = (
            (z_ar_r * z[:, t - p : t]).sum(axis=1) + (z_treat_r * al).sum(axis=(1, 2))
        ) / p + eps[:, t]
        if t < t_top:
            x_hat = x[:, t - p + 1 : t + 1, :].sum(axis=1)
            z_hat = z[:, t - p + 1 : t + 1].sum(axis=1)
            pi = g_a * z_hat[:, None] + (1.0 - g_a) * x_hat[:, a_from_x]
            prob = _sigmoid(cfg.lambda_treat * pi)
            a[:, t] = np.where(
                forced_zero[:, t, None], 0.0, (uni[:, t] < prob).astype(float)
            )

    records = []
    width = max(5, len(str(n - 1)))
    for i, d in enumerate(all_draws):
        t_i = d.length
        outcome = g_y * z[i, 1 : t_i + 1] + (1.0 - g_y) * x[i, 1 : t_i + 1].mean(axis=1)
        records.append(
            TrajectoryRecord(
                patient_id=f"p{i:0{width}d}",
                times=np.arange(t_i, dtype=float),
                covariates=x[i, :t_i].copy(),
                treatments=a[i, :t_i].copy(),
                outcome=outcome,
                true_confounder=z[i, :t_i].copy(),
                observed_mask=np.ones(t_i, dtype=bool),
            )
        )
    return records


def simulate_factual(cfg: SimConfig) -> list[TrajectoryRecord]:
    """Generate the factual world: treatments drawn from the propensity model."""
    cfg.validate()
    draws = [draw_patient(cfg, i) for i in range(cfg.n_patients)]
    return _propagate(cfg, draws, counterfactual=False)


def simulate_counterfactual(cfg: SimConfig) -> list[TrajectoryRecord]:
    """Generate the counterfactual world for the same seed.

    Reuses the factual draws (common random numbers); from the midpoint of
    each trajectory onward all treatments are forced to zero and covariates,
    confounder, and outcomes are re-propagated.
    """
    cfg.validate()
    draws = [draw_patient(cfg, i) for i in range(cfg.n_patients)]
    return _propagate(cfg, draws, counterfactual=True)


def apply_missingness(
    dataset: Sequence[TrajectoryRecord], rate: float, seed: int
) -> list[TrajectoryRecord]:
    """Mark each time point unobserved independently with probability ``rate``.

    Timestamps and oracle fields are untouched; only ``observed_mask`` changes.
    """
    if not 0.0 <= rate < 1.0:
        raise SimulationError(f"missingness rate must lie in [0, 1), got {rate}")
    rng = np.random.default_rng(seed & _SEED_MASK)
    out = []
    for rec in dataset:
        drop = rng.random(len(rec)) < rate
        out.append(replace(rec, observed_mask=rec.observed_mask & ~drop))
    return out
