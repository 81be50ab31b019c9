"""Finite-difference validation of the end-to-end training gradients.

Checks the full pipeline in double precision on a tiny instance: autograd
gradients of the weighted outcome loss (treatment weights held fixed, since
they are detached by design) against central differences for every
non-propensity parameter, and gradients of the propensity likelihood against
central differences for the propensity parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .cde import CdeConfig
from .model import ModelConfig, build_model, collate
from .outcome import propensity_log_likelihood_loss, weighted_mse
from .sim import SimConfig, simulate_factual


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_parameter: str
    n_checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= 1e-3


def _central_differences(loss_fn, params: dict[str, torch.Tensor], eps: float):
    """Yield (name, flat index, fd, analytic) for every scalar parameter."""
    base = loss_fn()
    base.backward()
    grads = {n: p.grad.detach().clone().view(-1) for n, p in params.items()}
    for p in params.values():
        p.grad = None
    with torch.no_grad():
        for name, p in params.items():
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = float(loss_fn())
                flat[i] = orig - eps
                lo = float(loss_fn())
                flat[i] = orig
                yield name, i, (hi - lo) / (2 * eps), float(grads[name][i])


def pipeline_gradcheck(
    seed: int = 0,
    eps: float = 1e-5,
    t_steps: int = 4,
    n_patients: int = 3,
    latent_dim: int = 3,
) -> GradCheckResult:
    """Run the tiny-instance check; small dims keep the scalar sweep tractable."""
    sim = SimConfig(
        n_patients=n_patients, t_min=t_steps, t_max=t_steps, k_covariates=2,
        n_treatments=1, order_p=2, gamma_deg=0.5, seed=seed,
    )
    records = simulate_factual(sim)
    batch = collate(records, dtype=torch.float64)
    cfg = ModelConfig(
        k_covariates=2, n_treatments=1, z_dim=1, rnn_hidden=3,
        cde=CdeConfig(latent_dim=latent_dim, solver="rk4", step=0.25),
        decoder_hidden=(4, 3), propensity_hidden=3,
    )
    model = build_model(cfg, "full", init_seed=seed).double()
    model.project_lipschitz_()

    with torch.no_grad():
        frozen = model(batch)
        w = frozen.propensity.patient_weight.detach().clone()

    def outcome_loss():
        out = model(batch)
        return weighted_mse(out.predictions, batch.outcomes, w, batch.mask)

    def propensity_loss():
        probs = model.propensity(batch.covariates, batch.treatments)
        return propensity_log_likelihood_loss(probs, batch.treatments, batch.mask)

    outcome_params = {
        n: p for n, p in model.named_parameters() if not n.startswith("propensity.")
    }
    propensity_params = {
        n: p for n, p in model.named_parameters() if n.startswith("propensity.")
    }

    worst, worst_name, n_checked = 0.0, "", 0
    for loss_fn, params in ((outcome_loss, outcome_params), (propensity_loss, propensity_params)):
        for name, i, fd, an in _central_differences(loss_fn, params, eps):
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            n_checked += 1
            if rel > worst:
                worst, worst_name = rel, f"{name}[{i}]"
    return GradCheckResult(max_rel_error=worst, worst_parameter=worst_name, n_checked=n_checked)
