import numpy as np
import pytest

from lipcde.sim import SimConfig, simulate_factual


def confounder_logit_coefficients(dataset, order_p, k, n_treat):
    """Logistic-regression coefficients of treatment on (covariate sum, confounder sum).

    Independent oracle for the generator's assignment mechanism: pools one row
    per (patient, active step, treatment channel) and fits an unpenalized
    logistic regression. Returns (coef on covariate sum, coef on confounder sum).
    """
    from sklearn.linear_model import LogisticRegression

    feats, resp = [], []
    for rec in dataset:
        x, z, a = rec.covariates, rec.true_confounder, rec.treatments
        for t in range(order_p, len(rec)):
            xh = x[t - order_p + 1 : t + 1].sum(axis=0)
            zh = z[t - order_p + 1 : t + 1].sum()
            for m in range(n_treat):
                feats.append((xh[m % k], zh))
                resp.append(a[t, m])
    lr = LogisticRegression(penalty=None, max_iter=2000).fit(
        np.asarray(feats), np.asarray(resp)
    )
    return float(lr.coef_[0, 0]), float(lr.coef_[0, 1])


@pytest.fixture(scope="session")
def gamma_sweep_confounding():
    """Treatment-confounder regression coefficients at gamma in {0, 0.4, 0.8}, N=20000."""
    out = {}
    for gamma in (0.0, 0.4, 0.8):
        cfg = SimConfig(n_patients=20000, gamma_deg=gamma, seed=123)
        ds = simulate_factual(cfg)
        out[gamma] = confounder_logit_coefficients(
            ds, cfg.order_p, cfg.k_covariates, cfg.n_treatments
        )
    return out
