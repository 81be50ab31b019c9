import numpy as np
import pytest
import torch

from lipcde.outcome import (
    OutcomeDecoder,
    OutcomeError,
    PropensityNetwork,
    decode_outcomes,
    propensity_forward,
    propensity_log_likelihood_loss,
    stabilized_step_weights,
    treatment_marginals,
    truncate_weights,
    weighted_mse,
)

torch.manual_seed(2)


class TestStabilizedWeights:
    def test_probs_equal_marginals_gives_unit_weights(self):
        b, t, j = 3, 5, 2
        marg = torch.tensor([0.3, 0.7])
        probs = marg.expand(b, t, j)
        treatments = (torch.rand(b, t, j) < 0.5).double()
        mask = torch.ones(b, t, dtype=torch.bool)
        w = stabilized_step_weights(probs.double(), treatments, marg.double(), mask)
        assert torch.allclose(w, torch.ones(b, t, dtype=torch.float64), atol=1e-12)

    def test_hand_ratio(self):
        # one treatment, taken, model prob 0.25 vs marginal 0.5 -> weight 2
        probs = torch.tensor([[[0.25]]], dtype=torch.float64)
        treatments = torch.tensor([[[1.0]]], dtype=torch.float64)
        marg = torch.tensor([0.5], dtype=torch.float64)
        mask = torch.ones(1, 1, dtype=torch.bool)
        w = stabilized_step_weights(probs, treatments, marg, mask)
        assert w[0, 0].item() == pytest.approx(2.0, abs=1e-12)

    def test_unobserved_steps_contribute_one(self):
        probs = torch.full((1, 2, 1), 0.25, dtype=torch.float64)
        treatments = torch.ones(1, 2, 1, dtype=torch.float64)
        marg = torch.tensor([0.5], dtype=torch.float64)
        mask = torch.tensor([[True, False]])
        w = stabilized_step_weights(probs, treatments, marg, mask)
        assert w[0, 1].item() == pytest.approx(1.0)

    def test_truncation_clips_to_percentile_interval(self):
        w = torch.ones(100, dtype=torch.float64)
        w[0] = 1000.0
        out = truncate_weights(w, (1.0, 99.0))
        hi = torch.quantile(w, 0.99)
        assert out.max().item() == pytest.approx(hi.item())
        assert out.min().item() == pytest.approx(1.0)
        with pytest.raises(OutcomeError):
            truncate_weights(w, (99.0, 1.0))

    def test_marginals_respect_mask(self):
        treatments = torch.tensor([[[1.0], [1.0], [0.0]]])
        mask = torch.tensor([[True, False, True]])
        m = treatment_marginals(treatments, mask)
        assert m[0].item() == pytest.approx(0.5)


class TestPropensityForward:
    def test_output_shapes_and_bounds(self):
        net = PropensityNetwork(k_covariates=3, n_treatments=2).double()
        cov = torch.randn(4, 6, 3, dtype=torch.float64)
        tr = (torch.rand(4, 6, 2) < 0.5).double()
        mask = torch.ones(4, 6, dtype=torch.bool)
        out = propensity_forward(cov, tr, mask, net)
        assert out.probs.shape == (4, 6, 2)
        assert out.probs.min() >= 1e-3 and out.probs.max() <= 1 - 1e-3
        assert out.weights_per_step.shape == (4, 6)
        assert out.patient_weight.shape == (4,)
        assert (out.patient_weight > 0).all()

    def test_patient_weight_is_product_of_step_weights_then_truncated(self):
        net = PropensityNetwork(k_covariates=2, n_treatments=1).double()
        cov = torch.randn(8, 4, 2, dtype=torch.float64)
        tr = (torch.rand(8, 4, 1) < 0.5).double()
        mask = torch.ones(8, 4, dtype=torch.bool)
        out = propensity_forward(cov, tr, mask, net, clip_percentiles=(0.0, 100.0))
        prod = out.weights_per_step.prod(dim=1)
        assert torch.allclose(out.patient_weight, prod, rtol=1e-10)

    def test_ragged_input_rejected(self):
        net = PropensityNetwork(k_covariates=2, n_treatments=1)
        with pytest.raises(OutcomeError):
            propensity_forward(torch.randn(2, 5, 2), torch.zeros(2, 4, 1),
                               torch.ones(2, 5, dtype=torch.bool), net)

    def test_log_likelihood_prefers_correct_probs(self):
        treatments = torch.tensor([[[1.0], [0.0]]])
        mask = torch.ones(1, 2, dtype=torch.bool)
        good = torch.tensor([[[0.9], [0.1]]])
        bad = torch.tensor([[[0.1], [0.9]]])
        assert propensity_log_likelihood_loss(good, treatments, mask) < \
            propensity_log_likelihood_loss(bad, treatments, mask)


class TestDecoder:
    def test_zero_parameters_zero_predictions(self):
        dec = OutcomeDecoder(in_dim=3, hidden=(4, 3)).double()
        with torch.no_grad():
            for p in dec.parameters():
                p.zero_()
        y = decode_outcomes(torch.randn(7, 3, dtype=torch.float64), dec)
        assert y.abs().max().item() == 0.0

    def test_output_length_contract(self):
        dec = OutcomeDecoder(in_dim=5, hidden=(6, 4))
        assert decode_outcomes(torch.randn(9, 5), dec).shape == (9,)
        assert decode_outcomes(torch.randn(2, 9, 5), dec).shape == (2, 9)

    def test_pinned_two_step_instance_matches_hand_unrolled_lstm(self):
        torch.manual_seed(7)
        dec = OutcomeDecoder(in_dim=2, hidden=(3, 2)).double()
        x = torch.randn(2, 2, dtype=torch.float64)

        def lstm_cell_steps(seq, lstm):
            w_ih, w_hh = lstm.weight_ih_l0, lstm.weight_hh_l0
            b_ih, b_hh = lstm.bias_ih_l0, lstm.bias_hh_l0
            hd = w_hh.shape[1]
            h = torch.zeros(hd, dtype=seq.dtype)
            c = torch.zeros(hd, dtype=seq.dtype)
            outs = []
            for xt in seq:
                gates = w_ih @ xt + b_ih + w_hh @ h + b_hh
                i = torch.sigmoid(gates[:hd])
                f = torch.sigmoid(gates[hd:2 * hd])
                g = torch.tanh(gates[2 * hd:3 * hd])
                o = torch.sigmoid(gates[3 * hd:])
                c = f * c + i * g
                h = o * torch.tanh(c)
                outs.append(h)
            return torch.stack(outs)

        h1 = lstm_cell_steps(x, dec.lstm_a)
        h2 = lstm_cell_steps(h1, dec.lstm_b)
        ref = (h2 @ dec.head.weight.T + dec.head.bias)[:, 0]
        got = decode_outcomes(x, dec)
        assert torch.allclose(got, ref, atol=1e-8)


class TestWeightedMse:
    def test_unit_weights_give_plain_mse(self):
        y_hat = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
        y = torch.tensor([[1.0, 1.0], [5.0, 4.0]])
        w = torch.ones(2)
        # per-patient means: (0+1)/2=0.5 and (4+0)/2=2 -> (0.5+2)/2
        assert weighted_mse(y_hat, y, w).item() == pytest.approx(1.25)

    def test_hand_weighted_value(self):
        y_hat = torch.tensor([[2.0], [3.0]])
        y = torch.tensor([[1.0], [5.0]])
        w = torch.tensor([1.0, 2.0])
        assert weighted_mse(y_hat, y, w).item() == pytest.approx(4.5)

    def test_perfect_fit_zero(self):
        y = torch.randn(3, 4)
        assert weighted_mse(y, y.clone(), torch.rand(3) + 0.1).item() == 0.0

    def test_negative_weights_rejected(self):
        with pytest.raises(OutcomeError):
            weighted_mse(torch.ones(2, 2), torch.ones(2, 2), torch.tensor([1.0, -0.1]))

    def test_masked_steps_excluded_and_order_invariant(self):
        y_hat = torch.tensor([[1.0, 9.0], [2.0, 0.0]])
        y = torch.zeros(2, 2)
        w = torch.tensor([1.0, 3.0])
        mask = torch.tensor([[True, False], [True, True]])
        val = weighted_mse(y_hat, y, w, mask)
        # patient 0: error 1 over one step; patient 1: (4+0)/2=2
        assert val.item() == pytest.approx((1.0 * 1.0 + 3.0 * 2.0) / 2)
        perm = torch.tensor([1, 0])
        val2 = weighted_mse(y_hat[perm], y[perm], w[perm], mask[perm])
        assert val2.item() == pytest.approx(val.item())

    def test_decoder_loss_gradients_match_finite_differences(self):
        torch.manual_seed(9)
        dec = OutcomeDecoder(in_dim=2, hidden=(3, 2)).double()
        latent = torch.randn(2, 4, 2, dtype=torch.float64)
        y = torch.randn(2, 4, dtype=torch.float64)
        w = torch.tensor([0.7, 1.4], dtype=torch.float64)

        loss = weighted_mse(decode_outcomes(latent, dec), y, w)
        loss.backward()
        eps = 1e-6
        for name, p in dec.named_parameters():
            flat = p.data.view(-1)
            grad = p.grad.view(-1)
            idxs = range(0, flat.numel(), max(1, flat.numel() // 5))
            for i in idxs:
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = weighted_mse(decode_outcomes(latent, dec), y, w).item()
                flat[i] = orig - eps
                lo = weighted_mse(decode_outcomes(latent, dec), y, w).item()
                flat[i] = orig
                fd = (hi - lo) / (2 * eps)
                denom = max(abs(fd), abs(grad[i].item()), 1e-8)
                assert abs(fd - grad[i].item()) / denom <= 1e-3, name
