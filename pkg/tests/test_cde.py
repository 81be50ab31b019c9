import numpy as np
import pytest
import torch

from lipcde.cde import (
    CdeConfig,
    CdeError,
    ControlPath,
    HistoryEmbedding,
    LipschitzRnnField,
    NumericalDivergenceError,
    cde_solve,
    construct_hidden_matrix,
    embed_history,
    vector_field,
)

torch.manual_seed(1)


class TestHiddenMatrix:
    def test_half_beta_collapses_to_shift(self):
        m = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
        out = construct_hidden_matrix(m, beta=0.5, gamma=1.0)
        assert torch.allclose(out, torch.tensor([[0.0, 2.0], [3.0, 3.0]]))

    def test_beta_one_skew(self):
        m = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
        out = construct_hidden_matrix(m, beta=1.0, gamma=0.0)
        assert torch.allclose(out, torch.tensor([[0.0, -1.0], [1.0, 0.0]]))

    def test_beta_zero_symmetric(self):
        m = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
        out = construct_hidden_matrix(m, beta=0.0, gamma=0.0)
        assert torch.allclose(out, torch.tensor([[2.0, 5.0], [5.0, 8.0]]))

    def test_symmetric_part_is_minus_gamma_identity_at_beta_one(self):
        m = torch.tensor(np.random.default_rng(3).normal(size=(6, 6)))
        gamma = 0.7
        out = construct_hidden_matrix(m, beta=1.0, gamma=gamma)
        sym = (out + out.T) / 2
        assert (sym + gamma * torch.eye(6, dtype=m.dtype)).abs().max() <= 1e-12

    def test_rejects_invalid(self):
        with pytest.raises(CdeError):
            construct_hidden_matrix(torch.ones(2, 3), 0.5, 1.0)
        with pytest.raises(CdeError):
            construct_hidden_matrix(torch.ones(2, 2), 1.5, 1.0)
        with pytest.raises(CdeError):
            construct_hidden_matrix(torch.ones(2, 2), 0.5, -1.0)


class TestControlPath:
    def test_knot_reproduction_exact(self):
        rng = np.random.default_rng(8)
        times = torch.tensor(np.sort(rng.uniform(0, 10, size=7)))
        values = torch.tensor(rng.normal(size=(7, 3)))
        for scheme in ("linear", "cubic"):
            path = ControlPath(times, values, scheme=scheme)
            for i in range(7):
                got = path.evaluate(float(times[i]))
                assert torch.equal(got, values[i]) or torch.allclose(got, values[i], atol=0)

    def test_linear_is_piecewise_affine(self):
        times = torch.tensor([0.0, 1.0, 3.0])
        values = torch.tensor([[0.0], [2.0], [2.0]])
        path = ControlPath(times, values)
        assert path.evaluate(0.5).item() == pytest.approx(1.0)
        assert path.evaluate(2.0).item() == pytest.approx(2.0)
        assert path.derivative(0.25).item() == pytest.approx(2.0)
        assert path.derivative(1.5).item() == pytest.approx(0.0)

    def test_cubic_matches_scipy_natural_spline(self):
        from scipy.interpolate import CubicSpline

        rng = np.random.default_rng(9)
        t = np.sort(rng.uniform(0, 5, size=9))
        v = rng.normal(size=(9, 2))
        path = ControlPath(torch.tensor(t), torch.tensor(v), scheme="cubic")
        ref = CubicSpline(t, v, bc_type="natural")
        ss = np.linspace(t[0], t[-1], 57)
        for s in ss:
            assert np.allclose(path.evaluate(float(s)).numpy(), ref(s), atol=1e-9)
        for s in ss[:-1]:  # at the endpoint the path freezes, derivative 0
            assert np.allclose(path.derivative(float(s)).numpy(), ref(s, 1), atol=1e-8)
        assert path.derivative(float(t[-1])).abs().max() == 0.0

    def test_constant_extension_outside_real_knots(self):
        times = torch.tensor([[0.0, 1.0, 2.0, 3.0, 4.0]])
        values = torch.arange(5, dtype=torch.float64)[None, :, None].repeat(1, 1, 2)
        mask = torch.tensor([[True, True, True, False, False]])
        path = ControlPath(times, values, knot_mask=mask)
        assert torch.allclose(path.evaluate(3.5)[0], torch.full((2,), 2.0, dtype=torch.float64))
        assert path.derivative(3.5).abs().max() == 0.0
        assert torch.allclose(path.evaluate(2.0)[0], torch.full((2,), 2.0, dtype=torch.float64))

    def test_rejects_bad_inputs(self):
        with pytest.raises(CdeError):
            ControlPath(torch.tensor([0.0, 0.0, 1.0]), torch.zeros(3, 1))
        with pytest.raises(CdeError):
            ControlPath(torch.tensor([0.0]), torch.zeros(1, 1))
        with pytest.raises(CdeError):
            ControlPath(torch.tensor([0.0, 1.0]), torch.zeros(3, 1))


class TestEmbedding:
    def test_zero_inputs_zero_bias(self):
        emb = HistoryEmbedding(x_dim=3, a_dim=2, z_dim=1, latent_dim=4).double()
        with torch.no_grad():
            emb.layer.bias.zero_()
        z = torch.zeros(1, dtype=torch.float64)
        out = emb(torch.zeros(3, dtype=torch.float64), torch.zeros(2, dtype=torch.float64),
                  z, torch.zeros(4, dtype=torch.float64))
        assert out.abs().max() == 0.0
        assert out.shape == (4,)

    def test_pinned_weights_hand_matmul(self):
        emb = HistoryEmbedding(x_dim=2, a_dim=0, z_dim=0, latent_dim=3).double()
        x = torch.tensor([0.3, -1.2], dtype=torch.float64)
        feats = torch.cat([x, torch.zeros(0), torch.zeros(0), torch.zeros(3, dtype=torch.float64)])
        w, b = emb.layer.weight, emb.layer.bias
        by_hand = torch.tanh(torch.tensor([
            sum(w[r, c] * feats[c] for c in range(5)) + b[r] for r in range(3)
        ]))
        out = emb(x, torch.zeros(0), torch.zeros(0), torch.zeros(3, dtype=torch.float64))
        assert torch.allclose(out, by_hand, atol=1e-12)

    def test_dimension_mismatch_rejected(self):
        emb = HistoryEmbedding(x_dim=2, a_dim=2, z_dim=1, latent_dim=3)
        with pytest.raises(CdeError):
            embed_history(torch.zeros(4), torch.zeros(2), torch.zeros(1), torch.zeros(3), emb.layer)


class TestVectorField:
    def test_zero_everything_gives_zero(self):
        f = LipschitzRnnField(latent_dim=3).double()
        with torch.no_grad():
            for p in f.parameters():
                p.zero_()
        out = f(torch.zeros(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
        assert out.abs().max() == 0.0

    def test_decoupled_input_term(self):
        f = LipschitzRnnField(latent_dim=4).double()
        u = torch.randn(4, dtype=torch.float64)
        v = u @ f.input_matrix.T + f.bias
        out = f(torch.zeros(4, dtype=torch.float64), u)
        assert torch.allclose(out, torch.tanh(v), atol=1e-14)

    def test_pinned_instance_matches_straight_line_reference(self):
        rng = np.random.default_rng(17)
        f = LipschitzRnnField(latent_dim=5, beta_a=0.3, beta_w=0.9,
                              gamma_a_shift=0.4, gamma_w_shift=0.2).double()
        h = torch.tensor(rng.normal(size=5))
        u = torch.tensor(rng.normal(size=5))
        m_a, m_w = f.m_a.detach().numpy(), f.m_w.detach().numpy()
        a_ref = (1 - 0.3) * (m_a + m_a.T) + 0.3 * (m_a - m_a.T) - 0.4 * np.eye(5)
        w_ref = (1 - 0.9) * (m_w + m_w.T) + 0.9 * (m_w - m_w.T) - 0.2 * np.eye(5)
        pre = np.zeros(5)
        for r in range(5):
            pre[r] = sum(w_ref[r, c] * h.numpy()[c] for c in range(5))
            pre[r] += sum(f.input_matrix.detach().numpy()[r, c] * u.numpy()[c] for c in range(5))
            pre[r] += f.bias.detach().numpy()[r]
        ref = np.array([
            sum(a_ref[r, c] * h.numpy()[c] for c in range(5)) + np.tanh(pre[r])
            for r in range(5)
        ])
        out = vector_field(f, h, u)
        assert np.allclose(out.detach().numpy(), ref, atol=1e-10)


def linear_path(t_end=1.0, latent=1, dtype=torch.float64):
    times = torch.tensor([0.0, t_end], dtype=dtype)
    values = torch.stack([torch.zeros(latent, dtype=dtype),
                          torch.full((latent,), t_end, dtype=dtype)])
    return ControlPath(times, values)


class TestCdeSolve:
    def test_zero_field_constant_trajectory(self):
        path = linear_path(latent=3)
        u0 = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
        traj = cde_solve(lambda u, c: torch.zeros_like(u), u0, path,
                         torch.tensor([0.0, 0.5, 1.0], dtype=torch.float64),
                         CdeConfig(latent_dim=3, solver="rk4", step=0.05))
        assert (traj - u0).abs().max() <= 1e-9

    def test_exponential_oracle_rk4(self):
        a = 1.3
        path = linear_path()
        u0 = torch.ones(1, dtype=torch.float64)
        traj = cde_solve(lambda u, c: a * u, u0, path,
                         torch.tensor([1.0], dtype=torch.float64),
                         CdeConfig(latent_dim=1, solver="rk4", step=0.01))
        rel = abs(float(traj[-1, 0]) - np.exp(a)) / np.exp(a)
        assert rel <= 1e-4

    def _exp_error(self, solver, step):
        a = 1.3
        path = linear_path()
        u0 = torch.ones(1, dtype=torch.float64)
        traj = cde_solve(lambda u, c: a * u, u0, path,
                         torch.tensor([1.0], dtype=torch.float64),
                         CdeConfig(latent_dim=1, solver=solver, step=step))
        return abs(float(traj[-1, 0]) - np.exp(a))

    def test_euler_error_halves_with_step(self):
        e1 = self._exp_error("euler", 0.01)
        e2 = self._exp_error("euler", 0.005)
        assert 1.8 <= e1 / e2 <= 2.2

    def test_convergence_orders(self):
        for solver, nominal in (("euler", 1.0), ("rk4", 4.0)):
            errors = [self._exp_error(solver, s) for s in (0.2, 0.1, 0.05, 0.025)]
            rates = [np.log2(errors[i] / errors[i + 1]) for i in range(3)]
            for r in rates:
                assert abs(r - nominal) <= 0.25 * nominal

    def test_eval_times_outside_domain_rejected(self):
        path = linear_path()
        with pytest.raises(CdeError):
            cde_solve(lambda u, c: u, torch.ones(1, dtype=torch.float64), path,
                      torch.tensor([0.0, 1.5], dtype=torch.float64), CdeConfig(latent_dim=1))

    def test_divergence_aborts_with_diagnostic(self):
        path = linear_path(t_end=2.0)
        with pytest.raises(NumericalDivergenceError):
            cde_solve(lambda u, c: u * u, torch.full((1,), 4.0, dtype=torch.float64), path,
                      torch.tensor([2.0], dtype=torch.float64),
                      CdeConfig(latent_dim=1, solver="euler", step=0.001))

    def test_eval_subset_consistency(self):
        # reading fewer eval points must not change the trajectory itself
        rng = np.random.default_rng(23)
        times = torch.tensor(np.sort(rng.uniform(0, 4, size=6)))
        values = torch.tensor(rng.normal(size=(6, 2)))
        path = ControlPath(times, values)
        f = LipschitzRnnField(latent_dim=2).double()
        u0 = torch.zeros(2, dtype=torch.float64)
        cfg = CdeConfig(latent_dim=2)
        full = cde_solve(f, u0, path, times, cfg)
        last_only = cde_solve(f, u0, path, times[-1:], cfg)
        assert torch.equal(full[-1], last_only[0])

    def test_padded_batch_matches_single(self):
        # padding with masked tail knots and batching with a same-grid partner
        # must not perturb a patient's trajectory
        rng = np.random.default_rng(29)
        t0 = np.sort(rng.uniform(0, 3, size=5))
        v0 = rng.normal(size=(5, 2))
        f = LipschitzRnnField(latent_dim=2).double()
        cfg = CdeConfig(latent_dim=2)
        single = cde_solve(
            f, torch.zeros(2, dtype=torch.float64),
            ControlPath(torch.tensor(t0), torch.tensor(v0)),
            torch.tensor(t0), cfg,
        )
        times_b = torch.tensor(np.stack([
            np.concatenate([t0, [t0[-1] + 1, t0[-1] + 2]]),
            np.concatenate([t0, [t0[-1] + 1, t0[-1] + 2]]),
        ]))
        vals_b = torch.tensor(np.stack([
            np.concatenate([v0, v0[-1:], v0[-1:]], axis=0),
            rng.normal(size=(7, 2)),
        ]))
        mask = torch.tensor([[True] * 5 + [False] * 2, [True] * 7])
        path_b = ControlPath(times_b, vals_b, knot_mask=mask)
        batch = cde_solve(f, torch.zeros(2, 2, dtype=torch.float64), path_b,
                          torch.tensor(t0), cfg)
        assert torch.allclose(batch[0], single, atol=1e-12)

    def test_repeat_solve_is_bitwise_identical(self):
        rng = np.random.default_rng(31)
        t0 = np.sort(rng.uniform(0, 3, size=5))
        path = ControlPath(torch.tensor(t0), torch.tensor(rng.normal(size=(5, 2))))
        f = LipschitzRnnField(latent_dim=2).double()
        cfg = CdeConfig(latent_dim=2, step=0.1)
        args = (f, torch.zeros(2, dtype=torch.float64), path, torch.tensor(t0), cfg)
        assert torch.equal(cde_solve(*args).detach(), cde_solve(*args).detach())

    def test_insensitive_to_extra_grid_refinement(self):
        # a batch partner with different knot times refines the shared solver
        # grid; at a fine step the effect on the trajectory is at solver-error
        # level only
        rng = np.random.default_rng(37)
        t0 = np.sort(rng.uniform(0, 3, size=5))
        v0 = rng.normal(size=(5, 2))
        f = LipschitzRnnField(latent_dim=2).double()
        cfg = CdeConfig(latent_dim=2, step=0.01)
        single = cde_solve(
            f, torch.zeros(2, dtype=torch.float64),
            ControlPath(torch.tensor(t0), torch.tensor(v0)),
            torch.tensor(t0), cfg,
        )
        times_b = torch.tensor(np.stack([
            np.concatenate([t0, [t0[-1] + 1, t0[-1] + 2]]),
            np.linspace(0.0, 3.5, 7),
        ]))
        vals_b = torch.tensor(np.stack([
            np.concatenate([v0, v0[-1:], v0[-1:]], axis=0),
            rng.normal(size=(7, 2)),
        ]))
        mask = torch.tensor([[True] * 5 + [False] * 2, [True] * 7])
        path_b = ControlPath(times_b, vals_b, knot_mask=mask)
        batch = cde_solve(f, torch.zeros(2, 2, dtype=torch.float64), path_b,
                          torch.tensor(t0), cfg)
        assert torch.allclose(batch[0], single, atol=1e-8)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(5)
        f = LipschitzRnnField(latent_dim=3).double()
        times = torch.tensor([0.0, 0.7, 1.1, 2.0], dtype=torch.float64)
        base_values = torch.randn(4, 3, dtype=torch.float64)
        u0 = torch.randn(3, dtype=torch.float64)

        def loss_of(values, m_a, m_w, input_matrix, bias):
            from types import SimpleNamespace

            params = SimpleNamespace(
                m_a=m_a, m_w=m_w, input_matrix=input_matrix, bias=bias,
                beta_a=f.beta_a, beta_w=f.beta_w,
                gamma_a_shift=f.gamma_a_shift, gamma_w_shift=f.gamma_w_shift,
                nonlinearity=torch.tanh,
            )
            path = ControlPath(times, values)
            traj = cde_solve(
                lambda u, c: vector_field(params, u, c), u0, path, times,
                CdeConfig(latent_dim=3, solver="rk4"),
            )
            return (traj**2).sum()

        inputs = (
            base_values.clone().requires_grad_(),
            f.m_a.detach().clone().requires_grad_(),
            f.m_w.detach().clone().requires_grad_(),
            f.input_matrix.detach().clone().requires_grad_(),
            f.bias.detach().clone().requires_grad_(),
        )
        assert torch.autograd.gradcheck(loss_of, inputs, eps=1e-6, atol=1e-6, rtol=1e-4)
