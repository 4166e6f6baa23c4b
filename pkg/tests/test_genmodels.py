import numpy as np
import pytest
import torch

from cdpo_lab.errors import CapabilityError
from cdpo_lab.genmodels import (
    ArchConfig,
    CGANModel,
    CNFModel,
    build_model,
    cnf_log_density,
    load_checkpoint,
    save_checkpoint,
)
from cdpo_lab.genmodels import splines
from cdpo_lab.genmodels.cdm import CDMHead, DiffusionSchedule
from cdpo_lab.genmodels.cgan import DiscriminatorHead, GeneratorHead, adversarial_step
from cdpo_lab.genmodels.cnf import CNFHead
from cdpo_lab.genmodels.cvae import CVAEHead

torch.manual_seed(0)

LOG_2PI = np.log(2 * np.pi)


def finite_difference_grad(f, theta: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central finite differences of a scalar function of theta."""
    g = torch.zeros_like(theta)
    for i in range(theta.numel()):
        e = torch.zeros_like(theta)
        e.view(-1)[i] = h
        g.view(-1)[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def grad_check(f, theta: torch.Tensor, rtol: float = 1e-3) -> float:
    theta = theta.clone().requires_grad_(True)
    value = f(theta)
    (analytic,) = torch.autograd.grad(value, theta)
    numeric = finite_difference_grad(f, theta.detach())
    rel = float((analytic - numeric).norm() / numeric.norm().clamp_min(1e-12))
    assert rel <= rtol, f"gradient mismatch: relative error {rel}"
    return rel


class TestSplines:
    def test_identity_at_zero_params(self):
        z = torch.linspace(-6, 6, 41, dtype=torch.float64)
        raw = torch.zeros(41, splines.param_size(10), dtype=torch.float64)
        y, ld = splines.rq_spline(z, raw, 10, 4.0)
        assert torch.allclose(y, z)
        assert torch.allclose(ld, torch.zeros_like(ld))

    def test_round_trip(self):
        rng = torch.Generator().manual_seed(1)
        raw = torch.randn(500, splines.param_size(8), generator=rng, dtype=torch.float64)
        x = torch.linspace(-4.8, 4.8, 500, dtype=torch.float64)
        y, ld_f = splines.rq_spline(x, raw, 8, 4.0)
        back, ld_i = splines.rq_spline(y, raw, 8, 4.0, inverse=True)
        assert float((back - x).abs().max()) <= 1e-5
        assert float((ld_f + ld_i).abs().max()) <= 1e-9

    def test_monotone(self):
        rng = torch.Generator().manual_seed(2)
        raw = torch.randn(1, splines.param_size(6), generator=rng, dtype=torch.float64)
        x = torch.linspace(-5, 5, 2000, dtype=torch.float64)
        y, _ = splines.rq_spline(x, raw.expand(2000, -1), 6, 4.0)
        assert bool((y.diff() > 0).all())


class TestCNF:
    def test_identity_transform_standard_normal(self):
        head = CNFHead(1, 10, 4.0, 8)
        theta = torch.zeros(1, head.param_count, dtype=torch.float64)
        lp = head.log_density(theta, torch.zeros(1, 1, dtype=torch.float64))
        assert float(lp) == pytest.approx(-0.5 * LOG_2PI, abs=1e-12)

    def test_affine_change_of_variables(self):
        # analytic oracle: f(z) = 2 z + 1 gives log p(1) = log phi(0) - log 2
        head = CNFHead(1, 10, 4.0, 8)
        theta = torch.zeros(1, head.param_count, dtype=torch.float64)
        theta[0, head.spline_size] = np.log(2.0)
        theta[0, head.spline_size + 1] = 1.0
        lp = head.log_density(theta, torch.ones(1, 1, dtype=torch.float64))
        assert float(lp) == pytest.approx(-0.5 * LOG_2PI - np.log(2.0), abs=1e-12)

    def test_density_normalizes_by_quadrature(self):
        model = build_model("cnf", 2, 1, ArchConfig(n_knots=8, y_bound=4.0), seed=3)
        model.eval()
        v = np.repeat([[0.4, -0.7]], 4001, axis=0)
        grid = np.linspace(-14, 14, 4001).reshape(-1, 1)
        lp = cnf_log_density(model, grid, v, a=1)
        integral = np.trapezoid(np.exp(lp.detach().numpy()), grid[:, 0])
        assert abs(integral - 1.0) <= 1e-3

    def test_round_trip_through_model(self):
        model = build_model("cnf", 2, 2, ArchConfig(), seed=4)
        model.eval()
        v = torch.randn(8, 2, dtype=torch.float64)
        with torch.no_grad():
            theta = model.condition(v, 1)
            y = model.sample(v, 1, 1)[:, 0, :]
            z, _ = model.head.inverse(theta, y)
            y_back = model.head.transform(theta, z)
        assert float((y_back - y).abs().max()) <= 1e-5

    def test_sampling_law_matches_inverse_cdf(self):
        # exact quantile-pushforward oracle on a 1-D toy
        from cdpo_lab.metrics import empirical_w2
        from scipy.stats import norm

        model = build_model("cnf", 1, 1, ArchConfig(n_knots=8), seed=5)
        model.eval()
        v = np.array([[0.2]])
        n = 10_000
        draws = model.sample_numpy(v[0], 0, n, np.random.default_rng(0)).reshape(-1, 1)
        u = (np.arange(n) + 0.5) / n
        z_quantiles = torch.as_tensor(norm.ppf(u).reshape(-1, 1))
        theta = model.condition(v, 0)
        with torch.no_grad():
            exact = model.head.transform(theta.expand(n, -1), z_quantiles).numpy()
        assert empirical_w2(draws, exact) < 0.05

    def test_log_gen_term_equals_density_any_n_mc(self):
        model = build_model("cnf", 2, 2, ArchConfig(), seed=6)
        model.eval()
        y = torch.randn(4, 2, dtype=torch.float64)
        v = torch.randn(4, 2, dtype=torch.float64)
        t1 = model.log_gen_terms(y, v, 0, n_mc=1)
        t7 = model.log_gen_terms(y, v, 0, n_mc=7)
        dens = model.log_density(y, v, 0)
        assert torch.allclose(t1, dens) and torch.allclose(t7, dens)

    def test_sample_count_validation(self):
        model = build_model("cnf", 2, 1, seed=7)
        with pytest.raises(ValueError):
            model.sample(np.zeros((1, 2)), 0, 0)


class TestConditioner:
    def test_no_noise_means_train_equals_eval(self):
        model = build_model("cnf", 3, 1, ArchConfig(noise_reg_x=0.0), seed=8)
        v = torch.randn(5, 3, dtype=torch.float64)
        model.train()
        t_train = model.condition(v, 1)
        model.eval()
        t_eval = model.condition(v, 1)
        assert torch.allclose(t_train, t_eval)

    def test_eval_mode_deterministic(self):
        model = build_model("cvae", 3, 2, ArchConfig(noise_reg_x=0.05), seed=9)
        model.eval()
        v = torch.randn(5, 3, dtype=torch.float64)
        assert torch.allclose(model.condition(v, 0), model.condition(v, 0))

    def test_train_mode_noise_differs(self):
        model = build_model("cnf", 3, 1, ArchConfig(noise_reg_x=0.05), seed=10)
        model.train()
        v = torch.randn(5, 3, dtype=torch.float64)
        assert not torch.allclose(model.condition(v, 0), model.condition(v, 0))

    def test_treatment_pathway_changes_parameters(self):
        # constructed weights: only the treatment input column is nonzero
        model = build_model("cnf", 2, 1, ArchConfig(noise_reg_x=0.0), seed=11)
        cond = model._conditioner
        with torch.no_grad():
            for p in cond.parameters():
                p.zero_()
            cond.fc2[0].weight[:, -1] = 1.0  # treatment enters the second block
            cond.fc2[-1].weight[0, :] = 1.0  # and reaches the first head parameter
        v = torch.zeros(1, 2, dtype=torch.float64)
        model.eval()
        t0 = model.condition(v, 0)
        t1 = model.condition(v, 1)
        assert not torch.allclose(t0, t1)

    def test_single_network_serves_both_arms(self):
        model = build_model("cnf", 2, 1, seed=12)
        n_params = sum(p.numel() for p in model.parameters())
        t0 = model.condition(torch.zeros(1, 2, dtype=torch.float64), 0)
        t1 = model.condition(torch.zeros(1, 2, dtype=torch.float64), 1)
        assert t0.shape == t1.shape
        assert n_params == sum(p.numel() for p in model.parameters())

    def test_dimension_mismatch_rejected(self):
        model = build_model("cnf", 2, 1, seed=13)
        with pytest.raises(ValueError):
            model.condition(torch.zeros(1, 3, dtype=torch.float64), 0)

    def test_linear_restriction_single_affine_layer(self):
        model = build_model("cnf", 2, 1, ArchConfig(restriction="linear"), seed=14)
        cond = model._conditioner
        n_params = sum(p.numel() for p in cond.parameters())
        assert n_params == (2 + 1 + 1) * model.head.param_count  # weights + bias


class TestCVAE:
    def test_conjugate_gaussian_term_equals_marginal(self):
        # analytic oracle: decoder y|z ~ N(z, s2), prior z ~ N(0,1), encoder
        # equal to the exact posterior makes the single-draw bound tight:
        # it equals log N(y; 0, 1 + s2) for every latent draw
        s2 = 0.5
        head = CVAEHead(1, 1, 4, "identity", -60.0, 20.0)
        theta = torch.zeros(1, head.param_count, dtype=torch.float64)
        lay = head.layout
        post_var = s2 / (1 + s2)

        def set_linear(name, w, b):
            block_lo, block_hi = lay._slices[name]
            d_out = len(b)
            d_in = len(w[0])
            theta[0, block_lo : block_lo + d_out * d_in] = torch.tensor(w, dtype=torch.float64).reshape(-1)
            theta[0, block_lo + d_out * d_in : block_hi] = torch.tensor(b, dtype=torch.float64)

        # encoder: hidden passes y through; mean = y / (1 + s2), logvar const
        set_linear("enc.w1", [[1.0], [0.0], [0.0], [0.0]], [0.0, 0.0, 0.0, 0.0])
        set_linear("enc.w2", [[1.0 / (1 + s2), 0, 0, 0], [0, 0, 0, 0]], [0.0, np.log(post_var)])
        # decoder: mean = z, logvar = log s2
        set_linear("dec.w1", [[1.0], [0.0], [0.0], [0.0]], [0.0, 0.0, 0.0, 0.0])
        set_linear("dec.w2", [[1.0, 0, 0, 0], [0, 0, 0, 0]], [0.0, np.log(s2)])

        y = torch.tensor([[0.73]], dtype=torch.float64)
        expected = -0.5 * (LOG_2PI + np.log(1 + s2) + 0.73**2 / (1 + s2))
        for draw in range(5):
            eps = torch.randn(1, 1, dtype=torch.float64)
            term = head.elbo_terms(theta, y, eps)
            assert float(term) == pytest.approx(expected, abs=1e-10)

    def test_degenerate_decoder_point_mass(self):
        model = build_model("cvae", 2, 2, ArchConfig(min_logvar=-60.0), seed=15)
        # force decoder logvar to the floor: all samples collapse to mu(v)
        head = model.head
        lo, hi = head.layout._slices["dec.w2"]
        d_out = 2 * head.d_y  # decoder emits means then log-variances
        with torch.no_grad():
            for p in model._conditioner.parameters():
                p.mul_(0.0)
            bias_block = torch.zeros(hi - lo, dtype=torch.float64)
            bias_block[-head.d_y :] = -60.0  # log-variance biases only
            model._conditioner.fc2[-1].bias[lo:hi] = bias_block
        model.eval()
        draws = model.sample(np.zeros((1, 2)), 0, 50)
        spread = float((draws - draws.mean(dim=1, keepdim=True)).abs().max())
        assert spread <= 1e-10


class TestCGAN:
    def test_constant_discriminator_term(self):
        model = build_model("cgan", 2, 2, seed=16)
        with torch.no_grad():
            for p in model.cond_disc.parameters():
                p.zero_()  # discriminator outputs exactly 1/2 everywhere
        model.eval()
        y = torch.randn(3, 2, dtype=torch.float64)
        v = torch.randn(3, 2, dtype=torch.float64)
        terms = model.log_gen_terms(y, v, 1, n_mc=4)
        assert torch.allclose(terms, torch.full((3,), 2 * np.log(0.5), dtype=torch.float64))

    def test_discriminator_strictly_inside_unit_interval(self):
        head = DiscriminatorHead(1, 6)
        theta = 100.0 * torch.ones(1, head.param_count, dtype=torch.float64)
        p = head.prob(theta, torch.full((1, 1), 50.0, dtype=torch.float64))
        assert 0.0 < float(p) < 1.0

    def test_optimal_discriminator_is_density_ratio(self):
        # pointwise maximizer oracle on a finite support: for masses (r, f)
        # the weighted objective r log d + f log(1 - d) peaks at r / (r + f)
        rng = np.random.default_rng(17)
        real = rng.dirichlet(np.ones(6))
        fake = rng.dirichlet(np.ones(6))
        d_star = real / (real + fake)
        grid = np.linspace(1e-4, 1 - 1e-4, 20_001)
        for j in range(6):
            objective = real[j] * np.log(grid) + fake[j] * np.log1p(-grid)
            assert abs(grid[np.argmax(objective)] - d_star[j]) <= 1e-4

    def test_unit_weight_step_runs_and_updates(self):
        model = build_model("cgan", 2, 1, seed=18)
        opt_d = torch.optim.SGD(model.cond_disc.parameters(), lr=0.01)
        opt_g = torch.optim.SGD(model.cond_gen.parameters(), lr=0.01)
        before_d = model.cond_disc.fc2[-1].weight.detach().clone()
        y = torch.randn(16, 1, dtype=torch.float64)
        v = torch.randn(16, 2, dtype=torch.float64)
        w = torch.ones(16, dtype=torch.float64)
        d_val, g_val = adversarial_step(model, y, v, 1, w, opt_d, opt_g)
        assert np.isfinite(d_val) and np.isfinite(g_val)
        assert not torch.allclose(before_d, model.cond_disc.fc2[-1].weight)

    def test_zero_weights_leave_discriminator_unchanged(self):
        model = build_model("cgan", 2, 1, seed=19)
        opt_d = torch.optim.SGD(model.cond_disc.parameters(), lr=0.5)
        opt_g = torch.optim.SGD(model.cond_gen.parameters(), lr=0.5)
        before = [p.detach().clone() for p in model.cond_disc.parameters()]
        y = torch.randn(8, 1, dtype=torch.float64)
        v = torch.randn(8, 2, dtype=torch.float64)
        adversarial_step(model, y, v, 0, torch.zeros(8, dtype=torch.float64), opt_d, opt_g)
        after = list(model.cond_disc.parameters())
        assert all(torch.equal(b, a) for b, a in zip(before, after))

    def test_saturation_warning(self, caplog):
        import logging

        model = build_model("cgan", 2, 1, seed=20)
        with torch.no_grad():
            for p in model.cond_disc.parameters():
                p.zero_()
            model.cond_disc.fc2[-1].bias.fill_(50.0)  # saturated discriminator
        opt_d = torch.optim.SGD(model.cond_disc.parameters(), lr=0.0)
        opt_g = torch.optim.SGD(model.cond_gen.parameters(), lr=0.0)
        with caplog.at_level(logging.WARNING):
            adversarial_step(
                model,
                torch.randn(4, 1, dtype=torch.float64),
                torch.randn(4, 2, dtype=torch.float64),
                1,
                torch.ones(4, dtype=torch.float64),
                opt_d,
                opt_g,
            )
        assert any("saturated" in r.message for r in caplog.records)


class TestCDM:
    def test_forward_marginal_is_standard_normal(self):
        model = build_model("cdm", 2, 1, ArchConfig(n_steps=100), seed=21)
        y = torch.randn(100_000, 1, dtype=torch.float64) * 1.2 - 0.3
        z = model.forward_marginal(y)
        assert abs(float(z.mean())) <= 0.01
        assert abs(float(z.var()) - 1.0) <= 0.02

    def test_degenerate_single_step_returns_denoiser_output(self):
        # one full-noising step with the direct-prediction head and a
        # constant denoiser: the ancestral sample equals the net output
        arch = ArchConfig(n_steps=1, beta_start=1.0, beta_end=1.0, predict="x0", eps_hidden=4)
        model = build_model("cdm", 2, 1, arch, seed=22)
        with torch.no_grad():
            for p in model._conditioner.parameters():
                p.zero_()
            d_y = 1
            hidden = model.head.hidden
            lo, hi = model.head.layout._slices["w2"]
            bias = torch.zeros(hi - lo, dtype=torch.float64)
            bias[-d_y:] = 0.77  # output bias only
            model._conditioner.fc2[-1].bias[lo:hi] = bias
        model.eval()
        draws = model.sample(np.zeros((1, 2)), 1, 20)
        assert torch.allclose(draws, torch.full_like(draws, 0.77))

    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            DiffusionSchedule.linear(0, 0.1, 0.2)
        with pytest.raises(ValueError):
            DiffusionSchedule.linear(10, 0.0, 0.2)


class TestGradientChecks:
    """Analytic gradients of the log-generative term with respect to head
    parameters match central finite differences (relative 1e-3)."""

    N_INSTANCES = 20

    def test_cnf_head(self):
        torch.manual_seed(30)
        head = CNFHead(1, 5, 3.0, 4)
        for _ in range(self.N_INSTANCES):
            theta = 0.5 * torch.randn(1, head.param_count, dtype=torch.float64)
            y = torch.randn(1, 1, dtype=torch.float64)
            grad_check(lambda t: head.log_density(t, y).sum(), theta)

    def test_cnf_head_2d_autoregressive(self):
        torch.manual_seed(31)
        head = CNFHead(2, 4, 3.0, 3)
        for _ in range(5):
            theta = 0.3 * torch.randn(1, head.param_count, dtype=torch.float64)
            y = torch.randn(1, 2, dtype=torch.float64)
            grad_check(lambda t: head.log_density(t, y).sum(), theta)

    def test_cvae_head(self):
        torch.manual_seed(32)
        head = CVAEHead(1, 2, 4, "elu", -40.0, 15.0)
        for _ in range(self.N_INSTANCES):
            theta = 0.5 * torch.randn(1, head.param_count, dtype=torch.float64)
            y = torch.randn(1, 1, dtype=torch.float64)
            eps = torch.randn(1, 2, dtype=torch.float64)  # fixed draw
            grad_check(lambda t: head.elbo_terms(t, y, eps).sum(), theta)

    def test_cdm_head(self):
        torch.manual_seed(33)
        sched = DiffusionSchedule.linear(8, 0.02, 0.3)
        head = CDMHead(1, 4, 6, sched, "eps")
        for k in range(self.N_INSTANCES):
            theta = 0.5 * torch.randn(1, head.param_count, dtype=torch.float64)
            y = torch.randn(1, 1, dtype=torch.float64)
            t_idx = torch.tensor([k % sched.n_steps])
            eps = torch.randn(1, 1, dtype=torch.float64)
            grad_check(lambda t: head.elbo_terms(t, y, t_idx, eps).sum(), theta)

    def test_cgan_discriminator_term(self):
        torch.manual_seed(34)
        head = DiscriminatorHead(1, 4)
        gen = GeneratorHead(1, 1, 4)
        for _ in range(self.N_INSTANCES):
            theta_d = 0.5 * torch.randn(1, head.param_count, dtype=torch.float64)
            y = torch.randn(1, 1, dtype=torch.float64)
            fake = torch.randn(1, 1, dtype=torch.float64)

            def term(t):
                return (torch.log(head.prob(t, y)) + torch.log1p(-head.prob(t, fake))).sum()

            grad_check(term, theta_d)

    def test_cgan_generator_pathway(self):
        torch.manual_seed(35)
        disc = DiscriminatorHead(1, 4)
        gen = GeneratorHead(1, 2, 4)
        theta_d = 0.5 * torch.randn(1, disc.param_count, dtype=torch.float64)
        for _ in range(5):
            theta_g = 0.5 * torch.randn(1, gen.param_count, dtype=torch.float64)
            z = torch.randn(1, 2, dtype=torch.float64)
            grad_check(lambda t: torch.log1p(-disc.prob(theta_d, gen.forward(t, z))).sum(), theta_g)


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        model = build_model("cvae", 3, 2, ArchConfig(d_z=2), seed=40)
        path = tmp_path / "model.npz"
        ema = model.flat_params() * 0.5
        save_checkpoint(model, path, ema_params=ema)
        loaded, meta, arrays = load_checkpoint(path, use_ema=False)
        assert meta["family"] == "cvae"
        assert torch.allclose(loaded.flat_params(), model.flat_params())
        loaded_ema, _, _ = load_checkpoint(path, use_ema=True)
        assert torch.allclose(loaded_ema.flat_params(), ema)

    def test_self_describing(self, tmp_path):
        model = build_model("cnf", 2, 1, seed=41)
        path = tmp_path / "model.npz"
        save_checkpoint(model, path)
        _, meta, _ = load_checkpoint(path)
        assert meta["schema_version"] == 1
        assert meta["arch"]["n_knots"] == 10

    def test_density_unavailable_for_implicit_families(self):
        model = build_model("cgan", 2, 1, seed=42)
        with pytest.raises(CapabilityError):
            model.log_density(np.zeros((1, 1)), np.zeros((1, 2)), 0)
