import numpy as np
import pytest
import torch

from cdpo_lab.data import PODataset, enumerate_toy_dgp, random_discrete_dgp
from cdpo_lab.errors import CapabilityError
from cdpo_lab.freezing import freeze
from cdpo_lab.genmodels import ArchConfig, build_model
from cdpo_lab.losses import (
    Batch,
    LossKind,
    gdr_loss,
    iptw_equivalence_check,
    iptw_loss,
    optimization_direction,
    plugin_loss,
    ra_loss,
)
from cdpo_lab.nuisance import (
    NuisanceConfig,
    NuisanceEstimates,
    TabularConditionalModel,
    TabularPropensity,
    fit_nuisance,
    tabular_nuisance,
)
from cdpo_lab.orthocheck import risk_measure, risk_value, true_nuisance


def dgp_batch(dgp):
    """Every atom of the joint table as one weighted batch: the loss value
    under these row weights is the exact population expectation."""
    enum = enumerate_toy_dgp(dgp)
    return Batch(
        x=torch.as_tensor(dgp.x_support[enum.x_idx]),
        v=torch.as_tensor(dgp.x_support[enum.x_idx]),
        a_obs=torch.as_tensor(enum.a, dtype=torch.float64),
        y=torch.as_tensor(dgp.y_support[enum.y_idx]),
        row_weights=torch.as_tensor(enum.prob),
    )


def random_tabular_model(dgp, rng):
    table = rng.dirichlet(np.full(dgp.n_y, 2.0), size=(dgp.n_x, 2))
    table = 0.8 * table + 0.2 / dgp.n_y
    return TabularConditionalModel(dgp.x_support, dgp.y_support, table)


@pytest.fixture
def toy():
    rng = np.random.default_rng(0)
    dgp = random_discrete_dgp(rng, n_x=3, n_y=4)
    model = random_tabular_model(dgp, rng)
    nuis = tabular_nuisance(dgp, exact=True, clip_floor=0.01)
    return dgp, model, nuis


def unit_propensity_nuisance(dgp, outcome=None):
    prop = TabularPropensity.from_table(dgp.x_support, np.ones(dgp.n_x))
    return NuisanceEstimates(
        outcome_model=None if outcome is None else freeze(outcome),
        propensity_model=freeze(prop),
        clip_floor=0.1,
    )


class TestPluginLoss:
    def test_no_matching_rows_gives_zero(self, toy):
        dgp, model, _ = toy
        batch = Batch(
            x=torch.zeros(3, 1), v=torch.zeros(3, 1),
            a_obs=torch.zeros(3, dtype=torch.float64),
            y=torch.as_tensor(dgp.y_support[[0, 1, 2]]),
        )
        out = plugin_loss(model, batch, a=1)
        assert float(out.value) == 0.0

    def test_single_matching_row_returns_term(self, toy):
        dgp, model, _ = toy
        batch = Batch(
            x=torch.as_tensor(dgp.x_support[[0]]),
            v=torch.as_tensor(dgp.x_support[[0]]),
            a_obs=torch.ones(1, dtype=torch.float64),
            y=torch.as_tensor(dgp.y_support[[2]]),
        )
        expected = float(model.log_gen_terms(batch.y, batch.x, 1))
        assert float(plugin_loss(model, batch, 1).value) == pytest.approx(expected, abs=1e-15)

    def test_expectation_matches_enumeration(self, toy):
        # exhaustive-enumeration oracle: sum_{x,y} P(x, a, y) log g(y | x)
        dgp, model, _ = toy
        a = 1
        batch = dgp_batch(dgp)
        value = float(plugin_loss(model, batch, a).value)
        table = model.table.numpy()
        expected = sum(
            dgp.joint[i, a, j] * np.log(table[i, a, j])
            for i in range(dgp.n_x)
            for j in range(dgp.n_y)
        )
        assert value == pytest.approx(expected, abs=1e-12)
        oracle = risk_value(risk_measure(dgp, a, LossKind.PLUG_IN), table[:, a, :])
        assert value == pytest.approx(oracle, abs=1e-12)


class TestIptwLoss:
    def test_unit_weights_reduce_to_plugin(self, toy):
        dgp, model, _ = toy
        nuis = unit_propensity_nuisance(dgp)
        batch = Batch(
            x=torch.as_tensor(dgp.x_support[[0, 1]]),
            v=torch.as_tensor(dgp.x_support[[0, 1]]),
            a_obs=torch.ones(2, dtype=torch.float64),
            y=torch.as_tensor(dgp.y_support[[1, 2]]),
        )
        assert float(iptw_loss(model, nuis, batch, 1).value) == float(
            plugin_loss(model, batch, 1).value
        )

    def test_half_propensity_doubles_term(self, toy):
        dgp, model, _ = toy
        prop = TabularPropensity.from_table(dgp.x_support, np.full(dgp.n_x, 0.5))
        nuis = NuisanceEstimates(None, freeze(prop), clip_floor=0.1)
        batch = Batch(
            x=torch.as_tensor(dgp.x_support[[0]]),
            v=torch.as_tensor(dgp.x_support[[0]]),
            a_obs=torch.ones(1, dtype=torch.float64),
            y=torch.as_tensor(dgp.y_support[[0]]),
        )
        term = float(model.log_gen_terms(batch.y, batch.v, 1))
        assert float(iptw_loss(model, nuis, batch, 1).value) == pytest.approx(2 * term, abs=1e-14)

    def test_expectation_equals_outcome_regression_form(self, toy):
        # both identification forms agree under enumeration at true nuisances
        dgp, model, nuis = toy
        a = 0
        value = float(iptw_loss(model, nuis, dgp_batch(dgp), a).value)
        oracle = risk_value(risk_measure(dgp, a, None), model.table.numpy()[:, a, :])
        assert value == pytest.approx(oracle, abs=1e-12)


class TestRaLoss:
    def test_all_factual_rows_reduce_to_factual_term(self, toy):
        dgp, model, nuis = toy
        batch = Batch(
            x=torch.as_tensor(dgp.x_support[[0, 1]]),
            v=torch.as_tensor(dgp.x_support[[0, 1]]),
            a_obs=torch.ones(2, dtype=torch.float64),
            y=torch.as_tensor(dgp.y_support[[1, 3]]),
        )
        out = ra_loss(model, nuis, batch, 1, exact_inner=True)
        factual = float((batch.omega() * model.log_gen_terms(batch.y, batch.v, 1)).sum())
        assert float(out.value) == pytest.approx(factual, abs=1e-15)

    def test_point_mass_nuisance_pseudo_term(self, toy):
        dgp, model, _ = toy
        point_table = np.zeros((dgp.n_x, 2, dgp.n_y))
        point_table[:, :, 1] = 1.0  # point mass at the second outcome atom
        point = TabularConditionalModel(dgp.x_support, dgp.y_support, point_table)
        prop = TabularPropensity.from_table(dgp.x_support, dgp.propensity[:, 1])
        nuis = NuisanceEstimates(freeze(point), freeze(prop), clip_floor=0.1)
        batch = Batch(
            x=torch.as_tensor(dgp.x_support[[0]]),
            v=torch.as_tensor(dgp.x_support[[0]]),
            a_obs=torch.zeros(1, dtype=torch.float64),  # opposite arm
            y=torch.as_tensor(dgp.y_support[[0]]),
        )
        out = ra_loss(model, nuis, batch, 1, n_mc=3)
        y0 = dgp.y_support[[1]]
        expected = float(model.log_gen_terms(torch.as_tensor(y0), batch.v, 1))
        assert float(out.value) == pytest.approx(expected, abs=1e-15)

    def test_expectation_matches_target_risk(self, toy):
        dgp, model, nuis = toy
        a = 1
        value = float(ra_loss(model, nuis, dgp_batch(dgp), a, exact_inner=True).value)
        oracle = risk_value(risk_measure(dgp, a, None), model.table.numpy()[:, a, :])
        assert value == pytest.approx(oracle, abs=1e-12)


class TestGdrLoss:
    def test_unit_propensity_all_factual_reduces_to_plugin(self, toy):
        dgp, model, _ = toy
        outcome = random_tabular_model(dgp, np.random.default_rng(5))
        nuis = unit_propensity_nuisance(dgp, outcome=outcome)
        batch = Batch(
            x=torch.as_tensor(dgp.x_support[[0, 2]]),
            v=torch.as_tensor(dgp.x_support[[0, 2]]),
            a_obs=torch.ones(2, dtype=torch.float64),
            y=torch.as_tensor(dgp.y_support[[0, 3]]),
        )
        out = gdr_loss(model, nuis, batch, 1, exact_inner=True)
        plug = plugin_loss(model, batch, 1)
        assert float(out.value) == pytest.approx(float(plug.value), abs=1e-15)
        assert torch.allclose(out.weights, torch.ones(2, dtype=torch.float64))

    def test_all_opposite_rows_reduce_to_pure_pseudo_term(self, toy):
        dgp, model, nuis = toy
        batch = Batch(
            x=torch.as_tensor(dgp.x_support[[1]]),
            v=torch.as_tensor(dgp.x_support[[1]]),
            a_obs=torch.zeros(1, dtype=torch.float64),
            y=torch.as_tensor(dgp.y_support[[0]]),
        )
        out = gdr_loss(model, nuis, batch, 1, exact_inner=True)
        ra = ra_loss(model, nuis, batch, 1, exact_inner=True)
        assert float(out.value) == pytest.approx(float(ra.value), abs=1e-15)
        assert float(out.weights[0]) == 0.0

    def test_expectation_matches_target_risk_at_truth(self, toy):
        # mean-zero one-step correction: the exact expectation equals the
        # target risk for any fixed model
        dgp, model, nuis = toy
        for a in (0, 1):
            value = float(gdr_loss(model, nuis, dgp_batch(dgp), a, exact_inner=True).value)
            oracle = risk_value(risk_measure(dgp, a, None), model.table.numpy()[:, a, :])
            assert value == pytest.approx(oracle, abs=1e-12)

    def test_weight_identity(self, toy):
        dgp, model, nuis = toy
        batch = dgp_batch(dgp)
        out = gdr_loss(model, nuis, batch, 1, exact_inner=True)
        w = out.weights
        complement = 1.0 - w
        assert torch.allclose(w + complement, torch.ones_like(w))
        positive = w[w > 0]
        assert bool((positive >= 1.0).all())
        assert bool((positive <= 1.0 / nuis.clip_floor + 1e-12).all())

    def test_requires_nuisances(self, toy):
        dgp, model, _ = toy
        empty = NuisanceEstimates(None, None)
        with pytest.raises(ValueError):
            gdr_loss(model, empty, dgp_batch(dgp), 1)


class TestGradientBlocking:
    def test_stage2_step_leaves_nuisance_unchanged(self):
        rng = np.random.default_rng(3)
        n = 80
        x = rng.standard_normal((n, 2))
        a = (rng.uniform(size=n) < 0.5).astype(np.int64)
        y = x[:, :1] + 0.2 * rng.standard_normal((n, 1))
        ds = PODataset(x=x, a=a, y=y)
        nuis = fit_nuisance(
            ds, NuisanceConfig(family="cnf", arch=ArchConfig(n_knots=5, d_h=8), epochs=1)
        )
        before = (nuis.outcome_model.frozen_hash(), nuis.propensity_model.frozen_hash())
        target = build_model("cnf", 2, 1, ArchConfig(n_knots=5, d_h=8), seed=9)
        opt = torch.optim.AdamW(target.parameters(), lr=1e-3)
        batch = Batch.from_dataset(ds)
        for _ in range(3):
            loss = -(
                gdr_loss(target, nuis, batch, 0).value
                + gdr_loss(target, nuis, batch, 1).value
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
        nuis.outcome_model.assert_unchanged()
        nuis.propensity_model.assert_unchanged()
        after = (nuis.outcome_model.frozen_hash(), nuis.propensity_model.frozen_hash())
        assert before == after

    def test_pseudo_outcomes_fresh_per_call(self):
        rng = np.random.default_rng(4)
        n = 40
        ds = PODataset(
            x=rng.standard_normal((n, 2)),
            a=(rng.uniform(size=n) < 0.5).astype(np.int64),
            y=rng.standard_normal((n, 1)),
        )
        nuis = fit_nuisance(
            ds, NuisanceConfig(family="cnf", arch=ArchConfig(n_knots=5, d_h=8), epochs=1)
        )
        target = build_model("cnf", 2, 1, ArchConfig(n_knots=5, d_h=8), seed=10)
        batch = Batch.from_dataset(ds)
        out1 = gdr_loss(target, nuis, batch, 1)
        out2 = gdr_loss(target, nuis, batch, 1)
        assert not torch.allclose(out1.pseudo_outcomes, out2.pseudo_outcomes)


class TestDirections:
    def test_optimization_direction(self):
        assert optimization_direction("cnf") == "maximize"
        assert optimization_direction("cvae") == "maximize"
        assert optimization_direction("cdm") == "maximize"
        assert optimization_direction("cgan") == "min-max"

    def test_losskind_requirements(self):
        assert LossKind.GDR.needs_outcome_nuisance
        assert LossKind.GDR.needs_propensity_nuisance
        assert LossKind.RA.needs_outcome_nuisance
        assert not LossKind.RA.needs_propensity_nuisance
        assert LossKind.IPTW.needs_propensity_nuisance
        assert not LossKind.PLUG_IN.needs_outcome_nuisance

    def test_parse(self):
        assert LossKind.parse("gdr") is LossKind.GDR
        with pytest.raises(ValueError):
            LossKind.parse("unknown")


def equivalence_setup(seed=0, n=96):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 2))
    a = (rng.uniform(size=n) < 0.5).astype(np.int64)
    y = 0.4 * x[:, :1] + a[:, None] * 0.8 + 0.3 * rng.standard_normal((n, 1))
    ds = PODataset(x=x, a=a, y=y)
    nuis = fit_nuisance(
        ds,
        NuisanceConfig(family="cnf", arch=ArchConfig(n_knots=6, d_h=8, ar_hidden=4), epochs=2),
    )
    return ds, nuis


class TestIptwEquivalence:
    def test_nuisance_initialized_target_is_equivalent(self):
        ds, nuis = equivalence_setup()
        batch = Batch.from_dataset(ds)
        report = iptw_equivalence_check(nuis, batch, a=1)
        assert report.equivalent, report
        assert report.relative_gradient_diff <= 1e-6

    def test_random_target_not_equivalent(self):
        ds, nuis = equivalence_setup(seed=1)
        target = build_model("cnf", 2, 1, ArchConfig(n_knots=6, d_h=8, ar_hidden=4), seed=77)
        batch = Batch.from_dataset(ds)
        report = iptw_equivalence_check(nuis, batch, a=1, target=target)
        assert not report.equivalent

    def test_requires_v_equal_x(self):
        ds, nuis = equivalence_setup(seed=2)
        batch = Batch.from_dataset(ds)
        masked = Batch(x=batch.x, v=batch.x[:, :1], a_obs=batch.a_obs, y=batch.y)
        with pytest.raises(ValueError, match="V = X"):
            iptw_equivalence_check(nuis, masked, a=1)

    def test_requires_flow_nuisance(self):
        rng = np.random.default_rng(5)
        dgp = random_discrete_dgp(rng, n_x=3, n_y=3)
        nuis = tabular_nuisance(dgp, exact=True)
        ds = dgp.sample(20, rng)
        batch = Batch.from_dataset(ds)
        with pytest.raises(CapabilityError):
            iptw_equivalence_check(nuis, batch, a=1)
