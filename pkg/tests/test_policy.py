import math

import numpy as np
import pytest

from dcvkt.choice import Theta
from dcvkt.draws import make_drawset
from dcvkt.policy import (LONG_RUN_CAVEAT, arc, baseline_fleet_state, long_run_elasticity,
                          no_rebound_decomposition, no_rebound_fuel_by_model, rebound,
                          segment_elasticity, segment_table, shocked_dataset,
                          short_run_fuel_price_elasticity, short_run_income_elasticity,
                          short_run_vkt_elasticity)
from dcvkt.synth import closed_form_logit_oracle

from conftest import hand_market, synthetic_dataset, theta_for

R = 100


@pytest.fixture(scope="module")
def market():
    ds, truth = synthetic_dataset(N=300, J=9, seed=3, n_makes=3, n_segments=3)
    draws = make_drawset(ds.n_households, R, 1)
    return ds, truth, draws, baseline_fleet_state(truth, ds, draws)


class TestShortRun:
    # market-level coefficient values and weighted means
    def test_india_fuel_price(self):
        e = short_run_fuel_price_elasticity(-3.83, 1.29, 59 / 16.38)
        assert e == pytest.approx(-0.1797, abs=5e-4)

    def test_china_fuel_price(self):
        e = short_run_fuel_price_elasticity(-1.61, 1.44, 6 / 12.32)
        assert e == pytest.approx(-0.2745, abs=5e-4)

    def test_india_income(self):
        assert short_run_income_elasticity(-1.68, 0.45, 0.69) == pytest.approx(0.1423, abs=5e-4)

    def test_china_income(self):
        assert short_run_income_elasticity(-2.79, 0.31, 1.91) == pytest.approx(0.123, abs=5e-4)

    def test_from_dataset_uses_sales_weights(self, market):
        ds, truth, _, _ = market
        w = ds.sales / ds.sales.sum()
        expected = -math.exp(truth.mu_alpha + truth.sigma_alpha**2 / 2) * float(w @ ds.opcost)
        assert short_run_vkt_elasticity(truth, ds, "fuel_price") == pytest.approx(expected,
                                                                                   rel=1e-14)
        with pytest.raises(ValueError):
            short_run_vkt_elasticity(truth, ds, "weather")


class TestFleetState:
    def test_shares_and_fuel(self, market):
        _, _, _, base = market
        assert math.fsum(base.shares) == pytest.approx(1.0, abs=1e-10)
        assert base.fuel > 0 and np.all(base.mass > 0)

    def test_single_model(self):
        ds = hand_market([14.0], [1.0], n_households=5)
        th = theta_for(ds, [0.1, 0.05])
        draws = make_drawset(ds.n_households, 50, 2)
        st = baseline_fleet_state(th, ds, draws)
        assert st.shares[0] == 1.0
        beta = np.exp(th.mu_beta + th.sigma_beta * draws.beta)
        alpha = -np.exp(th.mu_alpha + th.sigma_alpha * draws.alpha)
        gx = ds.H @ th.gamma
        km = np.exp(beta * (ds.income[:, None] - ds.rent[0]) + gx[:, None]
                    + alpha * ds.opcost[0] + th.sigma_eta**2 / 2).mean(axis=1)
        expected = math.fsum(ds.weight * km) * ds.config.km_scale / 14.0
        assert st.fuel == pytest.approx(expected, rel=1e-12)

    def test_identical_models_equal_shares(self):
        ds = hand_market([14.0, 14.0, 10.0], [1.0, 1.0, 1.4], n_households=7)
        st = baseline_fleet_state(theta_for(ds, [0.2, 0.1]), ds, make_drawset(7, 50, 0))
        assert st.shares[0] == pytest.approx(st.shares[1], rel=1e-14)

    def test_closed_form_oracle(self):
        ds = hand_market([9.0, 13.0, 18.0], [1.6, 1.1, 0.9], n_households=3,
                         incomes=[1.0, 1.7, 2.6])
        th = theta_for(ds, [0.3, -0.1], sigma_beta=0.0, sigma_alpha=0.0, sigma_eta=0.0)
        st = baseline_fleet_state(th, ds, make_drawset(3, 1, 0))
        shares, fuel, vkt = closed_form_logit_oracle(th, ds)
        np.testing.assert_allclose(st.shares, shares, rtol=1e-10)
        np.testing.assert_allclose(st.mean_vkt, vkt, rtol=1e-10)
        assert st.fuel == pytest.approx(fuel, rel=1e-10)

    def test_draw_mismatch(self, market):
        ds, truth, _, _ = market
        with pytest.raises(ValueError):
            baseline_fleet_state(truth, ds, make_drawset(5, R, 0))

    def test_thread_count_irrelevant(self, market):
        ds, truth, draws, base = market
        st = baseline_fleet_state(truth, ds, draws, threads=4)
        assert np.array_equal(st.mass, base.mass) and np.array_equal(st.vkt_mass, base.vkt_mass)


class TestLongRun:
    def test_zero_shock(self, market):
        ds, truth, draws, base = market
        rep = long_run_elasticity(truth, ds, draws, "fuel_price", shock=0.0, baseline=base)
        assert rep.elasticity == 0.0

    def test_signs_and_caveat(self, market):
        ds, truth, draws, base = market
        fp = long_run_elasticity(truth, ds, draws, "fuel_price", baseline=base)
        inc = long_run_elasticity(truth, ds, draws, "income", baseline=base)
        assert fp.elasticity < 0 < inc.elasticity
        assert fp.notes == LONG_RUN_CAVEAT

    def test_single_fuel_economy_is_pure_driving_response(self):
        # common operating cost: the fuel-price term cancels in the logit, so
        # every household's km scales by exp(alpha * p * shock)
        ds = hand_market([12.0, 12.0, 12.0], [0.8, 1.2, 1.9], n_households=6)
        th = theta_for(ds, [0.2, 0.1], sigma_alpha=0.0)
        draws = make_drawset(6, 40, 3)
        rep = long_run_elasticity(th, ds, draws, "fuel_price", shock=0.05)
        p = ds.opcost[0]
        alpha = -math.exp(th.mu_alpha)
        assert rep.elasticity == pytest.approx((math.exp(alpha * p * 0.05) - 1) / 0.05, rel=1e-10)
        assert rep.vkt_elasticity == pytest.approx(rep.elasticity, rel=1e-12)

    @pytest.mark.parametrize("kind", ["fuel_price", "income"])
    def test_closed_form_brute_force(self, kind):
        ds = hand_market([9.0, 13.0, 18.0], [1.6, 1.1, 0.9], n_households=3,
                         incomes=[1.0, 1.7, 2.6])
        th = theta_for(ds, [0.3, -0.1], sigma_beta=0.0, sigma_alpha=0.0, sigma_eta=0.0)
        rep = long_run_elasticity(th, ds, make_drawset(3, 1, 0), kind, shock=0.05)
        _, f0, _ = closed_form_logit_oracle(th, ds)
        _, f1, _ = closed_form_logit_oracle(th, shocked_dataset(ds, kind, 0.05))
        assert rep.elasticity == pytest.approx((f1 / f0 - 1) / 0.05, rel=1e-10)

    def test_unknown_kind(self, market):
        ds, truth, draws, _ = market
        with pytest.raises(ValueError):
            long_run_elasticity(truth, ds, draws, "price")


class TestSegments:
    def test_own_price_share_elasticity_negative(self, market):
        ds, truth, draws, base = market
        rows, avg = segment_table(truth, ds, draws, "price", baseline=base)
        assert all(r.share_elasticity < 0 for r in rows)
        assert avg.segment == "Sales-weighted average"

    def test_fuel_economy_rebound_ordering(self, market):
        # the driving response offsets part of the frozen-km saving
        ds, truth, draws, base = market
        rows, avg = segment_table(truth, ds, draws, "fuel_economy", baseline=base)
        for r in rows:
            assert r.elasticity >= r.no_rebound
        assert avg.no_rebound < avg.elasticity < 0
        assert 0 <= avg.rebound < 1

    def test_decomposition_sums(self, market):
        ds, truth, draws, base = market
        for attribute in ("price", "fuel_economy"):
            new = baseline_fleet_state(truth, shocked_dataset(ds, attribute, 0.05, "S1"), draws)
            comp, eff, total = no_rebound_decomposition(new, base)
            assert comp + eff == pytest.approx(total, abs=1e-10 * base.fuel)
            direct = math.fsum(no_rebound_fuel_by_model(new, base)) - base.fuel
            assert total == pytest.approx(direct, abs=1e-10 * base.fuel)

    def test_cross_effect_bounded_by_share(self):
        ds, truth = synthetic_dataset(N=300, J=9, seed=3, n_makes=3, n_segments=3)
        # shrink segment S2 to a sliver by pricing it far above the rest
        sel = ds.segment == "S2"
        ds = ds.with_vehicles(retail_price=np.where(sel, ds.price * 6, ds.price))
        draws = make_drawset(ds.n_households, R, 1)
        base = baseline_fleet_state(truth, ds, draws)
        share = math.fsum(base.shares[sel])
        new = baseline_fleet_state(truth, shocked_dataset(ds, "price", 0.05, "S2"), draws)
        others = ~sel
        rel = abs(math.fsum(new.fuel_by_model[others]) / math.fsum(base.fuel_by_model[others]) - 1)
        assert share < 0.01
        assert rel <= share

    @pytest.mark.parametrize("segment,attribute", [("S0", "price"), ("S1", "price"),
                                                   ("S2", "price"), ("S1", "fuel_economy"),
                                                   ("S2", "fuel_economy")])
    def test_arc_consistency(self, market, segment, attribute):
        # S0 fuel economy is left out: share gain and saving nearly cancel there,
        # so its elasticity is close to zero and a relative bound is meaningless
        ds, truth, draws, base = market
        e5 = segment_elasticity(truth, ds, draws, segment, attribute, 0.05, base).elasticity
        e25 = segment_elasticity(truth, ds, draws, segment, attribute, 0.025, base).elasticity
        assert abs(e5 - e25) < 0.05 * abs(e5)

    def test_errors(self, market):
        ds, truth, draws, base = market
        with pytest.raises(ValueError, match="unknown segment"):
            segment_elasticity(truth, ds, draws, "nope", baseline=base)
        with pytest.raises(ValueError):
            segment_elasticity(truth, ds, draws, "S0", shock=0.0, baseline=base)

    def test_row_fields(self, market):
        ds, truth, draws, base = market
        row = segment_elasticity(truth, ds, draws, "S1", baseline=base).to_row()
        assert row["segment"] == "S1" and row["attribute"] == "price"
        assert {"fuel_elasticity", "fuel_elasticity_no_rebound", "vkt_elasticity",
                "share_elasticity", "market_share"} <= set(row)


class TestRebound:
    def test_reference_pairs(self):
        assert rebound(-0.571, -0.687) == pytest.approx(0.169, abs=5e-4)
        assert rebound(-0.571, -0.689) == pytest.approx(0.171, abs=5e-4)
        assert rebound(-0.603, -0.743) == pytest.approx(0.188, abs=5e-4)

    def test_equal_inputs(self):
        assert rebound(-0.4, -0.4) == 0.0

    def test_zero_denominator(self):
        with pytest.raises(ValueError):
            rebound(-0.1, 0.0)

    def test_arc(self):
        assert arc(105.0, 100.0, 0.05) == pytest.approx(1.0)
