"""Revenue-neutral feebates pivoted on an anchor fuel economy.

Cars above the anchor get a rebate per km/litre of excess fuel economy, cars
below pay a fee per km/litre of shortfall. The rebate rate is chosen by the
user; the fee rate is solved so fees collected match rebates paid on the
predicted post-policy fleet.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .choice import Theta
from .policy import FleetState, baseline_fleet_state, no_rebound_fuel_by_model, sales_weights


class FeebateError(ValueError):
    """The policy cannot be applied to this fleet."""


class FeebateConvergenceError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class FeebatePolicy:
    anchor: float
    rebate_rate: float
    fee_rate: float = 0.0
    tolerance: float = 1e-3

    def __post_init__(self):
        if not self.anchor > 0:
            raise FeebateError("anchor must be > 0")
        if not (self.rebate_rate >= 0 and self.fee_rate >= 0):
            raise FeebateError("feebate rates must be >= 0")
        if not self.tolerance > 0:
            raise FeebateError("tolerance must be > 0")

    def rebates(self, fuel_economy) -> np.ndarray:
        """Per-car rebate (zero below the anchor)."""
        return self.rebate_rate * np.maximum(np.asarray(fuel_economy, float) - self.anchor, 0.0)

    def fees(self, fuel_economy) -> np.ndarray:
        return self.fee_rate * np.maximum(self.anchor - np.asarray(fuel_economy, float), 0.0)


def adjusted_price(retail_price, fuel_economy, policy: FeebatePolicy, model_ids=None):
    """Retail price after the rebate or fee. Raises if any result is not positive."""
    price = np.asarray(retail_price, float) - policy.rebates(fuel_economy) + policy.fees(fuel_economy)
    bad = np.flatnonzero(~(price > 0))
    if bad.size:
        names = [str(model_ids[k]) if model_ids is not None else f"#{k}" for k in bad]
        raise FeebateError(f"feebate makes the price non-positive for {', '.join(names)}")
    return price if price.ndim else float(price)


def default_anchor(ds) -> float:
    """Sales-weighted fleet fuel economy."""
    return float(np.dot(sales_weights(ds), ds.fuel_economy))


def policy_dataset(ds, policy: FeebatePolicy):
    return ds.with_vehicles(
        retail_price=adjusted_price(ds.price, ds.fuel_economy, policy, ds.model_ids))


@dataclass
class Trial:
    fee_rate: float
    fees: float
    rebates: float

    @property
    def net(self) -> float:
        return self.fees - self.rebates


def _evaluate(theta, ds, draws, policy, threads):
    state = baseline_fleet_state(theta, policy_dataset(ds, policy), draws, threads)
    fees = math.fsum(state.mass * policy.fees(ds.fuel_economy))
    rebates = math.fsum(state.mass * policy.rebates(ds.fuel_economy))
    return state, Trial(policy.fee_rate, fees, rebates)


@dataclass
class FeebateOutcome:
    policy: FeebatePolicy
    baseline: FleetState
    state: FleetState
    total_fees: float
    total_rebates: float
    iterations: int
    bracket: tuple[float, float]
    trials: list = field(default_factory=list)

    @property
    def fee_rate(self) -> float:
        return self.policy.fee_rate

    @property
    def net_revenue(self) -> float:
        return self.total_fees - self.total_rebates

    @property
    def residual_share(self) -> float:
        """|net revenue| as a fraction of rebates paid (0 when nothing is paid)."""
        if self.total_rebates == 0:
            return 0.0 if self.net_revenue == 0 else math.inf
        return abs(self.net_revenue) / self.total_rebates

    @property
    def fleet_fe_change_pct(self) -> float:
        return 100.0 * (self.state.fleet_fuel_economy / self.baseline.fleet_fuel_economy - 1.0)

    @property
    def fuel_no_rebound(self) -> float:
        return math.fsum(no_rebound_fuel_by_model(self.state, self.baseline))

    @property
    def savings_pct(self) -> float:
        return 100.0 * (1.0 - self.state.fuel / self.baseline.fuel)

    @property
    def savings_no_rebound_pct(self) -> float:
        return 100.0 * (1.0 - self.fuel_no_rebound / self.baseline.fuel)

    @property
    def rebound(self) -> float:
        s0 = self.savings_no_rebound_pct
        return math.nan if s0 == 0 else 1.0 - self.savings_pct / s0


def _outcome(policy, base, state, trial, iterations, bracket, trials):
    return FeebateOutcome(policy, base, state, trial.fees, trial.rebates, iterations,
                          bracket, trials)


def solve_revenue_neutral(theta: Theta, ds, draws, anchor: float | None = None,
                          rebate_rate: float = 0.0, tolerance: float = 1e-3,
                          max_iter: int = 60, max_expand: int = 40,
                          baseline: FleetState | None = None,
                          threads: int = 1) -> FeebateOutcome:
    """Solve for the fee rate that balances fees and rebates.

    Net revenue is increasing in the fee rate and equals minus the rebates at
    a zero fee, so the root is bracketed by doubling the upper end and then
    located by bisection.
    """
    anchor = default_anchor(ds) if anchor is None else anchor
    fe = ds.fuel_economy
    above, below = fe > anchor, fe < anchor
    base = baseline or baseline_fleet_state(theta, ds, draws, threads)

    def run(fee):
        pol = FeebatePolicy(anchor, rebate_rate, fee, tolerance)
        state, tr = _evaluate(theta, ds, draws, pol, threads)
        trials.append(tr)
        return pol, state, tr

    trials: list[Trial] = []
    if not above.any() and not below.any():
        # every car sits on the anchor: nothing is paid either way
        pol, state, tr = run(0.0)
        return _outcome(pol, base, state, tr, 0, (0.0, 0.0), trials)
    if not (above.any() and below.any()):
        side = "above" if above.any() else "below"
        raise FeebateError(f"all models are {side} the anchor {anchor:g}; "
                           "a revenue-neutral feebate needs models on both sides")

    pol, state, tr = run(0.0)
    if tr.rebates == 0:
        return _outcome(pol, base, state, tr, 0, (0.0, 0.0), trials)

    lo = 0.0
    hi = max(rebate_rate, 1e-12)
    for _ in range(max_expand):
        pol, state, tr = run(hi)
        if tr.net >= 0:
            break
        lo, hi = hi, 2.0 * hi
    else:
        raise FeebateConvergenceError(
            "no sign change in net revenue after bracket expansion",
            {"bracket": (lo, hi), "last_net": tr.net, "last_rebates": tr.rebates,
             "anchor": anchor, "rebate_rate": rebate_rate})
    best = (pol, state, tr)
    if abs(tr.net) <= tolerance * tr.rebates:
        return _outcome(pol, base, state, tr, 0, (lo, hi), trials)

    for it in range(max_iter):
        mid = 0.5 * (lo + hi)
        pol, state, tr = run(mid)
        if abs(tr.net) < abs(best[2].net):
            best = (pol, state, tr)
        if abs(tr.net) <= tolerance * tr.rebates:
            return _outcome(pol, base, state, tr, it + 1, (lo, hi), trials)
        if tr.net < 0:
            lo = mid
        else:
            hi = mid
    raise FeebateConvergenceError(
        f"bisection did not reach tolerance in {max_iter} iterations",
        {"bracket": (lo, hi), "best_fee_rate": best[2].fee_rate, "best_net": best[2].net,
         "rebates": best[2].rebates, "anchor": anchor, "rebate_rate": rebate_rate})


def evaluate_policy(theta: Theta, ds, draws, policy: FeebatePolicy,
                    baseline: FleetState | None = None, threads: int = 1) -> FeebateOutcome:
    """Outcome of a given (not necessarily neutral) policy."""
    base = baseline or baseline_fleet_state(theta, ds, draws, threads)
    state, tr = _evaluate(theta, ds, draws, policy, threads)
    return FeebateOutcome(policy, base, state, tr.fees, tr.rebates, 0,
                          (policy.fee_rate, policy.fee_rate), [tr])


def _pct_change(new: float, old: float) -> float:
    return 100.0 * (new / old - 1.0) if old != 0 else 0.0


def feebate_report(outcome: FeebateOutcome, ds):
    """Per-segment rows and a one-row summary, both as lists of dicts."""
    pol, base, st = outcome.policy, outcome.baseline, outcome.state
    nr = no_rebound_fuel_by_model(st, base)
    rows = []
    for seg in ds.segments:
        sel = ds.segment == seg
        m0 = math.fsum(base.mass[sel])
        f0 = math.fsum(base.fuel_by_model[sel])
        fe_seg = math.fsum(base.mass[sel] * ds.fuel_economy[sel]) / m0 if m0 > 0 else math.nan
        rows.append({
            "segment": seg,
            "baseline_share": math.fsum(base.shares[sel]),
            "mean_fuel_economy": fe_seg,
            "above_anchor": bool(fe_seg > pol.anchor),
            "share_change_pct": _pct_change(math.fsum(st.shares[sel]), math.fsum(base.shares[sel])),
            "fuel_change_pct": _pct_change(math.fsum(st.fuel_by_model[sel]), f0),
            "fuel_change_no_rebound_pct": _pct_change(math.fsum(nr[sel]), f0),
        })

    rebate_amt = pol.rebates(ds.fuel_economy)
    fee_amt = pol.fees(ds.fuel_economy)

    def pct_of_price(amount, mask):
        m = st.mass[mask]
        if not mask.any() or math.fsum(m) == 0:
            return 0.0
        return 100.0 * math.fsum(m * amount[mask] / ds.price[mask]) / math.fsum(m)

    usd = ds.config.usd_rate
    summary = {
        "anchor": pol.anchor,
        "rebate_rate": pol.rebate_rate,
        "fee_rate": pol.fee_rate,
        "rebate_rate_usd": pol.rebate_rate / usd if usd else math.nan,
        "fee_rate_usd": pol.fee_rate / usd if usd else math.nan,
        "rebate_pct_of_price": pct_of_price(rebate_amt, ds.fuel_economy > pol.anchor),
        "fee_pct_of_price": pct_of_price(fee_amt, ds.fuel_economy < pol.anchor),
        "baseline_fleet_fuel_economy": base.fleet_fuel_economy,
        "fleet_fuel_economy": st.fleet_fuel_economy,
        "fleet_fe_change_pct": outcome.fleet_fe_change_pct,
        "baseline_fuel": base.fuel,
        "fuel": st.fuel,
        "fuel_no_rebound": outcome.fuel_no_rebound,
        "fuel_savings_pct": outcome.savings_pct,
        "fuel_savings_no_rebound_pct": outcome.savings_no_rebound_pct,
        "rebound_pct": 100.0 * outcome.rebound,
        "total_fees": outcome.total_fees,
        "total_rebates": outcome.total_rebates,
        "net_revenue": outcome.net_revenue,
        "residual_share": outcome.residual_share,
        "tolerance": pol.tolerance,
        "iterations": outcome.iterations,
    }
    return rows, summary
