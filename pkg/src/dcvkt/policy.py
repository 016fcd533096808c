"""Fleet simulation, elasticities and rebound.

All arc elasticities are ``(X_shocked / X_base - 1) / shock``. Fuel use is
``sum_i w_i sum_j P_ij E[KM_ij] / FE_j`` in litres (up to the population
scale, which cancels in every ratio reported here).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .choice import Theta, simulate_choice_and_vkt
from .likelihood import BLOCK

LONG_RUN_CAVEAT = (
    "no outside good: the number of cars is fixed, so fleet-wide fuel price and "
    "income effects on fleet composition may be understated"
)


@dataclass(frozen=True, eq=False)
class FleetState:
    """Predicted fleet. ``mass`` and ``vkt_mass`` are weighted sums over households."""

    mass: np.ndarray
    vkt_mass: np.ndarray
    fuel_economy: np.ndarray

    @property
    def shares(self) -> np.ndarray:
        return self.mass / math.fsum(self.mass)

    @property
    def mean_vkt(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.mass > 0, self.vkt_mass / self.mass, 0.0)

    @property
    def fuel_by_model(self) -> np.ndarray:
        return self.vkt_mass / self.fuel_economy

    @property
    def fuel(self) -> float:
        return math.fsum(self.fuel_by_model)

    @property
    def vkt(self) -> float:
        return math.fsum(self.vkt_mass)

    @property
    def fleet_fuel_economy(self) -> float:
        """Share-weighted mean fuel economy of the fleet."""
        return math.fsum(self.shares * self.fuel_economy)


def _column_fsum(a: np.ndarray) -> np.ndarray:
    return np.array([math.fsum(a[:, j].tolist()) for j in range(a.shape[1])])


def baseline_fleet_state(theta: Theta, ds, draws, threads: int = 1) -> FleetState:
    """Weighted model masses and expected km from simulated choices.

    Per draw, choice probabilities and expected km share the same (beta,
    alpha); km is averaged jointly with the probability so the model-level
    mean km is that of the households predicted to buy the model.
    """
    N = ds.n_households
    if draws.n_households != N:
        raise ValueError("draws do not match the dataset")
    blocks = [slice(s, min(s + BLOCK, N)) for s in range(0, N, BLOCK)]

    def run(sl):
        P, EKM = simulate_choice_and_vkt(theta, ds, draws, sl)
        return P.mean(axis=1), (P * EKM).mean(axis=1)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(sl) for sl in blocks]
    Pbar = np.concatenate([p[0] for p in parts])
    KMbar = np.concatenate([p[1] for p in parts])
    w = ds.weight[:, None]
    return FleetState(
        mass=_column_fsum(w * Pbar),
        vkt_mass=_column_fsum(w * KMbar) * ds.config.km_scale,
        fuel_economy=ds.fuel_economy.copy(),
    )


def no_rebound_fuel_by_model(shocked: FleetState, base: FleetState) -> np.ndarray:
    """Fuel use with each model's mean km frozen at its baseline value."""
    return shocked.mass * base.mean_vkt / shocked.fuel_economy


def no_rebound_decomposition(shocked: FleetState, base: FleetState, models=None):
    """Split the frozen-km change in fuel use into a composition term and a
    fuel-economy term; the two add up to the total change exactly in real
    arithmetic. Returns ``(composition, efficiency, total)``."""
    sel = slice(None) if models is None else models
    vkt0 = base.mean_vkt[sel]
    m0, m1 = base.mass[sel], shocked.mass[sel]
    fe0, fe1 = base.fuel_economy[sel], shocked.fuel_economy[sel]
    composition = math.fsum((m1 - m0) * vkt0 / fe0)
    efficiency = math.fsum(m1 * vkt0 * (1.0 / fe1 - 1.0 / fe0))
    total = math.fsum(m1 * vkt0 / fe1) - math.fsum(m0 * vkt0 / fe0)
    return composition, efficiency, total


# ---------------------------------------------------------------------------
# short run


def short_run_fuel_price_elasticity(mu_alpha: float, sigma_alpha: float,
                                    mean_operating_cost: float) -> float:
    """Mean alpha times mean operating cost (VKT response only)."""
    return -math.exp(mu_alpha + 0.5 * sigma_alpha**2) * mean_operating_cost


def short_run_income_elasticity(mu_beta: float, sigma_beta: float, mean_income: float) -> float:
    return math.exp(mu_beta + 0.5 * sigma_beta**2) * mean_income


def sales_weights(ds) -> np.ndarray:
    """Model sales shares from the fleet table, or weighted sample shares if no sales."""
    if ds.sales.sum() > 0:
        return ds.sales / ds.sales.sum()
    m = np.bincount(ds.chosen, weights=ds.weight, minlength=ds.n_alternatives)
    return m / m.sum()


def short_run_vkt_elasticity(theta: Theta, ds, kind: str) -> float:
    if kind == "fuel_price":
        pbar = float(np.dot(sales_weights(ds), ds.opcost))
        return short_run_fuel_price_elasticity(theta.mu_alpha, theta.sigma_alpha, pbar)
    if kind == "income":
        ybar = float(np.dot(ds.weight, ds.income) / ds.weight.sum())
        return short_run_income_elasticity(theta.mu_beta, theta.sigma_beta, ybar)
    raise ValueError(f"unknown short-run elasticity kind {kind!r}")


# ---------------------------------------------------------------------------
# long run and segment level


@dataclass
class ElasticityReport:
    shock: float
    elasticity: float                     # fuel consumption, with rebound
    no_rebound: float | None = None       # fuel consumption, model-level km frozen
    vkt_elasticity: float | None = None
    share_elasticity: float | None = None
    rebound: float | None = None
    se: dict = field(default_factory=dict)
    notes: str = ""

    def to_row(self) -> dict:
        row = {
            "shock": self.shock,
            "fuel_elasticity": self.elasticity,
            "fuel_elasticity_no_rebound": self.no_rebound,
            "vkt_elasticity": self.vkt_elasticity,
            "share_elasticity": self.share_elasticity,
            "rebound": self.rebound,
        }
        for k, v in self.se.items():
            row["se_failed_draws" if k == "failed_draws" else f"{k}_se"] = v
        return row


def arc(new: float, old: float, shock: float) -> float:
    return (new / old - 1.0) / shock


def rebound(e_with: float, e_without: float) -> float:
    """Share of the frozen-km fuel response offset by the km response."""
    if e_without == 0:
        raise ValueError("rebound undefined when the no-rebound response is zero")
    return 1.0 - e_with / e_without


def shocked_dataset(ds, kind: str, shock: float, segment: str | None = None):
    if kind == "fuel_price":
        return ds.with_config(fuel_price=ds.config.fuel_price * (1 + shock))
    if kind == "income":
        return ds.with_income(ds.income * (1 + shock))
    sel = ds.segment == segment if segment is not None else np.ones(ds.n_alternatives, bool)
    factor = np.where(sel, 1 + shock, 1.0)
    if kind == "price":
        return ds.with_vehicles(retail_price=ds.price * factor)
    if kind == "fuel_economy":
        return ds.with_vehicles(fuel_economy=ds.fuel_economy * factor)
    raise ValueError(f"unknown shock {kind!r}")


def long_run_elasticity(theta: Theta, ds, draws, kind: str = "fuel_price",
                        shock: float = 0.05, baseline: FleetState | None = None,
                        threads: int = 1) -> ElasticityReport:
    """Fleet fuel-use elasticity when choices and driving both respond."""
    if kind not in ("fuel_price", "income"):
        raise ValueError("long-run shocks are fuel_price or income")
    if shock == 0:
        return ElasticityReport(0.0, 0.0, 0.0, 0.0, 0.0, notes="zero shock")
    base = baseline or baseline_fleet_state(theta, ds, draws, threads)
    new = baseline_fleet_state(theta, shocked_dataset(ds, kind, shock), draws, threads)
    e = arc(new.fuel, base.fuel, shock)
    nr = arc(math.fsum(no_rebound_fuel_by_model(new, base)), base.fuel, shock)
    return ElasticityReport(shock, e, nr, arc(new.vkt, base.vkt, shock), None,
                            notes=LONG_RUN_CAVEAT)


@dataclass
class SegmentElasticity(ElasticityReport):
    segment: str = ""
    attribute: str = ""
    market_share: float = 0.0
    mean_attribute: float = 0.0
    composition_term: float = 0.0
    efficiency_term: float = 0.0

    def to_row(self) -> dict:
        row = {"segment": self.segment, "attribute": self.attribute}
        row.update(super().to_row())
        row.update({"market_share": self.market_share, "mean_attribute": self.mean_attribute})
        return row


def segment_elasticity(theta: Theta, ds, draws, segment: str, attribute: str = "price",
                       shock: float = 0.05, baseline: FleetState | None = None,
                       threads: int = 1) -> SegmentElasticity:
    """Own-segment elasticities for a price or fuel-economy shock to every model in it."""
    if attribute not in ("price", "fuel_economy"):
        raise ValueError("attribute must be 'price' or 'fuel_economy'")
    sel = ds.segment == segment
    if not sel.any():
        raise ValueError(f"unknown segment {segment!r}")
    if shock <= 0:
        raise ValueError("shock must be > 0")
    base = baseline or baseline_fleet_state(theta, ds, draws, threads)
    new = baseline_fleet_state(theta, shocked_dataset(ds, attribute, shock, segment),
                               draws, threads)
    f0 = math.fsum(base.fuel_by_model[sel])
    f1 = math.fsum(new.fuel_by_model[sel])
    f1_nr = math.fsum(no_rebound_fuel_by_model(new, base)[sel])
    comp, eff, _ = no_rebound_decomposition(new, base, sel)
    e_with = arc(f1, f0, shock)
    e_without = arc(f1_nr, f0, shock)
    attr = ds.price if attribute == "price" else ds.fuel_economy
    share0 = math.fsum(base.shares[sel])
    return SegmentElasticity(
        shock=shock,
        elasticity=e_with,
        no_rebound=e_without,
        vkt_elasticity=arc(math.fsum(new.vkt_mass[sel]), math.fsum(base.vkt_mass[sel]), shock),
        share_elasticity=arc(math.fsum(new.mass[sel]), math.fsum(base.mass[sel]), shock),
        rebound=rebound(e_with, e_without) if e_without != 0 else None,
        segment=segment,
        attribute=attribute,
        market_share=share0,
        mean_attribute=float(np.dot(base.shares[sel], attr[sel]) / share0) if share0 > 0 else math.nan,
        composition_term=comp,
        efficiency_term=eff,
    )


def segment_table(theta: Theta, ds, draws, attribute: str = "price", shock: float = 0.05,
                  baseline: FleetState | None = None, threads: int = 1):
    """All segments plus a share-weighted average row (keyed ``"Sales-weighted average"``)."""
    base = baseline or baseline_fleet_state(theta, ds, draws, threads)
    rows = [segment_elasticity(theta, ds, draws, s, attribute, shock, base, threads)
            for s in ds.segments]
    w = np.array([r.market_share for r in rows])
    w = w / w.sum()

    def avg(attr):
        return float(np.dot(w, [getattr(r, attr) for r in rows]))

    e_with, e_without = avg("elasticity"), avg("no_rebound")
    mean_row = SegmentElasticity(
        shock=shock, elasticity=e_with, no_rebound=e_without,
        vkt_elasticity=avg("vkt_elasticity"), share_elasticity=avg("share_elasticity"),
        rebound=rebound(e_with, e_without) if e_without != 0 else None,
        segment="Sales-weighted average", attribute=attribute, market_share=1.0,
        mean_attribute=math.nan,
    )
    return rows, mean_row


def standard_errors(result, functional, n_draws: int = 100, seed: int = 0) -> dict:
    """Draw-based standard errors of a dict-valued ``functional(theta)``.

    ``result`` is an EstimationResult; parameter draws come from its
    covariance. Keys whose value is None are skipped.
    """
    from .estimation import propagate_uncertainty

    point = functional(result.theta_hat)
    keys = [k for k, v in point.items() if v is not None and np.isfinite(v)]

    def vec(theta):
        d = functional(theta)
        return np.array([d[k] for k in keys], dtype=float)

    _, se, failed = propagate_uncertainty(result.theta_hat, result.covariance, vec,
                                          n_draws=n_draws, seed=seed)
    out = dict(zip(keys, np.atleast_1d(se).tolist()))
    out["failed_draws"] = failed
    return out
