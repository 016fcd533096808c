"""Synthetic markets with known parameters, plus brute-force reference calculations.

The generator simulates the structural model directly (Gumbel noise with scale
``scale_mu``, argmax choice, Roy's-identity km). The oracles below are
deliberately written without the vectorised machinery of :mod:`likelihood`
and :mod:`policy` so they can be used to check it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from numpy.polynomial.hermite_e import hermegauss

from .choice import Theta
from .data import MarketConfig, prepare_tables

GEN_BLOCK = 1024

SYNTH_TERMS = ("intercept", "age", "female", "n_cars", "family_size",
               "family_size*engine_displacement")


def default_config() -> MarketConfig:
    """Market settings used by the synthetic populations (CNY-like units, 10^4 km)."""
    return MarketConfig(
        fuel_price=6.0, interest_rate=0.08, car_life_years=14.5,
        covariate_scaling={"age": 100.0, "family_size": 10.0},
        currency_unit_label="10^5 CNY", terms=SYNTH_TERMS,
        km_scale=10_000.0, usd_rate=6.757 / 1e5,
    )


def default_truth(n_makes: int = 3, n_segments: int = 3) -> Theta:
    base = {"intercept": 0.1, "age": -0.3, "female": -0.1, "n_cars": 0.1,
            "family_size": 0.3, "family_size*engine_displacement": 0.1}
    names = list(SYNTH_TERMS)
    gamma = [base[t] for t in names]
    for k in range(1, n_makes):
        names.append(f"make[M{k}]")
        gamma.append(0.15 * (-1) ** k * k)
    for k in range(1, n_segments):
        names.append(f"segment[S{k}]")
        gamma.append(0.2 * (-1) ** (k + 1) * k)
    return Theta(np.array(gamma), mu_beta=-1.5, sigma_beta=0.4, mu_alpha=-1.6,
                 sigma_alpha=0.5, sigma_eta=0.4, scale_mu=0.25, names=tuple(names))


@dataclass
class SyntheticSpec:
    true_theta: Theta
    N: int
    J: int
    seed: int = 0
    config: MarketConfig = field(default_factory=default_config)
    n_makes: int = 3
    n_segments: int = 3
    income_log_mean: float = math.log(1.8)
    income_log_sd: float = 0.5
    age_range: tuple[int, int] = (22, 65)
    female_share: float = 0.4
    n_cars_range: tuple[int, int] = (1, 3)
    family_size_range: tuple[int, int] = (1, 6)
    price_range: tuple[float, float] = (0.5, 4.0)
    fe_range: tuple[float, float] = (9.0, 16.0)

    def __post_init__(self):
        if self.N < 1 or self.J < 2:
            raise ValueError("need N >= 1 and J >= 2")


def make_fleet(spec: SyntheticSpec) -> pd.DataFrame:
    """Deterministic fleet: fuel economy evenly spread, price and engine size falling with it."""
    J = spec.J
    rng = np.random.default_rng([spec.seed, 0])
    lo, hi = spec.fe_range
    fe = np.linspace(hi, lo, J) * np.exp(rng.normal(0.0, 0.03, J))
    frac = (hi - fe) / (hi - lo)
    plo, phi_ = spec.price_range
    price = plo * (phi_ / plo) ** np.clip(frac + rng.normal(0, 0.1, J), 0, 1)
    disp = 1.0 + 1.8 * frac + rng.normal(0, 0.05, J)
    return pd.DataFrame({
        "model_id": [f"V{j:03d}" for j in range(J)],
        "make": [f"M{j % spec.n_makes}" for j in range(J)],
        "segment": [f"S{(j * spec.n_segments) // J}" for j in range(J)],
        "retail_price": np.round(price, 4),
        "fuel_economy": np.round(fe, 3),
        "engine_displacement": np.round(disp, 3),
        "volume": np.round(1.0 + 0.6 * frac, 3),
        "kerb_weight": np.round(1.0 + 0.9 * frac, 3),
        "sales_count": np.zeros(J),
    })


def _households_block(spec: SyntheticSpec, start: int, n: int, rng) -> pd.DataFrame:
    a0, a1 = spec.age_range
    c0, c1 = spec.n_cars_range
    f0, f1 = spec.family_size_range
    return pd.DataFrame({
        "household_id": [f"H{start + i:06d}" for i in range(n)],
        "income": np.exp(rng.normal(spec.income_log_mean, spec.income_log_sd, n)),
        "age": rng.integers(a0, a1 + 1, n).astype(float),
        "female": (rng.random(n) < spec.female_share).astype(int),
        "n_cars": rng.integers(c0, c1 + 1, n).astype(float),
        "family_size": rng.integers(f0, f1 + 1, n).astype(float),
    })


def generate(spec: SyntheticSpec):
    """Simulate a market. Returns ``(vehicles, households, truth)``.

    Households are generated in fixed blocks, each with its own seeded
    stream, so output does not depend on how the work is split.
    """
    theta = spec.true_theta
    cfg = spec.config
    fleet = make_fleet(spec)
    J = spec.J
    blocks = []
    seeds = np.random.SeedSequence([spec.seed, 1]).spawn((spec.N + GEN_BLOCK - 1) // GEN_BLOCK)
    for b, ss in enumerate(seeds):
        start = b * GEN_BLOCK
        n = min(GEN_BLOCK, spec.N - start)
        rng = np.random.default_rng(ss)
        hh = _households_block(spec, start, n, rng)
        z = rng.standard_normal((n, 3))
        gumbel = rng.gumbel(0.0, theta.scale_mu, (n, J))
        hh["_z1"], hh["_z2"], hh["_z3"] = z[:, 0], z[:, 1], z[:, 2]
        blocks.append((hh, gumbel))
    hh = pd.concat([b[0] for b in blocks], ignore_index=True)
    gumbel = np.concatenate([b[1] for b in blocks])

    # placeholder outcome columns so the design can be built
    tmp = hh.assign(chosen_model_id=fleet["model_id"].iloc[0], annual_km=1.0, weight=1.0)
    ds = prepare_tables(fleet, tmp, cfg)
    if tuple(ds.term_names) != tuple(theta.names):
        raise ValueError(f"truth names {theta.names} do not match design {ds.term_names}")
    gx = ds.index_matrix(theta.gamma)
    beta = np.exp(theta.mu_beta + theta.sigma_beta * hh["_z1"].to_numpy())[:, None]
    alpha = -np.exp(theta.mu_alpha + theta.sigma_alpha * hh["_z2"].to_numpy())[:, None]
    eta = theta.sigma_eta * hh["_z3"].to_numpy()[:, None]
    ymr = ds.income[:, None] - ds.rent[None, :]
    p = ds.opcost[None, :]
    u = -np.exp(-beta * ymr - gx - eta) / beta - np.exp(alpha * p) / alpha
    choice = np.argmax(u + gumbel, axis=1)
    ar = np.arange(len(choice))
    log_km = beta[:, 0] * ymr[ar, choice] + gx[ar, choice] + alpha[:, 0] * p[0, choice] + eta[:, 0]

    households = hh.drop(columns=["_z1", "_z2", "_z3"]).assign(
        chosen_model_id=fleet["model_id"].to_numpy()[choice],
        annual_km=cfg.km_scale * np.exp(log_km),
    )
    counts = np.bincount(choice, minlength=J).astype(float)
    vehicles = fleet.assign(sales_count=counts)
    truth = {
        "theta": theta.to_dict(),
        "free": theta.to_free().tolist(),
        "seed": spec.seed, "N": spec.N, "J": spec.J,
        "config": cfg.to_dict(),
    }
    return vehicles, households, truth


def write_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vehicles, households, truth = generate(spec)
    paths = {"vehicles": out / "vehicles.csv", "households": out / "households.csv",
             "truth": out / "truth.json", "config": out / "market.toml"}
    vehicles.to_csv(paths["vehicles"], index=False)
    households.to_csv(paths["households"], index=False)
    paths["truth"].write_text(json.dumps(truth, indent=2))
    paths["config"].write_text(config_to_toml(spec.config))
    return paths


def config_to_toml(cfg: MarketConfig) -> str:
    lines = [
        f"fuel_price = {cfg.fuel_price!r}",
        f"interest_rate = {cfg.interest_rate!r}",
        f"car_life_years = {cfg.car_life_years!r}",
        f"currency_unit_label = {json.dumps(cfg.currency_unit_label)}",
        f"km_scale = {cfg.km_scale!r}",
    ]
    if cfg.usd_rate is not None:
        lines.append(f"usd_rate = {cfg.usd_rate!r}")
    lines += ["", "[scalings]"]
    lines += [f"{json.dumps(k)} = {v!r}" for k, v in cfg.covariate_scaling.items()]
    lines += ["", "[model]", f"terms = {json.dumps(list(cfg.terms))}",
              f"make_constants = {str(cfg.make_constants).lower()}",
              f"segment_constants = {str(cfg.segment_constants).lower()}"]
    for key in ("reference_make", "reference_segment"):
        if getattr(cfg, key) is not None:
            lines.append(f"{key} = {json.dumps(getattr(cfg, key))}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# oracles


def _household_index(ds, i, gamma):
    return np.array([sum(gamma[k] * ds.H[i, k] * ds.V[j, k] for k in range(ds.n_terms))
                     for j in range(ds.n_alternatives)])


def _log_joint_grid(ds, i, gx, beta, alpha, sigma_eta, scale_mu):
    """ln[P_chosen * phi(eta_hat)] on a grid of (beta, alpha) values."""
    c = ds.chosen[i]
    y = ds.income[i]
    m_c = beta * (y - ds.rent[c]) + gx[c] + alpha * ds.opcost[c]
    eta = ds.log_km[i] - m_c
    # extreme nodes can overflow to -inf utility; they carry negligible weight
    with np.errstate(over="ignore"):
        util = np.stack([(-np.exp(-beta * (y - ds.rent[j]) - gx[j] - eta) / beta
                          - np.exp(alpha * ds.opcost[j]) / alpha) / scale_mu
                         for j in range(ds.n_alternatives)])
    top = util.max(axis=0)
    log_den = top + np.log(np.exp(util - top).sum(axis=0))
    log_phi = -0.5 * math.log(2 * math.pi) - math.log(sigma_eta) - 0.5 * (eta / sigma_eta) ** 2
    return util[c] - log_den + log_phi


def quadrature_loglik(theta: Theta, ds, nodes: int = 201) -> float:
    """Weighted loglikelihood by tensor Gauss-Hermite quadrature over the
    underlying normals of beta and alpha (eta by the residual construction).

    The integrand is sharply peaked in the beta direction when sigma_eta is
    small, so the default uses many nodes.
    """
    if ds.n_alternatives > 6 or ds.n_households > 100:
        raise ValueError("quadrature oracle limited to J <= 6 and N <= 100")
    if not 31 <= nodes <= 255:
        raise ValueError("nodes must lie in [31, 255] (Hermite weights underflow beyond)")
    x, w = hermegauss(nodes)
    w = w / math.sqrt(2 * math.pi)
    one = (np.array([0.0]), np.array([1.0]))
    xb, wb = one if theta.sigma_beta == 0 else (x, w)
    xa, wa = one if theta.sigma_alpha == 0 else (x, w)
    beta = np.exp(theta.mu_beta + theta.sigma_beta * xb)[:, None]
    alpha = -np.exp(theta.mu_alpha + theta.sigma_alpha * xa)[None, :]
    q = wb[:, None] * wa[None, :]
    total = []
    for i in range(ds.n_households):
        gx = _household_index(ds, i, theta.gamma)
        logs = _log_joint_grid(ds, i, gx, beta, alpha, theta.sigma_eta, theta.scale_mu)
        top = logs.max()
        total.append(ds.weight[i] * (top + math.log(float(np.sum(q * np.exp(logs - top))))))
    return math.fsum(total)


def closed_form_logit_oracle(theta: Theta, ds):
    """Exact shares, expected km per model and fuel use when nothing is random.

    Returns ``(shares, fuel, vkt_by_model)``; fuel in litres (km unscaled),
    ``vkt_by_model`` the share-weighted mean km of each model.
    """
    if theta.sigma_beta != 0 or theta.sigma_alpha != 0 or theta.sigma_eta != 0:
        raise ValueError("closed-form oracle needs sigma_beta = sigma_alpha = sigma_eta = 0")
    beta = math.exp(theta.mu_beta)
    alpha = -math.exp(theta.mu_alpha)
    J = ds.n_alternatives
    mass = [0.0] * J
    km_mass = [0.0] * J
    for i in range(ds.n_households):
        gx = _household_index(ds, i, theta.gamma)
        y = ds.income[i]
        util = [(-math.exp(-beta * (y - ds.rent[j]) - gx[j]) / beta
                 - math.exp(alpha * ds.opcost[j]) / alpha) / theta.scale_mu for j in range(J)]
        top = max(util)
        ex = [math.exp(x - top) for x in util]
        den = sum(ex)
        for j in range(J):
            pj = ex[j] / den
            km = math.exp(beta * (y - ds.rent[j]) + gx[j] + alpha * ds.opcost[j])
            mass[j] += ds.weight[i] * pj
            km_mass[j] += ds.weight[i] * pj * km * ds.config.km_scale
    total = sum(mass)
    shares = np.array(mass) / total
    fuel = sum(km_mass[j] / ds.fuel_economy[j] for j in range(J))
    vkt = np.array([km_mass[j] / mass[j] for j in range(J)])
    return shares, fuel, vkt
