"""Observed data, derived car costs, sampling weights and CSV ingestion.

Two canonical CSV files describe a market:

``vehicles.csv``
    model_id, make, segment, retail_price, fuel_economy, engine_displacement,
    volume, kerb_weight, sales_count

``households.csv``
    household_id, income, age, female, n_cars, family_size, chosen_model_id,
    annual_km[, weight]

plus a TOML market config (see ``configs/``). Everything downstream works on the
:class:`PreparedDataset` returned by :func:`load_dataset`.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

VEHICLE_COLUMNS = [
    "model_id", "make", "segment", "retail_price", "fuel_economy",
    "engine_displacement", "volume", "kerb_weight", "sales_count",
]
HOUSEHOLD_COLUMNS = [
    "household_id", "income", "age", "female", "n_cars", "family_size",
    "chosen_model_id", "annual_km",
]
OPTIONAL_VEHICLE_COLUMNS = ("engine_displacement", "volume", "kerb_weight")
HOUSEHOLD_COVARIATES = ("income", "age", "female", "n_cars", "family_size")
VEHICLE_COVARIATES = (
    "retail_price", "fuel_economy", "engine_displacement", "volume", "kerb_weight",
)


class DataError(ValueError):
    """Invalid input data. ``problems`` holds one message per offending item."""

    def __init__(self, problems: str | Sequence[str]):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class Vehicle:
    model_id: str
    make: str
    segment: str
    retail_price: float
    fuel_economy: float
    engine_displacement: float = math.nan
    volume: float = math.nan
    kerb_weight: float = math.nan
    sales_count: float = 0.0

    def __post_init__(self):
        if not self.fuel_economy > 0:
            raise DataError(f"vehicle {self.model_id}: fuel_economy must be > 0")
        if not self.retail_price > 0:
            raise DataError(f"vehicle {self.model_id}: retail_price must be > 0")
        if not self.sales_count >= 0:
            raise DataError(f"vehicle {self.model_id}: sales_count must be >= 0")


@dataclass(frozen=True)
class Household:
    household_id: str
    income: float
    age: float
    female: bool
    n_cars: float
    family_size: float
    chosen_model_id: str
    annual_km: float
    weight: float = 1.0

    def __post_init__(self):
        if not self.income > 0:
            raise DataError(f"household {self.household_id}: income must be > 0")
        if not self.annual_km > 0:
            raise DataError(f"household {self.household_id}: annual_km must be > 0")
        if not self.weight > 0:
            raise DataError(f"household {self.household_id}: weight must be > 0")


@dataclass(frozen=True)
class MarketConfig:
    """Market-level constants and the model formula.

    ``terms`` lists the covariates of the fixed-coefficient index. A term is
    ``"intercept"``, a column name, or a product ``"a*b"``. Make and segment
    constants are appended automatically with one reference level omitted.
    ``km_scale`` divides observed annual km before taking logs (1000 means the
    model works in thousands of km). ``usd_rate`` is market currency units per
    USD and is only used to convert USD-denominated feebate rates.
    """

    fuel_price: float
    interest_rate: float
    car_life_years: float
    covariate_scaling: Mapping[str, float] = field(default_factory=dict)
    currency_unit_label: str = ""
    terms: tuple[str, ...] = ("intercept",)
    make_constants: bool = True
    segment_constants: bool = True
    reference_make: str | None = None
    reference_segment: str | None = None
    km_scale: float = 1000.0
    usd_rate: float | None = None

    def __post_init__(self):
        problems = []
        if not self.fuel_price > 0:
            problems.append("fuel_price must be > 0")
        if not 0 < self.interest_rate < 1:
            problems.append("interest_rate must lie in (0, 1)")
        if not self.car_life_years > 0:
            problems.append("car_life_years must be > 0")
        if not self.km_scale > 0:
            problems.append("km_scale must be > 0")
        for name, div in self.covariate_scaling.items():
            if not div > 0:
                problems.append(f"scaling divisor for {name} must be > 0")
        if problems:
            raise DataError(problems)
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "covariate_scaling", dict(self.covariate_scaling))

    def usd_to_market(self, amount_usd: float) -> float:
        if self.usd_rate is None:
            raise DataError("usd_rate is not configured for this market")
        return amount_usd * self.usd_rate

    def to_dict(self) -> dict[str, Any]:
        return {
            "fuel_price": self.fuel_price,
            "interest_rate": self.interest_rate,
            "car_life_years": self.car_life_years,
            "covariate_scaling": dict(self.covariate_scaling),
            "currency_unit_label": self.currency_unit_label,
            "terms": list(self.terms),
            "make_constants": self.make_constants,
            "segment_constants": self.segment_constants,
            "reference_make": self.reference_make,
            "reference_segment": self.reference_segment,
            "km_scale": self.km_scale,
            "usd_rate": self.usd_rate,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MarketConfig":
        d = dict(d)
        model = d.pop("model", {}) or {}
        scal = d.pop("scalings", None)
        if scal is not None:
            d["covariate_scaling"] = scal
        for key in ("terms", "make_constants", "segment_constants",
                    "reference_make", "reference_segment"):
            if key in model:
                d[key] = model[key]
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise DataError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


def load_config(path: str | Path) -> MarketConfig:
    with open(path, "rb") as fh:
        return MarketConfig.from_dict(tomllib.load(fh))


# ---------------------------------------------------------------------------
# derived quantities


def annualize_price(retail_price, interest_rate, life):
    """Capital-recovery annuity ``P * i / (1 - (1 + i)**-L)``.

    ``life=inf`` gives the perpetuity ``P * i``. Works elementwise on arrays.
    """
    p = np.asarray(retail_price, dtype=float)
    i = np.asarray(interest_rate, dtype=float)
    life = np.asarray(life, dtype=float)
    if np.any(~(p > 0)) or np.any(~(i > 0)) or np.any(~(life > 0)):
        raise DataError("annualize_price needs positive price, rate and life")
    out = p * i / -np.expm1(-life * np.log1p(i))
    return float(out) if out.ndim == 0 else out


def operating_cost(fuel_price, fuel_economy):
    """Fuel cost per km."""
    fp = np.asarray(fuel_price, dtype=float)
    fe = np.asarray(fuel_economy, dtype=float)
    if np.any(~(fp > 0)) or np.any(~(fe > 0)):
        raise DataError("operating_cost needs positive fuel price and fuel economy")
    out = fp / fe
    return float(out) if out.ndim == 0 else out


def compute_choice_based_weights(
    sample_choices: Mapping[str, float],
    sales: Mapping[str, float],
) -> dict[str, float]:
    """Per-model weight that makes weighted sample shares equal sales shares.

    Sales shares are taken over the models that appear in the sample, so the
    weights (one per household choosing the model) sum to the sample size.
    """
    missing = [m for m, n in sample_choices.items() if n > 0 and not sales.get(m, 0) > 0]
    if missing:
        raise DataError([f"model {m} sampled but has no sales" for m in missing])
    models = [m for m, n in sample_choices.items() if n > 0]
    n_total = math.fsum(sample_choices[m] for m in models)
    s_total = math.fsum(sales[m] for m in models)
    return {
        m: (sales[m] / s_total) / (sample_choices[m] / n_total) for m in models
    }


# ---------------------------------------------------------------------------
# prepared dataset


@dataclass(frozen=True)
class PreparedDataset:
    """Validated market data ready for likelihood evaluation.

    The fixed-coefficient index is ``sum_k gamma_k * H[i, k] * V[j, k]``: every
    term factors into a household part and a vehicle part (either may be 1).
    """

    config: MarketConfig
    vehicles: pd.DataFrame
    households: pd.DataFrame
    term_names: tuple[str, ...]
    H: np.ndarray
    V: np.ndarray
    price: np.ndarray
    fuel_economy: np.ndarray
    rent: np.ndarray
    opcost: np.ndarray
    sales: np.ndarray
    segment: np.ndarray
    income: np.ndarray
    log_km: np.ndarray
    chosen: np.ndarray
    weight: np.ndarray
    load_report: dict = field(default_factory=dict)

    @property
    def n_households(self) -> int:
        return len(self.income)

    @property
    def n_alternatives(self) -> int:
        return len(self.price)

    @property
    def n_terms(self) -> int:
        return len(self.term_names)

    @property
    def model_ids(self) -> list[str]:
        return list(self.vehicles["model_id"])

    @property
    def segments(self) -> list[str]:
        return sorted(set(self.segment))

    def index_matrix(self, gamma: np.ndarray) -> np.ndarray:
        """``gamma . X_ij`` as an (N, J) array."""
        g = np.zeros((self.n_households, self.n_alternatives))
        for k in range(self.n_terms):
            g += np.multiply.outer(self.H[:, k] * gamma[k], self.V[:, k])
        return g

    def subset(self, idx) -> "PreparedDataset":
        """Dataset restricted to the given household rows (same fleet)."""
        idx = np.asarray(idx)
        return replace(
            self,
            households=self.households.iloc[idx].reset_index(drop=True),
            H=self.H[idx], income=self.income[idx], log_km=self.log_km[idx],
            chosen=self.chosen[idx], weight=self.weight[idx],
        )

    def with_weights(self, weight) -> "PreparedDataset":
        weight = np.asarray(weight, dtype=float)
        hh = self.households.copy()
        hh["weight"] = weight
        return replace(self, households=hh, weight=weight)

    def with_vehicles(self, retail_price=None, fuel_economy=None) -> "PreparedDataset":
        """Copy with new vehicle prices and/or fuel economies, costs re-derived."""
        veh = self.vehicles.copy()
        if retail_price is not None:
            veh["retail_price"] = np.asarray(retail_price, dtype=float)
        if fuel_economy is not None:
            veh["fuel_economy"] = np.asarray(fuel_economy, dtype=float)
        return _prepare(veh, self.households, self.config, self.load_report)

    def with_income(self, income) -> "PreparedDataset":
        hh = self.households.copy()
        hh["income"] = np.asarray(income, dtype=float)
        return _prepare(self.vehicles, hh, self.config, self.load_report)

    def with_config(self, **changes) -> "PreparedDataset":
        return _prepare(self.vehicles, self.households, replace(self.config, **changes),
                        self.load_report)


def _scaled(table: pd.DataFrame, name: str, scaling: Mapping[str, float]) -> np.ndarray:
    if name not in table.columns:
        raise DataError(f"model term references unknown column {name!r}")
    col = table[name].to_numpy(dtype=float)
    if np.any(np.isnan(col)):
        raise DataError(f"column {name!r} is referenced by the model formula but has missing values")
    return col / scaling.get(name, 1.0)


def _term_parts(term, vehicles, households, scaling):
    n, j = len(households), len(vehicles)
    h, v = np.ones(n), np.ones(j)
    if term == "intercept":
        return h, v
    for factor in term.split("*"):
        factor = factor.strip()
        if factor in HOUSEHOLD_COVARIATES:
            h = h * _scaled(households, factor, scaling)
        elif factor in VEHICLE_COVARIATES:
            v = v * _scaled(vehicles, factor, scaling)
        else:
            raise DataError(f"unknown covariate {factor!r} in term {term!r}")
    return h, v


def _dummies(labels: np.ndarray, prefix: str, reference: str | None):
    levels = sorted(set(labels))
    if reference is None:
        reference = levels[0]
    if reference not in levels:
        raise DataError(f"reference {prefix} {reference!r} not present in fleet")
    names, cols = [], []
    for lev in levels:
        if lev == reference:
            continue
        names.append(f"{prefix}[{lev}]")
        cols.append((labels == lev).astype(float))
    return names, cols


def _prepare(vehicles: pd.DataFrame, households: pd.DataFrame, config: MarketConfig,
             load_report: dict | None = None) -> PreparedDataset:
    vehicles = vehicles.reset_index(drop=True)
    households = households.reset_index(drop=True)
    price = vehicles["retail_price"].to_numpy(dtype=float)
    fe = vehicles["fuel_economy"].to_numpy(dtype=float)
    rent = annualize_price(price, config.interest_rate, config.car_life_years)
    opcost = operating_cost(config.fuel_price, fe)
    rent = np.atleast_1d(rent)
    opcost = np.atleast_1d(opcost)

    names, hcols, vcols = [], [], []
    for term in config.terms:
        h, v = _term_parts(term, vehicles, households, config.covariate_scaling)
        names.append(term)
        hcols.append(h)
        vcols.append(v)
    n = len(households)
    for flag, col, prefix, ref in (
        (config.make_constants, "make", "make", config.reference_make),
        (config.segment_constants, "segment", "segment", config.reference_segment),
    ):
        if not flag:
            continue
        dn, dc = _dummies(vehicles[col].to_numpy(dtype=object), prefix, ref)
        names += dn
        vcols += dc
        hcols += [np.ones(n)] * len(dc)

    ids = {m: k for k, m in enumerate(vehicles["model_id"])}
    chosen = np.array([ids[m] for m in households["chosen_model_id"]], dtype=np.intp)
    km = households["annual_km"].to_numpy(dtype=float) / config.km_scale

    return PreparedDataset(
        config=config,
        vehicles=vehicles,
        households=households,
        term_names=tuple(names),
        H=np.column_stack(hcols) if hcols else np.zeros((n, 0)),
        V=np.column_stack(vcols) if vcols else np.zeros((len(vehicles), 0)),
        price=price,
        fuel_economy=fe,
        rent=rent,
        opcost=opcost,
        sales=vehicles["sales_count"].to_numpy(dtype=float),
        segment=vehicles["segment"].to_numpy(dtype=object),
        income=households["income"].to_numpy(dtype=float),
        log_km=np.log(km),
        chosen=chosen,
        weight=households["weight"].to_numpy(dtype=float),
        load_report=dict(load_report or {}),
    )


def _validate_vehicles(veh: pd.DataFrame) -> list[str]:
    problems = []
    missing = [c for c in VEHICLE_COLUMNS if c not in veh.columns
               and c not in OPTIONAL_VEHICLE_COLUMNS]
    if missing:
        return [f"vehicles: missing required column(s) {', '.join(missing)}"]
    dup = veh["model_id"][veh["model_id"].duplicated()]
    for m in dup:
        problems.append(f"vehicles: duplicate model_id {m}")
    for row, rec in enumerate(veh.itertuples(index=False), start=2):
        if not rec.fuel_economy > 0:
            problems.append(f"vehicles line {row}: fuel_economy must be > 0")
        if not rec.retail_price > 0:
            problems.append(f"vehicles line {row}: retail_price must be > 0")
        if not rec.sales_count >= 0:
            problems.append(f"vehicles line {row}: sales_count must be >= 0")
    return problems


def _household_problems(hh: pd.DataFrame, model_ids: set) -> dict[int, list[str]]:
    bad: dict[int, list[str]] = {}
    for pos, rec in enumerate(hh.itertuples(index=False)):
        msgs = []
        line = pos + 2
        if rec.chosen_model_id not in model_ids:
            msgs.append(f"households line {line}: unknown chosen_model_id {rec.chosen_model_id}")
        if not rec.annual_km > 0:
            msgs.append(f"households line {line}: annual_km must be > 0")
        if not rec.income > 0:
            msgs.append(f"households line {line}: income must be > 0")
        if "weight" in hh.columns and not (pd.isna(rec.weight) or rec.weight > 0):
            msgs.append(f"households line {line}: weight must be > 0")
        if msgs:
            bad[pos] = msgs
    return bad


def _read_csv(path: str | Path, id_cols: Sequence[str]) -> pd.DataFrame:
    return pd.read_csv(path, dtype={c: str for c in id_cols}, float_precision="round_trip",
                       encoding="utf-8")


def prepare_tables(vehicles: pd.DataFrame, households: pd.DataFrame,
                   config: MarketConfig, strict: bool = True) -> PreparedDataset:
    """Validate in-memory tables, fill weights if absent and build the dataset."""
    vehicles = vehicles.copy()
    households = households.copy()
    for c in OPTIONAL_VEHICLE_COLUMNS:
        if c not in vehicles.columns:
            vehicles[c] = np.nan
    problems = _validate_vehicles(vehicles)
    missing = [c for c in HOUSEHOLD_COLUMNS if c not in households.columns]
    if missing:
        problems.append(f"households: missing required column(s) {', '.join(missing)}")
    if problems:
        raise DataError(problems)
    vehicles["model_id"] = vehicles["model_id"].astype(str)
    households["household_id"] = households["household_id"].astype(str)
    households["chosen_model_id"] = households["chosen_model_id"].astype(str)

    bad = _household_problems(households, set(vehicles["model_id"]))
    rejected = [m for msgs in bad.values() for m in msgs]
    if bad and strict:
        raise DataError(rejected)
    if bad:
        households = households.drop(index=households.index[list(bad)])
    if len(households) == 0:
        raise DataError("no valid household rows")

    if "weight" not in households.columns or households["weight"].isna().all():
        counts = households["chosen_model_id"].value_counts().to_dict()
        sales = dict(zip(vehicles["model_id"], vehicles["sales_count"].astype(float)))
        w = compute_choice_based_weights(counts, sales)
        households["weight"] = households["chosen_model_id"].map(w).astype(float)
        weight_source = "choice-based"
    elif households["weight"].isna().any():
        raise DataError("households: weight column is partially missing")
    else:
        weight_source = "file"

    report = {
        "n_vehicles": len(vehicles),
        "n_households": len(households),
        "rejected_rows": rejected,
        "weight_source": weight_source,
    }
    cols = VEHICLE_COLUMNS + [c for c in vehicles.columns if c not in VEHICLE_COLUMNS]
    hcols = HOUSEHOLD_COLUMNS + ["weight"]
    return _prepare(vehicles[cols], households[hcols], config, report)


def load_dataset(vehicle_file: str | Path, household_file: str | Path,
                 config: MarketConfig | str | Path, strict: bool = True) -> PreparedDataset:
    if not isinstance(config, MarketConfig):
        config = load_config(config)
    veh = _read_csv(vehicle_file, ["model_id", "make", "segment"])
    hh = _read_csv(household_file, ["household_id", "chosen_model_id"])
    return prepare_tables(veh, hh, config, strict=strict)


def write_dataset(ds: PreparedDataset, directory: str | Path) -> tuple[Path, Path]:
    """Write the raw tables (weights included) in the canonical CSV schema."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vpath, hpath = directory / "vehicles.csv", directory / "households.csv"
    ds.vehicles[VEHICLE_COLUMNS].to_csv(vpath, index=False)
    ds.households[HOUSEHOLD_COLUMNS + ["weight"]].to_csv(hpath, index=False)
    return vpath, hpath
